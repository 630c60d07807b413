""" Test suite shared objects and setup """
import os

import pytest

from groundgenie.geometry import Box, Extent
from groundgenie.io_formats import ManifestRecord

DATA_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data")

CAR_BOXES = [[234, 186, 370, 283], [568, 214, 622, 283], [743, 186, 822, 300],
             [110, 199, 128, 240], [134, 200, 152, 240], [158, 200, 176, 240],
             [182, 200, 200, 240], [206, 200, 224, 240]]


def _data(name):
    return os.path.join(DATA_DIR, name)


@pytest.fixture
def data_path():
    return DATA_DIR


@pytest.fixture
def gt_path():
    return _data("gt_small.json")


@pytest.fixture
def unscored_preds_path():
    return _data("preds_unscored.jsonl")


@pytest.fixture
def scored_preds_path():
    return _data("preds_scored.jsonl")


@pytest.fixture
def mixed_preds_path():
    return _data("preds_mixed.jsonl")


@pytest.fixture
def car_transcript_path():
    return _data("car_transcript.txt")


@pytest.fixture
def clean_transcript_path():
    return _data("clean_transcript.txt")


@pytest.fixture
def manifest_path():
    return _data("manifest.jsonl")


@pytest.fixture
def boxes_path():
    return _data("boxes.txt")


@pytest.fixture
def answer_path():
    return _data("answer.txt")


@pytest.fixture
def settings_path():
    return _data("settings.yaml")


@pytest.fixture
def sim_spec_path():
    return _data("sim_spec.yaml")


@pytest.fixture
def car_boxes():
    return [Box(*b) for b in CAR_BOXES]


@pytest.fixture
def frame():
    return Extent(640, 480)


@pytest.fixture
def images():
    return [ManifestRecord("img-{:03d}".format(i), "file:///data/img-{:03d}.jpg".format(i), 640, 480)
            for i in range(1, 6)]


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    """ Keep user settings out of the tests """
    monkeypatch.delenv("GROUNDGENIE_CONFIG", raising=False)
    monkeypatch.delenv("GROUNDGENIE_ENDPOINT", raising=False)
