""" Tests for the annotation data engine """
import os

import numpy as np
import pytest
import requests

from groundgenie.digest import file_checksum
from groundgenie.engine import *
from groundgenie.engine import CAPABILITIES, CATEGORY_NAME, DESCRIPTIVE, GROUND, REGION_CAPTION, \
    VERIFY_REWRITE, CAPTION
from groundgenie.engine_presets import CONVERSATION_PRESET, PRESETS, get_preset
from groundgenie.exceptions import ConfigError, GroundgenieError, StageError
from groundgenie.geometry import Box
from groundgenie.io_formats import ManifestRecord, read_records, read_triplets, write_triplets

CAPTION_TEXT = "A soldier in a military-style uniform stands next to a wooden bench in the image."


class _Flaky(StageClient):
    """ Fails the first n calls, then defers to the mock """

    name = "flaky"

    def __init__(self, failures):
        self.failures = failures
        self.calls = 0
        self.mock = MockStageClient()

    def request(self, capability, payload):
        self.calls += 1
        if self.calls <= self.failures:
            raise StageError(capability, "temporarily unavailable")
        return self.mock.request(capability, payload)


class _BadFor(StageClient):
    """ Sends one raw response for one capability and image, the mock answers the rest """

    name = "bad"

    def __init__(self, capability, response, image_id="img-002"):
        self.capability = capability
        self.response = response
        self.image_id = image_id
        self.mock = MockStageClient()

    def request(self, capability, payload):
        if capability == self.capability and payload.get("image", {}).get("id") == self.image_id:
            return self.response
        return self.mock.request(capability, payload)


class _Response(object):
    def __init__(self, body, status=200):
        self.body = body
        self.status = status

    def raise_for_status(self):
        if self.status >= 400:
            raise requests.HTTPError("{} Server Error".format(self.status))

    def json(self):
        if isinstance(self.body, Exception):
            raise self.body
        return self.body


class _Session(object):
    def __init__(self, response):
        self.response = response
        self.posted = []

    def post(self, url, json=None, timeout=None):
        self.posted.append((url, json, timeout))
        if isinstance(self.response, Exception):
            raise self.response
        return self.response

    def close(self):
        pass


@pytest.fixture
def image():
    return ManifestRecord("img-009", "file:///data/img-009.jpg", 640, 480)


def _run(manifest, path, **kwargs):
    settings = EngineSettings.from_mapping(kwargs.pop("settings", None))
    return run_pipeline(manifest, str(path), settings, **kwargs)


class TestPhrases:
    def test_extraction(self):
        spans = extract_noun_phrases(CAPTION_TEXT)
        assert [s.text for s in spans] == ["soldier", "military-style uniform", "wooden bench", "image"]
        for s in spans:
            assert CAPTION_TEXT[s.start:s.end] == s.text

    def test_custom_lexicon_and_kinds(self):
        spans = extract_noun_phrases("the big red ball, and a cat", lexicon=["the", "and", "a"])
        assert spans == [PhraseSpan("big red ball", 4, 16, DESCRIPTIVE), PhraseSpan("cat", 24, 27, CATEGORY_NAME)]

    def test_punctuation_splits(self):
        assert [s.text for s in extract_noun_phrases("red, blue", lexicon=[])] == ["red", "blue"]

    @pytest.mark.parametrize("caption", ["", "   ", None])
    def test_empty_caption(self, caption):
        with pytest.raises(GroundgenieError):
            extract_noun_phrases(caption)

    def test_filter_abstract(self):
        spans = extract_noun_phrases(CAPTION_TEXT)
        assert [s.text for s in filter_abstract(spans)] == ["soldier", "military-style uniform", "wooden bench"]
        assert filter_abstract(spans, []) == spans

    def test_lexicon_file(self):
        words = load_lexicon()
        assert "the" in words and "soldier" not in words
        assert not any(w.startswith("#") for w in words)


class TestTextChecks:
    @pytest.mark.parametrize(["text", "ok"], [("One sentence.", True), ("One. Two.", False), ("No end", False),
                                              ("", False), ("Is it? Yes.", False)])
    def test_one_sentence(self, text, ok):
        assert is_one_sentence(text) is ok

    @pytest.mark.parametrize(["text", "valid"], [
        ("the tall man on the left side", True),
        ("the man in a red coat waving", True),
        ("a tall man", False),
        ("the man on the left", False),
        ("the tall man, on the left side", False),
        ("the very tall man on the far left side of it", False),
        ("", False),
    ])
    def test_referring_constraints(self, text, valid):
        assert (validate_referring(text) is None) is valid


class TestClients:
    def test_mock_is_deterministic(self, image):
        payload = {"image": {"id": image.id, "width": 640, "height": 480}, "phrase": "dog"}
        a, b = MockStageClient(), MockStageClient()
        assert a.request(GROUND, payload) == b.request(GROUND, payload)

    def test_mock_overrides(self):
        client = MockStageClient({CAPTION: {"caption": "A cat."}, GROUND: lambda p: {"boxes": []}})
        assert client.request(CAPTION, {})["payload"] == {"caption": "A cat."}
        assert client.request(GROUND, {"phrase": "x"})["payload"] == {"boxes": []}
        with pytest.raises(ConfigError):
            MockStageClient({"paint": {}})
        with pytest.raises(StageError):
            client.request("paint", {})

    def test_http_client(self):
        session = _Session(_Response({"status": "ok", "payload": {"caption": "A dog."}}))
        client = HttpStageClient("http://localhost:8000/", session=session)
        assert client.request(CAPTION, {"a": 1})["payload"]["caption"] == "A dog."
        url, body, _ = session.posted[0]
        assert url == "http://localhost:8000/caption"
        assert body == {"capability": CAPTION, "payload": {"a": 1}}

    @pytest.mark.parametrize("response", [requests.ConnectionError("refused"), _Response({}, 503),
                                          _Response(ValueError("not json"))])
    def test_http_failures(self, response):
        client = HttpStageClient("http://localhost:8000", session=_Session(response))
        with pytest.raises(StageError):
            client.request(CAPTION, {})

    def test_http_needs_endpoint(self):
        with pytest.raises(ConfigError):
            HttpStageClient("")

    def test_record_and_replay(self, tmpdir, image):
        path = str(tmpdir.join("stages.jsonl"))
        recorder = RecordingStageClient(MockStageClient(), path)
        payload = {"image": {"id": image.id, "width": 640, "height": 480}, "phrase": "dog"}
        live = recorder.request(GROUND, payload)
        recorder.close()
        replay = ReplayStageClient(path)
        assert replay.request(GROUND, payload) == live
        with pytest.raises(StageError):
            replay.request(GROUND, dict(payload, phrase="cat"))


class TestStages:
    def test_retries(self, image):
        client = _Flaky(1)
        grounded = ground_phrases(image, extract_noun_phrases("A dog."), client, retries=1)
        assert client.calls == 2
        assert all(isinstance(b, Box) for _, b, _ in grounded)
        with pytest.raises(StageError) as e:
            ground_phrases(image, extract_noun_phrases("A dog."), _Flaky(5), retries=2)
        assert e.value.attempts == 3 and e.value.image_id == image.id

    def test_error_status(self, image):
        client = MockStageClient()
        client.request = lambda c, p: {"status": "error", "payload": "overloaded"}
        with pytest.raises(StageError):
            ground_phrases(image, extract_noun_phrases("A dog."), client)

    def test_threshold_and_keep(self, image):
        boxes = {"boxes": [{"box": [0, 0, 10, 10], "score": 0.3}, {"box": [5, 5, 900, 50], "score": 0.31},
                           {"box": [1, 1, 2, 2], "score": 0.9}]}
        client = MockStageClient({GROUND: boxes})
        phrases = extract_noun_phrases("A dog.")
        kept = ground_phrases(image, phrases, client, threshold=0.3)
        assert [s for _, _, s in kept] == [0.31, 0.9]
        assert kept[0][1] == Box(5, 5, 640, 50)
        best = ground_phrases(image, phrases, client, threshold=0.3, keep=KEEP_BEST)
        assert [s for _, _, s in best] == [0.9]
        with pytest.raises(ConfigError):
            ground_phrases(image, phrases, client, keep="some")

    def test_ungrounded_phrase_dropped(self, image):
        client = MockStageClient({GROUND: {"boxes": [{"box": [0, 0, 10, 10], "score": 0.1}]}})
        diagnostics = []
        assert ground_phrases(image, extract_noun_phrases("A dog."), client, diagnostics=diagnostics) == []
        assert diagnostics[0][0] == "dog"

    def test_region_caption_must_be_one_sentence(self, image):
        box = Box(0, 0, 10, 10)
        ok = phrase_conditioned_caption(image, box, "dog", MockStageClient({REGION_CAPTION: {"caption": "A dog."}}))
        assert ok == CaptionResult("A dog.", True, None)
        two = MockStageClient({REGION_CAPTION: {"caption": "A dog. It barks."}})
        assert not phrase_conditioned_caption(image, box, "dog", two).valid
        with pytest.raises(GroundgenieError):
            phrase_conditioned_caption(image, box, " ", two)

    def test_region_prompt_carries_phrase(self, image):
        seen = {}

        def _caption(payload):
            seen.update(payload)
            return {"caption": "A dog."}

        phrase_conditioned_caption(image, Box(0, 0, 1, 1), "brown dog", MockStageClient({REGION_CAPTION: _caption}))
        assert seen["prompt"].endswith("brown dog")

    def test_malformed_boxes_skipped(self, image):
        boxes = {"boxes": [{"box": [0, 0, 10, 10], "score": "high"}, "junk", {"box": [1, 2, 3]},
                           {"score": 0.9}, {"box": [9, 9, 1, 1], "score": 0.9}, {"box": [0, 0, 5, 5], "score": 0.9}]}
        kept = ground_phrases(image, extract_noun_phrases("A dog."), MockStageClient({GROUND: boxes}))
        assert [(b, s) for _, b, s in kept] == [(Box(0, 0, 5, 5), 0.9)]

    @pytest.mark.parametrize("body", [{"boxes": "many"}, {"boxes": {"box": [0, 0, 1, 1]}}, ["not", "an", "object"]])
    def test_malformed_grounding_response(self, image, body):
        with pytest.raises(StageError):
            ground_phrases(image, extract_noun_phrases("A dog."), MockStageClient({GROUND: body}))

    def test_referring_must_be_text(self):
        client = MockStageClient({VERIFY_REWRITE: {"verdict": "accept", "referring": 7}})
        with pytest.raises(StageError):
            verify_and_rewrite("A brown dog.", "dog", client)

    @pytest.mark.parametrize(["response", "accepted"], [
        ({"verdict": "accept", "referring": "the brown dog next to the bench"}, True),
        ({"verdict": "accept", "referring": "a dog"}, False),
        ({"verdict": "accept", "referring": "the brown dog, next to the bench"}, False),
        ({"verdict": "reject", "referring": None}, False),
    ])
    def test_verify_and_rewrite(self, response, accepted):
        verdict = verify_and_rewrite("A brown dog.", "dog", MockStageClient({VERIFY_REWRITE: response}))
        assert verdict.accepted is accepted
        assert (verdict.referring is not None) is accepted
        assert (verdict.reason is None) is accepted


class TestTriplets:
    def test_full_precision_round_trip(self, tmpdir):
        rng = np.random.default_rng(53)
        triplets = []
        for n in range(1000):
            regions = []
            for _ in range(int(rng.integers(0, 4))):
                x, y = np.sort(rng.uniform(0, 1920, 2)), np.sort(rng.uniform(0, 1080, 2))
                regions.append(Region(Box(x[0], y[0], x[1], y[1]), "brown dog", DESCRIPTIVE, float(rng.random()),
                                      "A brown dog.", None, ("extract", GROUND)))
            triplets.append(AnnotationTriplet("img-{}".format(n), "file:///img.jpg", "A brown dog.", regions))
        path = write_triplets(triplets, str(tmpdir.join("t.jsonl")))
        assert read_triplets(path) == triplets


class TestSettings:
    @pytest.mark.parametrize("m", [{"colour": "red"}, {"preset": "nope"}, {"client": "carrier-pigeon"},
                                   {"client": "http"}, {"client": "replay"}, {"keep": "some"},
                                   {"retries": -1}, {"jobs": 0}])
    def test_invalid(self, m):
        with pytest.raises(ConfigError):
            EngineSettings.from_mapping(m)

    def test_defaults_and_overrides(self):
        s = EngineSettings.from_mapping({"retries": 1}, jobs=3, client=None)
        assert s.retries == 1 and s.jobs == 3 and s.client == "mock"
        assert s.echo()["blocklist"] == list(DEFAULT_BLOCKLIST)

    def test_presets(self):
        assert set(PRESETS) == {"default", CONVERSATION_PRESET}
        assert "{phrase}" in get_preset("default")["region_prompt"]
        with pytest.raises(KeyError):
            get_preset("nope")

    def test_image_filters(self):
        s = EngineSettings.from_mapping({"min_width": 500, "allow_tags": ["street"], "deny_tags": ["night"]})
        assert image_passes(ManifestRecord("a", "u", 640, 480, ("street",)), s)
        assert not image_passes(ManifestRecord("a", "u", 320, 480, ("street",)), s)
        assert not image_passes(ManifestRecord("a", "u", 640, 480, ("park",)), s)
        assert not image_passes(ManifestRecord("a", "u", 640, 480, ("street", "night")), s)


class TestPipeline:
    def test_golden_determinism(self, tmpdir, manifest_path):
        a = _run(manifest_path, tmpdir.join("a.jsonl"))
        b = _run(manifest_path, tmpdir.join("b.jsonl"), settings={"jobs": 3})
        assert a.digest == b.digest
        assert a.complete and not a.errors
        assert a.counts["images"] == 3
        triplets = read_triplets(str(tmpdir.join("a.jsonl")))
        assert [t.id for t in triplets] == ["img-001", "img-002", "img-003"]

    def test_triplet_content(self, tmpdir, manifest_path):
        report = _run(manifest_path, tmpdir.join("out.jsonl"))
        triplets = read_triplets(report.output)
        regions = [r for t in triplets for r in t.regions]
        assert len(regions) == report.counts["grounded"]
        assert sum(1 for r in regions if r.referring) == report.counts["accepted"]
        for t in triplets:
            assert t.caption
            for r in t.regions:
                assert r.score > 0.3
                assert r.box.xmax <= 800 and r.box.ymax <= 600
                assert r.provenance[:2] == ("extract", GROUND)
                assert r.phrase.split()[-1] not in DEFAULT_BLOCKLIST
                if r.referring:
                    assert validate_referring(r.referring) is None
                    assert r.provenance[-1] == VERIFY_REWRITE
                    assert r.detail is not None
        c = report.counts
        assert c["captioned"] + c["flagged"] == c["grounded"]
        assert c["accepted"] + c["rejected"] == c["captioned"]

    def test_resume_equals_uninterrupted(self, tmpdir, manifest_path):
        full = _run(manifest_path, tmpdir.join("full.jsonl"))
        out = tmpdir.join("part.jsonl")
        first = _run(manifest_path, out, limit=1)
        assert not first.complete and first.counts["images"] == 1
        rest = _run(manifest_path, out, resume=True)
        assert rest.complete
        assert rest.digest == full.digest
        assert rest.counts == full.counts

    def test_resume_drops_lines_past_checkpoint(self, tmpdir, manifest_path):
        full = _run(manifest_path, tmpdir.join("full.jsonl"))
        out = str(tmpdir.join("crash.jsonl"))
        _run(manifest_path, out)
        ckpt = out + ".ckpt"
        with open(ckpt) as f:
            lines = f.readlines()
        # keep the header and the first image: later triplets are unconfirmed
        with open(ckpt, "w") as f:
            f.writelines(lines[:2])
        resumed = _run(manifest_path, out, resume=True)
        assert resumed.digest == full.digest
        assert len(read_records(ckpt, "checkpoint")) == 3

    def test_resume_without_checkpoint_starts_over(self, tmpdir, manifest_path):
        full = _run(manifest_path, tmpdir.join("full.jsonl"))
        out = tmpdir.join("fresh.jsonl")
        out.write("stale\n")
        assert _run(manifest_path, out, resume=True).digest == full.digest

    def test_stage_failure_skips_image(self, tmpdir, manifest_path):
        report = _run(manifest_path, tmpdir.join("conv.jsonl"), settings={"preset": CONVERSATION_PRESET})
        assert report.counts["images_failed"] == 2
        assert [i for i, _ in report.errors] == ["img-001", "img-003"]
        triplets = read_triplets(report.output)
        assert [t.id for t in triplets] == ["img-002"]
        assert triplets[0].caption.startswith("A man in a red rain jacket")
        assert report.complete

    def test_filters_skip_images(self, tmpdir, manifest_path):
        report = _run(manifest_path, tmpdir.join("big.jsonl"), settings={"min_width": 700})
        assert report.counts["images_skipped"] == 2
        assert [t.id for t in read_triplets(report.output)] == ["img-002"]

    def test_record_then_replay(self, tmpdir, manifest_path):
        log = str(tmpdir.join("stages.jsonl"))
        live = _run(manifest_path, tmpdir.join("live.jsonl"), settings={"record": log})
        replayed = _run(manifest_path, tmpdir.join("replayed.jsonl"), settings={"client": "replay", "replay": log})
        assert replayed.digest == live.digest

    def test_per_capability_clients(self, tmpdir, images):
        clients = {c: MockStageClient() for c in CAPABILITIES}
        clients[CAPTION] = MockStageClient({CAPTION: {"caption": "A dog sleeps on a red sofa."}})
        report = run_pipeline(images, str(tmpdir.join("dogs.jsonl")), clients=clients)
        assert all(t.caption == "A dog sleeps on a red sofa." for t in read_triplets(report.output))
        with pytest.raises(ConfigError):
            run_pipeline(images, str(tmpdir.join("x.jsonl")), clients={CAPTION: clients[CAPTION]})

    def test_report(self, tmpdir, images):
        report = run_pipeline(images, str(tmpdir.join("r.jsonl")))
        d = report.to_dict()
        assert d["digest"] == file_checksum(report.output)
        assert d["config"]["client"] == "mock"
        assert "images: 5" in report.render()
        assert os.path.exists(report.output + ".ckpt")

    def test_five_runs_identical(self, tmpdir, manifest_path):
        outputs, digests = set(), set()
        for n in range(5):
            report = _run(manifest_path, tmpdir.join("run{}.jsonl".format(n)), settings={"jobs": n + 1})
            digests.add(report.digest)
            with open(report.output, "rb") as f:
                outputs.add(f.read())
        assert len(digests) == 1 and len(outputs) == 1

    def test_empty_manifest(self, tmpdir):
        report = run_pipeline([], str(tmpdir.join("none.jsonl")))
        assert report.complete and not report.errors
        assert all(v == 0 for v in report.counts.values())
        with open(report.output) as f:
            assert f.read() == "# groundgenie triplets v1\n"

    def test_resume_after_torn_triplet(self, tmpdir, manifest_path):
        full = _run(manifest_path, tmpdir.join("full.jsonl"))
        out = str(tmpdir.join("torn.jsonl"))
        _run(manifest_path, out, limit=1)
        with open(out, "a") as f:
            f.write('{"id": "img-002", "ur')
        rest = _run(manifest_path, out, resume=True)
        assert rest.digest == full.digest and rest.counts == full.counts
        with open(out, "rb") as a, open(full.output, "rb") as b:
            assert a.read() == b.read()

    def test_resume_after_torn_checkpoint(self, tmpdir, manifest_path):
        full = _run(manifest_path, tmpdir.join("full.jsonl"))
        out = str(tmpdir.join("torn.jsonl"))
        _run(manifest_path, out, limit=2)
        ckpt = out + ".ckpt"
        with open(ckpt) as f:
            text = f.read()
        # the entry for the second image loses its tail and newline
        with open(ckpt, "w") as f:
            f.write(text[:-10])
        rest = _run(manifest_path, out, resume=True)
        assert rest.digest == full.digest and rest.counts == full.counts
        assert [e["id"] for e in read_records(ckpt, "checkpoint")] == ["img-001", "img-002", "img-003"]

    @pytest.mark.parametrize(["capability", "response"], [
        (CAPTION, None),
        (CAPTION, ["ok"]),
        (CAPTION, {"status": "ok", "payload": ["A cat."]}),
        (CAPTION, {"status": "ok", "payload": {"caption": 42}}),
        (GROUND, {"status": "ok", "payload": {"boxes": "many"}}),
        (REGION_CAPTION, {"status": "ok", "payload": {"caption": ["A dog."]}}),
    ])
    def test_bad_response_fails_only_its_image(self, tmpdir, images, capability, response):
        settings = EngineSettings.from_mapping({"score_threshold": 0.0})
        report = run_pipeline(images, str(tmpdir.join("bad.jsonl")), settings, clients=_BadFor(capability, response))
        assert report.complete
        assert [i for i, _ in report.errors] == ["img-002"]
        assert report.counts["images"] == 5 and report.counts["images_failed"] == 1
        assert [t.id for t in read_triplets(report.output)] == ["img-001", "img-003", "img-004", "img-005"]

    def test_blank_conversation_fails_only_its_image(self, tmpdir):
        images = [ManifestRecord("blank", "u", 640, 480, (), "   "),
                  ManifestRecord("talk", "u", 640, 480, (), "A man walks his dog past a wooden bench.")]
        settings = EngineSettings.from_mapping({"preset": CONVERSATION_PRESET})
        report = run_pipeline(images, str(tmpdir.join("conv.jsonl")), settings)
        assert [i for i, _ in report.errors] == ["blank"]
        assert [t.id for t in read_triplets(report.output)] == ["talk"]
