"""
Run configuration: built-in defaults, overlaid with a YAML file located
through yacman, overlaid with command-line flags.
"""
import copy
import logging
import os
from collections import OrderedDict

import yacman

from .const import *
from .exceptions import ConfigError, MissingConfigError

__all__ = ["DEFAULTS", "RunConfig", "default_config_file", "select_config_file", "load_config",
           "overlay_section"]

_LOGGER = logging.getLogger(__name__)

DEFAULTS = OrderedDict([
    (CFG_EVAL_KEY, OrderedDict([
        ("iou_thresholds", [IOU_THRESHOLD]),
        ("aggregate", "global"),
        ("decimals", REPORT_DECIMALS)])),
    (CFG_MATCHING_KEY, OrderedDict([
        ("w_cls", 2.0), ("w_l1", 5.0), ("w_giou", 2.0), ("focal", False)])),
    (CFG_PATHOLOGY_KEY, OrderedDict([
        ("min_run", 3), ("tol", 1.0), ("tokens_per_box", TOKENS_PER_BOX), ("max_len", None),
        ("p", None)])),
    (CFG_ENGINE_KEY, OrderedDict()),
    (CFG_SIMULATE_KEY, OrderedDict([
        ("trials", 10000),
        ("frame_sizes", [1000, 2000, 4000, 8000]),
        ("bins", 1000),
        ("box_size", 20),
        ("scene", OrderedDict()),
        ("retrieval", OrderedDict()),
        ("regression", OrderedDict())])),
])


def default_config_file():
    """
    Path to the bundled settings file.

    :return str: path to groundgenie.yaml shipped with the package
    """
    return os.path.join(os.path.dirname(__file__), "groundgenie.yaml")


def select_config_file(filename=None):
    """
    Pick the settings file: explicit path, then the environment variable,
    then the bundled default.

    :param str filename: path given on the command line
    :return str: settings file path
    :raise MissingConfigError: an explicit path that is not a file
    """
    if filename and not os.path.isfile(filename):
        raise MissingConfigError(filename)
    return yacman.select_config(config_filepath=filename, config_env_vars=CFG_ENV_VARS,
                                default_config_filepath=default_config_file(),
                                on_missing=lambda fp: fp)


def _merge(base, overlay, where=""):
    out = copy.deepcopy(base)
    for k, v in (overlay or {}).items():
        if str(k).startswith("_"):
            continue
        if k not in out:
            _LOGGER.warning("Ignoring unknown setting: {}{}".format(where, k))
            continue
        if isinstance(out[k], dict) and out[k] and isinstance(v, dict):
            out[k] = _merge(out[k], v, "{}{}.".format(where, k))
        else:
            out[k] = copy.deepcopy(v)
    return out


def _plain(obj):
    if hasattr(obj, "to_dict"):
        obj = obj.to_dict()
    if isinstance(obj, dict):
        return OrderedDict((k, _plain(v)) for k, v in obj.items())
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def load_config(filename=None):
    """
    :param str filename: settings file; resolved with select_config_file
    :return (OrderedDict, str): merged settings and the file they came from
    """
    path = select_config_file(filename)
    if not path or not os.path.isfile(path):
        raise MissingConfigError(path)
    _LOGGER.debug("Reading settings from: {}".format(path))
    try:
        data = _plain(yacman.YacAttMap(filepath=path))
    except Exception as e:
        raise ConfigError("Cannot read settings file {}: {}".format(path, e))
    return _merge(DEFAULTS, data), path


class RunConfig(object):
    """
    Validated settings of one command invocation. ``echo`` gives the record
    embedded in every report.
    """

    def __init__(self, command, settings, source=None, inputs=None, outputs=None, seed=None, jobs=1,
                 mode=None):
        self.command = command
        self.settings = settings
        self.source = source
        self.inputs = OrderedDict(inputs or {})
        self.outputs = OrderedDict(outputs or {})
        self.seed = seed
        self.jobs = jobs
        self.mode = mode
        self.validate()

    @classmethod
    def from_args(cls, args, inputs=None, outputs=None):
        """
        :param argparse.Namespace args: parsed command line
        :return RunConfig: settings file overlaid with the flags given
        """
        settings, source = load_config(getattr(args, "config", None))
        ev = settings[CFG_EVAL_KEY]
        if getattr(args, "iou", None):
            ev["iou_thresholds"] = list(args.iou)
        endpoint = os.environ.get(ENDPOINT_ENV_VAR)
        if endpoint:
            settings[CFG_ENGINE_KEY]["endpoint"] = endpoint
            _LOGGER.debug("Engine endpoint from {}: {}".format(ENDPOINT_ENV_VAR, endpoint))
        return cls(args.command, settings, source, inputs, outputs, getattr(args, "seed", None),
                   getattr(args, "jobs", None) or 1, getattr(args, "mode", None))

    def section(self, key):
        return self.settings[key]

    def validate(self):
        if self.mode is not None and self.mode not in EVAL_MODES:
            raise ConfigError("mode must be one of: {}".format(", ".join(EVAL_MODES)))
        if int(self.jobs) != self.jobs or self.jobs < 1:
            raise ConfigError("jobs must be a positive integer, got: {}".format(self.jobs))
        ev = self.settings[CFG_EVAL_KEY]
        thresholds = ev["iou_thresholds"]
        if not thresholds or any(not 0.0 < float(t) <= 1.0 for t in thresholds):
            raise ConfigError("IoU thresholds must be in (0, 1], got: {}".format(thresholds))
        if ev["aggregate"] not in ("global", "per_image"):
            raise ConfigError("aggregate must be 'global' or 'per_image'")
        m = self.settings[CFG_MATCHING_KEY]
        if any(m[k] < 0 for k in ("w_cls", "w_l1", "w_giou")):
            raise ConfigError("Matching weights must be nonnegative")
        p = self.settings[CFG_PATHOLOGY_KEY]
        if p["min_run"] < 3 or p["tol"] < 0:
            raise ConfigError("pathology.min_run must be >= 3 and tol >= 0")
        for k, v in self.inputs.items():
            if v is not None and not os.path.exists(v):
                raise ConfigError("Input file for --{} does not exist: {}".format(k, v))

    def echo(self):
        return OrderedDict([
            ("command", self.command), ("config_file", self.source), ("inputs", self.inputs),
            ("outputs", self.outputs), ("seed", self.seed), ("jobs", self.jobs), ("mode", self.mode),
            ("settings", self.settings)])


def overlay_section(settings, key, path):
    """
    Overlay one settings section with the contents of a YAML file.

    :param Mapping settings: merged settings, updated in place
    :param str key: section name, e.g. 'simulate'
    :param str path: YAML file holding the section's keys
    :return Mapping: the updated section
    """
    if not os.path.isfile(path):
        raise MissingConfigError(path)
    try:
        data = _plain(yacman.YacAttMap(filepath=path))
    except Exception as e:
        raise ConfigError("Cannot read {}: {}".format(path, e))
    settings[key] = _merge(settings[key], data, key + ".")
    return settings[key]
