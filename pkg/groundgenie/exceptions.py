from .const import CFG_ENV_VARS

__all__ = ["GroundgenieError", "BoxError", "UndefinedGiouError", "GrammarError",
           "EncodingError", "MatchingError", "FormatError", "StageError",
           "ConfigError", "MissingConfigError", "MissingFolderError"]


class GroundgenieError(Exception):
    """ Base groundgenie exception type """
    pass


class BoxError(GroundgenieError, ValueError):
    """ Invalid box, extent or a box that does not fit its frame """
    pass


class UndefinedGiouError(GroundgenieError, ValueError):
    """ GIoU requested for two zero-area boxes """

    def __init__(self, a, b):
        """
        :param Box a: first box
        :param Box b: second box
        """
        super(UndefinedGiouError, self).__init__(
            "GIoU is undefined for two zero-area boxes: {} and {}".format(tuple(a), tuple(b)))


class GrammarError(GroundgenieError, ValueError):
    """ Grounded answer that violates the output grammar """

    def __init__(self, msg, diagnostics=None):
        """
        :param str msg: error message
        :param list[Diagnostic] diagnostics: structured problems found so far
        """
        self.diagnostics = list(diagnostics or [])
        super(GrammarError, self).__init__(msg)


class EncodingError(GroundgenieError, ValueError):
    """ Shape or dimension problem while building object tokens """
    pass


class MatchingError(GroundgenieError, ValueError):
    """ Cost or score matrices that cannot be matched """
    pass


class FormatError(GroundgenieError):
    """ Malformed input file; always carries a location """

    def __init__(self, msg, path=None, line=None, field=None):
        """
        Create the error message, prefixed with the location of the problem.

        :param str msg: what went wrong
        :param str path: file being read
        :param int line: 1-based line number, if the format is line oriented
        :param str field: field or JSON path within the record
        """
        self.path, self.line, self.field = path, line, field
        loc = [str(x) for x in [path, line, field] if x is not None]
        super(FormatError, self).__init__(
            "{}: {}".format(":".join(loc), msg) if loc else msg)


class StageError(GroundgenieError):
    """ A data engine stage failed after its retry budget """

    def __init__(self, capability, msg, image_id=None, attempts=None):
        """
        :param str capability: stage capability, e.g. 'ground'
        :param str msg: failure description
        :param str image_id: image being processed, if known
        :param int attempts: number of calls made
        """
        self.capability, self.image_id, self.attempts = capability, image_id, attempts
        self.reason = msg
        ctx = "[{}]".format(capability) if image_id is None \
            else "[{}|{}]".format(capability, image_id)
        if attempts:
            msg = "{} (after {} attempt{})".format(msg, attempts, "" if attempts == 1 else "s")
        super(StageError, self).__init__("{} {}".format(ctx, msg))


class ConfigError(GroundgenieError, ValueError):
    """ Invalid run configuration """
    pass


class MissingConfigError(ConfigError):
    """ Exception for when a config filepath doesn't point to a file. """

    def __init__(self, conf_file=None):
        """
        Create the error message, using optionally an attempt filepath.

        :param str conf_file: path attempted to be used as config file
        """
        msg = "Provide a config file either as an argument or via an environment variable: {}"\
            .format(", ".join(CFG_ENV_VARS))
        if conf_file:
            msg = "Not a file {} -- {}.".format(conf_file, msg)
        super(MissingConfigError, self).__init__(msg)


class MissingFolderError(GroundgenieError):
    """ Output folder is missing """

    def __init__(self, folder):
        """
        Create the error message.

        :param str folder: path attempted to be used as folder to save a file to
        """
        super(MissingFolderError, self).__init__("Output folder does not exist: {}".format(folder))
