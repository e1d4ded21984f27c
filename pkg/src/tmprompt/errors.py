"""Exception hierarchy shared across the package."""


class TmPromptError(Exception):
    """Base class for all errors raised by tmprompt."""


class CorpusError(TmPromptError):
    """Malformed or misaligned parallel corpus input."""


class FormatError(TmPromptError):
    """A persisted artifact is truncated, corrupt, or has an unsupported version."""


class IndexBuildError(TmPromptError):
    pass


class TemplateError(TmPromptError):
    pass


class ModelError(TmPromptError):
    """A model violated the next-token distribution contract."""


class ConfigError(TmPromptError):
    pass
