"""Error taxonomy; the CLI maps each kind to a single stderr line."""


class EmbedderError(Exception):
    """Base for every condition this package raises on purpose."""


class ManifestError(EmbedderError):
    """Capture manifest missing, malformed, or referencing absent files."""


class ModelError(EmbedderError):
    """Backend name unknown, or the backend cannot run (e.g. no weights)."""


class InputError(EmbedderError):
    """Caller-supplied values out of contract (empty vocabulary, bad flag)."""
