"""Exception types, kept in one place so the CLI/service can map them to
exit codes and HTTP statuses uniformly."""


class VlmattackError(Exception):
    """Base class for all package errors."""


class ImageError(VlmattackError):
    """Bad pixel data or PNG file: shape, range, depth, channel count."""


class EncoderError(VlmattackError):
    """Encoder construction or use failed: dims, empty text, zero norm."""


class VictimError(VlmattackError):
    """Victim oracle failure, including exhausted transport retries."""


class ManifestError(VlmattackError):
    """Malformed or inconsistent attack-case manifest."""


class AttackError(VlmattackError):
    """Optimization aborted: non-finite gradient, infeasible init."""


class ConfigError(VlmattackError):
    """Invalid run configuration; surfaces as exit code 2 / HTTP 400."""
