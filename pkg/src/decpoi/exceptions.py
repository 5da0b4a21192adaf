"""Error types raised across the simulator.

Everything derives from DecpoiError so callers can catch broadly; the
subclasses exist because tests and the CLI distinguish failure kinds.
"""


class DecpoiError(Exception):
    pass


class ParseError(DecpoiError):
    """Malformed input row; message names the file and line number."""


class ReferentialError(DecpoiError):
    """A check-in references a POI absent from the catalog."""


class EmptyDatasetError(DecpoiError):
    """Filtering removed every user or every POI."""


class SplitError(DecpoiError):
    """A trajectory is too short to hold out a test check-in."""


class ConfigError(DecpoiError):
    """Invalid configuration value or key."""


class ContractError(DecpoiError):
    """A caller violated an operation precondition (shape/key mismatch etc.)."""


class NumericError(DecpoiError):
    """Non-finite value encountered; message names the offending parameter."""


class ProtocolError(DecpoiError):
    """A round-protocol violation, e.g. a neighbor snapshot is missing."""


class StageError(DecpoiError):
    """A pipeline stage is missing an input artifact or got a mismatched one."""
