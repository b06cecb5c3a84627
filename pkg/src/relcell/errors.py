"""Error taxonomy shared by the library and the CLI.

Each category maps to a fixed process exit code so shell pipelines can
distinguish misconfiguration from bad input data from numeric blow-ups.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class RelcellError(Exception):
    """Base class; carries the exit code for the CLI."""

    exit_code = 1


class ConfigError(RelcellError):
    """Invalid configuration: bad flags, impossible hyperparameters,
    incompatible checkpoints."""

    exit_code = EXIT_CONFIG


class DataError(RelcellError):
    """Invalid input data: schema violations, type coercion failures,
    missing files, degenerate evaluation sets."""

    exit_code = EXIT_DATA


class NumericError(RelcellError):
    """Numeric failure at runtime: non-finite loss or activations."""

    exit_code = EXIT_NUMERIC
