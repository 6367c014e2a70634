import hashlib
import os

import numpy as np
from dotenv import dotenv_values, load_dotenv

load_dotenv()

ENV_PREFIX = 'PDOCNN_'

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(ValueError):
    """Bad flag, bad config key or an argument outside its documented range."""


class DataFormatError(ValueError):
    """Input file is missing, truncated, has the wrong magic or the wrong level."""


class NumericalError(ArithmeticError):
    """NaN loss or a failed gradient check."""


def exit_code_for(exc):
    """Map an exception raised by a command to the CLI exit code."""
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (DataFormatError, FileNotFoundError)):
        return EXIT_DATA
    return EXIT_USAGE


def load_env_var(var_name, default=None, cast=str):
    """Read a PDOCNN_ setting from the environment (or .env)."""
    value = os.getenv(ENV_PREFIX + var_name)
    if value is None or value == '':
        if default is None:
            raise ValueError(f"{ENV_PREFIX}{var_name} not found in environment or .env")
        return default
    try:
        return cast(value)
    except ValueError:
        raise UsageError(f"{ENV_PREFIX}{var_name}={value!r} is not a valid {cast.__name__}")


def load_config_file(path, allowed_keys):
    """Read a KEY=VALUE config file; keys are upper-cased long flag names."""
    if not os.path.exists(path):
        raise DataFormatError(f"Config file not found: {path}")
    values = dotenv_values(path)
    settings = {}
    for key, value in values.items():
        name = key.lower().replace('-', '_')
        if name not in allowed_keys:
            raise UsageError(f"Unknown config key {key!r} in {path}")
        settings[name] = value
    return settings


def environment_overrides(allowed_keys):
    """Collect PDOCNN_<KEY> environment settings for the given keys."""
    settings = {}
    for name in allowed_keys:
        value = os.getenv(ENV_PREFIX + name.upper())
        if value not in (None, ''):
            settings[name] = value
    return settings


class RngStreams:
    """Named random streams split from one seed.

    Each stream is keyed by a hash of its name, so adding a consumer never
    shifts the numbers another consumer sees.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._streams = {}

    def stream(self, name):
        if name not in self._streams:
            digest = hashlib.sha256(name.encode('utf-8')).digest()
            key = int.from_bytes(digest[:4], 'little')
            sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=(key,))
            self._streams[name] = np.random.default_rng(sequence)
        return self._streams[name]

    def get_state(self):
        return {name: gen.bit_generator.state for name, gen in sorted(self._streams.items())}

    def set_state(self, state):
        for name, bit_state in state.items():
            self.stream(name).bit_generator.state = bit_state
