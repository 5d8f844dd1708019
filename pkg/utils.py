# Helpers for simsmith

import hashlib
import json

import numpy as np
import pandas as pd


# ==================== ERRORS ====================

class ConfigurationError(ValueError):
    """Invalid hyperparameters, scenario configuration or run budget."""


class DimensionError(ValueError):
    """Array shape does not match what an operation expects."""


class InsufficientSamplesError(ValueError):
    """Too few samples per dataset for the requested statistic."""


class InputError(ValueError):
    """Malformed data handed to a simulator, estimator or reader."""


class ModelFileError(ValueError):
    """Model file cannot be loaded (version, checksum or payload problem)."""


class TapeStateError(RuntimeError):
    """Backward pass requested without a recorded forward pass."""


class TrainingDivergedError(RuntimeError):
    """Loss or weights became non-finite during training."""


class InferenceError(RuntimeError):
    """Bootstrap or ABC step cannot produce a valid result."""


# ==================== VALIDATORS ====================

def validate_count(value, name: str, minimum: int = 0) -> int:
    """
    Validate an integer count and return it as int.

    Raises ConfigurationError naming the field otherwise.
    """
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ConfigurationError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigurationError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def validate_probability(value, name: str) -> float:
    """Validate a real number strictly inside (0, 1)."""
    if not isinstance(value, (int, float)) or not 0.0 < float(value) < 1.0:
        raise ConfigurationError(f"{name} must lie in (0, 1), got {value!r}")
    return float(value)


def validate_positive(value, name: str) -> float:
    """Validate a finite real number > 0."""
    if isinstance(value, bool) or not isinstance(value, (int, float)) \
            or not np.isfinite(value) or value <= 0:
        raise ConfigurationError(f"{name} must be a positive number, got {value!r}")
    return float(value)


def check_keys(data, allowed, path: str) -> dict:
    """
    Reject anything but a JSON object whose keys are all in allowed.

    Error messages name the path into the document, e.g. "training.epochss".
    """
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected an object, got {type(data).__name__}")
    for key in data:
        if key not in allowed:
            raise ConfigurationError(f"{path}.{key}: unknown key '{key}'")
    return data


def require_finite(values: np.ndarray, what: str) -> np.ndarray:
    """Raise InputError if any entry is NaN or infinite."""
    if not np.all(np.isfinite(values)):
        raise InputError(f"{what} contains NaN or infinite values")
    return values


def on_simplex(values: np.ndarray, tol: float = 1e-9) -> bool:
    """True if every row is nonnegative and sums to one within tol."""
    values = np.asarray(values, dtype=np.float64)
    return bool(np.all(values >= -tol) and np.all(np.abs(values.sum(axis=-1) - 1.0) <= tol))


# ==================== RANDOM STREAMS ====================

def _hash_to_u64(text: str) -> int:
    digest = hashlib.sha256(text.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big", signed=False)


def stream_seed(seed: int, *names) -> int:
    """
    Derive a stable 64-bit child seed from a master seed and stream names.

    Names may be strings or integers (worker index, replication index).
    The mapping is fixed across versions: sha256 of "seed:name1:name2...".
    """
    key = ":".join([str(int(seed))] + [str(name) for name in names])
    return _hash_to_u64(key)


def stream_rng(seed: int, *names) -> np.random.Generator:
    """PCG64 generator for the named child stream of a master seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(stream_seed(seed, *names))))


# ==================== SERIALIZATION ====================

def canonical_json(data) -> str:
    """Compact JSON with sorted keys, stable across runs."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    """Hex sha256 of a text payload."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_csv(frame: pd.DataFrame, target, metadata: dict = None) -> None:
    """
    Write a table to a path or open text stream.

    metadata entries become leading "# key: value" lines, in insertion order.
    Floats use 10 significant digits so reruns compare byte for byte.
    """
    lines = "".join(f"# {key}: {value}\n" for key, value in (metadata or {}).items())
    body = frame.to_csv(index=False, float_format="%.10g", lineterminator="\n")
    if hasattr(target, "write"):
        target.write(lines + body)
        return
    with open(target, "w", encoding="utf-8", newline="\n") as f:
        f.write(lines + body)


def read_csv(source) -> pd.DataFrame:
    """Read a table written by write_csv (leading "#" lines are skipped)."""
    return pd.read_csv(source, comment="#")
