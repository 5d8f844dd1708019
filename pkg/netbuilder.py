"""
Network assembly, batched estimation and model files for simsmith.

A network is a set of branches that see the same data tensor. Each branch
applies coordinate-wise dense layers, pools the sample axis with its
collapse layers and feeds the pooled features to one or more post-collapse
stacks. The outputs of all branches are concatenated and passed through the
post-concatenation stack and a final identity layer producing one estimate
per dataset.

Sample size is never an input; the network sees the data tensor only.

Model file layout (text, UTF-8):
    line 1   "SIMSMITH-MODEL <format version>"
    line 2   canonical JSON header (hyperparams, dimensions, seed, metadata,
             array names with their lengths, sha256 of the payload)
    line 3+  one line per trainable array in canonical order:
             "<name> <count> <v1> <v2> ..." with 17 significant digits
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

import tensor_core as tc
from utils import (
    ConfigurationError,
    DimensionError,
    ModelFileError,
    canonical_json,
    check_keys,
    require_finite,
    sha256_text,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FILE_MAGIC = "SIMSMITH-MODEL"
ESTIMATE_CHUNK = 1024


# ==================== HYPERPARAMETERS ====================

@dataclass
class HyperParams:
    """
    Structure of a network.

    n_dense_post_coll holds one depth per post-collapse stack; every stack
    receives the branch's pooled features and their outputs are
    concatenated. A plain integer means a single stack.
    """
    n_branches: int = 1
    n_dense_branch: tuple = (0,)
    collapsing: tuple = ("mean",)
    n_dense_post_coll: tuple = (0,)
    n_dense_post_concat: int = 0
    n_features_branch: int = 16
    n_features_post: int = 16
    n_features_post_concat: int = 16
    n_proj: int = 3
    loss: str = "mse"

    def __post_init__(self):
        if isinstance(self.n_dense_branch, int):
            self.n_dense_branch = (self.n_dense_branch,)
        if isinstance(self.n_dense_post_coll, int):
            self.n_dense_post_coll = (self.n_dense_post_coll,)
        if isinstance(self.collapsing, str):
            self.collapsing = (self.collapsing,)
        self.n_dense_branch = tuple(self.n_dense_branch)
        self.n_dense_post_coll = tuple(self.n_dense_post_coll)
        self.collapsing = tuple(self.collapsing)

    def validate(self) -> "HyperParams":
        """Check every invariant; raises ConfigurationError naming the field."""
        if isinstance(self.n_branches, bool) or not isinstance(self.n_branches, int) \
                or not 1 <= self.n_branches <= 3:
            raise ConfigurationError(f"n_branches must be in 1..3, got {self.n_branches!r}")
        if len(self.n_dense_branch) != self.n_branches:
            raise ConfigurationError(f"n_dense_branch must have {self.n_branches} entries, "
                                     f"got {len(self.n_dense_branch)}")
        for depth in self.n_dense_branch:
            if isinstance(depth, bool) or not isinstance(depth, int) or not 0 <= depth <= 8:
                raise ConfigurationError(f"n_dense_branch entries must be in 0..8, got {depth!r}")
        if not self.collapsing:
            raise ConfigurationError("collapsing must name at least one collapse kind")
        for kind in self.collapsing:
            if kind not in tc.COLLAPSE_KINDS:
                raise ConfigurationError(f"collapsing must be drawn from {tc.COLLAPSE_KINDS}, got {kind!r}")
        if len(set(self.collapsing)) != len(self.collapsing):
            raise ConfigurationError(f"collapsing lists a kind twice: {self.collapsing}")
        if not self.n_dense_post_coll:
            raise ConfigurationError("n_dense_post_coll must hold at least one depth")
        for depth in self.n_dense_post_coll:
            if isinstance(depth, bool) or not isinstance(depth, int) or not 0 <= depth <= 8:
                raise ConfigurationError(f"n_dense_post_coll entries must be in 0..8, got {depth!r}")
        if isinstance(self.n_dense_post_concat, bool) or not isinstance(self.n_dense_post_concat, int) \
                or self.n_dense_post_concat < 0:
            raise ConfigurationError(f"n_dense_post_concat must be >= 0, got {self.n_dense_post_concat!r}")
        for name in ("n_features_branch", "n_features_post", "n_features_post_concat"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {value!r}")
        if "projection" in self.collapsing and (not isinstance(self.n_proj, int) or self.n_proj < 1):
            raise ConfigurationError(f"n_proj must be >= 1 for projection collapsing, got {self.n_proj!r}")
        if self.loss != "mse":
            raise ConfigurationError(f"loss must be 'mse', got {self.loss!r}")
        return self

    def to_dict(self) -> dict:
        return {
            "n_branches": self.n_branches,
            "n_dense_branch": list(self.n_dense_branch),
            "collapsing": list(self.collapsing),
            "n_dense_post_coll": list(self.n_dense_post_coll),
            "n_dense_post_concat": self.n_dense_post_concat,
            "n_features_branch": self.n_features_branch,
            "n_features_post": self.n_features_post,
            "n_features_post_concat": self.n_features_post_concat,
            "n_proj": self.n_proj,
            "loss": self.loss,
        }

    @classmethod
    def from_dict(cls, data: dict, path: str = "network") -> "HyperParams":
        check_keys(data, cls.__dataclass_fields__, path)
        try:
            return cls(**data).validate()
        except ConfigurationError as e:
            raise ConfigurationError(f"{path}: {e}") from e
        except TypeError as e:
            raise ConfigurationError(f"{path}: {e}") from e


def regression_hyperparams() -> HyperParams:
    """Projection network used for the regression scenarios."""
    return HyperParams(n_branches=3, n_dense_branch=(0, 2, 4), collapsing=("projection",),
                       n_dense_post_coll=(0,), n_dense_post_concat=3, n_features_branch=32,
                       n_features_post=16, n_features_post_concat=32, n_proj=3).validate()


def genetics_hyperparams() -> HyperParams:
    """Mean/sdev network with secondary branching used for haplotype frequencies."""
    return HyperParams(n_branches=3, n_dense_branch=(0, 2, 4), collapsing=("mean", "sdev"),
                       n_dense_post_coll=(0, 2, 4, 8), n_dense_post_concat=0, n_features_branch=16,
                       n_features_post=16, n_features_post_concat=16).validate()


# ==================== NETWORK MODEL ====================

@dataclass
class Branch:
    dense: list
    collapse: list
    post: list  # one layer list per post-collapse stack


@dataclass
class NetworkModel:
    """
    A built (and possibly trained) estimator network.

    Weights are only mutated by the trainer; everything else treats a model
    as read-only, so concurrent estimate() calls are safe.
    """
    hyperparams: HyperParams
    input_cols: int
    output_dim: int
    branches: list
    head: list
    seed: int
    trained_sample_range: Optional[tuple] = None
    metadata: dict = field(default_factory=dict)

    def named_layers(self) -> list:
        """Trainable and non-trainable layers with stable names, canonical order."""
        named = []
        for i, branch in enumerate(self.branches):
            named += [(f"branch{i}.dense{j}", layer) for j, layer in enumerate(branch.dense)]
            named += [(f"branch{i}.collapse{j}", layer) for j, layer in enumerate(branch.collapse)]
            for s, stack in enumerate(branch.post):
                named += [(f"branch{i}.post{s}.dense{j}", layer) for j, layer in enumerate(stack)]
        named += [(f"head.dense{j}", layer) for j, layer in enumerate(self.head)]
        return named

    def layers(self) -> list:
        return [layer for _, layer in self.named_layers()]

    @property
    def n_parameters(self) -> int:
        return tc.count_parameters(self.layers())

    def parameters(self) -> np.ndarray:
        return tc.flatten_parameters(self.layers())

    def set_parameters(self, flat) -> None:
        tc.assign_parameters(self.layers(), flat)


def _stack(depth: int, in_cols: int, width: int, rng, make) -> tuple:
    layers = []
    for _ in range(depth):
        layers.append(make(in_cols, width, rng))
        in_cols = width
    return layers, in_cols


def build_network(hp: HyperParams, input_cols: int, output_dim: int, seed: int) -> NetworkModel:
    """
    Assemble a network from hyperparameters.

    Per branch i: n_dense_branch[i] coordinate-dense layers of width
    n_features_branch, the collapse layers of hp.collapsing (outputs
    concatenated), then each post-collapse stack of n_features_post wide
    dense layers. Branch outputs are concatenated, followed by
    n_dense_post_concat dense layers of width n_features_post_concat and an
    identity layer with output_dim outputs. Weights are initialized in
    canonical order from a generator seeded with seed.

    Raises:
        ConfigurationError: hyperparameter invariant violated or bad dims
    """
    hp.validate()
    if input_cols < 1:
        raise ConfigurationError(f"input_cols must be >= 1, got {input_cols}")
    if output_dim < 1:
        raise ConfigurationError(f"output_dim must be >= 1, got {output_dim}")

    rng = np.random.default_rng(seed)
    branches = []
    concat_width = 0

    for depth in hp.n_dense_branch:
        dense, width = _stack(depth, input_cols, hp.n_features_branch, rng, tc.coordinate_dense_layer)
        collapse = [tc.collapse_layer(kind, width, rng, hp.n_proj) for kind in hp.collapsing]
        pooled = sum(tc.collapse_width(kind, width, hp.n_proj) for kind in hp.collapsing)
        post = []
        for post_depth in hp.n_dense_post_coll:
            stack, out_width = _stack(post_depth, pooled, hp.n_features_post, rng, tc.dense_layer)
            post.append(stack)
            concat_width += out_width
        branches.append(Branch(dense, collapse, post))

    head, width = _stack(hp.n_dense_post_concat, concat_width, hp.n_features_post_concat, rng, tc.dense_layer)
    head.append(tc.dense_layer(width, output_dim, rng, activation="identity"))

    model = NetworkModel(hp, input_cols, output_dim, branches, head, seed)
    logger.debug(f"Built network: {len(branches)} branches, concat width {concat_width}, "
                 f"{model.n_parameters} parameters")
    return model


def concat_width(model: NetworkModel) -> int:
    """Input width of the head (sum of all post-collapse stack outputs)."""
    return model.head[0].weights.shape[0]


# ==================== ESTIMATION ====================

def canonical_sample_order(batch: np.ndarray) -> np.ndarray:
    """Sort every dataset's sample rows lexicographically (column 0 first)."""
    keys = tuple(batch[:, :, j] for j in reversed(range(batch.shape[2])))
    order = np.lexsort(keys, axis=-1)
    return np.take_along_axis(batch, order[:, :, None], axis=1)


def forward(model: NetworkModel, batch, tape: tc.Tape) -> tc.Node:
    """
    Push a batch through the network, recording on tape.

    Samples are put in canonical order first, which makes the output
    bit-identical under any permutation of a dataset's samples.
    """
    batch = tc.as_tensor3(batch)
    if batch.shape[2] != model.input_cols:
        raise DimensionError(f"column axis: batch has {batch.shape[2]} columns, "
                             f"model expects {model.input_cols}")
    require_finite(batch, "batch")

    x = tape.input(canonical_sample_order(batch))
    outputs = []
    for branch in model.branches:
        node = x
        for layer in branch.dense:
            node = tape.apply(layer, node)
        pooled = tape.concat([tape.apply(layer, node) for layer in branch.collapse])
        for stack in branch.post:
            out = pooled
            for layer in stack:
                out = tape.apply(layer, out)
            outputs.append(out)

    node = tape.concat(outputs)
    for layer in model.head:
        node = tape.apply(layer, node)
    return node


def estimate(model: NetworkModel, batch) -> np.ndarray:
    """
    One parameter estimate per dataset.

    Args:
        model: NetworkModel
        batch: Tensor3 (b, n, k) with k == model.input_cols

    Returns:
        Matrix2 (b, output_dim)
    """
    batch = tc.as_tensor3(batch)
    chunks = []
    for start in range(0, max(batch.shape[0], 1), ESTIMATE_CHUNK):
        tape = tc.Tape(model.layers(), record=False)
        chunks.append(forward(model, batch[start:start + ESTIMATE_CHUNK], tape).value)
    return np.concatenate(chunks, axis=0)


def as_estimator(model):
    """
    Callable batch -> (b, p) for a NetworkModel, or any callable passed
    through unchanged (analytic stand-ins such as the sample mean).
    """
    if isinstance(model, NetworkModel):
        return lambda batch: estimate(model, batch)
    if callable(model):
        return model
    raise TypeError(f"expected a NetworkModel or a callable estimator, got {type(model).__name__}")


# ==================== MODEL FILES ====================

def _header(model: NetworkModel, arrays: list, checksum: str) -> dict:
    return {
        "hyperparams": model.hyperparams.to_dict(),
        "input_cols": model.input_cols,
        "output_dim": model.output_dim,
        "seed": model.seed,
        "trained_sample_range": list(model.trained_sample_range) if model.trained_sample_range else None,
        "metadata": model.metadata,
        "arrays": arrays,
        "checksum": checksum,
    }


def _payload(model: NetworkModel) -> tuple:
    lines, arrays = [], []
    for name, layer in model.named_layers():
        if not layer.trainable:
            continue
        values = np.concatenate([layer.weights.ravel(), layer.bias.ravel()])
        arrays.append([name, int(values.size)])
        lines.append(f"{name} {values.size} " + " ".join(format(v, ".17g") for v in values))
    return lines, arrays


def model_to_text(model: NetworkModel) -> str:
    lines, arrays = _payload(model)
    payload = "\n".join(lines)
    header = _header(model, arrays, sha256_text(payload))
    return f"{FILE_MAGIC} {FORMAT_VERSION}\n{canonical_json(header)}\n{payload}\n"


def save_model(model: NetworkModel, path: str) -> None:
    """Write a model file; save-load-save is byte-identical."""
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(model_to_text(model))
        logger.info(f"Model saved to {path} ({model.n_parameters} parameters)")
    except Exception as e:
        logger.error(f"Failed to save model to {path}: {e}")
        raise


def model_from_text(text: str) -> NetworkModel:
    """Parse a model file; raises ModelFileError on any inconsistency."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if len(lines) < 2:
        raise ModelFileError("model file is truncated")

    magic = lines[0].split(" ")
    if len(magic) != 2 or magic[0] != FILE_MAGIC:
        raise ModelFileError("not a simsmith model file")
    if magic[1] != str(FORMAT_VERSION):
        raise ModelFileError(f"unsupported model format version {magic[1]} (expected {FORMAT_VERSION})")

    try:
        header = json.loads(lines[1])
        hp = HyperParams.from_dict(header["hyperparams"], "hyperparams")
        model = build_network(hp, header["input_cols"], header["output_dim"], header["seed"])
    except (KeyError, TypeError, ValueError) as e:
        raise ModelFileError(f"invalid model header: {e}") from e

    payload = lines[2:]
    expected = [(name, layer) for name, layer in model.named_layers() if layer.trainable]
    if len(payload) != len(expected):
        raise ModelFileError(f"expected {len(expected)} weight arrays, found {len(payload)}")

    for line, (name, layer) in zip(payload, expected):
        tokens = line.split(" ")
        size = layer.n_parameters
        if tokens[0] != name:
            raise ModelFileError(f"expected weight array {name}, found {tokens[0]}")
        if len(tokens) < 2 or tokens[1] != str(size) or len(tokens) - 2 != size:
            raise ModelFileError(f"weight array {name} has wrong length (expected {size} values)")
        try:
            values = np.array([float(token) for token in tokens[2:]], dtype=np.float64)
        except ValueError as e:
            raise ModelFileError(f"weight array {name} holds a non-numeric value") from e
        if not np.all(np.isfinite(values)):
            raise ModelFileError(f"weight array {name} holds a non-finite value")
        split = layer.weights.size
        layer.weights = values[:split].reshape(layer.weights.shape)
        layer.bias = values[split:]

    if sha256_text("\n".join(payload)) != header.get("checksum"):
        raise ModelFileError("checksum mismatch: weight payload is corrupted")

    if header.get("trained_sample_range"):
        model.trained_sample_range = tuple(header["trained_sample_range"])
    model.metadata = header.get("metadata") or {}
    return model


def load_model(path: str) -> NetworkModel:
    """Read a model file written by save_model."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
        model = model_from_text(text)
        logger.info(f"Model loaded from {path}")
        return model
    except Exception as e:
        logger.error(f"Failed to load model from {path}: {e}")
        raise
