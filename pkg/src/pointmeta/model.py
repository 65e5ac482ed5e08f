"""Compact PointNet-style network for per-point semantic labels.

A block of P points with 9 features each goes through a shared per-point
MLP, a second per-point MLP whose output is max-pooled into a single global
feature, and a segmentation head applied to [local, global] per point.
An optional T-Net predicts a 3x3 transform for the raw XYZ columns before
any of that.  No batch normalization anywhere: every forward is a pure
function of (params, block), which keeps per-task gradient adaptation a
plain gradient step.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    ParamStore,
    Tensor,
    broadcast_to,
    concat_cols,
    matmul,
    max_over_points,
    permute_rows,
    relu,
    reshape,
    slice_cols,
)
from .errors import ConfigError, DimensionError

CHECKPOINT_MAGIC = "PMCKPT"
CHECKPOINT_VERSION = 1

# internal widths of the 3x3 input-transform regressor
TNET_MLP_WIDTHS = (32, 64)
TNET_FC_WIDTHS = (32,)


@dataclass(frozen=True)
class PointNetConfig:
    num_classes: int
    input_dim: int = 9
    mlp1_widths: tuple[int, ...] = (64, 64)
    mlp2_widths: tuple[int, ...] = (64, 128, 256)
    seg_head_widths: tuple[int, ...] = (128, 64)
    use_tnet: bool = False
    points_per_block: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "mlp1_widths", tuple(self.mlp1_widths))
        object.__setattr__(self, "mlp2_widths", tuple(self.mlp2_widths))
        object.__setattr__(self, "seg_head_widths", tuple(self.seg_head_widths))
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_dim < 3:
            raise ConfigError(f"input_dim must be >= 3, got {self.input_dim}")
        if self.points_per_block < 1:
            raise ConfigError("points_per_block must be >= 1")
        for widths in (self.mlp1_widths, self.mlp2_widths, self.seg_head_widths):
            if not widths or any(w < 1 for w in widths):
                raise ConfigError(f"layer widths must all be >= 1, got {widths}")


def layer_shapes(config: PointNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Deterministic (name, shape) listing of every parameter.

    The main network comes first and the T-Net last, so toggling
    ``use_tnet`` does not change how the shared layers are initialized.
    """
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def dense(prefix, dims):
        fan_in = dims[0]
        for i, width in enumerate(dims[1:]):
            shapes.append((f"{prefix}.{i}.w", (fan_in, width)))
            shapes.append((f"{prefix}.{i}.b", (width,)))
            fan_in = width
        return fan_in

    local = dense("mlp1", (config.input_dim, *config.mlp1_widths))
    global_dim = dense("mlp2", (local, *config.mlp2_widths))
    head_in = local + global_dim
    head_out = dense("head", (head_in, *config.seg_head_widths))
    shapes.append(("out.w", (head_out, config.num_classes)))
    shapes.append(("out.b", (config.num_classes,)))

    if config.use_tnet:
        pooled = dense("tnet.mlp", (3, *TNET_MLP_WIDTHS))
        fc_out = dense("tnet.fc", (pooled, *TNET_FC_WIDTHS))
        shapes.append(("tnet.out.w", (fc_out, 9)))
        shapes.append(("tnet.out.b", (9,)))
    return shapes


def num_params(config: PointNetConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in layer_shapes(config))


def init_params(config: PointNetConfig, seed: int, dtype=np.float32) -> ParamStore:
    """Zero-mean uniform fan-in weights, zero biases, deterministic per seed.

    The T-Net output layer starts at zero weights with an identity bias so
    the predicted transform is exactly the identity at initialization.
    """
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in layer_shapes(config):
        if name == "tnet.out.w":
            arrays[name] = np.zeros(shape, dtype=dtype)
        elif name == "tnet.out.b":
            arrays[name] = np.eye(3, dtype=dtype).reshape(9)
        elif name.endswith(".b"):
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            # uniform fan-in bound with the relu gain, so activation scale
            # survives the depth of the shared MLP stack
            bound = np.sqrt(6.0 / shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ParamStore(arrays)


def _as_tensors(params) -> dict[str, Tensor]:
    if isinstance(params, ParamStore):
        return params.tensors()
    return params


def _dense_chain(tensors, prefix: str, n_layers: int, x: Tensor) -> Tensor:
    for i in range(n_layers):
        x = relu(matmul(x, tensors[f"{prefix}.{i}.w"]) + tensors[f"{prefix}.{i}.b"])
    return x


def tnet_transform(config: PointNetConfig, params, xyz) -> Tensor:
    """Apply the predicted 3x3 transform to [P, 3] coordinates."""
    if not config.use_tnet:
        raise ConfigError("tnet_transform called but use_tnet is disabled")
    tensors = _as_tensors(params)
    xyz = xyz if isinstance(xyz, Tensor) else Tensor(xyz)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise DimensionError(f"tnet_transform expects [P, 3] coordinates, got {xyz.shape}")
    h = _dense_chain(tensors, "tnet.mlp", len(TNET_MLP_WIDTHS), xyz)
    pooled, _ = max_over_points(h)
    h = reshape(pooled, (1, pooled.shape[0]))
    h = _dense_chain(tensors, "tnet.fc", len(TNET_FC_WIDTHS), h)
    matrix = reshape(matmul(h, tensors["tnet.out.w"]) + tensors["tnet.out.b"], (3, 3))
    return matmul(xyz, matrix)


def forward(config: PointNetConfig, params, features, return_pooled: bool = False):
    """Per-point class logits for one [P, input_dim] feature block.

    ``params`` may be a ParamStore or a name->Tensor mapping (as used inside
    adaptation, where parameters are themselves graph nodes).
    """
    tensors = _as_tensors(params)
    x = features if isinstance(features, Tensor) else Tensor(features)
    if x.ndim != 2 or x.shape[1] != config.input_dim:
        raise DimensionError(
            f"forward expects [P, {config.input_dim}] features, got {x.shape}"
        )
    if x.shape[0] < 1:
        raise DimensionError("forward needs at least one point")

    # run the pipeline in a canonical point order: BLAS matmul kernels are
    # not bit-stable under row permutation, so sorting the rows first makes
    # permutation equivariance exact instead of approximate
    order = np.lexsort(x.data.T[::-1])
    inverse = np.argsort(order)
    x = permute_rows(x, order)

    if config.use_tnet:
        xyz = tnet_transform(config, tensors, slice_cols(x, 0, 3))
        x = concat_cols(xyz, slice_cols(x, 3, config.input_dim))

    local = _dense_chain(tensors, "mlp1", len(config.mlp1_widths), x)
    deep = _dense_chain(tensors, "mlp2", len(config.mlp2_widths), local)
    pooled, _ = max_over_points(deep)
    global_feat = broadcast_to(reshape(pooled, (1, pooled.shape[0])), (x.shape[0], pooled.shape[0]))
    h = _dense_chain(tensors, "head", len(config.seg_head_widths), concat_cols(local, global_feat))
    logits = permute_rows(matmul(h, tensors["out.w"]) + tensors["out.b"], inverse)
    if return_pooled:
        return logits, pooled
    return logits


def predict_labels(logits) -> np.ndarray:
    """Argmax class per point; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)


# ---------------------------------------------------------------------------
# checkpoints: one text header line, a JSON header, then raw little-endian
# parameter bytes in header order.  Loading restores the exact bits.


def _dtype_code(dtype) -> str:
    return {np.dtype(np.float32): "float32", np.dtype(np.float64): "float64"}[np.dtype(dtype)]


def save_checkpoint(path, config: PointNetConfig, params: ParamStore) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": _dtype_code(params.dtype),
        "config": asdict(config),
        "params": [{"name": n, "shape": list(a.shape)} for n, a in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION} {len(blob)}\n".encode("ascii"))
        fh.write(blob)
        little = "<f4" if header["dtype"] == "float32" else "<f8"
        for _, array in params.items():
            fh.write(np.ascontiguousarray(array, dtype=little).tobytes())


def load_checkpoint(path) -> tuple[PointNetConfig, ParamStore]:
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii").split()
        if len(first) != 3 or first[0] != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        if first[1] != f"v{CHECKPOINT_VERSION}":
            raise ConfigError(f"{path}: unsupported checkpoint version {first[1]}")
        header = json.loads(fh.read(int(first[2])).decode("utf-8"))
        cfg = header["config"]
        cfg["mlp1_widths"] = tuple(cfg["mlp1_widths"])
        cfg["mlp2_widths"] = tuple(cfg["mlp2_widths"])
        cfg["seg_head_widths"] = tuple(cfg["seg_head_widths"])
        config = PointNetConfig(**cfg)
        little = "<f4" if header["dtype"] == "float32" else "<f8"
        itemsize = np.dtype(little).itemsize
        arrays = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * itemsize)
            if len(raw) != count * itemsize:
                raise ConfigError(f"{path}: truncated parameter data for {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=little).reshape(shape).astype(
                np.float32 if header["dtype"] == "float32" else np.float64
            )
    return config, ParamStore(arrays)
