"""Small CNN classifiers with logits and penultimate-representation access.

Architectures are plain conv/pool stacks with a single dense head; the
representation layer is the flattened activation feeding that head.  No
normalization layers: forward passes are stateless and attack gradients
are exact.  Inputs are raw pixels in [0, 1].
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from . import tensor as T
from .util import rng_for

CHECKPOINT_MAGIC = b"XFERCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    """Checksum does not validate the payload."""


class UnsupportedVersionError(CheckpointError):
    """Format version unknown to this build."""


class TruncatedCheckpointError(CheckpointError):
    """File ends before the declared payload/checksum."""


@dataclass(frozen=True)
class Layer:
    kind: str  # conv | maxpool | avgpool | flatten | dense
    channels: int = 0  # conv out-channels / dense units
    kernel: int = 0  # conv kernel / pool window
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor; shapes are validated at construction time."""

    name: str
    input_shape: Tuple[int, int, int]  # (C, H, W)
    class_count: int
    layers: Tuple[Layer, ...]

    def __post_init__(self):
        self.shapes()  # validates composition

    def shapes(self):
        """Per-layer output shapes; raises on the first non-composing layer."""
        if not self.layers:
            raise ValueError(f"arch {self.name!r}: empty layer list")
        c, h, w = self.input_shape
        out = []
        flat: Optional[int] = None
        dense_seen = 0
        for i, ly in enumerate(self.layers):
            where = f"arch {self.name!r} layer {i} ({ly.kind})"
            if ly.kind == "conv":
                if flat is not None:
                    raise ValueError(f"{where}: conv after flatten")
                h2 = (h + 2 * ly.padding - ly.kernel) // ly.stride + 1
                w2 = (w + 2 * ly.padding - ly.kernel) // ly.stride + 1
                if h2 < 1 or w2 < 1:
                    raise ValueError(f"{where}: kernel {ly.kernel} does not fit {h}x{w}")
                c, h, w = ly.channels, h2, w2
            elif ly.kind in ("maxpool", "avgpool"):
                if flat is not None:
                    raise ValueError(f"{where}: pool after flatten")
                stride = ly.stride if ly.stride > 1 else ly.kernel
                if h < ly.kernel or w < ly.kernel:
                    raise ValueError(f"{where}: window {ly.kernel} does not fit {h}x{w}")
                h, w = (h - ly.kernel) // stride + 1, (w - ly.kernel) // stride + 1
            elif ly.kind == "flatten":
                flat = c * h * w
            elif ly.kind == "dense":
                if flat is None:
                    raise ValueError(f"{where}: dense before flatten")
                flat = ly.channels
                dense_seen += 1
            else:
                raise ValueError(f"{where}: unknown layer kind")
            out.append((c, h, w) if flat is None else (flat,))
        if self.layers[-1].kind != "dense" or flat != self.class_count:
            raise ValueError(
                f"arch {self.name!r}: final layer must be dense with {self.class_count} units"
            )
        if dense_seen != 1:
            raise ValueError(f"arch {self.name!r}: exactly one dense head expected")
        return out

    @property
    def representation_dim(self) -> int:
        # activation feeding the dense head (the penultimate layer)
        return int(np.prod(self.shapes()[-2]))

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "layers": [
                {
                    "kind": l.kind,
                    "channels": l.channels,
                    "kernel": l.kernel,
                    "stride": l.stride,
                    "padding": l.padding,
                }
                for l in self.layers
            ],
        }

    @staticmethod
    def from_json(obj: dict) -> "ArchSpec":
        return ArchSpec(
            name=obj["name"],
            input_shape=tuple(obj["input_shape"]),
            class_count=int(obj["class_count"]),
            layers=tuple(Layer(**l) for l in obj["layers"]),
        )


@dataclass(frozen=True)
class Provenance:
    epsilon_l2: float = 0.0
    seed: int = 0
    epochs: int = 0

    def __post_init__(self):
        if self.epsilon_l2 < 0:
            raise ValueError("provenance epsilon_l2 must be >= 0")


@dataclass
class Classifier:
    arch: ArchSpec
    params: Dict[str, np.ndarray]
    provenance: Provenance = field(default_factory=Provenance)

    @property
    def input_shape(self):
        return self.arch.input_shape

    def with_params(self, params) -> "Classifier":
        return Classifier(self.arch, params, self.provenance)

    def with_provenance(self, prov: Provenance) -> "Classifier":
        return Classifier(self.arch, self.params, prov)

    def tag(self) -> str:
        p = self.provenance
        return f"{self.arch.name}_eps{p.epsilon_l2:g}_s{p.seed}"


# ---------------------------------------------------------------------------
# shipped architectures: structurally distinct so source != destination
# experiments are meaningful
# ---------------------------------------------------------------------------


def _conv(ch, k=3, stride=1, padding=1):
    return Layer("conv", channels=ch, kernel=k, stride=stride, padding=padding)


def arch_a(input_shape=(3, 32, 32), class_count=10) -> ArchSpec:
    """4-conv stack with max pooling, 192-d representation."""
    return ArchSpec(
        "A",
        input_shape,
        class_count,
        (
            _conv(12), Layer("maxpool", kernel=2),
            _conv(24), Layer("maxpool", kernel=2),
            _conv(36), Layer("maxpool", kernel=2),
            _conv(48), Layer("maxpool", kernel=2),
            Layer("flatten"),
            Layer("dense", channels=class_count),
        ),
    )


def arch_b(input_shape=(3, 32, 32), class_count=10) -> ArchSpec:
    """Deeper 5-conv stack with average pooling, 576-d representation."""
    return ArchSpec(
        "B",
        input_shape,
        class_count,
        (
            _conv(12), Layer("avgpool", kernel=2),
            _conv(24), _conv(24), Layer("avgpool", kernel=2),
            _conv(36), _conv(36), Layer("avgpool", kernel=2),
            Layer("flatten"),
            Layer("dense", channels=class_count),
        ),
    )


def arch_c(input_shape=(3, 32, 32), class_count=10) -> ArchSpec:
    """Compact 2-conv net with 5x5 kernels and a strided stem."""
    return ArchSpec(
        "C",
        input_shape,
        class_count,
        (
            _conv(12, k=5, stride=2, padding=2), Layer("maxpool", kernel=2),
            _conv(24, k=5, stride=1, padding=2), Layer("maxpool", kernel=2),
            Layer("flatten"),
            Layer("dense", channels=class_count),
        ),
    )


def standard_archs(input_shape=(3, 32, 32), class_count=10) -> Dict[str, ArchSpec]:
    return {
        "A": arch_a(input_shape, class_count),
        "B": arch_b(input_shape, class_count),
        "C": arch_c(input_shape, class_count),
    }


# ---------------------------------------------------------------------------
# parameter initialization and forward passes
# ---------------------------------------------------------------------------


def build_classifier(arch: ArchSpec, seed: int) -> Classifier:
    """He-uniform (fan-in scaled) initialization, deterministic per (arch, seed)."""
    rng = rng_for(seed, 0xA11C)
    params: Dict[str, np.ndarray] = {}
    c, h, w = arch.input_shape
    in_features = None
    for i, ly in enumerate(arch.layers):
        if ly.kind == "conv":
            fan_in = c * ly.kernel * ly.kernel
            bound = np.sqrt(6.0 / fan_in)
            params[f"layer{i}.w"] = rng.uniform(
                -bound, bound, (ly.channels, c, ly.kernel, ly.kernel)
            ).astype(np.float32)
            params[f"layer{i}.b"] = np.zeros(ly.channels, dtype=np.float32)
            c = ly.channels
            h = (h + 2 * ly.padding - ly.kernel) // ly.stride + 1
            w = (w + 2 * ly.padding - ly.kernel) // ly.stride + 1
        elif ly.kind in ("maxpool", "avgpool"):
            stride = ly.stride if ly.stride > 1 else ly.kernel
            h, w = (h - ly.kernel) // stride + 1, (w - ly.kernel) // stride + 1
        elif ly.kind == "flatten":
            in_features = c * h * w
        elif ly.kind == "dense":
            bound = np.sqrt(6.0 / in_features)
            params[f"layer{i}.w"] = rng.uniform(
                -bound, bound, (ly.channels, in_features)
            ).astype(np.float32)
            params[f"layer{i}.b"] = np.zeros(ly.channels, dtype=np.float32)
            in_features = ly.channels
    return Classifier(arch, params, Provenance(seed=seed))


def build_network(
    classifier: Classifier, batch: T.Tensor, trainable: bool = False
):
    """Run the forward graph for a batch tensor.

    Returns (logits, representation, param_tensors).  With trainable=True
    parameters become graph variables (their gradients are computed);
    otherwise they enter as constants and backward only reaches the batch.
    """
    arch = classifier.arch
    expected = arch.input_shape
    if batch.values.ndim != 4 or tuple(batch.shape[1:]) != expected:
        raise T.ShapeError(
            f"forward: batch shape {batch.shape} does not match arch input "
            f"(N, {expected[0]}, {expected[1]}, {expected[2]})"
        )
    graph = batch.graph
    param_tensors: Dict[str, T.Tensor] = {}

    def param(name):
        arr = classifier.params[name]
        t = graph.variable(arr) if (trainable and graph is not None) else T.tensor(arr)
        param_tensors[name] = t
        return t

    x = batch
    rep = None
    for i, ly in enumerate(arch.layers):
        if ly.kind == "conv":
            x = T.relu(
                T.conv2d(x, param(f"layer{i}.w"), param(f"layer{i}.b"),
                         stride=ly.stride, padding=ly.padding)
            )
        elif ly.kind == "maxpool":
            x = T.maxpool2d(x, ly.kernel, ly.stride if ly.stride > 1 else None)
        elif ly.kind == "avgpool":
            x = T.avgpool2d(x, ly.kernel, ly.stride if ly.stride > 1 else None)
        elif ly.kind == "flatten":
            x = T.flatten(x)
        elif ly.kind == "dense":
            rep = x  # activation feeding the dense head
            x = T.dense(x, param(f"layer{i}.w"), param(f"layer{i}.b"))
    return x, rep, param_tensors


def forward_logits(classifier: Classifier, batch) -> T.Tensor:
    """Logits (N x class_count); differentiable w.r.t. a graph-attached batch."""
    if not isinstance(batch, T.Tensor):
        batch = T.tensor(batch)
    logits, _, _ = build_network(classifier, batch)
    return logits


def forward_representation(classifier: Classifier, batch) -> T.Tensor:
    """Penultimate-layer activations (N x representation_dim)."""
    if not isinstance(batch, T.Tensor):
        batch = T.tensor(batch)
    _, rep, _ = build_network(classifier, batch)
    return rep


def predict(classifier: Classifier, batch, batch_size: int = 256) -> np.ndarray:
    """Argmax classes for a raw ndarray batch; ties go to the lowest index."""
    batch = np.asarray(batch, dtype=np.float32)
    out = []
    for lo in range(0, batch.shape[0], batch_size):
        logits = forward_logits(classifier, batch[lo : lo + batch_size]).values
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# checkpoint persistence
# ---------------------------------------------------------------------------


def save_checkpoint(classifier: Classifier, path) -> None:
    """Versioned binary checkpoint; round trips bit-exactly."""
    header = {
        "arch": classifier.arch.to_json(),
        "provenance": {
            "epsilon_l2": classifier.provenance.epsilon_l2,
            "seed": classifier.provenance.seed,
            "epochs": classifier.provenance.epochs,
        },
        "tensors": [
            {"name": name, "shape": list(arr.shape)}
            for name, arr in sorted(classifier.params.items())
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(arr, dtype=np.float32).astype("<f4").tobytes()
        for _, arr in sorted(classifier.params.items())
    )
    body = struct.pack("<I", len(header_bytes)) + header_bytes + payload
    checksum = struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(body)
        fh.write(checksum)


def load_checkpoint(path) -> Classifier:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 2 + 4 + 4:
        raise TruncatedCheckpointError(f"{path}: file too short to be a checkpoint")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<H", blob, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported format version {version}")
    body, checksum = blob[len(CHECKPOINT_MAGIC) + 2 : -4], blob[-4:]
    if struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF) != checksum:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    (header_len,) = struct.unpack_from("<I", body, 0)
    if len(body) < 4 + header_len:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    header = json.loads(body[4 : 4 + header_len].decode("utf-8"))
    arch = ArchSpec.from_json(header["arch"])
    prov = Provenance(**header["provenance"])
    params: Dict[str, np.ndarray] = {}
    offset = 4 + header_len
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(body):
            raise TruncatedCheckpointError(f"{path}: truncated payload at {entry['name']}")
        params[entry["name"]] = (
            np.frombuffer(body[offset : offset + nbytes], dtype="<f4")
            .reshape(shape)
            .astype(np.float32)
        )
        offset += nbytes
    if offset != len(body):
        raise CorruptCheckpointError(f"{path}: {len(body) - offset} trailing payload bytes")
    return Classifier(arch, params, prov)
