"""Dense tensor engine with reverse-mode automatic differentiation.

Covers exactly the operations the attack and training pipelines need:
convolution, dense layers, relu, pooling, bilinear resizing, the scalar
losses, and the image-space plumbing (flip, crop/pad) required to make
randomized input transforms differentiable.

Conventions:
  - images are NCHW, row-major
  - storage is float32; reductions and convolutions accumulate in float64
    and round back (a float64 graph exists for numerical oracles only)
  - graphs are define-by-run tapes, rebuilt on every forward pass
  - tensors are immutable values; a graph belongs to a single thread
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operation inputs do not conform."""


class GraphError(RuntimeError):
    """Raised on invalid graph usage (mixed graphs, non-scalar seed)."""


def _as_array(values, dtype) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    # ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d
    return np.ascontiguousarray(arr) if arr.ndim > 0 else arr


class _Record:
    """One operation on the tape: op kind, input node ids, saved forward data."""

    __slots__ = ("op", "inputs", "saved", "shape")

    def __init__(self, op, inputs, saved, shape):
        self.op = op
        self.inputs = inputs
        self.saved = saved
        self.shape = shape


class Graph:
    """Define-by-run tape. One forward pass owns one graph."""

    def __init__(self, dtype=np.float32):
        if dtype not in (np.float32, np.float64):
            raise ValueError("graph dtype must be float32 or float64")
        self.dtype = dtype
        self.records: list[_Record] = []

    def variable(self, values) -> "Tensor":
        """Register a leaf tensor that participates in differentiation."""
        arr = _as_array(values, self.dtype)
        rec = _Record("leaf", (), {}, arr.shape)
        self.records.append(rec)
        return Tensor(arr, self, len(self.records) - 1)

    def _emit(self, op, values, inputs, saved) -> "Tensor":
        arr = _as_array(values, self.dtype)
        self.records.append(_Record(op, inputs, saved, arr.shape))
        return Tensor(arr, self, len(self.records) - 1)


@dataclass(frozen=True)
class Tensor:
    """N-dimensional float array, optionally attached to a computation graph.

    `node` is the handle into the owning graph's tape; it is None for
    constants, which do not receive gradients.
    """

    values: np.ndarray
    graph: Optional[Graph] = None
    node: Optional[int] = None

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])


def tensor(values, dtype=np.float32) -> Tensor:
    """Wrap an array as a constant tensor (no graph participation)."""
    return Tensor(_as_array(values, dtype))


def _as_pair(inputs: Sequence[Tensor | np.ndarray], op: str):
    """Coerce op inputs: find the common graph and cast constants to its dtype."""
    graph = None
    for t in inputs:
        if isinstance(t, Tensor) and t.graph is not None:
            if graph is None:
                graph = t.graph
            elif graph is not t.graph:
                raise GraphError(f"{op}: inputs belong to different graphs")
    dtype = graph.dtype if graph is not None else np.float32
    out = []
    for t in inputs:
        if isinstance(t, Tensor):
            vals = t.values.astype(dtype, copy=False)
            out.append(Tensor(vals, t.graph, t.node))
        else:
            out.append(Tensor(_as_array(t, dtype)))
    return graph, out


def _emit(graph: Optional[Graph], op, values, input_nodes, saved) -> Tensor:
    if graph is None:
        return Tensor(_as_array(values, np.float32))
    return graph._emit(op, values, input_nodes, saved)


def _mm(a: np.ndarray, b: np.ndarray, dtype) -> np.ndarray:
    # Matrix products accumulate in float64 regardless of storage dtype.
    out = a.astype(np.float64, copy=False) @ b.astype(np.float64, copy=False)
    return out.astype(dtype)


# ---------------------------------------------------------------------------
# backward rules, registered per op kind
# ---------------------------------------------------------------------------

_BACKWARD: Dict[str, Callable] = {}


def _rule(op):
    def deco(fn):
        _BACKWARD[op] = fn
        return fn

    return deco


def backward(seed: Tensor) -> Dict[int, Tensor]:
    """Reverse-mode sweep from a scalar seed.

    Returns a gradient map: node id -> gradient tensor (same shape as the
    node), for every node reachable from the seed.
    """
    if seed.graph is None or seed.node is None:
        raise GraphError("backward: seed is a constant (not attached to a graph)")
    if seed.values.size != 1:
        raise GraphError(f"backward: seed must be scalar, got shape {seed.shape}")
    graph = seed.graph
    dtype = graph.dtype
    grads: list[Optional[np.ndarray]] = [None] * len(graph.records)
    grads[seed.node] = np.ones(graph.records[seed.node].shape, dtype=dtype)
    for nid in range(seed.node, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        rec = graph.records[nid]
        if rec.op == "leaf":
            continue
        for input_node, contribution in _BACKWARD[rec.op](rec, g, dtype):
            if input_node is None:
                continue
            if grads[input_node] is None:
                grads[input_node] = np.zeros(graph.records[input_node].shape, dtype=dtype)
            grads[input_node] += contribution
    return {
        nid: Tensor(g) for nid, g in enumerate(grads) if g is not None
    }


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def relu(x) -> Tensor:
    graph, (x,) = _as_pair([x], "relu")
    out = np.maximum(x.values, 0)
    saved = {"mask": x.values > 0}  # subgradient at 0 is 0
    return _emit(graph, "relu", out, (x.node,), saved)


@_rule("relu")
def _relu_bwd(rec, g, dtype):
    return [(rec.inputs[0], g * rec.saved["mask"])]


def add(a, b) -> Tensor:
    graph, (a, b) = _as_pair([a, b], "add")
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return _emit(graph, "add", a.values + b.values, (a.node, b.node), {})


@_rule("add")
def _add_bwd(rec, g, dtype):
    return [(rec.inputs[0], g), (rec.inputs[1], g)]


def scale(x, c: float) -> Tensor:
    graph, (x,) = _as_pair([x], "scale")
    c = float(c)
    return _emit(graph, "scale", x.values * c, (x.node,), {"c": c})


@_rule("scale")
def _scale_bwd(rec, g, dtype):
    return [(rec.inputs[0], g * rec.saved["c"])]


def flatten(x) -> Tensor:
    graph, (x,) = _as_pair([x], "flatten")
    if x.values.ndim < 1:
        raise ShapeError("flatten: scalar input")
    tail = int(np.prod(x.shape[1:], dtype=np.int64))
    out = x.values.reshape(x.shape[0], tail)
    return _emit(graph, "flatten", out, (x.node,), {"shape": x.shape})


@_rule("flatten")
def _flatten_bwd(rec, g, dtype):
    return [(rec.inputs[0], g.reshape(rec.saved["shape"]))]


def flip_horizontal(x) -> Tensor:
    """Reverse the last (width) axis; gradient flows through the flip."""
    graph, (x,) = _as_pair([x], "flip_horizontal")
    return _emit(graph, "flip_horizontal", x.values[..., ::-1], (x.node,), {})


@_rule("flip_horizontal")
def _flip_bwd(rec, g, dtype):
    return [(rec.inputs[0], np.ascontiguousarray(g[..., ::-1]))]


def crop_or_pad(x, out_h: int, out_w: int, dy: int, dx: int) -> Tensor:
    """Place an NCHW image into a zero canvas of (out_h, out_w).

    out[i, j] = x[i - dy, j - dx] where in range, else 0.  Positive offsets
    pad, negative offsets crop; gradient routes back to the visible region.
    """
    graph, (x,) = _as_pair([x], "crop_or_pad")
    if x.values.ndim != 4:
        raise ShapeError(f"crop_or_pad: expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    o_y0, o_y1 = max(0, dy), min(out_h, h + dy)
    o_x0, o_x1 = max(0, dx), min(out_w, w + dx)
    out = np.zeros((n, c, out_h, out_w), dtype=x.values.dtype)
    region = None
    if o_y0 < o_y1 and o_x0 < o_x1:
        region = (o_y0, o_y1, o_x0, o_x1, o_y0 - dy, o_x0 - dx)
        out[:, :, o_y0:o_y1, o_x0:o_x1] = x.values[
            :, :, o_y0 - dy : o_y1 - dy, o_x0 - dx : o_x1 - dx
        ]
    saved = {"in_shape": x.shape, "region": region}
    return _emit(graph, "crop_or_pad", out, (x.node,), saved)


@_rule("crop_or_pad")
def _crop_or_pad_bwd(rec, g, dtype):
    dx_arr = np.zeros(rec.saved["in_shape"], dtype=dtype)
    region = rec.saved["region"]
    if region is not None:
        o_y0, o_y1, o_x0, o_x1, i_y0, i_x0 = region
        dx_arr[:, :, i_y0 : i_y0 + (o_y1 - o_y0), i_x0 : i_x0 + (o_x1 - o_x0)] = g[
            :, :, o_y0:o_y1, o_x0:o_x1
        ]
    return [(rec.inputs[0], dx_arr)]


# ---------------------------------------------------------------------------
# dense and convolution
# ---------------------------------------------------------------------------


def dense(x, w, b=None) -> Tensor:
    """Affine map: x (N, in) @ w (out, in)^T + b (out,)."""
    graph, coerced = _as_pair([x, w] + ([b] if b is not None else []), "dense")
    x, w = coerced[0], coerced[1]
    b = coerced[2] if b is not None else None
    if x.values.ndim != 2 or w.values.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias {b.shape} incompatible with weight {w.shape}")
    dtype = x.values.dtype
    x64 = x.values.astype(np.float64)
    out = _mm(x64, w.values.T, dtype)
    if b is not None:
        out = out + b.values
    saved = {"x": x64, "w": w.values, "has_bias": b is not None}
    nodes = (x.node, w.node) + ((b.node,) if b is not None else ())
    return _emit(graph, "dense", out, nodes, saved)


@_rule("dense")
def _dense_bwd(rec, g, dtype):
    x, w = rec.saved["x"], rec.saved["w"]
    contributions = []
    if rec.inputs[0] is not None:
        contributions.append((rec.inputs[0], _mm(g, w, dtype)))
    if rec.inputs[1] is not None:
        contributions.append((rec.inputs[1], _mm(g.T, x, dtype)))
    if rec.saved["has_bias"] and rec.inputs[2] is not None:
        contributions.append((rec.inputs[2], g.sum(axis=0, dtype=np.float64).astype(dtype)))
    return contributions


def _windows(x_pad: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Sliding windows view (N, C, OH, OW, k, k) over padded NCHW input."""
    n, c, h, w = x_pad.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2, s3 = x_pad.strides
    return np.lib.stride_tricks.as_strided(
        x_pad,
        shape=(n, c, oh, ow, k, k),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2d convolution (cross-correlation), x NCHW, w (F, C, k, k)."""
    graph, coerced = _as_pair([x, w] + ([b] if b is not None else []), "conv2d")
    x, w = coerced[0], coerced[1]
    b = coerced[2] if b is not None else None
    if x.values.ndim != 4 or w.values.ndim != 4:
        raise ShapeError(f"conv2d: need NCHW input and FCkk weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c or kh != kw:
        raise ShapeError(f"conv2d: weight {w.shape} incompatible with input {x.shape}")
    k = kh
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {x.shape}")
    if b is not None and b.shape != (f,):
        raise ShapeError(f"conv2d: bias {b.shape} incompatible with weight {w.shape}")
    dtype = x.values.dtype
    x_pad = (
        np.pad(x.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if padding
        else x.values
    )
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    # (N, OH, OW, C*k*k) columns; one matmul against the flattened kernels.
    # Stored in float64 so forward and backward accumulate at full width
    # without re-casting.
    cols = _windows(x_pad, k, stride).transpose(0, 2, 3, 1, 4, 5).astype(np.float64)
    cols = cols.reshape(n * oh * ow, c * k * k)
    out = _mm(cols, w.values.reshape(f, -1).T, dtype)
    if b is not None:
        out = out + b.values
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    saved = {
        "cols": cols,
        "w": w.values,
        "meta": (n, c, h, wd, f, k, stride, padding, oh, ow),
        "has_bias": b is not None,
    }
    nodes = (x.node, w.node) + ((b.node,) if b is not None else ())
    return _emit(graph, "conv2d", out, nodes, saved)


@_rule("conv2d")
def _conv2d_bwd(rec, g, dtype):
    cols, w = rec.saved["cols"], rec.saved["w"]
    n, c, h, wd, f, k, stride, padding, oh, ow = rec.saved["meta"]
    g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, f).astype(np.float64)
    contributions = []
    if rec.inputs[0] is not None:
        dcols = _mm(g2, w.reshape(f, -1), dtype).reshape(n, oh, ow, c, k, k)
        dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # (N, C, k, k, OH, OW)
        dx_pad = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=dtype)
        for i in range(k):
            for j in range(k):
                dx_pad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                    :, :, i, j
                ]
        dx = dx_pad[:, :, padding : padding + h, padding : padding + wd] if padding else dx_pad
        contributions.append((rec.inputs[0], np.ascontiguousarray(dx)))
    if rec.inputs[1] is not None:
        contributions.append((rec.inputs[1], _mm(g2.T, cols, dtype).reshape(f, c, k, k)))
    if rec.saved["has_bias"] and rec.inputs[2] is not None:
        contributions.append((rec.inputs[2], g2.sum(axis=0).astype(dtype)))
    return contributions


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def _check_pool(x, size, stride, op):
    if x.values.ndim != 4:
        raise ShapeError(f"{op}: expected NCHW input, got shape {x.shape}")
    stride = stride or size
    n, c, h, w = x.shape
    if h < size or w < size:
        raise ShapeError(f"{op}: window {size} larger than input {x.shape}")
    return stride


def maxpool2d(x, size: int, stride: Optional[int] = None) -> Tensor:
    """Max pooling; ties broken by first index in row-major window order."""
    graph, (x,) = _as_pair([x], "maxpool2d")
    stride = _check_pool(x, size, stride, "maxpool2d")
    win = _windows(x.values, size, stride)
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, size * size)
    arg = flat.argmax(axis=-1)  # first maximum wins
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    saved = {"arg": arg, "meta": (x.shape, size, stride, oh, ow)}
    return _emit(graph, "maxpool2d", out, (x.node,), saved)


@_rule("maxpool2d")
def _maxpool_bwd(rec, g, dtype):
    (in_shape, size, stride, oh, ow) = rec.saved["meta"]
    n, c, h, w = in_shape
    arg = rec.saved["arg"]
    if stride == size and oh * size == h and ow * size == w:
        # non-overlapping windows tile the input: scatter without add.at
        win = np.zeros((n, c, oh, ow, size * size), dtype=dtype)
        np.put_along_axis(win, arg[..., None], g[..., None], axis=-1)
        dx = (
            win.reshape(n, c, oh, ow, size, size)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(in_shape)
        )
        return [(rec.inputs[0], np.ascontiguousarray(dx))]
    dx = np.zeros(in_shape, dtype=dtype)
    oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    rows = oy[None, None] * stride + arg // size
    cols = ox[None, None] * stride + arg % size
    ns = np.arange(n)[:, None, None, None]
    cs = np.arange(c)[None, :, None, None]
    np.add.at(dx, (ns, cs, rows, cols), g)
    return [(rec.inputs[0], dx)]


def avgpool2d(x, size: int, stride: Optional[int] = None) -> Tensor:
    graph, (x,) = _as_pair([x], "avgpool2d")
    stride = _check_pool(x, size, stride, "avgpool2d")
    win = _windows(x.values, size, stride)
    out = win.mean(axis=(-1, -2), dtype=np.float64).astype(x.values.dtype)
    saved = {"meta": (x.shape, size, stride, out.shape[2], out.shape[3])}
    return _emit(graph, "avgpool2d", out, (x.node,), saved)


@_rule("avgpool2d")
def _avgpool_bwd(rec, g, dtype):
    (in_shape, size, stride, oh, ow) = rec.saved["meta"]
    dx = np.zeros(in_shape, dtype=dtype)
    share = g / (size * size)
    for i in range(size):
        for j in range(size):
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += share
    return [(rec.inputs[0], dx)]


# ---------------------------------------------------------------------------
# scalar heads
# ---------------------------------------------------------------------------


def l2_distance(a, b) -> Tensor:
    """Euclidean distance between two same-shape tensors (scalar output).

    The gradient at coincident inputs is defined as zero.
    """
    graph, (a, b) = _as_pair([a, b], "l2_distance")
    if a.shape != b.shape:
        raise ShapeError(f"l2_distance: shapes {a.shape} and {b.shape} differ")
    diff = a.values.astype(np.float64) - b.values.astype(np.float64)
    dist = math.sqrt(float(np.sum(diff * diff)))
    saved = {"diff": diff, "dist": dist}
    return _emit(graph, "l2_distance", np.asarray(dist), (a.node, b.node), saved)


@_rule("l2_distance")
def _l2_bwd(rec, g, dtype):
    dist = rec.saved["dist"]
    if dist == 0.0:
        unit = np.zeros_like(rec.saved["diff"])
    else:
        unit = rec.saved["diff"] / dist
    da = (float(g) * unit).astype(dtype)
    return [(rec.inputs[0], da), (rec.inputs[1], -da)]


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    graph, (logits,) = _as_pair([logits], "softmax_cross_entropy")
    if logits.values.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (N, K) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"softmax_cross_entropy: {n} rows but {labels.shape[0]} labels")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ShapeError(f"softmax_cross_entropy: labels out of range for {k} classes")
    z = logits.values.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    p = np.exp(z - lse[:, None])
    saved = {"p": p, "labels": labels, "n": n}
    return _emit(graph, "softmax_cross_entropy", np.asarray(loss), (logits.node,), saved)


@_rule("softmax_cross_entropy")
def _xent_bwd(rec, g, dtype):
    p, labels, n = rec.saved["p"], rec.saved["labels"], rec.saved["n"]
    dz = p.copy()
    dz[np.arange(n), labels] -= 1.0
    return [(rec.inputs[0], (float(g) / n * dz).astype(dtype))]


def pick_logit(logits, classes) -> Tensor:
    """Mean of the selected logit per row (scalar output)."""
    graph, (logits,) = _as_pair([logits], "pick_logit")
    if logits.values.ndim != 2:
        raise ShapeError(f"pick_logit: expected (N, K) logits, got {logits.shape}")
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if classes.shape[0] != n:
        raise ShapeError(f"pick_logit: {n} rows but {classes.shape[0]} class indices")
    if classes.min(initial=0) < 0 or classes.max(initial=0) >= k:
        raise ShapeError(f"pick_logit: class index out of range for {k} classes")
    out = float(np.mean(logits.values[np.arange(n), classes], dtype=np.float64))
    saved = {"classes": classes, "n": n, "k": k}
    return _emit(graph, "pick_logit", np.asarray(out), (logits.node,), saved)


@_rule("pick_logit")
def _pick_bwd(rec, g, dtype):
    classes, n, k = rec.saved["classes"], rec.saved["n"], rec.saved["k"]
    dz = np.zeros((n, k), dtype=dtype)
    dz[np.arange(n), classes] = float(g) / n
    return [(rec.inputs[0], dz)]


# ---------------------------------------------------------------------------
# bilinear resize
# ---------------------------------------------------------------------------


def _resize_axis_coords(in_size: int, out_size: int):
    # align-corners=false: source coordinate = (i + 0.5) * scale - 0.5
    scl = in_size / out_size
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * scl - 0.5
    src = np.clip(src, 0.0, in_size - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    return lo, hi, frac


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Differentiable bilinear resize of an NCHW image batch."""
    graph, (x,) = _as_pair([x], "bilinear_resize")
    if x.values.ndim != 4:
        raise ShapeError(f"bilinear_resize: expected NCHW input, got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output dims must be >= 1, got ({out_h}, {out_w})")
    n, c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        # identity resize stays bit-identical
        return _emit(graph, "bilinear_resize", x.values.copy(), (x.node,), {"identity": (h, w)})
    y0, y1, fy = _resize_axis_coords(h, out_h)
    x0, x1, fx = _resize_axis_coords(w, out_w)
    v = x.values.astype(np.float64)
    rows = v[:, :, y0, :] * (1.0 - fy)[None, None, :, None] + v[:, :, y1, :] * fy[None, None, :, None]
    out = rows[:, :, :, x0] * (1.0 - fx) + rows[:, :, :, x1] * fx
    saved = {"coords": (y0, y1, fy, x0, x1, fx), "in_shape": x.shape}
    return _emit(graph, "bilinear_resize", out, (x.node,), saved)


@_rule("bilinear_resize")
def _bilinear_bwd(rec, g, dtype):
    if "identity" in rec.saved:
        return [(rec.inputs[0], g.copy())]
    y0, y1, fy, x0, x1, fx = rec.saved["coords"]
    n, c, h, w = rec.saved["in_shape"]
    g64 = g.astype(np.float64)
    # undo the column mix, then the row mix (scatter-adds are sequential)
    drows = np.zeros((n, c, len(y0), w), dtype=np.float64)
    np.add.at(drows, (slice(None), slice(None), slice(None), x0), g64 * (1.0 - fx))
    np.add.at(drows, (slice(None), slice(None), slice(None), x1), g64 * fx)
    dx = np.zeros((n, c, h, w), dtype=np.float64)
    np.add.at(dx, (slice(None), slice(None), y0), drows * (1.0 - fy)[None, None, :, None])
    np.add.at(dx, (slice(None), slice(None), y1), drows * fy[None, None, :, None])
    return [(rec.inputs[0], dx.astype(dtype))]


# ---------------------------------------------------------------------------
# generic dispatcher
# ---------------------------------------------------------------------------

_OPS: Dict[str, Callable] = {
    "conv2d": conv2d,
    "dense": dense,
    "relu": relu,
    "avgpool2d": avgpool2d,
    "maxpool2d": maxpool2d,
    "flatten": flatten,
    "add": add,
    "scale": scale,
    "l2_distance": l2_distance,
    "softmax_cross_entropy": softmax_cross_entropy,
    "pick_logit": pick_logit,
    "bilinear_resize": bilinear_resize,
    "flip_horizontal": flip_horizontal,
    "crop_or_pad": crop_or_pad,
}


def forward(op_kind: str, *inputs, **params) -> Tensor:
    """Apply a named operation, recording it for the backward pass."""
    if op_kind not in _OPS:
        raise ShapeError(f"unknown op kind {op_kind!r}; supported: {sorted(_OPS)}")
    return _OPS[op_kind](*inputs, **params)


# ---------------------------------------------------------------------------
# Gaussian kernels and gradient smoothing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianKernel:
    """Normalized 2d Gaussian filter used to smooth attack gradients."""

    size: int
    sigma: float
    weights: np.ndarray


def gaussian_kernel(size: int, sigma: float) -> GaussianKernel:
    if size % 2 == 0 or size < 1:
        raise ValueError(f"gaussian_kernel: size must be odd and positive, got {size}")
    if sigma <= 0:
        raise ValueError(f"gaussian_kernel: sigma must be positive, got {sigma}")
    c = size // 2
    idx = np.arange(size, dtype=np.float64) - c
    sq = idx[:, None] ** 2 + idx[None, :] ** 2
    w = np.exp(-sq / (2.0 * sigma * sigma))
    w /= w.sum()
    return GaussianKernel(size, float(sigma), w.astype(np.float32))


def smooth_gradient(g, kernel: GaussianKernel):
    """Depthwise same-padding convolution of an image-shaped gradient.

    Zero padding: edges attenuate, interior mass is preserved.  Accepts an
    ndarray or a constant tensor and returns the same kind.
    """
    is_tensor = isinstance(g, Tensor)
    arr = g.values if is_tensor else np.asarray(g, dtype=np.float32)
    if arr.ndim not in (3, 4):
        raise ShapeError(f"smooth_gradient: expected CHW or NCHW, got shape {arr.shape}")
    squeeze = arr.ndim == 3
    if squeeze:
        arr = arr[None]
    k = kernel.size
    pad = k // 2
    padded = np.pad(arr.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    h, w = arr.shape[2], arr.shape[3]
    out = np.zeros_like(arr, dtype=np.float64)
    kw = kernel.weights.astype(np.float64)
    for i in range(k):
        for j in range(k):
            out += kw[i, j] * padded[:, :, i : i + h, j : j + w]
    out = out.astype(arr.dtype)
    if squeeze:
        out = out[0]
    return Tensor(out) if is_tensor else out


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_check(
    f: Callable[[Tensor], Tensor], x, h: float = 1e-3
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` maps a graph variable to a scalar tensor.  Evaluation runs on
    float64 graphs so the oracle is limited by truncation error, not by
    storage precision.  Error per coordinate is
    |analytic - central| / max(1e-8, |central|).
    """
    x = np.asarray(x, dtype=np.float64)
    g = Graph(dtype=np.float64)
    xt = g.variable(x)
    loss = f(xt)
    if loss.values.size != 1:
        raise GraphError("finite_difference_check: f must return a scalar")
    analytic = backward(loss)[xt.node].values.reshape(-1)

    def value_at(arr):
        gg = Graph(dtype=np.float64)
        return float(f(gg.variable(arr)).values)

    flat = x.reshape(-1)
    central = np.zeros_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        central[i] = (
            value_at((flat + bump).reshape(x.shape)) - value_at((flat - bump).reshape(x.shape))
        ) / (2.0 * h)
    denom = np.maximum(1e-8, np.abs(central))
    return float(np.max(np.abs(analytic - central) / denom))
