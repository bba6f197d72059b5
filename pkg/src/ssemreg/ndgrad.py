"""Minimal deterministic reverse-mode autodiff over numpy arrays.

The computation graph is a DAG of :class:`Tensor` nodes. Leaves are created
with :func:`tensor`; every op returns a fresh node holding the forward value,
references to its inputs, and a closure that maps an upstream gradient to
per-input gradients (a vector-Jacobian product). :func:`backward` runs a
reverse topological sweep, accumulating gradients by addition over fan-out
and skipping branches that cannot reach a requested leaf.

Conventions:
  * float32 storage by default; reductions accumulate in float64 before
    casting back to the operand dtype
  * ops never promote dtypes on their own, so a graph built on float64
    leaves evaluates end to end in float64 (used by :func:`grad_check`)
  * 4-D tensors are (batch, channel, row, col); sample coordinates are
    (row, col) pixel positions
  * every op is a pure function and single-threaded: identical inputs give
    bit-identical outputs
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "sum_sq",
    "relu",
    "conv2d",
    "transposed_conv2d",
    "grid_sample",
    "bilinear_resize",
    "spatial_gradient",
    "reshape",
    "take_channel",
    "stack_last",
    "apply_matrix",
    "backward",
    "grad_check",
    "GradCheckReport",
]

# vjp(upstream, needed) -> one gradient per parent; entries for parents whose
# `needed` flag is False may be None (they are never propagated).
VjpFn = Callable[[np.ndarray, tuple], tuple]


class Tensor:
    """One node of the op graph: a value plus how it was produced.

    Non-leaf nodes keep the op name, their input nodes and a vjp closure
    (which captures whatever forward values the backward pass needs).
    """

    __slots__ = ("data", "parents", "op", "name", "_vjp")

    def __init__(self, data, parents=(), vjp=None, op=None, name=None):
        self.data = data
        self.parents = tuple(parents)
        self._vjp = vjp
        self.op = op
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        kind = self.op or "leaf"
        return f"Tensor({kind}, shape={tuple(self.data.shape)}, dtype={self.data.dtype})"

    # arithmetic sugar; all semantics live in the module-level functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, dtype=np.float32, name=None) -> Tensor:
    """Create a leaf node. The array is copied so the leaf owns its buffer."""
    arr = np.array(data, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in tensor {name or '(unnamed)'}")
    return Tensor(arr, (), None, op="leaf", name=name)


def _require_tensor(t, what):
    if not isinstance(t, Tensor):
        raise TypeError(f"{what} must be a Tensor, got {type(t).__name__}")


def _require_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _require_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    """Elementwise a + b; b may be a same-shape Tensor or a scalar."""
    _require_tensor(a, "add input")
    if isinstance(b, Tensor):
        _require_same_shape(a, b, "add")
        return Tensor(a.data + b.data, (a, b), lambda g, need: (g, g), op="add")
    off = float(b)
    return Tensor(a.data + off, (a,), lambda g, need: (g,), op="add")


def sub(a: Tensor, b) -> Tensor:
    """Elementwise a - b; b may be a same-shape Tensor or a scalar."""
    _require_tensor(a, "sub input")
    if isinstance(b, Tensor):
        _require_same_shape(a, b, "sub")
        return Tensor(a.data - b.data, (a, b), lambda g, need: (g, -g), op="sub")
    off = float(b)
    return Tensor(a.data - off, (a,), lambda g, need: (g,), op="sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    _require_tensor(a, "mul input")
    _require_tensor(b, "mul input")
    _require_same_shape(a, b, "mul")

    def vjp(g, need):
        ga = g * b.data if need[0] else None
        gb = g * a.data if need[1] else None
        return ga, gb

    return Tensor(a.data * b.data, (a, b), vjp, op="mul")


def scale(a: Tensor, s) -> Tensor:
    """Multiply by a python scalar."""
    _require_tensor(a, "scale input")
    s = float(s)
    return Tensor(a.data * s, (a,), lambda g, need: (g * s,), op="scale")


def sum_sq(a: Tensor) -> Tensor:
    """Sum of squared entries as a 0-d tensor (float64 accumulation)."""
    _require_tensor(a, "sum_sq input")
    total = np.sum(np.square(a.data, dtype=np.float64))
    out = np.asarray(total, dtype=a.data.dtype)

    def vjp(g, need):
        return (2.0 * float(g) * a.data,)

    return Tensor(out, (a,), vjp, op="sum_sq")


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the gradient at exactly 0 is 0."""
    _require_tensor(a, "relu input")
    mask = a.data > 0
    out = np.where(mask, a.data, a.data.dtype.type(0))

    def vjp(g, need):
        return (g * mask,)

    return Tensor(out, (a,), vjp, op="relu")


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(h, w, kh, kw, stride, padding):
    """Output extents and (top, bottom, left, right) pads for one conv."""
    if padding == "valid":
        if kh > h or kw > w:
            raise ValueError(f"kernel {kh}x{kw} larger than input {h}x{w} with valid padding")
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        pads = (0, 0, 0, 0)
    elif padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    else:
        raise ValueError(f"unknown padding {padding!r} (expected 'same' or 'valid')")
    return oh, ow, pads


def _pad4(x, pads):
    pt, pb, pl, pr = pads
    if pt or pb or pl or pr:
        return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    return x


def _im2col(xp, kh, kw, stride, oh, ow):
    """(B,C,Hp,Wp) -> (B*oh*ow, C*kh*kw) patch matrix (one copy, then GEMM)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = np.ascontiguousarray(np.moveaxis(win, 1, 3))  # (B,oh,ow,C,kh,kw)
    b = xp.shape[0]
    return cols.reshape(b * oh * ow, -1)


def _conv_forward(x, k, stride, padding):
    b, c, h, w = x.shape
    kc, ck, kh, kw = k.shape
    oh, ow, pads = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = _pad4(x, pads)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    kmat = k.reshape(kc, -1).astype(np.result_type(x.dtype, k.dtype), copy=False)
    out = cols @ kmat.T  # (B*oh*ow, K)
    return np.ascontiguousarray(np.moveaxis(out.reshape(b, oh, ow, kc), 3, 1))


def _conv_input_grad(gy, k, stride, padding, x_shape):
    """Adjoint of _conv_forward w.r.t. the input; also the transposed-conv forward."""
    b, c, h, w = x_shape
    kc, ck, kh, kw = k.shape
    oh, ow, pads = _conv_geometry(h, w, kh, kw, stride, padding)
    if gy.shape[2] != oh or gy.shape[3] != ow:
        raise ValueError(f"gradient extents {gy.shape[2:]} do not match conv output {(oh, ow)}")
    pt, pb, pl, pr = pads
    out_dtype = np.result_type(gy.dtype, k.dtype)
    gy_mat = np.ascontiguousarray(np.moveaxis(gy, 1, 3)).reshape(b * oh * ow, kc)
    kmat = k.reshape(kc, -1).astype(out_dtype, copy=False)
    cols = gy_mat @ kmat  # (B*oh*ow, C*kh*kw)
    patches = np.moveaxis(cols.reshape(b, oh, ow, c, kh, kw), 3, 1)  # view ok
    gxp = np.zeros((b, c, h + pt + pb, w + pl + pr), dtype=out_dtype)
    for u in range(kh):
        for v in range(kw):
            gxp[:, :, u : u + stride * (oh - 1) + 1 : stride, v : v + stride * (ow - 1) + 1 : stride] += patches[..., u, v]
    if pt or pb or pl or pr:
        return np.ascontiguousarray(gxp[:, :, pt : pt + h, pl : pl + w])
    return gxp


def _conv_kernel_grad(gy, x, stride, padding, k_shape):
    b, c, h, w = x.shape
    kc, ck, kh, kw = k_shape
    oh, ow, pads = _conv_geometry(h, w, kh, kw, stride, padding)
    xp = _pad4(x, pads)
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    gy_mat = np.ascontiguousarray(np.moveaxis(gy, 1, 3)).reshape(b * oh * ow, kc)
    gk = gy_mat.T @ cols  # (K, C*kh*kw)
    return gk.reshape(k_shape).astype(np.result_type(gy.dtype, x.dtype), copy=False)


def _check_conv_args(x, kernels, stride, padding, transposed=False):
    _require_tensor(x, "conv input")
    _require_tensor(kernels, "conv kernels")
    if x.data.ndim != 4:
        raise ValueError(f"conv input must be 4-D (B,C,H,W), got shape {x.data.shape}")
    if kernels.data.ndim != 4:
        raise ValueError(f"conv kernels must be 4-D (K,C,kh,kw), got shape {kernels.data.shape}")
    if not isinstance(stride, int) or stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride!r}")
    chan_axis = 0 if transposed else 1
    if x.data.shape[1] != kernels.data.shape[chan_axis]:
        raise ValueError(
            f"channel mismatch: input has {x.data.shape[1]}, kernels expect {kernels.data.shape[chan_axis]}"
        )
    _require_finite(x.data, "conv input")
    _require_finite(kernels.data, "conv kernels")


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Correlate (B,C,H,W) with kernels (K,C,kh,kw).

    'same' padding zero-pads so output extents are ceil(extent/stride)
    (asymmetric pads go on the bottom/right); 'valid' keeps only fully
    covered windows. Differentiable w.r.t. input and kernels.
    """
    _check_conv_args(x, kernels, stride, padding)
    y = _conv_forward(x.data, kernels.data, stride, padding)

    def vjp(g, need):
        gx = _conv_input_grad(g, kernels.data, stride, padding, x.data.shape) if need[0] else None
        gk = _conv_kernel_grad(g, x.data, stride, padding, kernels.data.shape) if need[1] else None
        return gx, gk

    return Tensor(y, (x, kernels), vjp, op="conv2d")


def transposed_conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Linear adjoint of :func:`conv2d` with the same kernels/stride/padding.

    Input (B,K,h,w) with kernels (K,C,kh,kw) yields (B,C,H,W) where
    H = h*stride for 'same' and H = (h-1)*stride + kh for 'valid'.
    """
    _check_conv_args(x, kernels, stride, padding, transposed=True)
    b, kc, h, w = x.data.shape
    _, c, kh, kw = kernels.data.shape
    if padding == "same":
        oh, ow = h * stride, w * stride
    elif padding == "valid":
        oh, ow = (h - 1) * stride + kh, (w - 1) * stride + kw
    else:
        raise ValueError(f"unknown padding {padding!r}")
    out_shape = (b, c, oh, ow)
    y = _conv_input_grad(x.data, kernels.data, stride, padding, out_shape)

    def vjp(g, need):
        gx = _conv_forward(g, kernels.data, stride, padding) if need[0] else None
        gk = _conv_kernel_grad(x.data, g, stride, padding, kernels.data.shape) if need[1] else None
        return gx, gk

    return Tensor(y, (x, kernels), vjp, op="transposed_conv2d")


# ---------------------------------------------------------------------------
# sampling and resizing


def grid_sample(image: Tensor, coords: Tensor) -> Tensor:
    """Bilinear sampling of `image` at (row, col) positions.

    `image` is (C,H,W) or (H,W); `coords` is (H',W',2). Pixels outside
    [0,H-1] x [0,W-1] read as zero: each out-of-range corner contributes
    nothing, so values fade linearly to zero across the one-pixel border
    band. Differentiable w.r.t. both inputs (on integer lattice lines the
    coordinate gradient is the right-hand subderivative).
    """
    _require_tensor(image, "grid_sample image")
    _require_tensor(coords, "grid_sample coords")
    img = image.data
    squeeze = img.ndim == 2
    img3 = img[None] if squeeze else img
    if img3.ndim != 3:
        raise ValueError(f"image must be (C,H,W) or (H,W), got shape {img.shape}")
    crd = coords.data
    if crd.ndim != 3 or crd.shape[-1] != 2:
        raise ValueError(f"coords must be (H',W',2), got shape {crd.shape}")
    _require_finite(crd, "grid_sample coords")

    ch, h, w = img3.shape
    r = crd[..., 0]
    c = crd[..., 1]
    r0 = np.floor(r)
    c0 = np.floor(c)
    fr = r - r0
    fc = c - c0
    r0i = r0.astype(np.int64)
    c0i = c0.astype(np.int64)
    r1i = r0i + 1
    c1i = c0i + 1

    def corner(ri, ci):
        ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        vals = img3[:, np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)] * ok
        return vals, ok

    g00, ok00 = corner(r0i, c0i)
    g01, ok01 = corner(r0i, c1i)
    g10, ok10 = corner(r1i, c0i)
    g11, ok11 = corner(r1i, c1i)
    w00 = (1.0 - fr) * (1.0 - fc)
    w01 = (1.0 - fr) * fc
    w10 = fr * (1.0 - fc)
    w11 = fr * fc
    out3 = g00 * w00 + g01 * w01 + g10 * w10 + g11 * w11
    out3 = out3.astype(np.result_type(img3.dtype, crd.dtype), copy=False)

    def vjp(g, need):
        g3 = g[None] if squeeze else g
        gi = None
        if need[0]:
            acc = np.zeros((ch, h * w), dtype=np.float64)
            for wgt, ri, ci, ok in (
                (w00, r0i, c0i, ok00),
                (w01, r0i, c1i, ok01),
                (w10, r1i, c0i, ok10),
                (w11, r1i, c1i, ok11),
            ):
                idx = (np.clip(ri, 0, h - 1) * w + np.clip(ci, 0, w - 1)).ravel()
                contrib = (g3 * (wgt * ok)).reshape(ch, -1)
                for k in range(ch):
                    acc[k] += np.bincount(idx, weights=contrib[k], minlength=h * w)
            gi = acc.reshape(img3.shape).astype(img3.dtype, copy=False)
            if squeeze:
                gi = gi[0]
        gc = None
        if need[1]:
            dr = (1.0 - fc) * (g10 - g00) + fc * (g11 - g01)
            dc = (1.0 - fr) * (g01 - g00) + fr * (g11 - g10)
            gr_plane = np.sum(g3 * dr, axis=0)
            gc_plane = np.sum(g3 * dc, axis=0)
            gc = np.stack((gr_plane, gc_plane), axis=-1).astype(crd.dtype, copy=False)
        return gi, gc

    out = out3[0] if squeeze else out3
    return Tensor(out, (image, coords), vjp, op="grid_sample")


def _resize_coords(src_h, src_w, dst_h, dst_w, dtype):
    rows = np.linspace(0.0, src_h - 1.0, dst_h, dtype=dtype) if dst_h > 1 else np.zeros(1, dtype=dtype)
    cols = np.linspace(0.0, src_w - 1.0, dst_w, dtype=dtype) if dst_w > 1 else np.zeros(1, dtype=dtype)
    coords = np.empty((dst_h, dst_w, 2), dtype=dtype)
    coords[..., 0] = rows[:, None]
    coords[..., 1] = cols[None, :]
    return coords


def bilinear_resize(x: Tensor, size) -> Tensor:
    """Align-corners bilinear resampling of (H,W) or (C,H,W) to `size`.

    Corner pixels map to corner pixels, so resizing to the source size is
    the identity. Differentiable w.r.t. the input.
    """
    _require_tensor(x, "bilinear_resize input")
    th, tw = int(size[0]), int(size[1])
    if th < 1 or tw < 1:
        raise ValueError(f"target extents must be >= 1, got {(th, tw)}")
    src_h, src_w = x.data.shape[-2], x.data.shape[-1]
    coords = _resize_coords(src_h, src_w, th, tw, x.data.dtype)
    return grid_sample(x, Tensor(coords, (), None, op="leaf"))


def spatial_gradient(field: Tensor):
    """Forward differences of a (H,W) field along rows and columns.

    The last row/column of each difference image is zero (replicated-edge
    convention). Returns (d_row, d_col); both are differentiable.
    """
    _require_tensor(field, "spatial_gradient input")
    f = field.data
    if f.ndim != 2 or f.shape[0] < 2 or f.shape[1] < 2:
        raise ValueError(f"spatial_gradient needs a (H,W) grid with H,W >= 2, got shape {f.shape}")

    dr = np.zeros_like(f)
    dr[:-1, :] = f[1:, :] - f[:-1, :]
    dc = np.zeros_like(f)
    dc[:, :-1] = f[:, 1:] - f[:, :-1]

    def vjp_r(g, need):
        gx = np.zeros_like(f)
        gx[1:, :] += g[:-1, :]
        gx[:-1, :] -= g[:-1, :]
        return (gx,)

    def vjp_c(g, need):
        gx = np.zeros_like(f)
        gx[:, 1:] += g[:, :-1]
        gx[:, :-1] -= g[:, :-1]
        return (gx,)

    return (
        Tensor(dr, (field,), vjp_r, op="spatial_gradient_row"),
        Tensor(dc, (field,), vjp_c, op="spatial_gradient_col"),
    )


# ---------------------------------------------------------------------------
# structural ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = np.reshape(x.data, shape)
    src = x.data.shape
    return Tensor(out, (x,), lambda g, need: (np.reshape(g, src),), op="reshape")


def take_channel(x: Tensor, index: int) -> Tensor:
    """Select one component along the last axis (e.g. a displacement channel)."""
    _require_tensor(x, "take_channel input")
    n = x.data.shape[-1]
    if not 0 <= index < n:
        raise ValueError(f"channel index {index} out of range for last axis of size {n}")
    out = np.ascontiguousarray(x.data[..., index])

    def vjp(g, need):
        gx = np.zeros_like(x.data)
        gx[..., index] = g
        return (gx,)

    return Tensor(out, (x,), vjp, op="take_channel")


def stack_last(a: Tensor, b: Tensor) -> Tensor:
    """Stack two same-shape tensors along a new trailing axis."""
    _require_tensor(a, "stack_last input")
    _require_tensor(b, "stack_last input")
    _require_same_shape(a, b, "stack_last")
    out = np.stack((a.data, b.data), axis=-1)

    def vjp(g, need):
        ga = np.ascontiguousarray(g[..., 0]) if need[0] else None
        gb = np.ascontiguousarray(g[..., 1]) if need[1] else None
        return ga, gb

    return Tensor(out, (a, b), vjp, op="stack_last")


def apply_matrix(matrix: np.ndarray, x: Tensor, out_shape) -> Tensor:
    """Fixed linear map: (matrix @ x.ravel()).reshape(out_shape).

    The matrix is a constant (cast to the input dtype); gradients flow only
    into `x`. Used for interpolation schemes that are linear in their
    control values.
    """
    _require_tensor(x, "apply_matrix input")
    m = np.asarray(matrix)
    flat = x.data.reshape(-1)
    if m.ndim != 2 or m.shape[1] != flat.shape[0]:
        raise ValueError(f"matrix shape {m.shape} incompatible with input of {flat.shape[0]} entries")
    m = m.astype(x.data.dtype, copy=False)
    out_shape = tuple(int(s) for s in out_shape)
    y = (m @ flat).reshape(out_shape)

    def vjp(g, need):
        return ((g.reshape(-1) @ m).reshape(x.data.shape),)

    return Tensor(y, (x,), vjp, op="apply_matrix")


# ---------------------------------------------------------------------------
# backward sweep


def _toposort(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def backward(loss: Tensor, wrt: Sequence[Tensor]) -> dict:
    """Gradients of a scalar loss w.r.t. the given leaves.

    Gradients accumulate by addition over fan-out. A leaf the loss does not
    depend on gets a zero gradient of its own shape. Returns a dict keyed by
    leaf identity.
    """
    _require_tensor(loss, "backward loss")
    if np.ndim(loss.data) != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {np.shape(loss.data)}")
    wrt = list(wrt)
    wrt_ids = {id(t) for t in wrt}

    topo = _toposort(loss)
    needed = {}
    for node in topo:
        needed[id(node)] = id(node) in wrt_ids or any(needed[id(p)] for p in node.parents)

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    if needed[id(loss)]:
        for node in reversed(topo):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            need = tuple(needed[id(p)] for p in node.parents)
            if not any(need):
                continue
            for p, pg in zip(node.parents, node._vjp(g, need)):
                if pg is None or not needed[id(p)]:
                    continue
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg
            if id(node) not in wrt_ids:
                del grads[id(node)]

    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in wrt}


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Result of one analytic-vs-numeric gradient comparison."""

    max_rel_error: float
    grad_scale: float
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def grad_check(build, leaf_value, eps: float = 1e-3, tolerance: float = 1e-4,
               sample: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare the analytic gradient of ``build(leaf)`` against central
    finite differences, both evaluated on a float64 shadow of the graph.

    `build` must be pure: it receives a leaf Tensor and returns a scalar
    loss node. `sample` limits probing to a deterministic random subset of
    leaf entries. The error is max |analytic - numeric| normalized by the
    largest gradient magnitude seen, so near-zero entries do not blow up
    the ratio.
    """
    base = np.array(leaf_value.data if isinstance(leaf_value, Tensor) else leaf_value, dtype=np.float64)
    leaf = Tensor(base.copy(), (), None, op="leaf")
    loss = build(leaf)
    _require_tensor(loss, "grad_check loss")
    if np.ndim(loss.data) != 0:
        raise ValueError("grad_check expects the builder to return a scalar loss")
    analytic = backward(loss, [leaf])[leaf]

    n = base.size
    idxs = np.arange(n)
    if sample is not None and sample < n:
        rng = np.random.default_rng(seed)
        idxs = np.sort(rng.choice(n, size=sample, replace=False))

    numeric = np.zeros(len(idxs))
    work = base.copy()
    for j, i in enumerate(idxs):
        orig = work.flat[i]
        work.flat[i] = orig + eps
        f_plus = float(build(Tensor(work.copy(), (), None, op="leaf")).data)
        work.flat[i] = orig - eps
        f_minus = float(build(Tensor(work.copy(), (), None, op="leaf")).data)
        work.flat[i] = orig
        numeric[j] = (f_plus - f_minus) / (2.0 * eps)

    a = analytic.ravel()[idxs]
    denom = max(float(np.max(np.abs(numeric))) if len(idxs) else 0.0,
                float(np.max(np.abs(a))) if len(idxs) else 0.0,
                1e-12)
    err = float(np.max(np.abs(a - numeric))) / denom if len(idxs) else 0.0
    return GradCheckReport(err, denom, len(idxs), tolerance)
