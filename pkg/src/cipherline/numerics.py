"""Minimal reverse-mode differentiable tensor core for the detector.

Covers exactly the layer set the network needs: 2-D convolution, 2x2 max
pooling, ReLU, fully connected, sigmoid, global average pooling, element-wise
multiply/subtract, ROI pooling, plus the loss kernels and a finite-difference
gradient-check harness. Data layout is (H, W, C) for feature maps and (N, D)
for fully connected activations. Not a general autodiff system.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import BBox

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "conv2d",
    "maxpool2",
    "relu",
    "fc",
    "sigmoid",
    "global_avg_pool",
    "elem_mul",
    "elem_sub",
    "roi_pool",
    "stack",
    "flatten",
    "reshape",
    "take_rows",
    "add",
    "scale",
    "tsum",
    "bce_with_logits",
    "smooth_l1",
    "he_uniform",
    "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class Tensor:
    """A value in the computation graph.

    Treated as immutable by callers; `grad` is populated by `backward()` on
    the nodes that require it.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accum(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from this (scalar) node."""
        if self.data.size != 1:
            raise ShapeError("backward", self.shape, "scalar")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        # iterative post-order topological sort
        while stack:
            node = stack.pop()
            if isinstance(node, tuple):
                order.append(node[0])
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node,))
            stack.extend(node._parents)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named learnable tensor; name is unique within a model."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(np.asarray(data), requires_grad=True)
        self.name = name

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# convolution / pooling


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    cin = xp.shape[2]
    cols = np.empty((ho, wo, kh, kw, cin), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j, :] = xp[i : i + ho * stride : stride, j : j + wo * stride : stride]
    return cols.reshape(ho * wo, kh * kw * cin)


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D convolution. x: (H, W, Cin); weights: (kh, kw, Cin, Cout); bias: (Cout,)."""
    if x.data.ndim != 3 or weights.data.ndim != 4:
        raise ShapeError("conv2d", x.shape, weights.shape)
    h, w, cin = x.shape
    kh, kw, wcin, cout = weights.shape
    if wcin != cin or bias.shape != (cout,):
        raise ShapeError("conv2d", x.shape, weights.shape, bias.shape)
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, (kh, kw))
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weights.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat + bias.data).reshape(ho, wo, cout)

    def bwd(g):
        gm = g.reshape(ho * wo, cout)
        if weights.requires_grad:
            weights._accum((cols.T @ gm).reshape(weights.shape))
        if bias.requires_grad:
            bias._accum(gm.sum(axis=0))
        if x.requires_grad:
            dcols = (gm @ wmat.T).reshape(ho, wo, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[i : i + ho * stride : stride, j : j + wo * stride : stride] += dcols[:, :, i, j, :]
            if padding:
                dxp = dxp[padding:-padding, padding:-padding]
            x._accum(dxp)

    return Tensor(out, parents=(x, weights, bias), backward_fn=bwd)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; trailing odd row/col is dropped."""
    if x.data.ndim != 3:
        raise ShapeError("maxpool2", x.shape)
    h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ShapeError("maxpool2", x.shape)
    win = (
        x.data[: h2 * 2, : w2 * 2]
        .reshape(h2, 2, w2, 2, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(h2, w2, 4, c)
    )
    idx = win.argmax(axis=2)
    out = np.take_along_axis(win, idx[:, :, None, :], axis=2)[:, :, 0, :]

    def bwd(g):
        if not x.requires_grad:
            return
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, idx[:, :, None, :], g[:, :, None, :], axis=2)
        dx = np.zeros_like(x.data)
        dx[: h2 * 2, : w2 * 2] = (
            dwin.reshape(h2, w2, 2, 2, c).transpose(0, 2, 1, 3, 4).reshape(h2 * 2, w2 * 2, c)
        )
        x._accum(dx)

    return Tensor(out, parents=(x,), backward_fn=bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g):
        if x.requires_grad:
            x._accum(g * (x.data > 0))

    return Tensor(out, parents=(x,), backward_fn=bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    # keep the open interval (0, 1) even where exp saturates
    tiny = np.finfo(out.dtype).tiny
    eps = np.finfo(out.dtype).eps
    np.clip(out, tiny, 1.0 - eps, out=out)

    def bwd(g):
        if x.requires_grad:
            x._accum(g * out * (1.0 - out))

    return Tensor(out, parents=(x,), backward_fn=bwd)


def fc(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer. x: (N, D) or (D,); weights: (D, M); bias: (M,)."""
    xd = x.data
    if xd.ndim == 1:
        xd = xd[None, :]
    d, m = weights.shape
    if xd.shape[1] != d or bias.shape != (m,):
        raise ShapeError("fc", x.shape, weights.shape, bias.shape)
    out = xd @ weights.data + bias.data
    if x.data.ndim == 1:
        out = out[0]

    def bwd(g):
        gm = g[None, :] if g.ndim == 1 else g
        if weights.requires_grad:
            weights._accum(xd.T @ gm)
        if bias.requires_grad:
            bias._accum(gm.sum(axis=0))
        if x.requires_grad:
            dx = gm @ weights.data.T
            x._accum(dx[0] if x.data.ndim == 1 else dx)

    return Tensor(out, parents=(x, weights, bias), backward_fn=bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial extent; (H, W, C) -> (1, 1, C)."""
    if x.data.ndim != 3:
        raise ShapeError("global_avg_pool", x.shape)
    h, w, c = x.shape
    out = x.data.mean(axis=(0, 1), keepdims=True)

    def bwd(g):
        if x.requires_grad:
            x._accum(np.broadcast_to(g / (h * w), x.shape))

    return Tensor(out, parents=(x,), backward_fn=bwd)


def elem_mul(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise product; b may be (1, 1, C) broadcast over a's (H, W, C)."""
    if a.data.ndim != b.data.ndim or a.shape[-1] != b.shape[-1]:
        raise ShapeError("elem_mul", a.shape, b.shape)
    for sa, sb in zip(a.shape, b.shape):
        if sb != sa and sb != 1:
            raise ShapeError("elem_mul", a.shape, b.shape)
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            gb = g * a.data
            axes = tuple(i for i, (sa, sb) in enumerate(zip(a.shape, b.shape)) if sb == 1 and sa != 1)
            if axes:
                gb = gb.sum(axis=axes, keepdims=True)
            b._accum(gb)

    return Tensor(out, parents=(a, b), backward_fn=bwd)


def elem_sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("elem_sub", a.shape, b.shape)
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    return Tensor(out, parents=(a, b), backward_fn=bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return Tensor(out, parents=(a, b), backward_fn=bwd)


def scale(x: Tensor, k: float) -> Tensor:
    out = x.data * k

    def bwd(g):
        if x.requires_grad:
            x._accum(g * k)

    return Tensor(out, parents=(x,), backward_fn=bwd)


def tsum(x: Tensor) -> Tensor:
    out = x.data.sum()

    def bwd(g):
        if x.requires_grad:
            x._accum(np.broadcast_to(g, x.shape))

    return Tensor(out, parents=(x,), backward_fn=bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            x._accum(g.reshape(x.shape))

    return Tensor(out, parents=(x,), backward_fn=bwd)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows along the leading axis; rows may repeat."""
    idx = np.asarray(indices, dtype=np.intp)
    out = x.data[idx]

    def bwd(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            np.add.at(dx, idx, g)
            x._accum(dx)

    return Tensor(out, parents=(x,), backward_fn=bwd)


def flatten(x: Tensor) -> Tensor:
    out = x.data.reshape(-1)

    def bwd(g):
        if x.requires_grad:
            x._accum(g.reshape(x.shape))

    return Tensor(out, parents=(x,), backward_fn=bwd)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not tensors:
        raise ShapeError("stack", "empty")
    shape0 = tensors[0].shape
    for t in tensors:
        if t.shape != shape0:
            raise ShapeError("stack", shape0, t.shape)
    out = np.stack([t.data for t in tensors])

    def bwd(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accum(g[i])

    return Tensor(out, parents=tuple(tensors), backward_fn=bwd)


# ---------------------------------------------------------------------------
# ROI pooling


def _roi_bins(start: int, count: int, out: int) -> list[tuple[int, int]]:
    # floor partition: consecutive bins tile [start, start+count) exactly
    return [
        (start + (i * count) // out, start + ((i + 1) * count) // out)
        for i in range(out)
    ]


def roi_pool(feat: Tensor, box: BBox, out: int = 7) -> Tensor:
    """Quantized max ROI pooling of `box` (feature coordinates) to out x out x C.

    The box is snapped outward to whole cells; each output bin takes the max
    over its cells, empty bins emit 0, and gradients route to argmax cells.
    """
    if feat.data.ndim != 3:
        raise ShapeError("roi_pool", feat.shape)
    h, w, c = feat.shape
    x1 = max(0, int(math.floor(box.x1)))
    y1 = max(0, int(math.floor(box.y1)))
    x2 = min(w, int(math.ceil(box.x2)))
    y2 = min(h, int(math.ceil(box.y2)))
    nw, nh = x2 - x1, y2 - y1
    if nw < 1 or nh < 1:
        raise ValueError(f"roi_pool: box degenerate after clipping to {w}x{h}: {box}")
    xbins = _roi_bins(x1, nw, out)
    ybins = _roi_bins(y1, nh, out)
    pooled = np.zeros((out, out, c), dtype=feat.dtype)
    argmax: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, int, int]] = {}
    for bi, (ys, ye) in enumerate(ybins):
        for bj, (xs, xe) in enumerate(xbins):
            if ye <= ys or xe <= xs:
                continue
            patch = feat.data[ys:ye, xs:xe, :].reshape(-1, c)
            am = patch.argmax(axis=0)
            pooled[bi, bj] = patch[am, np.arange(c)]
            rows = ys + am // (xe - xs)
            cols = xs + am % (xe - xs)
            argmax[(bi, bj)] = (rows, cols)

    def bwd(g):
        if not feat.requires_grad:
            return
        df = np.zeros_like(feat.data)
        ch = np.arange(c)
        for (bi, bj), (rows, cols) in argmax.items():
            np.add.at(df, (rows, cols, ch), g[bi, bj])
        feat._accum(df)

    return Tensor(pooled, parents=(feat,), backward_fn=bwd)


# ---------------------------------------------------------------------------
# loss kernels


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 labels."""
    z = logits.data
    y = np.asarray(labels, dtype=z.dtype)
    if y.shape != z.shape:
        raise ShapeError("bce_with_logits", z.shape, y.shape)
    # log(1+exp(z)) computed stably
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = max(z.size, 1)
    out = loss.sum() / n

    def bwd(g):
        if logits.requires_grad:
            p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-z)), np.exp(z) / (1.0 + np.exp(z)))
            logits._accum(g * (p - y) / n)

    return Tensor(np.asarray(out), parents=(logits,), backward_fn=bwd)


def smooth_l1(pred: Tensor, target: np.ndarray, beta: float = 1.0) -> Tensor:
    """Mean smooth-L1 (Huber) loss."""
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError("smooth_l1", pred.shape, t.shape)
    d = pred.data - t
    ad = np.abs(d)
    loss = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = max(d.size, 1)
    out = loss.sum() / n

    def bwd(g):
        if pred.requires_grad:
            pred._accum(g * np.where(ad < beta, d / beta, np.sign(d)) / n)

    return Tensor(np.asarray(out), parents=(pred,), backward_fn=bwd)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckEntry:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-3,
    samples_per_param: int = 5,
    rng: np.random.Generator | None = None,
    max_samples: int | None = None,
) -> GradCheckReport:
    """Compare analytic parameter gradients against central finite differences.

    `loss_fn` must rebuild the forward pass from the current parameter values
    on every call. Parameters should be 64-bit for meaningful results.
    """
    rng = rng or np.random.default_rng(0)
    if not params:
        return GradCheckReport()
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"grad_check: non-finite loss {loss.data}")
    loss.backward()
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}

    coords: list[tuple[Parameter, tuple]] = []
    for p in params:
        n = min(samples_per_param, p.data.size)
        flat_idx = rng.choice(p.data.size, size=n, replace=False)
        for fi in flat_idx:
            coords.append((p, np.unravel_index(fi, p.data.shape)))
    if max_samples is not None and len(coords) > max_samples:
        keep = rng.choice(len(coords), size=max_samples, replace=False)
        coords = [coords[i] for i in sorted(keep)]

    report = GradCheckReport()
    for p, idx in coords:
        orig = p.data[idx]
        p.data[idx] = orig + h
        lp = float(loss_fn().data)
        p.data[idx] = orig - h
        lm = float(loss_fn().data)
        p.data[idx] = orig
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise FloatingPointError("grad_check: non-finite loss during perturbation")
        numeric = (lp - lm) / (2 * h)
        ana = float(analytic[p.name][idx])
        denom = max(abs(ana) + abs(numeric), 1e-8)
        report.entries.append(GradCheckEntry(p.name, idx, ana, numeric, abs(ana - numeric) / denom))
    return report
