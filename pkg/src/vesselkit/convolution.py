"""Full 3-D and cross-hair convolutions with zero padding.

Indexing is correlation style (no kernel flip): for a kernel of odd
dims ``(kx, ky, kz)`` with half-widths ``h = k // 2``::

    out[i, j, k] = sum_{r,s,t} x[i + r - hx, j + s - hy, k + t - hz] * w[r, s, t]

A cross-hair kernel replaces ``w`` by three planes through the centre:
``plane_i`` (``ky x kz``) acts inside constant-``i`` slices, ``plane_j``
(``kx x kz``) inside constant-``j`` slices and ``plane_k`` (``kx x ky``)
inside constant-``k`` slices.  Each plane response is scaled by its plane
weight ``(beta_c, beta_s, beta_a)``.

Single-channel operators (:func:`conv3d_reference`, :func:`crosshair_forward`)
accumulate shifted slices of one padded volume.  The multi-channel layer
functions turn every kernel tap into a constant offset in a flattened padded
grid and hand the sums to BLAS.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np

from vesselkit.volume import Volume3D

FULL3D = "full3d"
CROSSHAIR = "crosshair"
MODES = (FULL3D, CROSSHAIR)


def _odd_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"kernel dims must be three positive ints, got {dims}")
    if any(d % 2 == 0 for d in dims):
        raise ValueError(f"kernel dims must be odd, got {dims}")
    return dims


@dataclass(frozen=True)
class Kernel3D:
    """Dense kernel; ``weights[..., r, s, t]`` with optional leading (out, in) axes."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim < 3:
            raise ValueError("Kernel3D weights need at least 3 dims")
        _odd_dims(w.shape[-3:])
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel weights must be finite")
        if not np.issubdtype(w.dtype, np.floating):
            w = w.astype(np.float64)
        object.__setattr__(self, "weights", w)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.weights.shape[-3:])

    @property
    def grid(self) -> tuple[int, ...]:
        return tuple(self.weights.shape[:-3])

    @property
    def dtype(self):
        return self.weights.dtype

    def astype(self, dtype) -> "Kernel3D":
        return Kernel3D(self.weights.astype(dtype))


@dataclass(frozen=True)
class CrossHairKernel:
    """Three orthogonal 2-D planes approximating one 3-D kernel."""

    plane_i: np.ndarray
    plane_j: np.ndarray
    plane_k: np.ndarray
    plane_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        planes = [np.asarray(p) for p in (self.plane_i, self.plane_j, self.plane_k)]
        if any(p.ndim < 2 for p in planes):
            raise ValueError("cross-hair planes need at least 2 dims")
        pi, pj, pk = planes
        lead = pi.shape[:-2]
        if pj.shape[:-2] != lead or pk.shape[:-2] != lead:
            raise ValueError("cross-hair planes disagree on leading (out, in) axes")
        ky, kz = pi.shape[-2:]
        kx, kz2 = pj.shape[-2:]
        kx2, ky2 = pk.shape[-2:]
        if kz != kz2 or kx != kx2 or ky != ky2:
            raise ValueError(
                f"inconsistent plane shapes {pi.shape[-2:]}, {pj.shape[-2:]}, {pk.shape[-2:]}"
            )
        _odd_dims((kx, ky, kz))
        dtype = np.result_type(*planes)
        if not np.issubdtype(dtype, np.floating):
            dtype = np.float64
        planes = [p.astype(dtype, copy=False) for p in planes]
        if not all(np.all(np.isfinite(p)) for p in planes):
            raise ValueError("kernel weights must be finite")
        betas = tuple(float(b) for b in self.plane_weights)
        if len(betas) != 3:
            raise ValueError("plane_weights must have three entries")
        object.__setattr__(self, "plane_i", planes[0])
        object.__setattr__(self, "plane_j", planes[1])
        object.__setattr__(self, "plane_k", planes[2])
        object.__setattr__(self, "plane_weights", betas)

    @property
    def dims(self) -> tuple[int, int, int]:
        kx, ky = self.plane_k.shape[-2:]
        kz = self.plane_i.shape[-1]
        return (kx, ky, kz)

    @property
    def grid(self) -> tuple[int, ...]:
        return tuple(self.plane_i.shape[:-2])

    @property
    def planes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return (self.plane_i, self.plane_j, self.plane_k)

    @property
    def dtype(self):
        return self.plane_i.dtype

    def astype(self, dtype) -> "CrossHairKernel":
        return CrossHairKernel(*(p.astype(dtype) for p in self.planes), self.plane_weights)

    @classmethod
    def zeros(cls, dims, grid=(), dtype=np.float64, plane_weights=(1.0, 1.0, 1.0)):
        kx, ky, kz = _odd_dims(dims)
        grid = tuple(grid)
        return cls(
            np.zeros(grid + (ky, kz), dtype),
            np.zeros(grid + (kx, kz), dtype),
            np.zeros(grid + (kx, ky), dtype),
            plane_weights,
        )

    @classmethod
    def identity(cls, dims=(3, 3, 3), plane="i", dtype=np.float64):
        """Kernel whose only non-zero weight is the centre of one plane."""
        kern = cls.zeros(dims, dtype=dtype)
        p = {"i": kern.plane_i, "j": kern.plane_j, "k": kern.plane_k}[plane].copy()
        p[p.shape[0] // 2, p.shape[1] // 2] = 1.0
        planes = {"i": kern.plane_i, "j": kern.plane_j, "k": kern.plane_k}
        planes[plane] = p
        return cls(planes["i"], planes["j"], planes["k"])


AnyKernel = Union[Kernel3D, CrossHairKernel]


class OpCount(NamedTuple):
    multiplications: int
    additions: int


class InequalityCheck(NamedTuple):
    lhs: int
    mid: int
    rhs: int
    holds: bool
    strict_rhs: bool


@dataclass
class MultiplyCounter:
    """Tallies the element-wise multiplies and adds the reference operators execute."""

    multiplications: int = 0
    additions: int = 0

    def reset(self):
        self.multiplications = 0
        self.additions = 0


def op_count(dims, mode: str = FULL3D) -> OpCount:
    """Multiplications and additions per output voxel."""
    kx, ky, kz = (int(d) for d in dims)
    if min(kx, ky, kz) < 1:
        raise ValueError(f"kernel dims must be >= 1, got {dims}")
    if mode == FULL3D:
        m = kx * ky * kz
    elif mode == CROSSHAIR:
        m = ky * kz + kx * kz + kx * ky
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return OpCount(m, m - 1)


def check_inequality(dims) -> InequalityCheck:
    """Evaluate ``ky kz + kx kz + kx ky <= 3 k1 k2 <= kx ky kz`` (k1 >= k2 >= k3)."""
    kx, ky, kz = (int(d) for d in dims)
    k1, k2, _ = sorted((kx, ky, kz), reverse=True)
    lhs = ky * kz + kx * kz + kx * ky
    mid = 3 * k1 * k2
    rhs = kx * ky * kz
    return InequalityCheck(lhs, mid, rhs, lhs <= mid <= rhs, mid < rhs)


# ---------------------------------------------------------------------------
# single-channel operators
# ---------------------------------------------------------------------------


def _unwrap(vol) -> tuple[np.ndarray, Optional[tuple]]:
    if isinstance(vol, Volume3D):
        return vol.data, vol.spacing
    arr = np.asarray(vol)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got shape {arr.shape}")
    return arr, None


def _wrap(arr: np.ndarray, spacing):
    return arr if spacing is None else Volume3D(arr, spacing)


def _check_fits(shape, dims):
    for n, k in zip(shape, dims):
        if k > 2 * n:
            raise ValueError(f"kernel dims {dims} exceed twice the volume shape {shape}")


def _work_dtype(x, w, accumulate):
    if accumulate is not None:
        return np.dtype(accumulate)
    dt = np.result_type(x.dtype, w.dtype)
    return dt if np.issubdtype(dt, np.floating) else np.dtype(np.float64)


def conv3d_reference(vol, kern: Kernel3D, counter: Optional[MultiplyCounter] = None,
                     accumulate=None):
    """Full 3-D convolution, same-size output, zero padding outside the volume."""
    x, spacing = _unwrap(vol)
    if not isinstance(kern, Kernel3D) or kern.grid:
        raise TypeError("conv3d_reference expects a single Kernel3D")
    dims = kern.dims
    _check_fits(x.shape, dims)
    dt = _work_dtype(x, kern.weights, accumulate)
    w = kern.weights.astype(dt)
    hx, hy, hz = (d // 2 for d in dims)
    nx, ny, nz = x.shape
    xp = np.pad(x.astype(dt, copy=False), ((hx, hx), (hy, hy), (hz, hz)))
    out = None
    for r in range(dims[0]):
        for s in range(dims[1]):
            for t in range(dims[2]):
                term = w[r, s, t] * xp[r:r + nx, s:s + ny, t:t + nz]
                if counter is not None:
                    counter.multiplications += term.size
                if out is None:
                    out = term
                else:
                    out += term
                    if counter is not None:
                        counter.additions += term.size
    if spacing is not None:
        out = out.astype(np.float32)
    return _wrap(out, spacing)


def _plane_views(xp, shape, dims):
    """Yield (plane index, a, b, view) for every cross-hair tap."""
    nx, ny, nz = shape
    kx, ky, kz = dims
    hx, hy, hz = kx // 2, ky // 2, kz // 2
    for s in range(ky):
        for t in range(kz):
            yield 0, s, t, xp[hx:hx + nx, s:s + ny, t:t + nz]
    for r in range(kx):
        for t in range(kz):
            yield 1, r, t, xp[r:r + nx, hy:hy + ny, t:t + nz]
    for r in range(kx):
        for s in range(ky):
            yield 2, r, s, xp[r:r + nx, s:s + ny, hz:hz + nz]


def _padded_slices(shape, dims):
    """Same taps as :func:`_plane_views`, as slice tuples into the padded grid."""
    nx, ny, nz = shape
    kx, ky, kz = dims
    hx, hy, hz = kx // 2, ky // 2, kz // 2
    for s in range(ky):
        for t in range(kz):
            yield 0, s, t, (slice(hx, hx + nx), slice(s, s + ny), slice(t, t + nz))
    for r in range(kx):
        for t in range(kz):
            yield 1, r, t, (slice(r, r + nx), slice(hy, hy + ny), slice(t, t + nz))
    for r in range(kx):
        for s in range(ky):
            yield 2, r, s, (slice(r, r + nx), slice(s, s + ny), slice(hz, hz + nz))


def _single(kern: CrossHairKernel):
    if not isinstance(kern, CrossHairKernel) or kern.grid:
        raise TypeError("expected a single CrossHairKernel")


def crosshair_voxel(vol, kern: CrossHairKernel, at) -> float:
    """Scalar evaluation of the three-plane sum at one voxel (float64)."""
    _single(kern)
    x, _ = _unwrap(vol)
    i, j, k = (int(a) for a in at)
    nx, ny, nz = x.shape
    if not (0 <= i < nx and 0 <= j < ny and 0 <= k < nz):
        raise IndexError(f"voxel {(i, j, k)} outside volume of shape {x.shape}")
    kx, ky, kz = kern.dims
    hx, hy, hz = kx // 2, ky // 2, kz // 2

    def at_(R, S, T):
        if 0 <= R < nx and 0 <= S < ny and 0 <= T < nz:
            return float(x[R, S, T])
        return 0.0

    bc, bs, ba = kern.plane_weights
    a_i = 0.0
    for s in range(ky):
        for t in range(kz):
            a_i += at_(i, j + s - hy, k + t - hz) * float(kern.plane_i[s, t])
    a_j = 0.0
    for r in range(kx):
        for t in range(kz):
            a_j += at_(i + r - hx, j, k + t - hz) * float(kern.plane_j[r, t])
    a_k = 0.0
    for r in range(kx):
        for s in range(ky):
            a_k += at_(i + r - hx, j + s - hy, k) * float(kern.plane_k[r, s])
    return bc * a_i + bs * a_j + ba * a_k


def crosshair_forward(vol, kern: CrossHairKernel, counter: Optional[MultiplyCounter] = None,
                      accumulate=None):
    """Slice-wise cross-hair convolution: ``beta_c A_c + beta_s A_s + beta_a A_a``.

    Plane weights are folded into the taps, so the per-voxel work is exactly
    ``ky kz + kx kz + kx ky`` multiplications and one fewer additions.
    """
    _single(kern)
    x, spacing = _unwrap(vol)
    dims = kern.dims
    _check_fits(x.shape, dims)
    dt = _work_dtype(x, kern.plane_i, accumulate)
    planes = [(b * p).astype(dt) for b, p in zip(kern.plane_weights, kern.planes)]
    hx, hy, hz = (d // 2 for d in dims)
    xp = np.pad(x.astype(dt, copy=False), ((hx, hx), (hy, hy), (hz, hz)))
    out = None
    for plane, a, b, view in _plane_views(xp, x.shape, dims):
        term = planes[plane][a, b] * view
        if counter is not None:
            counter.multiplications += term.size
        if out is None:
            out = term
        else:
            out += term
            if counter is not None:
                counter.additions += term.size
    if spacing is not None:
        out = out.astype(np.float32)
    return _wrap(out, spacing)


def crosshair_backward(vol, kern: CrossHairKernel, upstream):
    """Gradients of ``sum(upstream * crosshair_forward(vol, kern))``.

    Returns ``(grad_vol, grad_kern)``: the adjoint of the forward map applied
    to ``upstream`` and a :class:`CrossHairKernel` holding the partial
    derivatives for every plane entry (plane weights are copied unchanged,
    they are not trainable).
    """
    _single(kern)
    x, spacing = _unwrap(vol)
    u, _ = _unwrap(upstream)
    if u.shape != x.shape:
        raise ValueError(f"upstream shape {u.shape} != volume shape {x.shape}")
    dims = kern.dims
    dt = np.result_type(x.dtype, u.dtype, kern.dtype)
    hx, hy, hz = (d // 2 for d in dims)
    pad = ((hx, hx), (hy, hy), (hz, hz))
    xp = np.pad(x.astype(dt, copy=False), pad)
    u = u.astype(dt, copy=False)
    gp = np.zeros(xp.shape, dt)
    betas = kern.plane_weights
    grads = [np.zeros(p.shape, dt) for p in kern.planes]
    for plane, a, b, sl in _padded_slices(x.shape, dims):
        beta = betas[plane]
        grads[plane][a, b] = beta * np.vdot(u, xp[sl])
        gp[sl] += (beta * kern.planes[plane][a, b]) * u
    grad_vol = np.ascontiguousarray(gp[hx:hx + x.shape[0], hy:hy + x.shape[1], hz:hz + x.shape[2]])
    grad_kern = CrossHairKernel(*grads, kern.plane_weights)
    if spacing is not None:
        grad_vol = Volume3D(grad_vol.astype(np.float32), spacing)
    return grad_vol, grad_kern


# ---------------------------------------------------------------------------
# multi-channel layers
# ---------------------------------------------------------------------------


@dataclass
class _FlatGrid:
    """Zero-padded grid flattened so a tap ``(dx, dy, dz)`` is one index offset.

    ``span`` arrays hold the contiguous index range ``[q0, q1)`` from the first
    to the last interior voxel; positions in the range that fall in the
    padding are junk and are kept at zero when they matter.
    """

    shape: tuple[int, int, int]
    halo: tuple[int, int, int]
    padded: tuple[int, int, int] = field(init=False)
    strides: tuple[int, int, int] = field(init=False)
    q0: int = field(init=False)
    q1: int = field(init=False)

    def __post_init__(self):
        nx, ny, nz = self.shape
        hx, hy, hz = self.halo
        self.padded = (nx + 2 * hx, ny + 2 * hy, nz + 2 * hz)
        p1, p2 = self.padded[1], self.padded[2]
        self.strides = (p1 * p2, p2, 1)
        self.q0 = self.index(hx, hy, hz)
        self.q1 = self.index(hx + nx - 1, hy + ny - 1, hz + nz - 1) + 1

    @property
    def size(self) -> int:
        return self.padded[0] * self.padded[1] * self.padded[2]

    @property
    def span(self) -> int:
        return self.q1 - self.q0

    def index(self, i, j, k) -> int:
        s0, s1, _ = self.strides
        return i * s0 + j * s1 + k

    def offset(self, dx, dy, dz) -> int:
        return self.index(dx, dy, dz)

    def _interior(self, flat: np.ndarray, start: int) -> np.ndarray:
        s0, s1, _ = self.strides
        item = flat.itemsize
        base = flat[:, start:]
        return np.lib.stride_tricks.as_strided(
            base,
            shape=(flat.shape[0],) + self.shape,
            strides=(flat.strides[0], s0 * item, s1 * item, item),
            writeable=True,
        )

    def pad(self, x: np.ndarray) -> np.ndarray:
        flat = np.zeros((x.shape[0], self.size), x.dtype)
        self._interior(flat, self.q0)[...] = x
        return flat

    def embed(self, x: np.ndarray) -> np.ndarray:
        span = np.zeros((x.shape[0], self.span), x.dtype)
        self._interior(span, 0)[...] = x
        return span

    def crop_span(self, span: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(self._interior(span, 0))

    def crop_padded(self, flat: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(self._interior(flat, self.q0))


def _tap_groups(kernel: AnyKernel, grid: _FlatGrid, dt):
    """Yield ``(weight matrix (out, in*T), offsets, beta, plane index)`` per tap group."""
    kx, ky, kz = kernel.dims
    hx, hy, hz = kx // 2, ky // 2, kz // 2
    if isinstance(kernel, Kernel3D):
        offs = [grid.offset(r - hx, s - hy, t - hz)
                for r in range(kx) for s in range(ky) for t in range(kz)]
        w = kernel.weights
        yield w.reshape(w.shape[0], -1).astype(dt, copy=False), offs, 1.0, None
        return
    families = (
        [grid.offset(0, s - hy, t - hz) for s in range(ky) for t in range(kz)],
        [grid.offset(r - hx, 0, t - hz) for r in range(kx) for t in range(kz)],
        [grid.offset(r - hx, s - hy, 0) for r in range(kx) for s in range(ky)],
    )
    for idx, (plane, offs, beta) in enumerate(zip(kernel.planes, families, kernel.plane_weights)):
        yield plane.reshape(plane.shape[0], -1).astype(dt, copy=False), offs, beta, idx


def _im2col(xflat: np.ndarray, offsets, grid: _FlatGrid) -> np.ndarray:
    cin = xflat.shape[0]
    L = grid.span
    cols = np.empty((cin, len(offsets), L), xflat.dtype)
    for t, off in enumerate(offsets):
        cols[:, t] = xflat[:, grid.q0 + off:grid.q1 + off]
    return cols.reshape(cin * len(offsets), L)


def _layer_grid(kernel: AnyKernel, feat_shape) -> _FlatGrid:
    return _FlatGrid(tuple(feat_shape[-3:]), tuple(d // 2 for d in kernel.dims))


def _check_layer(feat, kernel, bias):
    if feat.ndim != 4:
        raise ValueError(f"features must be (channels, nx, ny, nz), got {feat.shape}")
    if len(kernel.grid) != 2:
        raise ValueError("layer kernels need leading (out_channels, in_channels) axes")
    cout, cin = kernel.grid
    if feat.shape[0] != cin:
        raise ValueError(f"kernel expects {cin} input channels, features have {feat.shape[0]}")
    if bias is not None and np.shape(bias) != (cout,):
        raise ValueError(f"bias must have shape ({cout},), got {np.shape(bias)}")
    _check_fits(feat.shape[1:], kernel.dims)


def conv_layer_forward(feat, kernel: AnyKernel, bias=None, mode: Optional[str] = None) -> np.ndarray:
    """Multi-channel same-size convolution.

    ``feat`` is ``(in_channels, nx, ny, nz)``; ``kernel`` carries leading
    ``(out_channels, in_channels)`` axes.  ``out[c] = bias[c] + sum_in
    conv(feat[in], kernel[c, in])`` where ``conv`` is the full 3-D operator
    for :class:`Kernel3D` and the cross-hair operator otherwise.
    """
    if isinstance(feat, Volume3D):
        feat = feat.data[None]
    feat = np.asarray(feat)
    if mode is not None:
        expected = FULL3D if isinstance(kernel, Kernel3D) else CROSSHAIR
        if mode != expected:
            raise ValueError(f"mode {mode!r} does not match a {type(kernel).__name__}")
    _check_layer(feat, kernel, bias)
    cout = kernel.grid[0]
    dt = np.result_type(feat.dtype, kernel.dtype)
    grid = _layer_grid(kernel, feat.shape)
    xflat = grid.pad(feat.astype(dt, copy=False))
    out = np.zeros((cout, grid.span), dt)
    for wmat, offs, beta, _ in _tap_groups(kernel, grid, dt):
        if beta == 0.0:
            continue
        cols = _im2col(xflat, offs, grid)
        if beta != 1.0:
            wmat = beta * wmat
        out += wmat @ cols
        del cols
    res = grid.crop_span(out)
    if bias is not None:
        res += np.asarray(bias, dt).reshape(cout, 1, 1, 1)
    return res


def conv_layer_backward(feat, kernel: AnyKernel, upstream, need_input_grad: bool = True):
    """Gradients of ``sum(upstream * conv_layer_forward(feat, kernel, bias))``.

    Returns ``(grad_feat or None, grad_kernel, grad_bias)``; ``grad_kernel``
    has the same type and layout as ``kernel``.
    """
    feat = np.asarray(feat)
    upstream = np.asarray(upstream)
    _check_layer(feat, kernel, None)
    cout, cin = kernel.grid
    if upstream.shape != (cout,) + feat.shape[1:]:
        raise ValueError(f"upstream shape {upstream.shape} does not match layer output")
    dt = np.result_type(feat.dtype, kernel.dtype, upstream.dtype)
    grid = _layer_grid(kernel, feat.shape)
    xflat = grid.pad(feat.astype(dt, copy=False))
    g = grid.embed(upstream.astype(dt, copy=False))
    grad_bias = upstream.reshape(cout, -1).sum(axis=1, dtype=dt)
    gx = np.zeros_like(xflat) if need_input_grad else None
    grads = []
    for wmat, offs, beta, _ in _tap_groups(kernel, grid, dt):
        cols = _im2col(xflat, offs, grid)
        gw = g @ cols.T
        del cols
        if beta != 1.0:
            gw *= beta
        grads.append(gw)
        if need_input_grad and beta != 0.0:
            weff = wmat if beta == 1.0 else beta * wmat
            dcols = (weff.T @ g).reshape(cin, len(offs), grid.span)
            for t, off in enumerate(offs):
                gx[:, grid.q0 + off:grid.q1 + off] += dcols[:, t]
            del dcols
    if isinstance(kernel, Kernel3D):
        grad_kernel = Kernel3D(grads[0].reshape(kernel.weights.shape))
    else:
        grad_kernel = CrossHairKernel(
            *(gw.reshape(p.shape) for gw, p in zip(grads, kernel.planes)),
            kernel.plane_weights,
        )
    grad_feat = grid.crop_padded(gx) if need_input_grad else None
    return grad_feat, grad_kernel, grad_bias
