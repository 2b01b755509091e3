"""Duality-based TV-L1 optical flow and the ``.bflo`` quantized flow format.

The solver minimises

    E(u, v) = sum |grad u| + |grad v| + data_weight * sum |I1(x + w) - I0(x)|

coarse-to-fine.  At each pyramid level ``next`` is warped by the current
estimate, the data term is linearised, and the resulting convex problem is
solved by alternating a pointwise thresholding step on the residual with
fixed-point iterations on the dual variable of the total variation term.
Each level returns the lowest-energy iterate seen after any warp, so the
reported energy never increases from one warp to the next.

Frames are ``[H, W]`` float arrays with intensities in ``[0, 1]``; the solver
works on ``intensity_scale * frame`` so that the conventional parameter
values, tuned for 8-bit intensities, apply unchanged.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numba import njit
from scipy import ndimage

from . import instrument
from .errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    IntegrityError,
    LengthError,
)

GRAD_EPS = 1e-10
MIN_SIDE = 8
BACKTRACK_HALVINGS = 4
# bumped whenever the solver's numerical output changes, so cached flow is invalidated
SOLVER_REVISION = 2


@dataclass(frozen=True)
class Tvl1Params:
    data_weight: float = 0.15
    tightness: float = 0.3
    tau: float = 0.25
    warps: int = 5
    inner_iterations: int = 30
    scale_factor: float = 0.5
    levels: int | None = None
    epsilon: float = 0.01
    intensity_scale: float = 255.0

    def __post_init__(self):
        positive = ("data_weight", "tightness", "tau", "epsilon", "intensity_scale")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.tau > 0.25:
            raise ConfigurationError(f"tau={self.tau} exceeds the dual-ascent stability bound 0.25")
        if self.warps < 1 or self.inner_iterations < 1:
            raise ConfigurationError("warps and inner_iterations must be >= 1")
        if not 0 < self.scale_factor < 1:
            raise ConfigurationError("scale_factor must lie in (0, 1)")
        if self.levels is not None and self.levels < 1:
            raise ConfigurationError("levels must be >= 1")

    def digest(self) -> str:
        blob = json.dumps({**asdict(self), "solver_revision": SOLVER_REVISION}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class FlowField(NamedTuple):
    u: np.ndarray
    v: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def stack(self) -> np.ndarray:
        """``[H, W, 2]`` array of (u, v)."""
        return np.stack([self.u, self.v], axis=-1)


class SolveInfo(NamedTuple):
    energies: list[float]
    """Finest-level energy of the iterate: start value, then one per warp."""
    warps_backtracked: int
    raw_energies: list[float] = []
    """Finest-level energy of each warp's unmodified result, before backtracking."""


# ------------------------------------------------------------- image helpers


def bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``img`` at (x, y), coordinates clamped to the image rectangle."""
    h, w = img.shape
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.intp), w - 2) if w > 1 else np.zeros_like(x, dtype=np.intp)
    y0 = np.minimum(np.floor(y).astype(np.intp), h - 2) if h > 1 else np.zeros_like(y, dtype=np.intp)
    fx, fy = x - x0, y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def forward_gradient(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward differences, zero on the last column/row (replicate boundary)."""
    fx = np.zeros_like(f)
    fy = np.zeros_like(f)
    fx[:, :-1] = f[:, 1:] - f[:, :-1]
    fy[:-1, :] = f[1:, :] - f[:-1, :]
    return fx, fy


def divergence(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Negative adjoint of :func:`forward_gradient`."""
    d = np.zeros_like(p1)
    d[:, 0] = p1[:, 0]
    d[:, 1:-1] = p1[:, 1:-1] - p1[:, :-2]
    d[:, -1] = -p1[:, -2]
    d[0, :] += p2[0, :]
    d[1:-1, :] += p2[1:-1, :] - p2[:-2, :]
    d[-1, :] -= p2[-2, :]
    return d


def centered_gradient(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(f, 1, mode="edge")
    return (p[1:-1, 2:] - p[1:-1, :-2]) * 0.5, (p[2:, 1:-1] - p[:-2, 1:-1]) * 0.5


def resize(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling with pixel-centre alignment."""
    h, w = img.shape
    nh, nw = shape
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return bilinear(img, xx, yy)


def _level_shapes(shape: tuple[int, int], params: Tvl1Params) -> list[tuple[int, int]]:
    shapes = [shape]
    while params.levels is None or len(shapes) < params.levels:
        h, w = shapes[-1]
        nxt = (int(round(h * params.scale_factor)), int(round(w * params.scale_factor)))
        if min(nxt) < MIN_SIDE:
            break
        shapes.append(nxt)
    return shapes


def _pyramid(img: np.ndarray, shapes: list[tuple[int, int]], factor: float) -> list[np.ndarray]:
    sigma = 0.6 * np.sqrt(1.0 / factor**2 - 1.0)
    out = [img]
    for shape in shapes[1:]:
        out.append(resize(ndimage.gaussian_filter(out[-1], sigma, mode="nearest"), shape))
    return out


# -------------------------------------------------------------------- energy


def energy(flow: FlowField, prev: np.ndarray, nxt: np.ndarray, data_weight: float) -> float:
    """TV-L1 energy of ``flow`` for the frame pair, with bilinear warping."""
    u, v = flow
    if u.shape != prev.shape or prev.shape != nxt.shape or v.shape != u.shape:
        raise DimensionError("flow and frames must share one [H, W] shape")
    h, w = prev.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    warped = bilinear(nxt, xx + u, yy + v)
    tv = 0.0
    for f in (u, v):
        fx, fy = forward_gradient(f)
        tv += np.sqrt(fx * fx + fy * fy).sum()
    return float(tv + data_weight * np.abs(warped - prev).sum())


# -------------------------------------------------------------------- solver


def _check_pair(prev: np.ndarray, nxt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    prev = np.asarray(prev, dtype=np.float64)
    nxt = np.asarray(nxt, dtype=np.float64)
    if prev.ndim != 2 or prev.shape != nxt.shape:
        raise DimensionError(f"frames must be 2-D and equal-sized, got {prev.shape} and {nxt.shape}")
    if min(prev.shape) < MIN_SIDE:
        raise DimensionError(f"frames must be at least {MIN_SIDE} px on each side, got {prev.shape}")
    return prev, nxt


@njit(cache=True)
def _inner_iterations(i0, i1w, gx, gy, u1, u2, p11, p12, p21, p22, lam, theta, tau, iters, eps):
    """Thresholding / primal / dual iterations for one warp, updating arrays in place."""
    h, w = i0.shape
    lt = lam * theta
    taut = tau / theta
    eps2 = eps * eps
    rho_c = np.empty((h, w))
    grad = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            grad[i, j] = gx[i, j] * gx[i, j] + gy[i, j] * gy[i, j]
            rho_c[i, j] = i1w[i, j] - gx[i, j] * u1[i, j] - gy[i, j] * u2[i, j] - i0[i, j]
    done = 0
    for _ in range(iters):
        done += 1
        change = 0.0
        for i in range(h):
            for j in range(w):
                g = grad[i, j]
                rho = rho_c[i, j] + gx[i, j] * u1[i, j] + gy[i, j] * u2[i, j]
                if g <= GRAD_EPS:
                    step = 0.0
                elif rho < -lt * g:
                    step = lt
                elif rho > lt * g:
                    step = -lt
                else:
                    step = -rho / g
                v1 = u1[i, j] + step * gx[i, j]
                v2 = u2[i, j] + step * gy[i, j]
                # divergence: negative adjoint of the forward difference
                d1 = p11[i, j] if j < w - 1 else 0.0
                if j > 0:
                    d1 -= p11[i, j - 1]
                d1 += p12[i, j] if i < h - 1 else 0.0
                if i > 0:
                    d1 -= p12[i - 1, j]
                d2 = p21[i, j] if j < w - 1 else 0.0
                if j > 0:
                    d2 -= p21[i, j - 1]
                d2 += p22[i, j] if i < h - 1 else 0.0
                if i > 0:
                    d2 -= p22[i - 1, j]
                n1 = v1 + theta * d1
                n2 = v2 + theta * d2
                change += (n1 - u1[i, j]) ** 2 + (n2 - u2[i, j]) ** 2
                u1[i, j] = n1
                u2[i, j] = n2
        for i in range(h):
            for j in range(w):
                ux = u1[i, j + 1] - u1[i, j] if j < w - 1 else 0.0
                uy = u1[i + 1, j] - u1[i, j] if i < h - 1 else 0.0
                vx = u2[i, j + 1] - u2[i, j] if j < w - 1 else 0.0
                vy = u2[i + 1, j] - u2[i, j] if i < h - 1 else 0.0
                ng1 = 1.0 + taut * np.sqrt(ux * ux + uy * uy)
                ng2 = 1.0 + taut * np.sqrt(vx * vx + vy * vy)
                p11[i, j] = (p11[i, j] + taut * ux) / ng1
                p12[i, j] = (p12[i, j] + taut * uy) / ng1
                p21[i, j] = (p21[i, j] + taut * vx) / ng2
                p22[i, j] = (p22[i, j] + taut * vy) / ng2
        if change / (h * w) < eps2:
            break
    return done


def _solve_level(i0, i1, u1, u2, params: Tvl1Params, trace: list[float] | None, raw: list[float] | None = None):
    """Warp loop on one pyramid level; returns the flow and the number of backtracked warps.

    A warp whose result has higher energy than the current iterate is pulled
    back towards it by step halving, down to the iterate itself, so the energy
    after every warp never exceeds the energy before it.
    """
    h, w = i0.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    i1x, i1y = centered_gradient(i1)
    lam = params.data_weight
    p = [np.zeros_like(i0) for _ in range(4)]
    u1, u2 = u1.copy(), u2.copy()
    current = energy(FlowField(u1, u2), i0, i1, lam)
    if trace is not None:
        trace.append(current)
    backtracked = 0
    for _ in range(params.warps):
        wx, wy = xx + u1, yy + u2
        i1w = bilinear(i1, wx, wy)
        gx = bilinear(i1x, wx, wy)
        gy = bilinear(i1y, wx, wy)
        n1, n2 = u1.copy(), u2.copy()
        _inner_iterations(
            i0, i1w, gx, gy, n1, n2, *p,
            lam, params.tightness, params.tau, params.inner_iterations, params.epsilon,
        )
        e = energy(FlowField(n1, n2), i0, i1, lam)
        if raw is not None:
            raw.append(e)
        step = 1.0
        while e > current and step > 0:
            step = step / 2 if step > 1 / 2**BACKTRACK_HALVINGS else 0.0
            c1, c2 = u1 + step * (n1 - u1), u2 + step * (n2 - u2)
            e = energy(FlowField(c1, c2), i0, i1, lam)
            if e <= current:
                n1, n2 = c1, c2
        if step < 1.0:
            backtracked += 1
        if e <= current:
            u1, u2, current = n1, n2, e
        if trace is not None:
            trace.append(current)
    return u1, u2, backtracked


def solve_tvl1(prev, nxt, params: Tvl1Params | None = None) -> tuple[FlowField, SolveInfo]:
    """Estimate the flow taking ``prev`` to ``nxt`` and report the energy trace."""
    params = params or Tvl1Params()
    prev, nxt = _check_pair(prev, nxt)
    instrument.bump(instrument.TVL1_CALLS)
    zero = FlowField(np.zeros_like(prev), np.zeros_like(prev))
    s = params.intensity_scale
    i0, i1 = prev * s, nxt * s
    if np.ptp(i0) == 0 and np.ptp(i1) == 0:
        e0 = energy(zero, i0, i1, params.data_weight)
        return zero, SolveInfo([e0], 0, [])
    shapes = _level_shapes(prev.shape, params)
    pyr0 = _pyramid(i0, shapes, params.scale_factor)
    pyr1 = _pyramid(i1, shapes, params.scale_factor)
    u1 = np.zeros(shapes[-1])
    u2 = np.zeros(shapes[-1])
    trace: list[float] = []
    raw: list[float] = []
    backtracked = 0
    for level in range(len(shapes) - 1, -1, -1):
        if u1.shape != shapes[level]:
            (ch, cw), (fh, fw) = u1.shape, shapes[level]
            u1 = resize(u1, shapes[level]) * (fw / cw)
            u2 = resize(u2, shapes[level]) * (fh / ch)
        finest = level == 0
        u1, u2, r = _solve_level(pyr0[level], pyr1[level], u1, u2, params, trace if finest else None, raw if finest else None)
        backtracked += r
    flow = FlowField(u1, u2)
    if energy(flow, i0, i1, params.data_weight) > energy(zero, i0, i1, params.data_weight):
        flow = zero
    return flow, SolveInfo(trace, backtracked, raw)


def compute_flow(prev, nxt, params: Tvl1Params | None = None) -> FlowField:
    return solve_tvl1(prev, nxt, params)[0]


def luminance(frames: np.ndarray) -> np.ndarray:
    """``[..., 3]`` RGB in [0, 1] to luminance ``[...]`` (Rec. 601 weights)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] != 3:
        raise DimensionError(f"expected a trailing RGB axis of size 3, got shape {frames.shape}")
    return frames @ np.array([0.299, 0.587, 0.114])


def clip_flow_stack(clip: np.ndarray, params: Tvl1Params | None = None) -> list[FlowField]:
    """Flow between each consecutive frame pair of a ``[T, H, W, 3]`` clip."""
    clip = np.asarray(clip)
    if clip.ndim != 4 or clip.shape[0] < 2:
        raise LengthError(f"need a [T>=2, H, W, 3] clip, got shape {clip.shape}")
    gray = luminance(clip)
    return [compute_flow(gray[t], gray[t + 1], params) for t in range(len(gray) - 1)]


def stack_to_array(fields: list[FlowField]) -> np.ndarray:
    """``[2, T-1, H, W]`` array, the teacher's per-clip input layout."""
    return np.stack([np.stack([f.u for f in fields]), np.stack([f.v for f in fields])])


# -------------------------------------------------------------- quantization

DEFAULT_BOUND = 20.0


def quantize_flow(field: FlowField, bound: float = DEFAULT_BOUND) -> np.ndarray:
    """``[2, H, W]`` uint8 planes: clamp to ``[-bound, bound]`` then map to 0..255."""
    if not bound > 0:
        raise ConfigurationError("bound must be positive")
    planes = np.stack([field.u, field.v])
    scaled = (np.clip(planes, -bound, bound) + bound) * (255.0 / (2.0 * bound))
    return np.floor(scaled + 0.5).astype(np.uint8)


def dequantize_flow(q: np.ndarray, bound: float = DEFAULT_BOUND) -> FlowField:
    planes = q.astype(np.float64) * (2.0 * bound / 255.0) - bound
    return FlowField(planes[0], planes[1])


BFLO_MAGIC = b"BFLO"
BFLO_VERSION = 1
_BFLO_HEADER = struct.Struct("<4sBIId")


def encode_bflo(field: FlowField, bound: float = DEFAULT_BOUND) -> bytes:
    q = quantize_flow(field, bound)
    h, w = field.shape
    return _BFLO_HEADER.pack(BFLO_MAGIC, BFLO_VERSION, h, w, float(bound)) + q.tobytes()


def decode_bflo(blob: bytes) -> tuple[np.ndarray, float]:
    """Return the ``[2, H, W]`` uint8 planes and the bound."""
    if len(blob) < _BFLO_HEADER.size:
        raise IntegrityError("truncated .bflo header")
    magic, version, h, w, bound = _BFLO_HEADER.unpack_from(blob)
    if magic != BFLO_MAGIC:
        raise FormatError(f"bad .bflo magic {magic!r}")
    if version != BFLO_VERSION:
        raise FormatError(f"unsupported .bflo version {version}")
    payload = blob[_BFLO_HEADER.size :]
    if len(payload) != 2 * h * w:
        raise IntegrityError(f".bflo payload has {len(payload)} bytes, expected {2 * h * w}")
    if not bound > 0:
        raise IntegrityError(f".bflo bound {bound} is not positive")
    return np.frombuffer(payload, dtype=np.uint8).reshape(2, h, w).copy(), bound


def write_bflo(path, field: FlowField, bound: float = DEFAULT_BOUND) -> None:
    Path(path).write_bytes(encode_bflo(field, bound))


def read_bflo(path) -> FlowField:
    q, bound = decode_bflo(Path(path).read_bytes())
    return dequantize_flow(q, bound)
