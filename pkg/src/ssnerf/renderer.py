"""Sampling along rays, quadrature volume rendering and property readouts."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .geometry import CameraPose, generate_rays
from .properties import Kind, PropertySpec

__all__ = [
    "RenderError",
    "QuadratureBatch",
    "Composite",
    "PropertyImage",
    "RenderResult",
    "SamplingConfig",
    "stratified_sample",
    "hierarchical_sample",
    "composite",
    "composite_backward",
    "render_ray",
    "readout_semantics",
    "readout_normal",
    "readout",
    "render_rays",
    "render_image",
]

FAR_DELTA = 1e10  # width given to the last sample so it absorbs the remaining transmittance


class RenderError(RuntimeError):
    pass


@dataclass
class QuadratureBatch:
    t: np.ndarray  # (R, M) sorted sample depths
    near: np.ndarray  # (R,)
    far: np.ndarray  # (R,)
    weights: np.ndarray | None = None  # (R, M), filled after compositing

    @property
    def deltas(self) -> np.ndarray:
        return _deltas(self.t)


def _deltas(t: np.ndarray, far_delta: float = FAR_DELTA) -> np.ndarray:
    d = np.empty_like(t)
    d[:, :-1] = np.diff(t, axis=1)
    d[:, -1] = far_delta
    return d


def _as_rows(v, n):
    return np.broadcast_to(np.asarray(v, dtype=np.float64), (n,)).astype(np.float64)


def _uniforms(rng, shape):
    """Uniform draws from one generator or from a sequence of per-ray generators."""
    if rng is None:
        return np.full(shape, 0.5)
    if hasattr(rng, "random"):
        return rng.random(shape)
    return np.stack([g.random(shape[1:]) for g in rng])


def stratified_sample(near, far, n: int, rng=None, n_rays: int | None = None) -> QuadratureBatch:
    """One draw in each of ``n`` equal sub-intervals of [near, far].

    With ``rng=None`` the bin midpoints are returned.  ``rng`` may also be a
    sequence holding one generator per ray.
    """
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    if n_rays is None:
        n_rays = np.size(near) if np.ndim(near) else (len(rng) if isinstance(rng, (list, tuple)) else 1)
    near, far = _as_rows(near, n_rays), _as_rows(far, n_rays)
    u = _uniforms(rng, (n_rays, n))
    step = (far - near)[:, None] / n
    t = near[:, None] + (np.arange(n)[None, :] + u) * step
    return QuadratureBatch(t, near, far)


def hierarchical_sample(coarse: QuadratureBatch, n_fine: int, rng=None) -> QuadratureBatch:
    """Inverse-CDF samples from the piecewise-constant pdf given by the coarse weights.

    Bin ``m`` spans the midpoints around coarse sample ``m`` (clipped to
    [near, far]).  Rays whose weights are all zero fall back to a uniform pdf.
    The result merges coarse and fine depths, sorted.
    """
    if coarse.weights is None:
        raise ValueError("coarse weights must be populated before hierarchical sampling")
    t = coarse.t
    R, M = t.shape
    if n_fine <= 0:
        return QuadratureBatch(t.copy(), coarse.near, coarse.far)
    edges = np.empty((R, M + 1))
    edges[:, 0] = coarse.near
    edges[:, -1] = coarse.far
    edges[:, 1:-1] = 0.5 * (t[:, 1:] + t[:, :-1])
    w = np.maximum(np.asarray(coarse.weights, dtype=np.float64), 0)
    total = w.sum(axis=1, keepdims=True)
    empty = total[:, 0] <= 0
    if empty.any():
        w = w.copy()
        w[empty] = np.diff(edges[empty], axis=1)
        total = w.sum(axis=1, keepdims=True)
    pdf = w / total
    cdf = np.zeros((R, M + 1))
    np.cumsum(pdf, axis=1, out=cdf[:, 1:])
    cdf[:, -1] = 1.0

    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (R, n_fine))
    else:
        u = _uniforms(rng, (R, n_fine))
    # batched searchsorted: shift every row into its own disjoint interval
    offs = 2.0 * np.arange(R)[:, None]
    idx = np.searchsorted((cdf + offs).ravel(), (u + offs).ravel(), side="right").reshape(R, n_fine)
    idx = idx - 1 - (M + 1) * np.arange(R)[:, None]
    idx = np.clip(idx, 0, M - 1)
    rows = np.arange(R)[:, None]
    p = pdf[rows, idx]
    frac = np.where(p > 0, (u - cdf[rows, idx]) / np.where(p > 0, p, 1.0), 0.5)
    lo, hi = edges[rows, idx], edges[rows, idx + 1]
    fine = lo + np.clip(frac, 0.0, 1.0) * (hi - lo)
    merged = np.sort(np.concatenate([t, fine], axis=1), axis=1)
    return QuadratureBatch(merged, coarse.near, coarse.far)


@dataclass
class Composite:
    values: dict  # kind -> (R, C) rendered channels (before readout)
    weights: np.ndarray  # (R, S)
    transmittance: np.ndarray  # (R, S), T before each sample
    trans_after: np.ndarray  # (R, S), T after each sample
    deltas: np.ndarray


def composite(t, sigma, props: Mapping, far_delta: float = FAR_DELTA) -> Composite:
    """Quadrature volume rendering of every property with one shared set of weights.

    ``w_m = T_m * (1 - exp(-delta_m sigma_m))`` with ``T_m = exp(-sum_{j<m} delta_j sigma_j)``.
    """
    sigma = np.asarray(sigma)
    bad = ~np.isfinite(sigma).all(axis=1)
    for v in props.values():
        bad |= ~np.isfinite(v).reshape(v.shape[0], -1).all(axis=1)
    if bad.any():
        ray = int(np.flatnonzero(bad)[0])
        err = RenderError(f"non-finite density or property on ray {ray}")
        err.ray_index = ray
        raise err
    deltas = _deltas(np.asarray(t, dtype=sigma.dtype), far_delta)
    tau = sigma * deltas
    cum = np.cumsum(tau, axis=1)
    # exclusive prefix sum built directly: cum - tau would cancel against the huge last delta
    excl = np.zeros_like(cum)
    excl[:, 1:] = cum[:, :-1]
    trans = np.exp(-excl)
    trans_after = np.exp(-cum)
    weights = trans * -np.expm1(-tau)
    values = {k: np.einsum("rs,rsc->rc", weights, v) for k, v in props.items()}
    return Composite(values, weights, trans, trans_after, deltas)


def composite_backward(comp: Composite, props: Mapping, d_values: Mapping):
    """Gradients of the rendered values w.r.t. per-sample density and properties.

    Returns ``(d_sigma, d_props)``.  With ``s_m = <dL/dvalue, p_m>`` summed over
    properties, ``dL/dsigma_k = delta_k (T_{k+1} s_k - sum_{m>k} w_m s_m)``.
    """
    w = comp.weights
    s = np.zeros_like(w)
    d_props = {}
    for k, g in d_values.items():
        g = np.asarray(g, dtype=w.dtype)
        s += np.einsum("rsc,rc->rs", props[k], g)
        d_props[k] = w[:, :, None] * g[:, None, :]
    ws = w * s
    behind = np.cumsum(ws[:, ::-1], axis=1)[:, ::-1] - ws
    d_sigma = comp.deltas * (comp.trans_after * s - behind)
    return d_sigma, d_props


def render_ray(samples: QuadratureBatch, sigma, props: Mapping, ray_index: int = 0):
    """Render a single ray (1-D ``sigma``, ``props[k]`` of shape (S, C)); fills ``samples.weights``."""
    t = np.atleast_2d(samples.t)
    try:
        comp = composite(t, np.atleast_2d(sigma), {k: np.asarray(v)[None] for k, v in props.items()})
    except RenderError as e:
        raise RenderError(f"non-finite density or property on ray {ray_index}") from e
    samples.weights = comp.weights[0] if np.ndim(samples.t) == 1 else comp.weights
    return {k: v[0] for k, v in comp.values.items()}


def readout_semantics(logits) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def readout_normal(encoded) -> np.ndarray:
    """Decode ``(n + 1) / 2`` back to a unit vector; the zero vector maps to (0, 0, 1)."""
    n = 2.0 * np.asarray(encoded, dtype=np.float64) - 1.0
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    zero = norm[..., 0] < 1e-12
    out = n / np.where(norm < 1e-12, 1.0, norm)
    out[zero] = (0.0, 0.0, 1.0)
    return out


def readout(kind: Kind, value) -> np.ndarray:
    if kind is Kind.SL:
        return readout_semantics(value)
    if kind is Kind.SN:
        return readout_normal(value)
    if kind is Kind.RGB:
        return np.asarray(value, dtype=np.float64)
    return np.clip(np.asarray(value, dtype=np.float64), 0.0, 1.0)


@dataclass
class PropertyImage:
    kind: Kind
    data: np.ndarray  # (H, W, C)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def check(self, tol_prob: float = 1e-5, tol_unit: float = 1e-4) -> None:
        """Raise ``ValueError`` if the buffer violates the value-range contract of its kind."""
        d = self.data
        if not np.isfinite(d).all():
            raise ValueError(f"{self.kind.value}: non-finite values")
        if self.kind is Kind.SL:
            if d.min() < 0 or d.max() > 1 or np.abs(d.sum(-1) - 1).max() > tol_prob:
                raise ValueError("sl: not a per-pixel probability distribution")
        elif self.kind is Kind.SN:
            if np.abs(np.linalg.norm(d, axis=-1) - 1).max() > tol_unit:
                raise ValueError("sn: normals are not unit length")
        elif d.min() < 0 or d.max() > 1:
            raise ValueError(f"{self.kind.value}: values outside [0, 1]")


@dataclass
class SamplingConfig:
    n_coarse: int = 64
    n_fine: int = 64
    near: float = 2.0
    far: float = 6.0
    chunk: int = 2048  # rays per work item; fixed so results do not depend on worker count
    perturb: bool = False
    seed: int = 0


@dataclass
class RenderResult:
    coarse: dict  # kind -> PropertyImage
    fine: dict
    depth: np.ndarray  # (H, W) expected depth sum(w t) of the final pass
    opacity: np.ndarray  # (H, W) sum of weights of the final pass


def render_rays(coarse_field: Callable, fine_field: Callable | None, origins, dirs, axes,
                specs: Sequence[PropertySpec], sampling: SamplingConfig, ray_ids=None) -> dict:
    """Coarse pass, optional hierarchical fine pass; returns readout values per pass."""
    R = len(origins)
    rngs = None
    if sampling.perturb:
        ids = np.arange(R) if ray_ids is None else ray_ids
        rngs = [np.random.default_rng([sampling.seed, int(i)]) for i in ids]
    qb = stratified_sample(sampling.near, sampling.far, sampling.n_coarse, rngs, n_rays=R)
    out = {}
    passes = [("coarse", coarse_field, qb)]
    for name, fld, batch in passes:
        pts = origins[:, None, :] + batch.t[:, :, None] * dirs[:, None, :]
        fo = fld(pts, dirs, axes, retain=False)
        comp = composite(batch.t, fo.density, fo.properties)
        batch.weights = comp.weights
        out[name] = {s.kind: readout(s.kind, comp.values[s.kind]) for s in specs}
        out[name + "_depth"] = (comp.weights * batch.t).sum(axis=1)
        out[name + "_opacity"] = comp.weights.sum(axis=1)
        if name == "coarse" and fine_field is not None and sampling.n_fine > 0:
            fine_rngs = None if rngs is None else rngs
            passes.append(("fine", fine_field, hierarchical_sample(batch, sampling.n_fine, fine_rngs)))
    return out


def render_image(coarse_field: Callable, fine_field: Callable | None, pose: CameraPose,
                 specs: Sequence[PropertySpec], sampling: SamplingConfig, workers: int = 1) -> RenderResult:
    """Render every pixel of ``pose``; both passes are returned (fine == coarse without a fine field)."""
    origins, dirs = generate_rays(pose)
    axes = np.broadcast_to(pose.optical_axis, dirs.shape)
    H, W = pose.height, pose.width
    starts = list(range(0, H * W, sampling.chunk))

    def work(start):
        sl = slice(start, start + sampling.chunk)
        ids = np.arange(start, min(start + sampling.chunk, H * W))
        try:
            return render_rays(coarse_field, fine_field, origins[sl], dirs[sl], axes[sl], specs, sampling, ids)
        except RenderError as e:
            ray = start + getattr(e, "ray_index", 0)
            raise RenderError(f"pixel (row={ray // W}, col={ray % W}): {e}") from e

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]

    has_fine = "fine" in parts[0]
    final = "fine" if has_fine else "coarse"

    def gather(name):
        imgs = {}
        for s in specs:
            data = np.concatenate([p[name][s.kind] for p in parts]).reshape(H, W, -1)
            imgs[s.kind] = PropertyImage(s.kind, data)
        return imgs

    coarse = gather("coarse")
    fine = gather("fine") if has_fine else coarse
    depth = np.concatenate([p[final + "_depth"] for p in parts]).reshape(H, W)
    opacity = np.concatenate([p[final + "_opacity"] for p in parts]).reshape(H, W)
    return RenderResult(coarse, fine, depth, opacity)
