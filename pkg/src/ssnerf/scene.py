"""Analytic primitive scenes: closed-form density and properties, a dense
quadrature reference renderer, annotation derivation and dataset generation.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import imaging
from .geometry import CameraPose, generate_rays, orbit_poses, write_poses
from .properties import Kind, PropertySpec

__all__ = [
    "Primitive",
    "AnalyticScene",
    "AnalyticField",
    "OracleImages",
    "builtin_scene",
    "query",
    "oracle_render",
    "annotation_rotation",
    "pixel_view_dirs",
    "derive_normal_from_depth",
    "derive_edges",
    "derive_shading",
    "derive_keypoints",
    "gen_dataset",
]


@dataclass
class Primitive:
    shape: str  # "sphere" or "box"
    center: tuple
    size: tuple  # (radius,) for spheres, half extents for boxes
    class_id: int
    albedo: tuple
    density: float = 100.0

    def __post_init__(self):
        self.center, self.size, self.albedo = (tuple(float(v) for v in a) for a in (self.center, self.size, self.albedo))
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        if self.density <= 0:
            raise ValueError("primitive density must be positive")

    def sdf(self, x: np.ndarray) -> np.ndarray:
        p = x - np.asarray(self.center)
        if self.shape == "sphere":
            return np.linalg.norm(p, axis=-1) - self.size[0]
        q = np.abs(p) - np.asarray(self.size)
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        return outside + np.minimum(q.max(axis=-1), 0)

    def normal(self, x: np.ndarray) -> np.ndarray:
        """Outward normal of the nearest point on the surface."""
        p = x - np.asarray(self.center)
        if self.shape == "sphere":
            n = p
        else:
            q = np.abs(p) - np.asarray(self.size)
            inside = (q <= 0).all(axis=-1, keepdims=True)
            face = np.eye(3)[np.argmax(q, axis=-1)] * np.sign(p)
            n = np.where(inside, face, np.maximum(q, 0) * np.sign(p))
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def bounds_ok(self) -> bool:
        c, s = np.asarray(self.center), np.asarray(self.size)
        ext = s[0] if self.shape == "sphere" else s
        return bool(np.all(c - ext >= -1) and np.all(c + ext <= 1))


@dataclass
class AnalyticScene:
    primitives: list
    light_direction: tuple = (0.4, 0.3, 0.85)
    class_names: list = field(default_factory=lambda: ["background", "sphere", "box"])
    specular: float = 0.0  # weight of the view-dependent Blinn-Phong term in the shading annotation
    shininess: float = 16.0

    def __post_init__(self):
        self.primitives = [p if isinstance(p, Primitive) else Primitive(**p) for p in self.primitives]
        light = np.asarray(self.light_direction, dtype=np.float64)
        norm = np.linalg.norm(light)
        if abs(norm - 1.0) > 1e-12:  # leave unit input untouched so save/load round-trips exactly
            light = light / norm
        self.light_direction = tuple(float(v) for v in light)
        for p in self.primitives:
            if not 0 <= p.class_id < len(self.class_names):
                raise ValueError(f"class id {p.class_id} outside class list")
            if not p.bounds_ok():
                raise ValueError(f"primitive at {p.center} leaves the [-1, 1]^3 scene bounds")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["primitives"] = [asdict(p) for p in self.primitives]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticScene":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "AnalyticScene":
        return cls.from_dict(json.loads(Path(path).read_text()))


def builtin_scene(name: str) -> AnalyticScene:
    if name == "two_spheres":
        return AnalyticScene([
            Primitive("sphere", (-0.4, -0.1, 0.0), (0.45,), 1, (0.9, 0.25, 0.2)),
            Primitive("sphere", (0.45, 0.2, 0.05), (0.35,), 2, (0.2, 0.45, 0.9)),
        ], class_names=["background", "sphere_a", "sphere_b"])
    if name in ("toy", "toy_specular"):
        scene = AnalyticScene([
            Primitive("sphere", (-0.3, -0.25, 0.0), (0.45,), 1, (0.85, 0.3, 0.25)),
            Primitive("box", (0.35, 0.3, -0.1), (0.3, 0.3, 0.35), 2, (0.25, 0.7, 0.45)),
        ])
        if name == "toy_specular":
            scene.specular, scene.shininess = 0.6, 12.0
        return scene
    raise KeyError(f"unknown builtin scene {name!r}")


def query(scene: AnalyticScene, x, normals: bool = True):
    """Density, albedo, class id and outward normal at points ``x`` (..., 3).

    The first primitive in list order that contains a point owns it; the
    normal belongs to the primitive whose surface is nearest.  With
    ``normals=False`` the fourth output is None.
    """
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape[:-1]
    sigma = np.zeros(shape)
    albedo = np.zeros(shape + (3,))
    cls = np.zeros(shape, dtype=np.int64)
    owned = np.zeros(shape, dtype=bool)
    for p in scene.primitives:
        inside = (p.sdf(x) <= 0) & ~owned
        sigma[inside] = p.density
        albedo[inside] = p.albedo
        cls[inside] = p.class_id
        owned |= inside
    return sigma, albedo, cls, (nearest_normal(scene, x) if normals else None)


def nearest_normal(scene: AnalyticScene, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    best = np.full(x.shape[:-1], np.inf)
    normal = np.zeros(x.shape)
    normal[..., 2] = 1.0
    for p in scene.primitives:
        d = np.abs(p.sdf(x))
        nearer = d < best
        if nearer.any():
            normal[nearer] = p.normal(x[nearer])
            best[nearer] = d[nearer]
    return normal


def annotation_rotation(pose: CameraPose) -> np.ndarray:
    """Matrix taking world vectors into the frame of normal annotations.

    Normals derived from depth as ``(-dz/dx, -dz/dy, 1)`` live in a camera frame
    with x right, y down and z the depth, sign-flipped so that a surface
    facing the camera has ``+z``.  That equals the camera's local frame with
    its x axis negated.
    """
    return np.diag([-1.0, 1.0, 1.0]) @ pose.rotation.T


def pixel_view_dirs(pose: CameraPose) -> np.ndarray:
    """Unit vectors from a visible surface toward the camera, per pixel, in the annotation frame."""
    rows, cols = np.meshgrid(np.arange(pose.height), np.arange(pose.width), indexing="ij")
    d = np.stack([(cols + 0.5 - pose.cx) / pose.focal, (rows + 0.5 - pose.cy) / pose.focal,
                  np.ones(rows.shape)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass
class OracleImages:
    rgb: np.ndarray  # (H, W, 3)
    sl: np.ndarray  # (H, W, L) per-class weight, background takes the remainder
    sn: np.ndarray  # (H, W, 3) analytic unit normals in the annotation frame
    depth: np.ndarray  # (H, W) sum of w t
    opacity: np.ndarray  # (H, W) sum of w

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.sl, axis=-1)

    @property
    def surface_depth(self) -> np.ndarray:
        """Opacity-normalized depth where the pixel is mostly covered, else 0."""
        fg = self.opacity > 0.5
        return np.where(fg, self.depth / np.where(fg, self.opacity, 1.0), 0.0)


def oracle_render(scene: AnalyticScene, pose: CameraPose, near: float, far: float,
                  steps: int = 4096, chunk: int = 64) -> OracleImages:
    """Midpoint-rule quadrature of the volume rendering integral with exact scene queries.

    Transmittance is accumulated as a running product of per-step survival
    probabilities ``exp(-sigma * dt)``.
    """
    origins, dirs = generate_rays(pose)
    n = len(origins)
    L = scene.n_classes
    dt = (far - near) / steps
    t = near + (np.arange(steps) + 0.5) * dt
    rgb = np.zeros((n, 3))
    sl = np.zeros((n, L))
    nrm = np.zeros((n, 3))
    depth = np.zeros(n)
    opacity = np.zeros(n)
    for s in range(0, n, chunk):
        sl_ = slice(s, s + chunk)
        pts = origins[sl_, None, :] + t[None, :, None] * dirs[sl_, None, :]
        sigma, albedo, cls, _ = query(scene, pts, normals=False)
        normal = np.zeros(pts.shape)
        hit = sigma > 0
        normal[hit] = nearest_normal(scene, pts[hit])
        survive = np.exp(-sigma * dt)
        trans = np.cumprod(np.concatenate([np.ones((len(pts), 1)), survive[:, :-1]], axis=1), axis=1)
        w = trans * (1.0 - survive)
        rgb[sl_] = np.einsum("rs,rsc->rc", w, albedo)
        for c in range(1, L):
            sl[sl_, c] = (w * (cls == c)).sum(axis=1)
        nrm[sl_] = np.einsum("rs,rsc->rc", w, normal)
        depth[sl_] = w @ t
        opacity[sl_] = w.sum(axis=1)
    sl[:, 0] = np.clip(1.0 - sl[:, 1:].sum(axis=1), 0.0, 1.0)
    sl /= sl.sum(axis=1, keepdims=True)
    ann = nrm @ annotation_rotation(pose).T
    norm = np.linalg.norm(ann, axis=1, keepdims=True)
    fg = (opacity > 0.5) & (norm[:, 0] > 1e-9)
    sn = np.tile([0.0, 0.0, 1.0], (n, 1))
    sn[fg] = ann[fg] / norm[fg]
    H, W = pose.height, pose.width
    return OracleImages(rgb.reshape(H, W, 3), sl.reshape(H, W, L), sn.reshape(H, W, 3),
                        depth.reshape(H, W), opacity.reshape(H, W))


class AnalyticField:
    """Adapter exposing an analytic scene through the field-call interface of the renderer."""

    def __init__(self, scene: AnalyticScene):
        self.scene = scene

    def __call__(self, points, dirs, axes, retain=False):
        from .field import FieldOutput
        sigma, albedo, _, _ = query(self.scene, points)
        return FieldOutput(sigma, sigma, {Kind.RGB: albedo})


# -- annotation derivation -----------------------------------------------------

def derive_normal_from_depth(depth, pose: CameraPose, jump: float = 0.1) -> np.ndarray:
    """Normals ``normalize(-dz/dx, -dz/dy, 1)`` from a depth map.

    ``depth`` is the distance along each unit pixel ray (0 marks background).
    Pixels are back-projected into the x-right, y-down, z-forward camera frame;
    tangents come from central differences of neighbouring 3D points, falling
    back to one-sided differences where a neighbour is background or sits
    across a depth jump larger than ``jump * depth``.  The cross product of the
    column and row tangents is parallel to ``(-dz/dx, -dz/dy, 1)``.  Pixels
    without a usable tangent in either direction get ``(0, 0, 1)``.
    """
    z = np.asarray(depth, dtype=np.float64)
    H, W = z.shape
    pts = pixel_view_dirs(pose) * z[..., None]
    valid = z > 0

    def tangent(axis):
        P = np.pad(pts, [(1, 1) if a == axis else (0, 0) for a in range(2)] + [(0, 0)], mode="edge")
        Z = np.pad(z, [(1, 1) if a == axis else (0, 0) for a in range(2)], mode="constant")
        V = np.pad(valid, [(1, 1) if a == axis else (0, 0) for a in range(2)], mode="constant")
        n = z.shape[axis]
        take = lambda A, off: np.take(A, np.arange(1 + off, 1 + off + n), axis=axis)
        ok_f = take(V, 1) & valid & (np.abs(take(Z, 1) - z) < jump * z)
        ok_b = take(V, -1) & valid & (np.abs(take(Z, -1) - z) < jump * z)
        tf = take(P, 1) - pts
        tb = pts - take(P, -1)
        t = np.where((ok_f & ok_b)[..., None], 0.5 * (tf + tb),
                     np.where(ok_f[..., None], tf, tb))
        return t, ok_f | ok_b

    tu, ok_u = tangent(1)
    tv, ok_v = tangent(0)
    n = np.cross(tu, tv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    good = ok_u & ok_v & (norm[..., 0] > 0)
    out = np.zeros((H, W, 3))
    out[..., 2] = 1.0
    out[good] = n[good] / norm[good]
    return out


def _gray(rgb) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    return rgb @ np.array([0.299, 0.587, 0.114])


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


def _gauss_kernel(size: int = 5, sigma: float = 1.4) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    return g / g.sum()


def derive_edges(rgb, low: float = 0.1, high: float = 0.2) -> np.ndarray:
    """Canny edges as a binary (H, W, 1) map.

    Grayscale, 5x5 Gaussian blur (sigma 1.4), Sobel gradients, non-maximum
    suppression over four quantized directions, double threshold relative to
    the largest gradient magnitude, hysteresis over 8-connected components.
    Gradients are snapped to a 1e-9 grid relative to their largest component;
    on a gradient plateau the pixel on the negative side wins, so a step edge
    stays one pixel wide.
    """
    g = ndimage.correlate(_gray(rgb), _gauss_kernel(), mode="nearest")
    gx = ndimage.correlate(g, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(g, _SOBEL_X.T, mode="nearest")
    H, W = g.shape
    out = np.zeros((H, W, 1))
    scale = max(np.abs(gx).max(), np.abs(gy).max())
    if scale <= 1e-12:
        return out
    # snap to a 1e-9 relative grid so rounding noise cannot break plateau ties in the suppression
    gx, gy = np.round(gx / scale, 9), np.round(gy / scale, 9)
    mag = np.hypot(gx, gy)
    top = mag.max()
    ang = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    sector = np.digitize(ang, [22.5, 67.5, 112.5, 157.5]) % 4
    # (drow, dcol) of the neighbour along the positive gradient direction per sector
    steps = np.array([(0, 1), (1, 1), (1, 0), (1, -1)])
    padded = np.pad(mag, 1)
    rows, cols = np.indices(mag.shape)
    dr, dc = steps[sector, 0], steps[sector, 1]
    ahead = padded[rows + 1 + dr, cols + 1 + dc]
    behind = padded[rows + 1 - dr, cols + 1 - dc]
    nms = np.where((mag > behind) & (mag >= ahead), mag, 0.0)
    strong = nms >= high * top
    weak = nms >= low * top
    labels, count = ndimage.label(weak, structure=np.ones((3, 3)))
    keep = np.zeros(count + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    out[..., 0] = keep[labels]
    return out


def derive_shading(normals, light, mask=None, view_dirs=None, specular: float = 0.0,
                   shininess: float = 16.0) -> np.ndarray:
    """Lambertian ``max(0, n . l)``, optionally blended with a Blinn-Phong highlight.

    ``light`` and ``view_dirs`` (surface toward camera) must be in the frame of
    ``normals``; output is (H, W, 1) clamped to [0, 1] and 0 outside ``mask``.
    """
    n = np.asarray(normals, dtype=np.float64)
    light = np.asarray(light, dtype=np.float64)
    shade = np.maximum(0.0, n @ light)
    if specular > 0:
        if view_dirs is None:
            raise ValueError("specular shading needs view directions")
        h = light + np.asarray(view_dirs)
        h /= np.linalg.norm(h, axis=-1, keepdims=True)
        shade = (1.0 - specular) * shade + specular * np.maximum(0.0, (n * h).sum(-1)) ** shininess
    shade = np.clip(shade, 0.0, 1.0)
    if mask is not None:
        shade = np.where(mask, shade, 0.0)
    return shade[..., None]


def derive_keypoints(rgb, k: float = 0.04, threshold: float = 0.1, spread: float = 1.5) -> np.ndarray:
    """Harris corners splatted as Gaussian blobs, (H, W, 1) in [0, 1].

    Response ``det(M) - k tr(M)^2`` with the structure tensor summed over a 3x3
    window, clipped at 0 and divided by its maximum; every 3x3 local maximum
    above ``threshold`` becomes a blob of width ``spread`` pixels.
    """
    g = _gray(rgb)
    ix = ndimage.correlate(g, _SOBEL_X, mode="nearest")
    iy = ndimage.correlate(g, _SOBEL_X.T, mode="nearest")
    box = np.ones((3, 3))
    sxx = ndimage.correlate(ix * ix, box, mode="nearest")
    syy = ndimage.correlate(iy * iy, box, mode="nearest")
    sxy = ndimage.correlate(ix * iy, box, mode="nearest")
    resp = sxx * syy - sxy**2 - k * (sxx + syy) ** 2
    out = np.zeros(g.shape + (1,))
    top = resp.max()
    if top <= 1e-12:
        return out
    r = np.maximum(resp, 0.0) / top
    peaks = (r == ndimage.maximum_filter(r, size=3, mode="constant")) & (r > threshold)
    dist = ndimage.distance_transform_edt(~peaks)
    out[..., 0] = np.exp(-(dist**2) / (2 * spread**2))
    return out


# -- datasets ------------------------------------------------------------------

PROPERTY_FILES = {Kind.RGB: ["rgb.png"], Kind.SL: ["sl.png", "sl.prob"], Kind.SN: ["sn.png"],
                  Kind.SH: ["sh.png"], Kind.KP: ["kp.png"], Kind.ED: ["ed.png"]}


def annotate(scene: AnalyticScene, pose: CameraPose, oracle: OracleImages) -> dict:
    """All property ground truths of one view, as readout-space arrays."""
    depth = oracle.surface_depth
    sn = derive_normal_from_depth(depth, pose)
    R = annotation_rotation(pose)
    sh = derive_shading(sn, R @ np.asarray(scene.light_direction), mask=depth > 0,
                        view_dirs=pixel_view_dirs(pose), specular=scene.specular,
                        shininess=scene.shininess)
    return {
        Kind.RGB: oracle.rgb,
        Kind.SL: oracle.sl,
        Kind.SN: sn,
        Kind.SH: sh,
        Kind.KP: derive_keypoints(oracle.rgb),
        Kind.ED: derive_edges(oracle.rgb),
    }


def scene_bounds(radius: float) -> tuple[float, float]:
    """Ray interval covering the [-1, 1]^3 cube from a camera at ``radius``."""
    return max(0.05, radius - np.sqrt(3.0)), radius + np.sqrt(3.0)


def gen_dataset(scene: AnalyticScene, n_views: int, seed: int, out_dir, width: int = 64,
                height: int = 64, fov_deg: float = 40.0, radius: float = 3.2, steps: int = 2048,
                test_stride: int = 5) -> Path:
    """Render every property of ``n_views`` orbit cameras into ``out_dir``.

    Every ``test_stride``-th view (offset ``test_stride // 2``) is held out
    for testing.  Output is byte-identical for identical arguments.
    """
    if n_views < 2:
        raise ValueError("need at least two views")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    phase = float(rng.uniform(0, 2 * np.pi))
    poses = orbit_poses(n_views, radius, width, height, fov_deg, elevations=(15.0, 35.0, 25.0), phase=phase)
    near, far = scene_bounds(radius)
    scene.save(out / "scene.json")
    write_poses(out / "poses.txt", poses)
    views = []
    for i, pose in enumerate(poses):
        vdir = out / f"view_{i:04d}"
        vdir.mkdir(exist_ok=True)
        oracle = oracle_render(scene, pose, near, far, steps)
        files = []
        for kind, data in annotate(scene, pose, oracle).items():
            files += imaging.write_property(vdir, kind, data, scene.class_names)
        imaging.write_f32(vdir / "depth.f32", oracle.surface_depth)
        files.append("depth.f32")
        split = "test" if i % test_stride == test_stride // 2 else "train"
        views.append({"index": i, "dir": vdir.name, "split": split, "files": files})
    manifest = {
        "width": width, "height": height, "n_views": n_views, "seed": seed, "near": near, "far": far,
        "fov_deg": fov_deg, "radius": radius, "oracle_steps": steps,
        "class_names": scene.class_names, "properties": [k.value for k in Kind], "views": views,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out
