import json
import math
from collections import deque

import numpy as np
import pytest
from scipy import ndimage

from ssnerf.dataset import load_dataset
from ssnerf.geometry import CameraPose, orbit_poses
from ssnerf.properties import Kind
from ssnerf.renderer import PropertyImage
from ssnerf.scene import (AnalyticScene, Primitive, annotation_rotation, builtin_scene, derive_edges,
                          derive_keypoints, derive_normal_from_depth, derive_shading, gen_dataset, oracle_render,
                          pixel_view_dirs, query, scene_bounds)


def unit_sphere_scene(density=100.0):
    return AnalyticScene([Primitive("sphere", (0, 0, 0), (1.0,), 1, (0.7, 0.2, 0.1), density)],
                         class_names=["bg", "ball"])


def test_query_examples():
    scene = unit_sphere_scene(37.0)
    sigma, albedo, cls, normal = query(scene, np.array([[0.0, 0, 0], [1.0, 0, 0], [0, 0, 1.0001], [1.5, 0, 0]]))
    assert sigma[0] == 37.0 and cls[0] == 1
    np.testing.assert_allclose(albedo[0], [0.7, 0.2, 0.1])
    np.testing.assert_allclose(normal[1], [1, 0, 0])
    assert sigma[2] == 0 and sigma[3] == 0 and cls[3] == 0
    np.testing.assert_allclose(normal[2], [0, 0, 1])


def test_first_primitive_owns_overlap():
    a = Primitive("sphere", (0, 0, 0), (0.5,), 1, (1, 0, 0), 10.0)
    b = Primitive("box", (0.2, 0, 0), (0.5, 0.5, 0.5), 2, (0, 1, 0), 20.0)
    sigma, _, cls, _ = query(AnalyticScene([a, b]), np.array([[0.1, 0, 0], [0.6, 0, 0]]))
    assert (sigma[0], cls[0]) == (10.0, 1)
    assert (sigma[1], cls[1]) == (20.0, 2)


def test_box_normals():
    box = Primitive("box", (0, 0, 0), (0.5, 0.3, 0.2), 1, (1, 1, 1))
    n = box.normal(np.array([[0.6, 0, 0], [0, -0.29, 0], [0, 0, 0.5]]))
    np.testing.assert_allclose(n, [[1, 0, 0], [0, -1, 0], [0, 0, 1]])


def test_scene_validation_and_round_trip(tmp_path):
    with pytest.raises(ValueError):
        AnalyticScene([Primitive("sphere", (0.9, 0, 0), (0.5,), 1, (1, 1, 1))])
    with pytest.raises(ValueError):
        AnalyticScene([Primitive("sphere", (0, 0, 0), (0.5,), 5, (1, 1, 1))])
    with pytest.raises(ValueError):
        Primitive("cone", (0, 0, 0), (0.5,), 1, (1, 1, 1))
    scene = builtin_scene("toy_specular")
    scene.save(tmp_path / "s.json")
    assert AnalyticScene.load(tmp_path / "s.json") == scene


POSE = orbit_poses(1, 3.2, 16, 16, 40.0)[0]
NEAR, FAR = scene_bounds(3.2)


def test_empty_scene_renders_black():
    out = oracle_render(AnalyticScene([], class_names=["bg"]), POSE, NEAR, FAR, steps=256)
    np.testing.assert_array_equal(out.rgb, 0)
    np.testing.assert_array_equal(out.opacity, 0)
    np.testing.assert_array_equal(out.labels, 0)
    np.testing.assert_array_equal(out.sn, np.broadcast_to([0, 0, 1.0], out.sn.shape))


def test_dense_sphere_saturates_to_albedo():
    scene = AnalyticScene([Primitive("sphere", (0, 0, 0), (0.8,), 1, (0.7, 0.2, 0.1), 1e5)], class_names=["bg", "b"])
    out = oracle_render(scene, POSE, NEAR, FAR, steps=512)
    center = out.rgb[8, 8]
    np.testing.assert_allclose(center, [0.7, 0.2, 0.1], atol=1e-12)
    assert out.labels[8, 8] == 1 and out.labels[0, 0] == 0


def interior_mask(opacity):
    covered = opacity > 0.5
    return ndimage.binary_erosion(covered, iterations=2) | ~ndimage.binary_dilation(covered, iterations=2)


def test_oracle_self_convergence():
    scene = builtin_scene("toy")
    a = oracle_render(scene, POSE, NEAR, FAR, steps=4096)
    b = oracle_render(scene, POSE, NEAR, FAR, steps=8192)
    # pixels covered by one primitive well away from any silhouette
    single = interior_mask(a.opacity)
    labels = a.labels
    same = ndimage.minimum_filter(labels, 5) == ndimage.maximum_filter(labels, 5)
    m = single & same
    assert m.sum() > 100
    assert np.abs(a.rgb - b.rgb)[m].max() < 1e-4


def plane_depth(pose, z0, slope_x):
    """Distance along each pixel ray to the camera-frame plane z = z0 + slope_x * x."""
    d = pixel_view_dirs(pose)
    # (x, z) of a unit-distance point are (d_x, d_z); solve s d_z = z0 + slope_x s d_x
    return z0 / (d[..., 2] - slope_x * d[..., 0])


def test_derived_normal_planes():
    pose = CameraPose(np.eye(3), np.zeros(3), 20.0, 12, 10)
    flat = derive_normal_from_depth(plane_depth(pose, 2.0, 0.0), pose)
    np.testing.assert_allclose(flat, np.broadcast_to([0, 0, 1.0], flat.shape), atol=1e-12)
    tilted = derive_normal_from_depth(plane_depth(pose, 2.0, 1.0), pose)
    r = 1 / math.sqrt(2)
    np.testing.assert_allclose(tilted, np.broadcast_to([-r, 0, r], tilted.shape), atol=1e-9)
    bg = derive_normal_from_depth(np.zeros((10, 12)), pose)
    np.testing.assert_array_equal(bg, np.broadcast_to([0, 0, 1.0], bg.shape))


def test_derived_normals_on_sphere_match_analytic():
    pose = orbit_poses(2, 3.2, 48, 48, 40.0)[1]
    out = oracle_render(unit_sphere_scene(400.0), pose, NEAR, FAR, steps=2048)
    derived = derive_normal_from_depth(out.surface_depth, pose)
    m = ndimage.binary_erosion(out.opacity > 0.5, iterations=2)
    cos = np.clip((derived * out.sn).sum(-1), -1, 1)
    assert m.sum() > 300
    assert np.degrees(np.arccos(cos[m])).mean() < 3.0


def test_annotation_frame_for_facing_surface():
    pose = orbit_poses(1, 3.0, 8, 8, 40.0)[0]
    R = annotation_rotation(pose)
    # the world normal pointing back at the camera maps to +z
    np.testing.assert_allclose(R @ pose.optical_axis, [0, 0, 1], atol=1e-12)


# -- edges -------------------------------------------------------------------------

def reference_canny(rgb, low=0.1, high=0.2):
    """Loop-based Canny with clamp-to-edge borders."""
    H, W, _ = rgb.shape
    gray = [[0.299 * rgb[i, j, 0] + 0.587 * rgb[i, j, 1] + 0.114 * rgb[i, j, 2] for j in range(W)] for i in range(H)]
    at = lambda img, i, j: img[min(max(i, 0), H - 1)][min(max(j, 0), W - 1)]
    g = [[math.exp(-(a * a + b * b) / (2 * 1.4**2)) for b in range(-2, 3)] for a in range(-2, 3)]
    gs = sum(map(sum, g))
    blur = [[sum(g[a + 2][b + 2] * at(gray, i + a, j + b) for a in range(-2, 3) for b in range(-2, 3)) / gs
             for j in range(W)] for i in range(H)]
    sob = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    gx = [[sum(sob[a + 1][b + 1] * at(blur, i + a, j + b) for a in (-1, 0, 1) for b in (-1, 0, 1))
           for j in range(W)] for i in range(H)]
    gy = [[sum(sob[b + 1][a + 1] * at(blur, i + a, j + b) for a in (-1, 0, 1) for b in (-1, 0, 1))
           for j in range(W)] for i in range(H)]
    scale = max(abs(v) for row in gx + gy for v in row)
    if scale <= 1e-12:
        return np.zeros((H, W))
    gx = [[round(v / scale, 9) for v in row] for row in gx]
    gy = [[round(v / scale, 9) for v in row] for row in gy]
    mag = [[math.hypot(gx[i][j], gy[i][j]) for j in range(W)] for i in range(H)]
    top = max(map(max, mag))
    get = lambda i, j: mag[i][j] if 0 <= i < H and 0 <= j < W else 0.0
    nms = [[0.0] * W for _ in range(H)]
    for i in range(H):
        for j in range(W):
            ang = math.degrees(math.atan2(gy[i][j], gx[i][j])) % 180
            if ang < 22.5 or ang >= 157.5:
                di, dj = 0, 1
            elif ang < 67.5:
                di, dj = 1, 1
            elif ang < 112.5:
                di, dj = 1, 0
            else:
                di, dj = 1, -1
            if mag[i][j] > get(i - di, j - dj) and mag[i][j] >= get(i + di, j + dj):
                nms[i][j] = mag[i][j]
    out = np.zeros((H, W))
    queue = deque((i, j) for i in range(H) for j in range(W) if nms[i][j] >= high * top)
    for i, j in queue:
        out[i, j] = 1
    while queue:
        i, j = queue.popleft()
        for a in (-1, 0, 1):
            for b in (-1, 0, 1):
                y, x = i + a, j + b
                if 0 <= y < H and 0 <= x < W and not out[y, x] and nms[y][x] >= low * top:
                    out[y, x] = 1
                    queue.append((y, x))
    return out


def test_edges_constant_image():
    assert derive_edges(np.full((16, 16, 3), 0.4)).sum() == 0


def test_edges_vertical_step_is_one_pixel_wide():
    img = np.zeros((20, 20, 3))
    img[:, 10:] = 1.0
    e = derive_edges(img)[..., 0]
    assert set(np.unique(e)) == {0.0, 1.0}
    for row in e:
        assert row.sum() == 1 and row[9:11].sum() == 1
    assert len(set(np.flatnonzero(e.any(0)))) == 1


def test_edges_checkerboard_matches_reference():
    idx = np.arange(32) // 4
    board = ((idx[:, None] + idx[None, :]) % 2).astype(float)
    img = np.repeat(board[..., None], 3, axis=2)
    ours = derive_edges(img)[..., 0] > 0
    ref = reference_canny(img) > 0
    iou = (ours & ref).sum() / (ours | ref).sum()
    assert ref.sum() > 100 and iou > 0.95


def test_edges_on_random_image_match_reference():
    img = ndimage.gaussian_filter(np.random.default_rng(0).random((24, 24, 3)), (1.5, 1.5, 0))
    ours = derive_edges(img)[..., 0] > 0
    ref = reference_canny(img) > 0
    assert (ours & ref).sum() / max((ours | ref).sum(), 1) > 0.95


# -- shading and keypoints ---------------------------------------------------------

def test_shading_examples():
    light = np.array([0.0, 0.6, 0.8])
    n = np.array([[light, [1.0, 0, 0], -light]])
    np.testing.assert_allclose(derive_shading(n, light)[..., 0], [[1.0, 0.0, 0.0]])
    masked = derive_shading(n, light, mask=np.array([[False, True, True]]))
    assert masked[0, 0, 0] == 0
    with pytest.raises(ValueError):
        derive_shading(n, light, specular=0.5)
    spec = derive_shading(n[:, :1], light, view_dirs=light[None, None], specular=0.5)
    assert spec[0, 0, 0] == pytest.approx(1.0)


def brute_force_harris(gray, k=0.04):
    H, W = gray.shape
    at = lambda i, j: gray[min(max(i, 0), H - 1), min(max(j, 0), W - 1)]
    ix = np.zeros((H, W))
    iy = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            ix[i, j] = (at(i - 1, j + 1) + 2 * at(i, j + 1) + at(i + 1, j + 1)
                        - at(i - 1, j - 1) - 2 * at(i, j - 1) - at(i + 1, j - 1))
            iy[i, j] = (at(i + 1, j - 1) + 2 * at(i + 1, j) + at(i + 1, j + 1)
                        - at(i - 1, j - 1) - 2 * at(i - 1, j) - at(i - 1, j + 1))
    resp = np.full((H, W), -np.inf)
    for i in range(H):
        for j in range(W):
            win = [(min(max(a, 0), H - 1), min(max(b, 0), W - 1)) for a in (i - 1, i, i + 1) for b in (j - 1, j, j + 1)]
            sxx = sum(ix[p] ** 2 for p in win)
            syy = sum(iy[p] ** 2 for p in win)
            sxy = sum(ix[p] * iy[p] for p in win)
            resp[i, j] = sxx * syy - sxy * sxy - k * (sxx + syy) ** 2
    return resp


def test_l_corner_keypoint():
    img = np.zeros((24, 24, 3))
    img[12:, 12:] = 1.0
    kp = derive_keypoints(img)[..., 0]
    assert kp.min() >= 0 and kp.max() == pytest.approx(1.0)
    peak = np.unravel_index(np.argmax(kp), kp.shape)
    ref = np.unravel_index(np.argmax(brute_force_harris(img[..., 0])), kp.shape)
    assert abs(peak[0] - ref[0]) <= 1 and abs(peak[1] - ref[1]) <= 1
    assert abs(peak[0] - 11.5) <= 1.5 and abs(peak[1] - 11.5) <= 1.5
    assert derive_keypoints(np.full((8, 8, 3), 0.3)).sum() == 0


# -- datasets ----------------------------------------------------------------------

def test_gen_dataset_deterministic_and_complete(tmp_path):
    scene = builtin_scene("two_spheres")
    a = gen_dataset(scene, 10, 3, tmp_path / "a", width=12, height=10, steps=256)
    b = gen_dataset(scene, 10, 3, tmp_path / "b", width=12, height=10, steps=256)
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files_a == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files_a:
        assert (a / f).read_bytes() == (b / f).read_bytes(), f

    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["properties"] == ["rgb", "sl", "sn", "sh", "kp", "ed"]
    for v in manifest["views"]:
        for name in ("rgb.png", "sl.png", "sn.png", "sh.png", "kp.png", "ed.png"):
            assert name in v["files"] and (a / v["dir"] / name).exists()
    splits = [v["split"] for v in manifest["views"]]
    assert splits.count("test") == 2 and splits.count("train") == 8

    ds = load_dataset(a)
    assert ds.test_views == [2, 7]
    for kind, stack in ds.images.items():
        for img in stack:
            PropertyImage(kind, img.astype(np.float64)).check(tol_unit=1e-3)
    assert set(np.unique(ds.images[Kind.ED])) <= {0.0, 1.0}
    np.testing.assert_array_equal(ds.labels, ds.images[Kind.SL].argmax(-1))


def test_different_seed_changes_cameras(tmp_path):
    scene = builtin_scene("two_spheres")
    a = gen_dataset(scene, 2, 0, tmp_path / "a", width=8, height=8, steps=64)
    b = gen_dataset(scene, 2, 1, tmp_path / "b", width=8, height=8, steps=64)
    assert (a / "poses.txt").read_text() != (b / "poses.txt").read_text()
