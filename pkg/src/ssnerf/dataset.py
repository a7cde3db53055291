"""Loading generated datasets into stacked in-memory arrays."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imaging
from .geometry import CameraPose, generate_rays, read_poses
from .properties import Kind

__all__ = ["Dataset", "DatasetError", "load_dataset"]


class DatasetError(RuntimeError):
    pass


@dataclass
class Dataset:
    """All views of one scene.

    ``images`` maps each property to a (V, H, W, C) float32 array in readout
    space: RGB/SH/KP/ED in [0, 1], SL per-class probabilities, SN unit normals.
    ``labels`` holds the (V, H, W) semantic class indices.
    """

    root: Path | None
    poses: list
    near: float
    far: float
    class_names: list
    images: dict
    labels: np.ndarray | None
    depth: np.ndarray  # (V, H, W), 0 on background
    train_views: list
    test_views: list

    @property
    def height(self) -> int:
        return self.poses[0].height

    @property
    def width(self) -> int:
        return self.poses[0].width

    @property
    def n_views(self) -> int:
        return len(self.poses)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def rays(self):
        """Origins, directions and camera axes for every pixel, each (V, H*W, 3)."""
        if not hasattr(self, "_rays"):
            o, d = zip(*(generate_rays(p) for p in self.poses))
            axes = np.stack([np.broadcast_to(p.optical_axis, d[0].shape) for p in self.poses])
            self._rays = (np.stack(o), np.stack(d), axes)
        return self._rays

    def subset(self, views) -> "Dataset":
        """Same dataset with training restricted to ``views`` (test split unchanged)."""
        views = [int(v) for v in views]
        bad = [v for v in views if not 0 <= v < self.n_views]
        if bad or not views:
            raise DatasetError(f"view subset {views} invalid for {self.n_views} views")
        return Dataset(self.root, self.poses, self.near, self.far, self.class_names, self.images,
                       self.labels, self.depth, views, self.test_views)


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DatasetError(f"missing manifest: {mpath}")
    manifest = json.loads(mpath.read_text())
    poses: list[CameraPose] = read_poses(root / "poses.txt")
    H, W = manifest["height"], manifest["width"]
    kinds = [Kind(k) for k in manifest["properties"]]
    stacks: dict[Kind, list] = {k: [] for k in kinds}
    labels, depth = [], []
    for view in manifest["views"]:
        vdir = root / view["dir"]

        def need(name):
            path = vdir / name
            if not path.exists():
                raise DatasetError(f"missing property image: {path}")
            return path

        for k in kinds:
            if k is Kind.SL:
                probs, _ = imaging.read_prob(need("sl.prob"))
                stacks[k].append(probs)
                labels.append(imaging.read_label_png(need("sl.png")))
            elif k is Kind.SN:
                n = 2.0 * imaging.read_png16(need("sn.png")) - 1.0
                stacks[k].append(n / np.linalg.norm(n, axis=-1, keepdims=True))
            else:
                stacks[k].append(imaging.read_png8(need(f"{k.value}.png")))
        depth.append(imaging.read_f32(need("depth.f32"), (H, W)))
    images = {k: np.stack(v).astype(np.float32) for k, v in stacks.items()}
    split = {"train": [], "test": []}
    for view in manifest["views"]:
        split[view["split"]].append(view["index"])
    return Dataset(root, poses, float(manifest["near"]), float(manifest["far"]), manifest["class_names"],
                   images, np.stack(labels) if labels else None, np.stack(depth), split["train"], split["test"])
