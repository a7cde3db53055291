"""On-disk formats for property images, label maps and raw float buffers."""
from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .properties import Kind

# background, then a fixed cycle of distinguishable colors
PALETTE = np.array([
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40),
], dtype=np.uint8)


def write_png8(path, img) -> None:
    """Values in [0, 1] quantized to 8 bits; (H, W), (H, W, 1) or (H, W, 3)."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    q = np.round(np.clip(a, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(q).save(path, format="PNG")


def read_png8(path) -> np.ndarray:
    a = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    return a[..., None] if a.ndim == 2 else a


def write_label_png(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.max(initial=0) >= 256:
        raise ValueError("paletted PNG holds at most 256 classes")
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    pal = np.resize(PALETTE, (256, 3))
    im.putpalette(pal.ravel().tolist())
    im.save(path, format="PNG")


def read_label_png(path) -> np.ndarray:
    return np.asarray(Image.open(path)).astype(np.int64)


def write_png16(path, img) -> None:
    """Three channels in [0, 1] as a 16-bit RGB PNG."""
    q = np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 65535).astype(np.uint16)
    if not cv2.imwrite(str(path), q[..., ::-1]):
        raise OSError(f"could not write {path}")


def read_png16(path) -> np.ndarray:
    a = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if a is None:
        raise OSError(f"could not read {path}")
    return a[..., ::-1].astype(np.float32) / 65535.0


def write_f32(path, arr) -> None:
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_f32(path, shape) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(shape).copy()


def write_prob(path, probs, class_names) -> None:
    """Per-class probabilities: one JSON header line, then float32 little-endian (H, W, L)."""
    probs = np.asarray(probs)
    header = {"height": probs.shape[0], "width": probs.shape[1], "classes": list(class_names)}
    Path(path).write_bytes(json.dumps(header).encode() + b"\n" +
                           np.ascontiguousarray(probs, dtype="<f4").tobytes())


def read_prob(path):
    raw = Path(path).read_bytes()
    head, _, body = raw.partition(b"\n")
    header = json.loads(head)
    shape = (header["height"], header["width"], len(header["classes"]))
    return np.frombuffer(body, dtype="<f4").reshape(shape).copy(), header


def write_property(directory, kind: Kind, data, class_names=None) -> list[str]:
    """Write one property image in its native format; returns the file names written.

    ``data`` is the readout value: RGB/SH/KP/ED in [0, 1], SL per-class
    probabilities, SN unit normals.
    """
    d = Path(directory)
    if kind is Kind.SL:
        names = class_names or [f"class_{i}" for i in range(data.shape[-1])]
        write_label_png(d / "sl.png", np.argmax(data, axis=-1))
        write_prob(d / "sl.prob", data, names)
        return ["sl.png", "sl.prob"]
    if kind is Kind.SN:
        write_png16(d / "sn.png", (np.asarray(data) + 1.0) / 2.0)
        return ["sn.png"]
    write_png8(d / f"{kind.value}.png", data)
    return [f"{kind.value}.png"]
