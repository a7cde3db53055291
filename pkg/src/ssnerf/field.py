"""The trainable implicit function: shared coordinate trunk plus decoder heads.

The trunk reads only the encoded position.  Density comes from a linear head
on the trunk feature.  Decoder heads are grouped: the ``view`` group adds the
encoded ray direction to its hidden layer, the ``no_view`` group sees the
trunk feature alone, and the surface-normal head gets the encoded camera
axis.  Per-ray conditioning inputs are applied once per ray and broadcast
over that ray's samples.

Gradients are computed by explicit backprop through the fixed architecture;
each :class:`Field` retains the intermediates of its last forward pass.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .geometry import encoding_dim, positional_encode
from .properties import Branch, ConfigError, Kind, PropertySpec

__all__ = [
    "FieldConfig",
    "ParameterTape",
    "FieldOutput",
    "Field",
    "StateError",
    "CheckpointError",
    "init_params",
    "load_encoder_from",
    "save_checkpoint",
    "load_checkpoint",
    "config_digest",
]


class StateError(RuntimeError):
    """Backward requested without a retained forward pass."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class FieldConfig:
    pos_freqs: int = 10
    dir_freqs: int = 4
    trunk_depth: int = 8
    trunk_width: int = 256
    skip: int | None = 4  # trunk layer whose input also gets the encoded position
    head_width: int = 128
    scene_scale: float = 1.0  # world points are divided by this before encoding
    pose_freqs: int = 1  # frequencies of the camera-axis encoding read by the SN head

    @property
    def pos_dim(self) -> int:
        return encoding_dim(3, self.pos_freqs)

    @property
    def dir_dim(self) -> int:
        return encoding_dim(3, self.dir_freqs)

    @property
    def pose_dim(self) -> int:
        return encoding_dim(3, self.pose_freqs)


class ParameterTape:
    """Named parameter arrays backed by one flat buffer, plus matching gradients."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], dtype=np.float64, seed: int = 0):
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        self.layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in shapes.items():
            self.layout[name] = (offset, tuple(shape))
            offset += int(np.prod(shape))
        self.data = np.zeros(offset, dtype=self.dtype)
        self.grad = np.zeros(offset, dtype=self.dtype)
        self.params = {n: self._view(self.data, n) for n in self.layout}
        self.grads = {n: self._view(self.grad, n) for n in self.layout}

    def _view(self, buf, name):
        off, shape = self.layout[name]
        return buf[off:off + int(np.prod(shape))].reshape(shape)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.layout

    def names(self):
        return list(self.layout)

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        self.grad[...] = 0

    def shadow(self) -> "ParameterTape":
        """A tape sharing this one's parameter buffer but owning a separate, zeroed gradient."""
        out = object.__new__(ParameterTape)
        out.dtype, out.seed, out.layout, out.data, out.params = self.dtype, self.seed, self.layout, self.data, self.params
        out.grad = np.zeros_like(self.grad)
        out.grads = {n: out._view(out.grad, n) for n in self.layout}
        return out

    def copy(self, dtype=None) -> "ParameterTape":
        out = ParameterTape({n: s for n, (_, s) in self.layout.items()}, dtype or self.dtype, self.seed)
        out.data[...] = self.data
        return out


def _group_of(spec: PropertySpec) -> str:
    if spec.uses_pose:
        return "sn"
    return spec.branch.value


def _architecture(config: FieldConfig, specs: list[PropertySpec]) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    w, x = config.trunk_width, config.pos_dim
    for i in range(config.trunk_depth):
        fan_in = x if i == 0 else w
        if config.skip is not None and i == config.skip and i > 0:
            fan_in += x
        shapes[f"trunk/{i}/W"] = (fan_in, w)
        shapes[f"trunk/{i}/b"] = (w,)
    shapes["sigma/W"] = (w, 1)
    shapes["sigma/b"] = (1,)
    hw = config.head_width
    for group, members in _groups(specs).items():
        shapes[f"{group}/hidden/W"] = (w, hw)
        cond = _cond_dim(config, group, members)
        if cond:
            shapes[f"{group}/hidden/C"] = (cond, hw)
        shapes[f"{group}/hidden/b"] = (hw,)
        for s in members:
            shapes[f"{group}/out/{s.kind.value}/W"] = (hw, s.channels)
            shapes[f"{group}/out/{s.kind.value}/b"] = (s.channels,)
    return shapes


def _groups(specs: list[PropertySpec]) -> dict[str, list[PropertySpec]]:
    groups: dict[str, list[PropertySpec]] = {}
    for s in specs:
        groups.setdefault(_group_of(s), []).append(s)
    return groups


def _cond_dim(config: FieldConfig, group: str, members: list[PropertySpec]) -> int:
    if group == "view":
        return config.dir_dim
    if group == "sn":
        # pose encoding, plus the view direction when SN is forced onto the view branch
        return config.pose_dim + (config.dir_dim if members[0].branch is Branch.VIEW else 0)
    return 0


def init_params(config: FieldConfig, specs: list[PropertySpec], seed: int, dtype=np.float64) -> ParameterTape:
    """Uniform He fan-in initialization; biases start at zero."""
    tape = ParameterTape(_architecture(config, specs), dtype, seed)
    rng = np.random.default_rng(seed)
    for name in tape.names():
        arr = tape[name]
        if name.endswith("/b"):
            continue
        fan_in = arr.shape[0]
        if name.endswith("/C"):
            fan_in += tape[name[:-1] + "W"].shape[0]
        elif name.endswith("/hidden/W") and name[:-1] + "C" in tape:
            fan_in += tape[name[:-1] + "C"].shape[0]
        bound = np.sqrt(6.0 / fan_in)
        arr[...] = rng.uniform(-bound, bound, size=arr.shape)
    return tape


def load_encoder_from(source: ParameterTape, config: FieldConfig, specs: list[PropertySpec],
                      seed: int, dtype=None) -> ParameterTape:
    """Fresh parameters whose trunk is copied from ``source``; every head is re-initialized."""
    tape = init_params(config, specs, seed, dtype or source.dtype)
    for name in tape.names():
        if not name.startswith("trunk/"):
            continue
        if name not in source or source[name].shape != tape[name].shape:
            got = source[name].shape if name in source else None
            raise CheckpointError(f"trunk layer {name}: checkpoint shape {got} != model {tape[name].shape}")
        tape[name][...] = source[name]
    return tape


@dataclass
class FieldOutput:
    density: np.ndarray  # (R, S), softplus of density_raw
    density_raw: np.ndarray
    properties: dict[Kind, np.ndarray]  # kind -> (R, S, C)


class Field:
    """One network (coarse or fine) bound to its parameters and property specs."""

    def __init__(self, config: FieldConfig, specs: list[PropertySpec], params: ParameterTape):
        self.config = config
        self.specs = list(specs)
        self.params = params
        self.groups = _groups(self.specs)
        expected = _architecture(config, self.specs)
        actual = {n: s for n, (_, s) in params.layout.items()}
        if expected != actual:
            raise ConfigError("parameter layout does not match field configuration")
        self._cache = None

    @property
    def dtype(self):
        return self.params.dtype

    def encode(self, points, dirs, axes):
        c = self.config
        x = positional_encode(np.asarray(points, dtype=self.dtype) / c.scene_scale, c.pos_freqs)
        d = positional_encode(np.asarray(dirs, dtype=self.dtype), c.dir_freqs)
        p = positional_encode(np.asarray(axes, dtype=self.dtype), c.pose_freqs)
        return x, d, p

    def __call__(self, points, dirs, axes, retain: bool = True) -> FieldOutput:
        """Query at ``points`` (R, S, 3) for rays with directions (R, 3) and camera axes (R, 3)."""
        return self.forward(*self.encode(points, dirs, axes), retain=retain)

    def forward(self, x_enc, d_enc, pose_enc, retain: bool = True) -> FieldOutput:
        """Forward pass on encodings ``x_enc`` (R, S, Dx), ``d_enc`` (R, Dd), ``pose_enc`` (R, Dp)."""
        c, P = self.config, self.params
        x_enc = np.asarray(x_enc, dtype=self.dtype)
        d_enc = np.asarray(d_enc, dtype=self.dtype)
        pose_enc = np.asarray(pose_enc, dtype=self.dtype)
        if x_enc.ndim != 3 or x_enc.shape[-1] != c.pos_dim:
            raise ConfigError(f"position encoding must be (R, S, {c.pos_dim}), got {x_enc.shape}")
        R, S, _ = x_enc.shape
        for name, enc, dim in (("direction", d_enc, c.dir_dim), ("pose", pose_enc, c.pose_dim)):
            if enc.shape != (R, dim):
                raise ConfigError(f"{name} encoding must be ({R}, {dim}), got {enc.shape}")
        x = x_enc.reshape(R * S, -1)

        trunk = []
        h = x
        for i in range(c.trunk_depth):
            inp = np.concatenate([h, x], axis=1) if (i == c.skip and i > 0) else h
            z = inp @ P[f"trunk/{i}/W"]
            z += P[f"trunk/{i}/b"]
            mask = z > 0
            z *= mask
            trunk.append((inp, mask))
            h = z

        s_raw = (h @ P["sigma/W"] + P["sigma/b"])[:, 0]
        sigma = np.logaddexp(0, s_raw)

        props: dict[Kind, np.ndarray] = {}
        heads = {}
        for group, members in self.groups.items():
            a = h @ P[f"{group}/hidden/W"]
            a += P[f"{group}/hidden/b"]
            cond = self._cond(group, members, d_enc, pose_enc)
            if cond is not None:
                a = (a.reshape(R, S, -1) + (cond @ P[f"{group}/hidden/C"])[:, None, :]).reshape(R * S, -1)
            amask = a > 0
            a *= amask
            heads[group] = (a, amask, cond)
            for s in members:
                y = a @ P[f"{group}/out/{s.kind.value}/W"] + P[f"{group}/out/{s.kind.value}/b"]
                if s.bounded:
                    y = expit(y)
                props[s.kind] = y.reshape(R, S, s.channels)

        if retain:
            self._cache = dict(R=R, S=S, trunk=trunk, h=h, s_raw=s_raw, heads=heads, props=props)
        return FieldOutput(sigma.reshape(R, S), s_raw.reshape(R, S), props)

    def _cond(self, group, members, d_enc, pose_enc):
        if group == "view":
            return d_enc
        if group == "sn":
            if members[0].branch is Branch.VIEW:
                return np.concatenate([pose_enc, d_enc], axis=1)
            return pose_enc
        return None

    def backward(self, d_density, d_props: dict[Kind, np.ndarray]) -> None:
        """Accumulate parameter gradients given dL/d(density) (R, S) and dL/d(property) (R, S, C)."""
        if self._cache is None:
            raise StateError("backward called without a retained forward pass")
        cache, self._cache = self._cache, None
        c, P, G = self.config, self.params.params, self.params.grads
        R, S = cache["R"], cache["S"]
        h = cache["h"]

        ds = np.asarray(d_density, dtype=self.dtype).reshape(R * S) * expit(cache["s_raw"])
        G["sigma/W"] += h.T @ ds[:, None]
        G["sigma/b"] += ds.sum(keepdims=True)
        dh = np.outer(ds, P["sigma/W"][:, 0])

        for group, members in self.groups.items():
            a, amask, cond = cache["heads"][group]
            da = None
            for s in members:
                g = d_props.get(s.kind)
                if g is None:
                    continue
                g = np.asarray(g, dtype=self.dtype).reshape(R * S, s.channels)
                if s.bounded:
                    y = cache["props"][s.kind].reshape(R * S, s.channels)
                    g = g * y * (1 - y)
                key = f"{group}/out/{s.kind.value}"
                G[key + "/W"] += a.T @ g
                G[key + "/b"] += g.sum(axis=0)
                contrib = g @ P[key + "/W"].T
                da = contrib if da is None else da + contrib
            if da is None:
                continue
            da *= amask
            G[f"{group}/hidden/W"] += h.T @ da
            G[f"{group}/hidden/b"] += da.sum(axis=0)
            if cond is not None:
                G[f"{group}/hidden/C"] += cond.T @ da.reshape(R, S, -1).sum(axis=1)
            dh += da @ P[f"{group}/hidden/W"].T

        for i in reversed(range(c.trunk_depth)):
            inp, mask = cache["trunk"][i]
            dz = dh * mask
            G[f"trunk/{i}/W"] += inp.T @ dz
            G[f"trunk/{i}/b"] += dz.sum(axis=0)
            if i == 0:
                break
            dinp = dz @ P[f"trunk/{i}/W"].T
            dh = dinp[:, :c.trunk_width] if (i == c.skip) else dinp


# -- checkpoints --------------------------------------------------------------

MAGIC = b"SSNF"
FORMAT_VERSION = 1


def config_digest(config: dict) -> bytes:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).digest()


def save_checkpoint(path, tapes: dict[str, ParameterTape], config: dict, seed: int, step: int = 0) -> None:
    """Binary little-endian checkpoint.

    Layout: ``SSNF`` | u32 version | 32-byte sha256 config digest | u32 length +
    config JSON | u64 seed | u64 step | u32 array count | per array: u16 name
    length, name, u32 ndim, u32 dims..., float64 data row-major.
    """
    cfg = json.dumps(config, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION), config_digest(config),
           struct.pack("<I", len(cfg)), cfg, struct.pack("<QQ", seed, step)]
    arrays = [(f"{net}/{name}", tape[name]) for net, tape in tapes.items() for name in tape.names()]
    out.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(out))


def load_checkpoint(path, dtype=None):
    """Returns ``(tapes, config, seed, step)``; tapes keep the checkpoint's float64 unless ``dtype``."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an SSNF checkpoint")
    pos = 4
    (version,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    digest = buf[pos:pos + 32]
    pos += 32
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    config = json.loads(buf[pos:pos + n].decode())
    pos += n
    if config_digest(config) != digest:
        raise CheckpointError(f"{path}: config digest mismatch")
    seed, step = struct.unpack_from("<QQ", buf, pos)
    pos += 16
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    grouped: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode()
        pos += ln
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape))
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        net, _, pname = name.partition("/")
        grouped.setdefault(net, {})[pname] = arr
    tapes = {}
    for net, arrays in grouped.items():
        tape = ParameterTape({k: v.shape for k, v in arrays.items()}, dtype or np.float64, seed)
        for k, v in arrays.items():
            tape[k][...] = v
        tapes[net] = tape
    return tapes, config, int(seed), int(step)


def field_config_from(config: dict) -> FieldConfig:
    keys = FieldConfig.__dataclass_fields__
    return FieldConfig(**{k: config[k] for k in keys if k in config})


def field_config_dict(fc: FieldConfig) -> dict:
    return asdict(fc)
