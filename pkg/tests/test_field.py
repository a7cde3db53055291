import subprocess
import sys

import numpy as np
import pytest

from ssnerf.field import (CheckpointError, Field, FieldConfig, StateError, init_params, load_checkpoint,
                          load_encoder_from, save_checkpoint)
from ssnerf.properties import Branch, ConfigError, Kind, make_specs

SMALL = FieldConfig(pos_freqs=3, dir_freqs=2, trunk_depth=3, trunk_width=12, skip=2, head_width=10, pose_freqs=1)
ALL = ["sl", "sn", "sh", "kp", "ed"]


def inputs(cfg=SMALL, R=3, S=5, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return (rng.normal(size=(R, S, cfg.pos_dim)).astype(dtype), rng.normal(size=(R, cfg.dir_dim)).astype(dtype),
            rng.normal(size=(R, cfg.pose_dim)).astype(dtype))


def test_zero_parameters_give_biases_and_ln2_density():
    specs = make_specs(ALL, n_classes=4)
    tape = init_params(SMALL, specs, 0)
    tape.data[...] = 0
    for name in tape.names():
        if "/out/" in name and name.endswith("/b"):
            tape[name][...] = np.arange(tape[name].size) * 0.5 - 0.3
    out = Field(SMALL, specs, tape).forward(*inputs())
    np.testing.assert_allclose(out.density, np.log(2.0), rtol=0, atol=1e-15)
    for s in specs:
        b = tape[[n for n in tape.names() if n.endswith(f"/out/{s.kind.value}/b")][0]]
        expect = 1 / (1 + np.exp(-b)) if s.bounded else b
        np.testing.assert_allclose(out.properties[s.kind], np.broadcast_to(expect, out.properties[s.kind].shape))


def test_view_branch_depends_on_direction_no_view_does_not():
    specs = make_specs(ALL)
    f = Field(SMALL, specs, init_params(SMALL, specs, 1))
    x, d, p = inputs()
    a = f.forward(x, d, p)
    b = f.forward(x, d + 0.7, p)
    for k in (Kind.SL, Kind.SN):
        assert np.array_equal(a.properties[k], b.properties[k])
    np.testing.assert_array_equal(a.density, b.density)
    for k in (Kind.RGB, Kind.SH, Kind.KP, Kind.ED):
        assert not np.allclose(a.properties[k], b.properties[k])


def test_normal_head_reads_camera_pose():
    specs = make_specs(["sn"])
    f = Field(SMALL, specs, init_params(SMALL, specs, 2))
    x, d, p = inputs()
    assert not np.allclose(f.forward(x, d, p).properties[Kind.SN], f.forward(x, d, p + 1).properties[Kind.SN])


def test_density_nonnegative_and_channels():
    specs = make_specs(ALL, n_classes=5)
    f = Field(SMALL, specs, init_params(SMALL, specs, 3))
    x, d, p = inputs(R=4, S=7)
    out = f.forward(30 * x, d, p)
    assert (out.density >= 0).all() and np.isfinite(out.density).all()
    assert {k: v.shape[-1] for k, v in out.properties.items()} == {s.kind: s.channels for s in specs}


DETERMINISM_SCRIPT = """
import hashlib, numpy as np
from ssnerf.field import FieldConfig, Field, init_params
from ssnerf.properties import make_specs
cfg = FieldConfig(3, 2, 3, 12, 2, 10)
specs = make_specs(["sl", "sn", "sh"])
rng = np.random.default_rng(5)
x = rng.normal(size=(2, 4, cfg.pos_dim)); d = rng.normal(size=(2, cfg.dir_dim)); p = rng.normal(size=(2, cfg.pose_dim))
o = Field(cfg, specs, init_params(cfg, specs, 9)).forward(x, d, p)
h = hashlib.sha256(o.density.tobytes())
for k in sorted(o.properties, key=lambda k: k.value): h.update(o.properties[k].tobytes())
print(h.hexdigest())
"""


def test_forward_bit_identical_across_processes():
    runs = [subprocess.run([sys.executable, "-c", DETERMINISM_SCRIPT], capture_output=True, text=True, check=True)
            .stdout.strip() for _ in range(2)]
    assert runs[0] == runs[1] and len(runs[0]) == 64


def test_dimension_mismatch_is_config_error():
    specs = make_specs([])
    f = Field(SMALL, specs, init_params(SMALL, specs, 0))
    x, d, p = inputs()
    with pytest.raises(ConfigError):
        f.forward(x[..., :-1], d, p)
    with pytest.raises(ConfigError):
        f.forward(x, d[:, :-1], p)
    with pytest.raises(ConfigError):
        Field(SMALL, make_specs(["sl"]), init_params(SMALL, specs, 0))


def test_backward_without_forward_is_state_error():
    specs = make_specs([])
    f = Field(SMALL, specs, init_params(SMALL, specs, 0))
    with pytest.raises(StateError):
        f.backward(np.zeros((1, 1)), {})
    x, d, p = inputs()
    f.forward(x, d, p, retain=False)
    with pytest.raises(StateError):
        f.backward(np.zeros((3, 5)), {})


def test_zero_upstream_leaves_gradients_unchanged():
    specs = make_specs(ALL)
    tape = init_params(SMALL, specs, 0)
    tape.grad[...] = 0.25
    f = Field(SMALL, specs, tape)
    out = f.forward(*inputs())
    f.backward(np.zeros_like(out.density), {k: np.zeros_like(v) for k, v in out.properties.items()})
    assert (tape.grad == 0.25).all()


def test_linear_output_layer_gradient_is_input_activation():
    specs = make_specs(["sl"])
    tape = init_params(SMALL, specs, 4)
    f = Field(SMALL, specs, tape)
    x, d, p = inputs(R=1, S=1)
    out = f.forward(x, d, p)
    h = x.reshape(1, -1)
    for i in range(SMALL.trunk_depth):
        inp = np.concatenate([h, x.reshape(1, -1)], 1) if i == SMALL.skip else h
        h = np.maximum(inp @ tape[f"trunk/{i}/W"] + tape[f"trunk/{i}/b"], 0)
    a = np.maximum(h @ tape["no_view/hidden/W"] + tape["no_view/hidden/b"], 0)
    tape.zero_grad()
    f.backward(np.zeros((1, 1)), {Kind.SL: np.ones_like(out.properties[Kind.SL])})
    np.testing.assert_allclose(tape.grads["no_view/out/sl/W"], np.repeat(a.T, 3, axis=1), rtol=1e-12)
    np.testing.assert_allclose(tape.grads["no_view/out/sl/b"], 1.0)


@pytest.mark.parametrize("branch_sn", ["no_view", "view"])
def test_gradients_match_finite_differences(branch_sn):
    specs = make_specs(ALL, n_classes=3, branches={"sn": branch_sn, "sl": "view" if branch_sn == "view" else "no_view"})
    tape = init_params(SMALL, specs, 7)
    tape.data += np.random.default_rng(1).normal(0, 0.05, tape.size)  # non-zero biases
    f = Field(SMALL, specs, tape)
    x, d, p = inputs(R=2, S=3, seed=3)
    rng = np.random.default_rng(2)
    A = rng.normal(size=(2, 3))
    B = {s.kind: rng.normal(size=(2, 3, s.channels)) for s in specs}

    def loss():
        o = f.forward(x, d, p, retain=False)
        return float((o.density * A).sum() + sum((o.properties[k] * B[k]).sum() for k in B))

    f.forward(x, d, p)
    tape.zero_grad()
    f.backward(A, B)
    analytic = tape.grad.copy()
    h = 1e-5
    worst = 0.0
    # 100 coordinates, stratified so every parameter array is probed
    names = tape.names()
    picks = [tape.layout[n][0] + int(rng.integers(np.prod(tape.layout[n][1]))) for n in names]
    picks += list(rng.choice(tape.size, 100 - len(picks), replace=False))
    for i in picks:
        old = tape.data[i]
        tape.data[i] = old + h
        lp = loss()
        tape.data[i] = old - h
        lm = loss()
        tape.data[i] = old
        fd = (lp - lm) / (2 * h)
        worst = max(worst, abs(fd - analytic[i]) / max(abs(fd), abs(analytic[i]), 1e-6))
    assert worst < 1e-4


def test_init_seeds():
    specs = make_specs(ALL)
    a, b, c = (init_params(SMALL, specs, s) for s in (5, 5, 6))
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    assert a.grad.shape == a.data.shape
    for n in a.names():
        assert a.grads[n].shape == a[n].shape
        if n.endswith("/b"):
            assert (a[n] == 0).all()
    a.grad[...] = 3
    a.zero_grad()
    assert (a.grad == 0).all()


def test_transfer_copies_trunk_only():
    src_specs = make_specs(["sl"])
    dst_specs = make_specs(["sh"])
    src = init_params(SMALL, src_specs, 11)
    dst = load_encoder_from(src, SMALL, dst_specs, seed=12)
    fresh = init_params(SMALL, dst_specs, 12)
    for n in dst.names():
        if n.startswith("trunk/"):
            np.testing.assert_array_equal(dst[n], src[n])
        else:
            np.testing.assert_array_equal(dst[n], fresh[n])
    x, d, p = inputs()
    fs, fd = Field(SMALL, src_specs, src), Field(SMALL, dst_specs, dst)
    fs.forward(x, d, p)
    fd.forward(x, d, p)
    np.testing.assert_array_equal(fs._cache["h"], fd._cache["h"])


def test_transfer_shape_mismatch():
    specs = make_specs([])
    src = init_params(FieldConfig(3, 2, 3, 16, 2, 10), specs, 0)
    with pytest.raises(CheckpointError):
        load_encoder_from(src, SMALL, specs, 0)


def test_checkpoint_round_trip_and_corruption(tmp_path):
    specs = make_specs(ALL)
    tapes = {"coarse": init_params(SMALL, specs, 1, np.float32), "fine": init_params(SMALL, specs, 2, np.float32)}
    cfg = {"a": 1, "b": [1, 2]}
    path = tmp_path / "c.ssnf"
    save_checkpoint(path, tapes, cfg, seed=42, step=17)
    raw = path.read_bytes()
    assert raw[:4] == b"SSNF"
    back, cfg2, seed, step = load_checkpoint(path, np.float32)
    assert (cfg2, seed, step) == (cfg, 42, 17)
    for k in tapes:
        np.testing.assert_array_equal(back[k].data, tapes[k].data)
    save_checkpoint(tmp_path / "d.ssnf", back, cfg2, seed, step)
    assert (tmp_path / "d.ssnf").read_bytes() == raw
    (tmp_path / "bad.ssnf").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ssnf")
    tampered = bytearray(raw)
    tampered[raw.index(b'"a": 1') + 5] = ord("2")
    (tmp_path / "t.ssnf").write_bytes(bytes(tampered))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ssnf")


def test_spec_defaults():
    specs = {s.kind: s for s in make_specs(ALL, n_classes=7)}
    assert specs[Kind.SL].channels == 7
    assert [specs[k].branch for k in (Kind.SH, Kind.KP, Kind.ED)] == [Branch.VIEW] * 3
    assert [specs[k].branch for k in (Kind.SL, Kind.SN)] == [Branch.NO_VIEW] * 2
    assert sum(s.kind is Kind.RGB for s in make_specs([])) == 1
