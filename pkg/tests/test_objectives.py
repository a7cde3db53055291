import math

import numpy as np
import pytest

from ssnerf.objectives import (LossError, PropertyLoss, cross_entropy_loss, l1_loss, mse_loss, property_loss,
                               total_loss)
from ssnerf.properties import Kind, make_specs, with_weight
from ssnerf.renderer import composite, composite_backward


def test_mse_examples():
    assert mse_loss([[0.5]], [[0.5]], [[0.0]]).value == pytest.approx(0.5)
    x = np.random.default_rng(0).random((4, 3))
    assert mse_loss(x, x, x).value == 0


def test_l1_examples():
    r = l1_loss([[0.2]], [[0.6]], [[0.5]])
    assert r.value == pytest.approx(0.4)
    np.testing.assert_array_equal(r.grad_coarse, [[-1.0]])
    np.testing.assert_array_equal(r.grad_fine, [[1.0]])
    eq = l1_loss([[0.5]], [[0.5]], [[0.5]])
    assert eq.value == 0 and eq.grad_coarse[0, 0] == 0


def test_cross_entropy_examples():
    r = cross_entropy_loss(np.zeros((1, 13)), np.zeros((1, 13)), [4])
    assert r.value / 2 == pytest.approx(math.log(13), rel=1e-14)
    assert math.log(13) == pytest.approx(2.5649, abs=1e-4)
    confident = np.array([[200.0, 0.0, 0.0]])
    assert cross_entropy_loss(confident, confident, [0]).value < 1e-80
    with pytest.raises(LossError):
        cross_entropy_loss(np.zeros((1, 3)), np.zeros((1, 3)), [3])


def test_shape_mismatch():
    with pytest.raises(LossError):
        mse_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(LossError):
        l1_loss(np.zeros((2, 1)), np.zeros((3, 1)), np.zeros((2, 1)))


def test_losses_match_loop_oracles():
    rng = np.random.default_rng(1)
    R, C, L = 17, 3, 6
    pc, pf, truth = rng.normal(size=(3, R, C))
    mse = sum((pc[r, c] - truth[r, c]) ** 2 + (pf[r, c] - truth[r, c]) ** 2 for r in range(R) for c in range(C))
    l1 = sum(abs(pc[r, c] - truth[r, c]) + abs(pf[r, c] - truth[r, c]) for r in range(R) for c in range(C))
    assert mse_loss(pc, pf, truth).value == pytest.approx(mse, rel=1e-12)
    assert l1_loss(pc, pf, truth).value == pytest.approx(l1, rel=1e-12)

    zc, zf = rng.normal(scale=3, size=(2, R, L))
    labels = rng.integers(0, L, R)
    nll = 0.0
    for z in (zc, zf):
        for r in range(R):
            nll -= math.log(math.exp(z[r, labels[r]]) / sum(math.exp(v) for v in z[r]))
    ce = cross_entropy_loss(zc, zf, labels)
    assert ce.value == pytest.approx(nll, rel=1e-12)
    one_hot = np.eye(L)[labels]
    assert cross_entropy_loss(zc, zf, one_hot).value == pytest.approx(nll, rel=1e-12)
    soft = np.exp(zc) / np.exp(zc).sum(1, keepdims=True)
    np.testing.assert_allclose(ce.grad_coarse, soft - one_hot, atol=1e-14)


def test_permutation_invariance():
    rng = np.random.default_rng(2)
    pc, pf, truth = rng.random((3, 9, 2))
    perm = rng.permutation(9)
    for fn in (mse_loss, l1_loss):
        assert fn(pc, pf, truth).value == pytest.approx(fn(pc[perm], pf[perm], truth[perm]).value, rel=1e-14)
    labels = rng.integers(0, 2, 9)
    assert cross_entropy_loss(pc, pf, labels).value == pytest.approx(
        cross_entropy_loss(pc[perm], pf[perm], labels[perm]).value, rel=1e-14)


def fixed(value, ch=1):
    g = np.zeros((1, ch))
    return PropertyLoss(value, g, g)


def test_total_examples_and_linearity():
    specs = make_specs(["sh", "kp"], weights={"sh": 1.0, "kp": 2.0})
    losses = {Kind.RGB: fixed(0.1, 3), Kind.SH: fixed(0.5), Kind.KP: fixed(0.2)}
    assert total_loss(losses, specs).total == pytest.approx(1.0, rel=1e-12)
    zero = make_specs(["sh", "kp"], weights={"sh": 0.0, "kp": 0.0})
    assert total_loss(losses, zero).total == pytest.approx(0.1)
    doubled = with_weight(specs, Kind.KP, 4.0)
    assert total_loss(losses, doubled).total - total_loss(losses, specs).total == pytest.approx(0.2 * 2.0)
    with pytest.raises(LossError):
        total_loss({Kind.RGB: fixed(0.1, 3)}, specs)


def test_default_weights():
    w = {s.kind: s.weight for s in make_specs(["sl", "sn", "sh", "kp", "ed"])}
    assert w == {Kind.RGB: 1.0, Kind.SN: 1.0, Kind.SL: 0.04, Kind.SH: 0.1, Kind.KP: 2.0, Kind.ED: 0.4}


def test_gradients_through_render_and_loss():
    """Central differences over per-sample density and properties, 2 rays x 4 samples, both passes."""
    rng = np.random.default_rng(3)
    specs = make_specs(["sl", "sn", "sh"], n_classes=3)
    t = {p: np.sort(rng.uniform(2, 6, (2, 4)), axis=1) for p in ("c", "f")}
    sigma = {p: rng.uniform(0.1, 1.5, (2, 4)) for p in ("c", "f")}
    props = {p: {Kind.RGB: rng.random((2, 4, 3)), Kind.SL: rng.normal(size=(2, 4, 3)),
                 Kind.SN: rng.random((2, 4, 3)), Kind.SH: rng.random((2, 4, 1))} for p in ("c", "f")}
    truth = {Kind.RGB: rng.random((2, 3)), Kind.SL: np.array([0, 2]), Kind.SN: rng.random((2, 3)),
             Kind.SH: rng.random((2, 1))}

    def run(sig, pr):
        comp = {p: composite(t[p], sig[p], pr[p]) for p in ("c", "f")}
        losses = {s.kind: property_loss(s, comp["c"].values[s.kind], comp["f"].values[s.kind], truth[s.kind])
                  for s in specs}
        return comp, total_loss(losses, specs)

    comp, rep = run(sigma, props)
    grads = {"c": composite_backward(comp["c"], props["c"], rep.grads_coarse),
             "f": composite_backward(comp["f"], props["f"], rep.grads_fine)}
    h = 1e-6
    worst = 0.0
    for p in ("c", "f"):
        for idx in np.ndindex(2, 4):
            sp = {q: v.copy() for q, v in sigma.items()}
            sm = {q: v.copy() for q, v in sigma.items()}
            sp[p][idx] += h
            sm[p][idx] -= h
            fd = (run(sp, props)[1].total - run(sm, props)[1].total) / (2 * h)
            an = grads[p][0][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
        for k in props[p]:
            for idx in np.ndindex(*props[p][k].shape):
                pp = {q: {j: v.copy() for j, v in d.items()} for q, d in props.items()}
                pm = {q: {j: v.copy() for j, v in d.items()} for q, d in props.items()}
                pp[p][k][idx] += h
                pm[p][k][idx] -= h
                fd = (run(sigma, pp)[1].total - run(sigma, pm)[1].total) / (2 * h)
                an = grads[p][1][k][idx]
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    assert worst < 1e-4
