"""Model stack: forward contracts, tape backward, optimizer, EMA."""

import numpy as np
import pytest

from oracles import rel_err
from viewforge.errors import ShapeMismatch, StaleTape
from viewforge.losses import BarlowParams, SimClrParams, VicRegCoeffs, barlow_loss, simclr_loss, vicreg_loss
from viewforge.model import (
    AffineSpec,
    EncoderProjector,
    EncoderSpec,
    Mlp,
    ProjectorSpec,
    SgdMomentum,
    backward_and_step,
    ema_update,
)
from viewforge.relations import build_pair_relation


def _model(in_dim=6, h_dim=4, z_dim=3, depth=2, seed=0):
    encoder = EncoderSpec.from_dims(in_dim, (5, h_dim))
    projector = ProjectorSpec(depth=depth, hidden=4, out_dim=z_dim)
    return EncoderProjector(encoder, projector, seed=seed)


def test_identity_projector_returns_backbone():
    model = _model(depth=0)
    x = np.random.default_rng(0).normal(size=(7, 6))
    record = model.forward([x])
    assert np.array_equal(record.h_views[0], record.z_views[0])


def test_zero_weight_layers_broadcast_bias():
    model = _model(depth=1)
    for i in range(0, len(model.params), 2):
        model.params[i][:] = 0.0
        model.params[i + 1][:] = 1.5
    x = np.random.default_rng(1).normal(size=(4, 6))
    record = model.forward([x])
    assert np.allclose(record.z_views[0], 1.5)


def test_forward_deterministic_across_instances():
    x = np.random.default_rng(2).normal(size=(5, 6))
    a = _model(seed=42).forward([x])
    b = _model(seed=42).forward([x])
    assert np.array_equal(a.z_views[0], b.z_views[0])
    assert np.array_equal(a.h_views[0], b.h_views[0])


def test_forward_shape_mismatch():
    model = _model()
    with pytest.raises(ShapeMismatch):
        model.forward([np.zeros((3, 9))])


def test_single_affine_quadratic_update_matches_hand_derivation():
    # y = xW + b, L = 0.5 ||y - t||^2, lr 0.1, no momentum: one SGD step
    net = Mlp((AffineSpec(2, 2, relu=False),), seed=0)
    net.params[0][:] = np.array([[1.0, 2.0], [3.0, 4.0]])
    net.params[1][:] = np.array([0.5, -0.5])
    x = np.array([[1.0, -1.0], [2.0, 0.5]])
    t = np.array([[0.0, 1.0], [1.0, 0.0]])
    y, tape = net.forward(x)
    d_y = y - t
    grads = net.backward(tape, d_y)
    expected_dw = x.T @ d_y
    expected_db = d_y.sum(axis=0)
    assert np.allclose(grads[0], expected_dw)
    assert np.allclose(grads[1], expected_db)
    w_before = net.params[0].copy()
    SgdMomentum(lr=0.1, momentum=0.0).step(net.params, grads)
    assert np.allclose(net.params[0], w_before - 0.1 * expected_dw)


def test_tape_single_use():
    net = Mlp((AffineSpec(3, 2, relu=True), AffineSpec(2, 2)), seed=1)
    x = np.random.default_rng(3).normal(size=(4, 3))
    _, tape = net.forward(x)
    net.backward(tape, np.ones((4, 2)))
    with pytest.raises(StaleTape):
        net.backward(tape, np.ones((4, 2)))


def test_lr_zero_leaves_parameters_unchanged():
    model = _model()
    before = [p.copy() for p in model.params]
    x = np.random.default_rng(4).normal(size=(8, 6))
    record = model.forward([x, x])
    z = record.z_views
    out = vicreg_loss(np.concatenate(z), build_pair_relation(8))
    d = [out.grad[:8], out.grad[8:]]
    backward_and_step(model, record, d, SgdMomentum(lr=0.0))
    for b, a in zip(before, model.params):
        assert np.array_equal(b, a)


def _param_finite_diff(model_factory, loss_of_model, h=1e-6):
    """Central differences over every parameter entry."""
    model = model_factory()
    grads_fd = []
    for p_idx in range(len(model.params)):
        g = np.zeros_like(model.params[p_idx])
        for idx in np.ndindex(g.shape):
            mp = model_factory()
            mp.params[p_idx][idx] += h
            mm = model_factory()
            mm.params[p_idx][idx] -= h
            g[idx] = (loss_of_model(mp) - loss_of_model(mm)) / (2 * h)
        grads_fd.append(g)
    return grads_fd


@pytest.mark.parametrize("loss_name", ["vicreg", "simclr", "barlow"])
def test_end_to_end_gradients_match_finite_differences(loss_name):
    rng = np.random.default_rng(55)
    views = [rng.normal(size=(4, 6)), rng.normal(size=(4, 6))]
    g = build_pair_relation(4)
    vic = VicRegCoeffs(alpha=5.0, beta=1.0, gamma=5.0, epsilon=1e-4)
    sim = SimClrParams(tau=0.2)
    bar = BarlowParams(alpha=0.01)

    def model_factory():
        model = _model(in_dim=6, h_dim=4, z_dim=3, depth=2, seed=9)
        # nudge biases off zero so no ReLU sits on its kink and no row can
        # go exactly dead; finite differences are blind across those edges
        bias_rng = np.random.default_rng(77)
        for i in range(1, len(model.params), 2):
            model.params[i][:] = bias_rng.uniform(0.05, 0.3, size=model.params[i].shape)
        return model

    def interleave(z0, z1):
        out = np.empty((8, z0.shape[1]))
        out[0::2] = z0
        out[1::2] = z1
        return out

    def loss_of_model(model):
        record = model.forward(views)
        z0, z1 = record.z_views
        if loss_name == "vicreg":
            return vicreg_loss(interleave(z0, z1), g, vic).value
        if loss_name == "simclr":
            return simclr_loss(interleave(z0, z1), g, sim).value
        return barlow_loss(z0, z1, bar).value

    model = model_factory()
    record = model.forward(views)
    z0, z1 = record.z_views
    if loss_name == "vicreg":
        out = vicreg_loss(interleave(z0, z1), g, vic)
        d = [out.grad[0::2], out.grad[1::2]]
    elif loss_name == "simclr":
        out = simclr_loss(interleave(z0, z1), g, sim)
        d = [out.grad[0::2], out.grad[1::2]]
    else:
        out = barlow_loss(z0, z1, bar)
        d = [out.grad, out.grad_right]
    analytic = model.backward(record, d)
    fd = _param_finite_diff(model_factory, loss_of_model)
    # compare the full end-to-end gradient vector: per-parameter relative
    # error is ill-posed for the exactly-zero bias gradients of
    # shift-invariant losses
    flat_a = np.concatenate([a.ravel() for a in analytic])
    flat_f = np.concatenate([f.ravel() for f in fd])
    assert rel_err(flat_a, flat_f) < 1e-5


def test_ema_update_closed_form():
    t0 = [np.array([1.0, 2.0]), np.array([[3.0]])]
    online = [np.array([5.0, -1.0]), np.array([[0.0]])]
    m = 0.996
    target = [p.copy() for p in t0]
    ema_update(target, online, m)
    ema_update(target, online, m)
    for t, t_init, o in zip(target, t0, online):
        assert np.allclose(t, m**2 * t_init + (1 - m**2) * o)


def test_ema_endpoints():
    t0 = [np.array([1.0, 2.0])]
    online = [np.array([5.0, -1.0])]
    unchanged = ema_update([p.copy() for p in t0], online, 1.0)
    assert np.array_equal(unchanged[0], t0[0])
    copied = ema_update([p.copy() for p in t0], online, 0.0)
    assert np.array_equal(copied[0], online[0])


def test_ema_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ema_update([np.zeros(2)], [np.zeros(3)], 0.9)
