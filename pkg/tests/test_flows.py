import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from paracflow.flows import (
    SCHEMA_VERSION,
    CouplingLayer,
    Permutation,
    ascend,
    build_paracflow,
    fit_eliminator,
    eliminator_residual,
    identity_eliminator,
    invert_padded,
    load_checkpoint,
    model_to_dict,
    save_checkpoint,
    split_index,
    train_mse,
)
from paracflow.numkit import GradTape, ShapeError, TrainConfig, Var, fd_jacobian_batch
from paracflow.verify import action_rank


def test_permutation_roundtrip_and_convention():
    p = Permutation([2, 0, 1])
    x = np.array([[10.0, 20.0, 30.0]])
    np.testing.assert_array_equal(p.apply(x), [[30.0, 10.0, 20.0]])
    np.testing.assert_array_equal(p.inverse(p.apply(x)), x)
    with pytest.raises(ValueError):
        Permutation([0, 0, 1])


def test_coupling_keeps_block_and_inverts():
    rng = np.random.default_rng(0)
    layer = CouplingLayer.create(5, 2, 3, [8], rng)
    c, x = rng.normal(size=(7, 3)), rng.normal(size=(7, 5))
    y = layer.forward(c, x)
    np.testing.assert_array_equal(y[:, :2], x[:, :2])
    np.testing.assert_allclose(layer.inverse(c, y), x, atol=1e-13)


def test_coupling_log_det_matches_fd_jacobian():
    rng = np.random.default_rng(1)
    layer = CouplingLayer.create(4, 2, 1, [6], rng)
    c = rng.normal(size=(5, 1))
    x = rng.normal(size=(5, 4))
    J = fd_jacobian_batch(lambda X: layer.forward(c, X), x)
    _, logabs = np.linalg.slogdet(J)
    np.testing.assert_allclose(layer.log_det(c, x), logabs, atol=1e-7)


def test_coupling_rejects_bad_split_and_dims():
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeError):
        CouplingLayer.create(3, 3, 0, [4], rng)
    good = CouplingLayer.create(4, 2, 1, [4], rng)
    with pytest.raises(ShapeError):
        CouplingLayer(4, 2, 2, good.sigma_net, good.t_net)


def test_scale_is_clamped():
    big = lambda h: np.full((len(h), 1), 100.0)
    layer = CouplingLayer(2, 1, 0, big, lambda h: np.zeros((len(h), 1)))
    y = layer.forward(None, np.array([[0.0, 1.0]]))
    assert y[0, 1] == pytest.approx(np.exp(8.0))


def test_ascend_and_split_index():
    W = np.array([[2.0, -1.0]])
    np.testing.assert_array_equal(ascend(np.array([3.0]), W), [3.0, 6.0, -3.0])
    assert split_index(1, 10) == 5
    assert split_index(4, 5) == 4


@settings(max_examples=40, deadline=None)
@given(
    d=st.integers(2, 16),
    n_layers=st.integers(1, 6),
    d_c=st.integers(0, 4),
    seed=st.integers(0, 2**31 - 1),
)
def test_body_roundtrip(d, n_layers, d_c, seed):
    rng = np.random.default_rng(seed)
    d_a = int(rng.integers(1, d))
    m = build_paracflow(d_a, d_c, d, n_layers, [8], seed)
    c = rng.normal(size=(6, d_c)) if d_c else None
    x = rng.normal(size=(6, d))
    assert np.max(np.abs(m.body_inverse(c, m.body_forward(c, x)) - x)) <= 1e-10


def test_single_point_and_batch_agree():
    m = build_paracflow(1, 2, 4, 3, [8], 0, head_hidden=[5])
    c, a = np.array([0.3, -0.1]), np.array([0.7])
    assert isinstance(m.predict(c, a), float)
    assert m.predict(c, a) == m.predict(c[None], a[None])[0]


def test_parameter_count_and_frozen_w():
    m = build_paracflow(1, 3, 4, 2, [8], 0, head_hidden=[5])
    # W (1x3), two layers of sigma+t nets [3+2 -> 8 -> 2], head [4 -> 5 -> 1]
    cond = (5 + 1) * 8 + (8 + 1) * 2
    assert m.num_params() == 3 + 2 * 2 * cond + (4 + 1) * 5 + 6
    z = build_paracflow(1, 3, 4, 2, [8], 0, head_hidden=[5], zero_pad=True)
    assert z.num_params() == m.num_params() - 3
    np.testing.assert_array_equal(z.W.value, 0)


def test_output_var_gradients_match_fd():
    rng = np.random.default_rng(3)
    m = build_paracflow(1, 2, 3, 2, [4], 3, head_hidden=[3])
    C, A = rng.normal(size=(4, 2)), rng.normal(size=(4, 1))
    params = m.parameters()
    with GradTape() as tape:
        out = m.output_var(Var(C), Var(A))
    grads = tape.gradient(out, params)
    h = 1e-6
    for p, g in zip(params, grads):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = m.predict(C, A).sum()
            flat[i] = old - h
            dn = m.predict(C, A).sum()
            flat[i] = old
            assert g.reshape(-1)[i] == pytest.approx((up - dn) / (2 * h), rel=1e-5, abs=1e-7)


def test_action_rank_is_full_for_random_models():
    rng = np.random.default_rng(0)
    m = build_paracflow(2, 3, 6, 4, [8], 1)
    r = action_rank(m, rng.normal(size=(20, 3)), rng.normal(size=(20, 2)))
    assert np.all(r == 2)


def test_train_mse_reduces_loss():
    rng = np.random.default_rng(0)
    C, A = rng.uniform(-1, 1, (300, 2)), rng.uniform(-1, 1, (300, 1))
    B = np.sin(2 * A[:, 0]) + C[:, 0] * A[:, 0]
    m = build_paracflow(1, 2, 4, 3, [16], 0, head_hidden=[16])
    trace = train_mse(m, C, A, B, TrainConfig(epochs=60, batch=32))
    assert trace[-1] < 0.2 * trace[0]


def test_identity_eliminator_and_padded_inverse():
    m = build_paracflow(2, 1, 3, 3, [8], 0, zero_pad=True, head_hidden=None, n_out=2)
    rng = np.random.default_rng(0)
    C, A = rng.normal(size=(10, 1)), rng.normal(size=(10, 2))
    elim = identity_eliminator(m)
    z = m.features(C, A)
    np.testing.assert_array_equal(elim.forward(C, z), z)
    # with the true auxiliary block restored the inverse is exact
    x = m.body_inverse(C, elim.inverse(C, z))[:, :2]
    np.testing.assert_allclose(x, A, atol=1e-12)


def test_fit_eliminator_reduces_residual():
    m = build_paracflow(2, 1, 3, 3, [8], 0, zero_pad=True, head_hidden=None, n_out=2)
    rng = np.random.default_rng(0)
    C, A = rng.uniform(0, 1, (500, 1)), rng.uniform(-1, 1, (500, 2))
    before = np.linalg.norm(m.features(C, A)[:, 2:], axis=1).mean()
    elim, trace = fit_eliminator(m, C, A, cfg=TrainConfig(batch=64, epochs=40))
    after = eliminator_residual(m, elim, C, A).mean()
    assert after < 0.5 * before
    xhat = m.predict(C, A)
    rec = invert_padded(m, elim, C, xhat)
    assert np.median(np.linalg.norm(rec - A, axis=1)) < 2 * after + 1e-3


def test_checkpoint_roundtrip_exact(tmp_path):
    m = build_paracflow(1, 2, 4, 3, [8], 5, head_hidden=[6])
    path = tmp_path / "m.json"
    save_checkpoint(m, path)
    m2 = load_checkpoint(path)
    for a, b in zip(m.parameters(), m2.parameters()):
        np.testing.assert_array_equal(a.value, b.value)
    rng = np.random.default_rng(0)
    C, A = rng.normal(size=(9, 2)), rng.normal(size=(9, 1))
    np.testing.assert_array_equal(m.predict(C, A), m2.predict(C, A))
    save_checkpoint(m2, tmp_path / "m2.json")
    assert (tmp_path / "m2.json").read_text() == path.read_text()


def test_checkpoint_version_mismatch_names_versions(tmp_path):
    doc = model_to_dict(build_paracflow(1, 0, 2, 1, [4], 0))
    doc["schema_version"] = SCHEMA_VERSION + 1
    path = tmp_path / "m.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match=f"{SCHEMA_VERSION + 1}.*{SCHEMA_VERSION}"):
        load_checkpoint(path)


def test_corrupted_checkpoint_raises(tmp_path):
    m = build_paracflow(1, 0, 2, 1, [4], 0)
    path = tmp_path / "m.json"
    save_checkpoint(m, path)
    path.write_text(path.read_text()[:-40])
    with pytest.raises(ValueError, match="corrupted"):
        load_checkpoint(path)
    doc = model_to_dict(m)
    del doc["layers"]
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="corrupted"):
        load_checkpoint(path)
