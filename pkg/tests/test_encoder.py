import numpy as np
import pytest

from lifelongpr.encoder import (Adam, ModelError, backprop, checkpoint_extra, composite_loss,
                                embed, encoder_forward, init_encoder, kd_loss, kd_weight,
                                load_checkpoint, model_forward, save_checkpoint, triplet_loss)
from lifelongpr.prompt import attach, init_prompt

from oracles import central_difference, rel_error


def _points(rng, b=3, n=16):
    X = rng.normal(size=(b, n, 3))
    return X - X.mean(1, keepdims=True)


def test_permutation_invariance_with_prompt_rows():
    rng = np.random.default_rng(0)
    m = init_encoder(1, dtype=np.float64)
    X = _points(rng, 1, 32)[0]
    P = rng.normal(size=(32, 32))
    perm = rng.permutation(32)
    a = embed(m, X, P)
    b = embed(m, X[perm], P[perm])
    assert np.abs(a - b).max() <= 1e-9


def test_zero_prompt_is_identity_and_unit_norm():
    rng = np.random.default_rng(1)
    m = init_encoder(2, dtype=np.float64)
    X = _points(rng, 5, 20)
    base = embed(m, X)
    assert np.array_equal(base, embed(m, X, np.zeros((5, 20, 32))))
    assert np.abs(np.linalg.norm(base, axis=1) - 1).max() <= 1e-6
    m32 = init_encoder(2)
    d32 = embed(m32, X.astype(np.float32))
    assert np.abs(np.linalg.norm(d32, axis=1) - 1).max() <= 1e-6


def test_embed_single_submap_and_shape_errors():
    m = init_encoder(0)
    X = np.random.default_rng(0).normal(size=(10, 3)).astype(np.float32)
    assert embed(m, X).shape == (32,)
    with pytest.raises(ModelError):
        encoder_forward(m.params, X[None, :, :2])
    with pytest.raises(ModelError):
        embed(m, X, np.zeros((10, 16), np.float32))


def test_triplet_examples():
    a = np.array([[1.0, 0.0]])
    assert triplet_loss(a, a, -a, 0.2) == 0.0
    # d(a,p)=0.5, d(a,n)=0.4
    p = np.array([[1.0, 0.5]])
    n = np.array([[1.0, 0.4]])
    assert triplet_loss(a, p, n, 0.2) == pytest.approx(0.3, abs=1e-12)
    with pytest.raises(ModelError):
        triplet_loss(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)), 0.2)


def test_triplet_batch_hard_picks_hardest():
    a = np.array([[0.0, 0.0]])
    p = np.array([[[0.1, 0.0], [0.6, 0.0]]])
    n = np.array([[[0.0, 0.7], [0.0, 2.0]]])
    assert triplet_loss(a, p, n, 0.2) == pytest.approx(0.2 + 0.6 - 0.7, abs=1e-12)


def _unit(rng, *shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_triplet_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    a, p, n = _unit(rng, 3, 5), _unit(rng, 3, 2, 5), _unit(rng, 3, 4, 5)
    # push the hinge active for every anchor
    _, (ga, gp, gn) = triplet_loss(a, p, n, 2.0, return_grad=True)
    for arr, g in ((a, ga), (p, gp), (n, gn)):
        num = central_difference(lambda: triplet_loss(a, p, n, 2.0), arr)
        assert rel_error(g, num) < 1e-4


def test_kd_examples_and_gradient():
    rng = np.random.default_rng(5)
    old = _unit(rng, 6, 8)
    assert kd_loss(old, old) == 0.0
    delta = _unit(rng, 6, 8) * 0.1
    assert kd_loss(old, old + delta) == pytest.approx(0.01, abs=1e-12)
    new = old + delta
    _, g = kd_loss(old, new, return_grad=True)
    assert rel_error(g, central_difference(lambda: kd_loss(old, new), new)) < 1e-4
    with pytest.raises(ModelError):
        kd_loss(np.zeros((0, 4)), np.zeros((0, 4)))


def test_composite_and_kd_weight():
    assert composite_loss(1.0, 0.5, 0.9, 0) == 1.5
    assert composite_loss(1.0, 0.5, 0.9, 2) == pytest.approx(1.405, abs=1e-12)
    w = [kd_weight(0.9, e) for e in range(30)]
    assert w[0] == 1.0 and all(x > y for x, y in zip(w, w[1:]))
    with pytest.raises(ValueError):
        composite_loss(1.0, 1.0, 0.9, -1)


def _loss_fn(rng, B):
    target = _unit(rng, B, 32)

    def f(desc):
        l, g = kd_loss(target, desc, return_grad=True)
        return l, g

    return f


@pytest.mark.parametrize("with_prompt", [False, True])
def test_parameter_gradients_match_finite_differences(with_prompt):
    rng = np.random.default_rng(6 + with_prompt)
    m = init_encoder(3, dtype=np.float64)
    if with_prompt:
        pp = init_prompt(4, 32, k_q=4, d=3, n_blocks=1, dtype=np.float64)
        pp["prompt.out_w"] = rng.normal(0, 0.5, pp["prompt.out_w"].shape)
        m = attach(m, pp)
    X = _points(rng, 2, 6)
    f = _loss_fn(rng, 2)
    _, grads = backprop(m, X, f)
    for name in ("enc.w1", "enc.b2", "enc.w4") + (("prompt.Q", "prompt.in_w1")
                                                  if with_prompt else ()):
        num = central_difference(lambda: f(model_forward(m, X)[0])[0], m.params[name])
        assert rel_error(grads[name], num) < 1e-4, name


def test_trainable_mask_limits_gradients_and_updates():
    rng = np.random.default_rng(8)
    m = attach(init_encoder(0), init_prompt(1, 32))
    X = _points(rng, 2, 12).astype(np.float32)
    f = _loss_fn(rng, 2)
    before = m.copy()
    opt = Adam(1e-2)
    _, g = backprop(m, X, f, trainable=set())
    assert g == {}
    opt.step(m.params, g)
    assert m.checksum() == before.checksum()
    enc = set(m.names("enc."))
    for _ in range(5):
        _, g = backprop(m, X, f, trainable=enc)
        assert set(g) <= enc
        opt.step(m.params, g)
    assert m.checksum("prompt.") == before.checksum("prompt.")
    assert m.checksum("enc.") != before.checksum("enc.")


def test_non_finite_loss_rejected():
    m = init_encoder(0)
    X = np.ones((1, 4, 3), np.float32)
    with pytest.raises(ModelError):
        backprop(m, X, lambda d: (float("nan"), np.zeros_like(d)))


def test_checkpoint_round_trip(tmp_path):
    m = attach(init_encoder(5), init_prompt(6, 32))
    m.stage = (3, 2)
    path = tmp_path / "s.ckpt"
    save_checkpoint(path, m, {"note": 1})
    r = load_checkpoint(path)
    assert r.checksum() == m.checksum() and r.stage == (3, 2)
    assert checkpoint_extra(path) == {"note": 1}
    raw = path.read_bytes()
    assert raw[:4] == b"LPRC"
    (path.parent / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ModelError):
        load_checkpoint(path.parent / "bad")
