import numpy as np
import pytest

from lifelongpr.encoder import ModelError, embed, init_encoder
from lifelongpr.prompt import (attach, detach, init_prompt, is_neutral, prompt_backward,
                               prompt_forward)

from oracles import central_difference, rel_error


def _X(seed, b=2, n=10):
    return np.random.default_rng(seed).normal(size=(b, n, 3))


def test_output_rows_permute_with_points():
    pp = init_prompt(0, 32, dtype=np.float64)
    pp["prompt.out_w"] = np.random.default_rng(1).normal(size=pp["prompt.out_w"].shape)
    X = _X(2, 1, 20)
    perm = np.random.default_rng(3).permutation(20)
    a, _ = prompt_forward(pp, X)
    b, _ = prompt_forward(pp, X[:, perm])
    assert np.abs(a[:, perm] - b).max() <= 1e-9


def test_zero_init_output_is_zero():
    pp = init_prompt(0, 32, dtype=np.float64)
    pp["prompt.Q"][:] = 0
    out, _ = prompt_forward(pp, _X(0))
    assert not out.any()
    assert is_neutral(init_prompt(5, 32))


def test_gradient_wrt_Q_and_all_params():
    rng = np.random.default_rng(4)
    pp = init_prompt(1, 6, k_q=5, d=4, n_blocks=2, dtype=np.float64)
    pp["prompt.out_w"] = rng.normal(size=pp["prompt.out_w"].shape)
    X = _X(5, 2, 7)
    R = rng.normal(size=(2, 7, 6))

    def readout():
        return float((prompt_forward(pp, X)[0] * R).sum())

    _, cache = prompt_forward(pp, X)
    g = prompt_backward(pp, cache, R)
    for name in pp:
        num = central_difference(readout, pp[name])
        assert rel_error(g[name], num) < 1e-4, name


def test_attach_neutral_detach_reversible():
    enc = init_encoder(3)
    X = _X(6, 4, 30).astype(np.float32)
    base = embed(enc, X)
    h = attach(enc, init_prompt(7, 32))
    assert np.abs(embed(h, X) - base).max() <= 1e-9
    assert np.array_equal(embed(detach(h), X), base)
    assert not detach(h).has_prompt


def test_attached_model_deterministic():
    X = _X(8, 1, 30).astype(np.float32)

    def run():
        pp = init_prompt(11, 32)
        pp["prompt.out_w"] = np.random.default_rng(12).normal(
            size=pp["prompt.out_w"].shape).astype(np.float32)
        return embed(attach(init_encoder(10), pp), X)

    assert np.array_equal(run(), run())


def test_width_mismatch_rejected():
    with pytest.raises(ModelError):
        attach(init_encoder(0), init_prompt(0, 16))


def test_non_finite_points_rejected():
    X = _X(0)
    X[0, 0, 0] = np.nan
    with pytest.raises(ModelError):
        prompt_forward(init_prompt(0, 32), X)


def test_prompt_is_lightweight():
    enc = init_encoder(0)
    h = attach(enc, init_prompt(0, 32, k_q=64, d=8, n_blocks=2))
    assert h.n_params("prompt.") < 0.05 * enc.n_params("enc.")
