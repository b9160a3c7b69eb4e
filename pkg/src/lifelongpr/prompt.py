"""Lightweight prompt module P(x) = MLP_out(Attn(MLP_in(x), Q)).

Each attention block runs two single-head cross-attentions with residuals:
the prompt stream queries the point tokens, then the point tokens query the
updated prompt stream. The final per-point stream goes through a
zero-initialised linear MLP_out, so a freshly attached module is neutral.
"""

from __future__ import annotations

import numpy as np

from .encoder import PROMPT_PREFIX, ModelError, ModelState

P = PROMPT_PREFIX


def init_prompt(seed: int, out_width: int, k_q: int = 64, d: int = 8, n_blocks: int = 2,
                dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)

    def lin(fan_in, fan_out):
        return rng.normal(0, np.sqrt(1.0 / fan_in), (fan_in, fan_out)).astype(dtype)

    params = {
        P + "Q": rng.normal(0, 1.0, (k_q, d)).astype(dtype),
        P + "in_w1": lin(3, d), P + "in_b1": np.zeros(d, dtype),
        P + "in_w2": lin(d, d), P + "in_b2": np.zeros(d, dtype),
    }
    for b in range(n_blocks):
        for kind in ("pq", "pp"):
            for m in ("wq", "wk", "wv"):
                params[f"{P}blk{b}.{kind}_{m}"] = lin(d, d)
    params[P + "out_w"] = np.zeros((d, out_width), dtype)
    params[P + "out_b"] = np.zeros(out_width, dtype)
    return params


def n_blocks(params: dict[str, np.ndarray]) -> int:
    return sum(1 for k in params if k.startswith(P) and k.endswith(".pq_wq"))


def _softmax(s):
    s -= s.max(-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(-1, keepdims=True)
    return s


def _attn_fwd(xq, xkv, wq, wk, wv):
    q = xq @ wq
    k = xkv @ wk
    v = xkv @ wv
    scale = 1.0 / float(np.sqrt(q.shape[-1]))
    a = _softmax((q @ k.swapaxes(1, 2)) * q.dtype.type(scale))
    return a @ v, (xq, xkv, q, k, v, a, scale)


def _attn_bwd(do, cache, wq, wk, wv):
    xq, xkv, q, k, v, a, scale = cache
    da = do @ v.swapaxes(1, 2)
    dv = a.swapaxes(1, 2) @ do
    ds = a * (da - (da * a).sum(-1, keepdims=True))
    ds *= ds.dtype.type(scale)
    dq = ds @ k
    dk = ds.swapaxes(1, 2) @ q
    dwq = np.einsum("bld,ble->de", xq, dq)
    dwk = np.einsum("bld,ble->de", xkv, dk)
    dwv = np.einsum("bld,ble->de", xkv, dv)
    dxq = dq @ wq.T
    dxkv = dk @ wk.T + dv @ wv.T
    return dxq, dxkv, dwq, dwk, dwv


def is_neutral(params: dict[str, np.ndarray]) -> bool:
    """True when the output projection is all zero, so P(x) = 0 for every x."""
    return not params[P + "out_w"].any() and not params[P + "out_b"].any()


def prompt_forward(params: dict[str, np.ndarray], X: np.ndarray):
    """Per-point guidance features (B, N, d') for points ``X`` (B, N, 3)."""
    if not np.all(np.isfinite(X)):
        raise ModelError("non-finite points")
    a1 = X @ params[P + "in_w1"] + params[P + "in_b1"]
    h1 = np.maximum(a1, 0)
    E = h1 @ params[P + "in_w2"] + params[P + "in_b2"]
    B = X.shape[0]
    S = np.broadcast_to(params[P + "Q"], (B,) + params[P + "Q"].shape)
    blocks = []
    for b in range(n_blocks(params)):
        pre = f"{P}blk{b}."
        o1, c1 = _attn_fwd(S, E, params[pre + "pq_wq"], params[pre + "pq_wk"], params[pre + "pq_wv"])
        S = S + o1
        o2, c2 = _attn_fwd(E, S, params[pre + "pp_wq"], params[pre + "pp_wk"], params[pre + "pp_wv"])
        E = E + o2
        blocks.append((c1, c2))
    out = E @ params[P + "out_w"] + params[P + "out_b"]
    return out, (X, a1, h1, E, blocks)


def prompt_backward(params: dict[str, np.ndarray], cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
    X, a1, h1, E, blocks = cache
    B, N, _ = X.shape
    g = {}
    dfl = d_out.reshape(B * N, -1)
    g[P + "out_w"] = E.reshape(B * N, -1).T @ dfl
    g[P + "out_b"] = dfl.sum(0)
    dE = d_out @ params[P + "out_w"].T
    dS = np.zeros((B,) + params[P + "Q"].shape, dtype=dE.dtype)
    for b in reversed(range(len(blocks))):
        pre = f"{P}blk{b}."
        c1, c2 = blocks[b]
        dxq, dxkv, dwq, dwk, dwv = _attn_bwd(dE, c2, params[pre + "pp_wq"],
                                             params[pre + "pp_wk"], params[pre + "pp_wv"])
        g[pre + "pp_wq"], g[pre + "pp_wk"], g[pre + "pp_wv"] = dwq, dwk, dwv
        dE = dE + dxq
        dS = dS + dxkv
        dxq, dxkv, dwq, dwk, dwv = _attn_bwd(dS, c1, params[pre + "pq_wq"],
                                             params[pre + "pq_wk"], params[pre + "pq_wv"])
        g[pre + "pq_wq"], g[pre + "pq_wk"], g[pre + "pq_wv"] = dwq, dwk, dwv
        dS = dS + dxq
        dE = dE + dxkv
    g[P + "Q"] = dS.sum(0)
    dEf = dE.reshape(B * N, -1)
    g[P + "in_w2"] = h1.reshape(B * N, -1).T @ dEf
    g[P + "in_b2"] = dEf.sum(0)
    da1 = (dEf @ params[P + "in_w2"].T) * (a1.reshape(B * N, -1) > 0)
    g[P + "in_w1"] = X.reshape(B * N, 3).T @ da1
    g[P + "in_b1"] = da1.sum(0)
    return g


def attach(model: ModelState, prompt_params: dict[str, np.ndarray]) -> ModelState:
    """Combined model H = {F, P}; the encoder tensors are shared, not copied."""
    width = prompt_params[P + "out_w"].shape[1]
    if width != model.point_width:
        raise ModelError(f"prompt output width {width} != encoder width {model.point_width}")
    params = {k: v for k, v in model.params.items() if not k.startswith(P)}
    params.update(prompt_params)
    return ModelState(params, model.descriptor_dim, model.stage)


def detach(model: ModelState) -> ModelState:
    return ModelState(model.subset("enc."), model.descriptor_dim, model.stage)
