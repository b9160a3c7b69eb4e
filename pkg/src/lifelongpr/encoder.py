"""Toy PointNet-style encoder with hand-written reverse-mode gradients.

Architecture: per-point MLP 3 -> 32 -> 64 (ReLU), symmetric max-pool, then a
two-layer head 64 -> 512 -> D_g and L2 normalisation. Prompt features (if
any) are added to the 32-wide per-point features after the first ReLU.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ENC_PREFIX = "enc."
PROMPT_PREFIX = "prompt."

POINT_WIDTH = 32  # width of the prompt insertion point (d')
HIDDEN_WIDTH = 64
HEAD_WIDTH = 512
DESCRIPTOR_DIM = 32


class ModelError(ValueError):
    pass


@dataclass
class ModelState:
    """Named parameter tensors plus stage provenance."""

    params: dict[str, np.ndarray]
    descriptor_dim: int = DESCRIPTOR_DIM
    stage: tuple[int, int] = (0, 0)  # (domain index t, training stage)

    @property
    def has_prompt(self) -> bool:
        return any(k.startswith(PROMPT_PREFIX) for k in self.params)

    @property
    def point_width(self) -> int:
        return self.params[ENC_PREFIX + "w1"].shape[1]

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.params if k.startswith(prefix)]

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def copy(self) -> "ModelState":
        return ModelState({k: v.copy() for k, v in self.params.items()},
                          self.descriptor_dim, self.stage)

    def astype(self, dtype) -> "ModelState":
        return ModelState({k: v.astype(dtype) for k, v in self.params.items()},
                          self.descriptor_dim, self.stage)

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for k in sorted(self.names(prefix)):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def n_params(self, prefix: str = "") -> int:
        return int(sum(self.params[k].size for k in self.names(prefix)))


def init_encoder(seed: int, descriptor_dim: int = DESCRIPTOR_DIM,
                 dtype=np.float32) -> ModelState:
    rng = np.random.default_rng(seed)
    dims = [(3, POINT_WIDTH), (POINT_WIDTH, HIDDEN_WIDTH),
            (HIDDEN_WIDTH, HEAD_WIDTH), (HEAD_WIDTH, descriptor_dim)]
    params = {}
    for i, (fan_in, fan_out) in enumerate(dims, start=1):
        params[f"{ENC_PREFIX}w{i}"] = (rng.normal(0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
                                       .astype(dtype))
        params[f"{ENC_PREFIX}b{i}"] = np.zeros(fan_out, dtype)
    return ModelState(params, descriptor_dim)


# -- forward / backward -------------------------------------------------------


def encoder_forward(p: dict[str, np.ndarray], X: np.ndarray,
                    prompt_out: np.ndarray | None = None):
    """Embed a batch of point sets ``X`` of shape (B, N, 3).

    Returns unit descriptors (B, D_g) and a cache for ``encoder_backward``.
    """
    if X.ndim != 3 or X.shape[-1] != 3:
        raise ModelError(f"expected (B, N, 3) points, got {X.shape}")
    a1 = X @ p["enc.w1"] + p["enc.b1"]
    h1 = np.maximum(a1, 0)
    if prompt_out is not None:
        if prompt_out.shape != h1.shape:
            raise ModelError(f"prompt output shape {prompt_out.shape} != {h1.shape}")
        z = h1 + prompt_out
    else:
        z = h1
    a2 = z @ p["enc.w2"] + p["enc.b2"]
    h2 = np.maximum(a2, 0)
    arg = h2.argmax(1)  # (B, C)
    g = np.take_along_axis(h2, arg[:, None, :], 1)[:, 0, :]
    a3 = g @ p["enc.w3"] + p["enc.b3"]
    h3 = np.maximum(a3, 0)
    y = h3 @ p["enc.w4"] + p["enc.b4"]
    norm = np.sqrt((y * y).sum(1, keepdims=True))
    if not np.all(np.isfinite(norm)) or np.any(norm == 0):
        raise ModelError("non-finite or degenerate activations")
    desc = y / norm
    cache = (X, a1, z, a2, arg, g, a3, h3, norm, desc)
    return desc, cache


def encoder_backward(p: dict[str, np.ndarray], cache, d_desc: np.ndarray,
                     want_params: bool = True, want_prompt: bool = False):
    """Gradients of a scalar loss given its gradient w.r.t. the descriptors.

    Returns ``(grads, d_prompt_out)``; either may be ``None`` when not asked for.
    """
    X, a1, z, a2, arg, g, a3, h3, norm, desc = cache
    dy = (d_desc - desc * (desc * d_desc).sum(1, keepdims=True)) / norm
    grads = {}
    if want_params:
        grads["enc.w4"] = h3.T @ dy
        grads["enc.b4"] = dy.sum(0)
    dh3 = dy @ p["enc.w4"].T
    da3 = dh3 * (a3 > 0)
    if want_params:
        grads["enc.w3"] = g.T @ da3
        grads["enc.b3"] = da3.sum(0)
    dg = da3 @ p["enc.w3"].T
    B, N, C = a2.shape
    dh2 = np.zeros_like(a2)
    np.put_along_axis(dh2, arg[:, None, :], dg[:, None, :], 1)
    da2 = dh2 * (a2 > 0)
    da2_flat = da2.reshape(B * N, C)
    if want_params:
        grads["enc.w2"] = z.reshape(B * N, -1).T @ da2_flat
        grads["enc.b2"] = da2_flat.sum(0)
    if not (want_params or want_prompt):
        return None, None
    dz = (da2_flat @ p["enc.w2"].T).reshape(B, N, -1)
    if want_params:
        da1 = (dz * (a1 > 0)).reshape(B * N, -1)
        grads["enc.w1"] = X.reshape(B * N, 3).T @ da1
        grads["enc.b1"] = da1.sum(0)
    return (grads if want_params else None), (dz if want_prompt else None)


def model_forward(model: ModelState, X: np.ndarray, prompt_grad: bool = True):
    """Combined forward H(x) = F(x, P(x)); the prompt path is used when present.

    With ``prompt_grad=False`` the returned cache cannot backpropagate into the
    prompt module, which lets a neutral (all-zero output) prompt be skipped.
    """
    from . import prompt as _prompt

    pcache = None
    pout = None
    if model.has_prompt and (prompt_grad or not _prompt.is_neutral(model.params)):
        pout, pcache = _prompt.prompt_forward(model.params, X)
        if not prompt_grad:
            pcache = None
    desc, ecache = encoder_forward(model.params, X, pout)
    return desc, (ecache, pcache)


def model_backward(model: ModelState, cache, d_desc: np.ndarray,
                   trainable: set[str] | None = None) -> dict[str, np.ndarray]:
    """Backpropagate to the parameters named in ``trainable`` (default: all)."""
    from . import prompt as _prompt

    ecache, pcache = cache
    if trainable is None:
        trainable = set(model.params)
    want_enc = any(k.startswith(ENC_PREFIX) for k in trainable)
    want_prompt = pcache is not None and any(k.startswith(PROMPT_PREFIX) for k in trainable)
    egrads, dpout = encoder_backward(model.params, ecache, d_desc, want_enc, want_prompt)
    grads = {}
    if egrads:
        grads.update(egrads)
    if want_prompt:
        grads.update(_prompt.prompt_backward(model.params, pcache, dpout))
    return {k: v for k, v in grads.items() if k in trainable}


def embed(model: ModelState, X: np.ndarray, prompt_out: np.ndarray | None = None,
          chunk: int = 128) -> np.ndarray:
    """Descriptors for a single (N, 3) submap or a (B, N, 3) batch.

    ``prompt_out`` overrides the attached prompt module with explicit per-point
    guidance features.
    """
    single = X.ndim == 2
    if single:
        X = X[None]
        if prompt_out is not None:
            prompt_out = prompt_out[None]
    X = X.astype(model.params["enc.w1"].dtype, copy=False)
    out = []
    for s in range(0, len(X), chunk):
        xb = X[s:s + chunk]
        if prompt_out is not None:
            d, _ = encoder_forward(model.params, xb, prompt_out[s:s + chunk])
        else:
            d, _ = model_forward(model, xb, prompt_grad=False)
        out.append(d)
    res = np.concatenate(out) if out else np.zeros((0, model.descriptor_dim))
    return res[0] if single else res


# -- losses ---------------------------------------------------------------------


def _dist_and_grad(a: np.ndarray, b: np.ndarray):
    """Euclidean distances ||a - b_j|| for a (B, D), b (B, M, D) and unit directions."""
    diff = a[:, None, :] - b
    d = np.sqrt((diff * diff).sum(-1))
    safe = np.where(d > 0, d, 1.0)
    unit = np.where((d > 0)[..., None], diff / safe[..., None], 0.0)
    return d, unit


def triplet_loss(anchors: np.ndarray, positives: np.ndarray, negatives: np.ndarray,
                 margin: float, return_grad: bool = False):
    """Batch-hard triplet hinge.

    ``positives`` and ``negatives`` are (B, P, D) and (B, K, D); 2-D inputs are
    treated as one positive/negative per anchor. For each anchor the farthest
    positive and closest negative are used, and the hinge is averaged.
    """
    a = np.asarray(anchors)
    pos = np.asarray(positives)
    neg = np.asarray(negatives)
    if a.shape[0] == 0:
        raise ModelError("empty triplet batch")
    squeeze_p, squeeze_n = pos.ndim == 2, neg.ndim == 2
    if squeeze_p:
        pos = pos[:, None, :]
    if squeeze_n:
        neg = neg[:, None, :]
    if pos.shape[0] != a.shape[0] or neg.shape[0] != a.shape[0]:
        raise ModelError("anchor/positive/negative batch sizes differ")
    dp, up = _dist_and_grad(a, pos)
    dn, un = _dist_and_grad(a, neg)
    B = a.shape[0]
    ip = dp.argmax(1)
    ineg = dn.argmin(1)
    rows = np.arange(B)
    hinge = margin + dp[rows, ip] - dn[rows, ineg]
    active = hinge > 0
    loss = float(np.where(active, hinge, 0.0).mean())
    if not return_grad:
        return loss
    w = active.astype(a.dtype) / B
    ga = w[:, None] * (up[rows, ip] - un[rows, ineg])
    gp = np.zeros_like(pos)
    gn = np.zeros_like(neg)
    gp[rows, ip] = -w[:, None] * up[rows, ip]
    gn[rows, ineg] = w[:, None] * un[rows, ineg]
    if squeeze_p:
        gp = gp[:, 0]
    if squeeze_n:
        gn = gn[:, 0]
    return loss, (ga, gp, gn)


def kd_loss(old_desc: np.ndarray, new_desc: np.ndarray, return_grad: bool = False):
    """Mean squared Euclidean distance between historical and current descriptors."""
    old_desc = np.asarray(old_desc)
    new_desc = np.asarray(new_desc)
    if new_desc.shape[0] == 0:
        raise ModelError("knowledge distillation needs a non-empty replay batch")
    if old_desc.shape != new_desc.shape:
        raise ModelError("old and new descriptors differ in shape")
    diff = new_desc - old_desc
    loss = float((diff * diff).sum(1).mean())
    if not return_grad:
        return loss
    return loss, 2.0 * diff / new_desc.shape[0]


def composite_loss(pr: float, kd: float, lam: float, epoch: int) -> float:
    """Place-recognition loss plus the epoch-decayed distillation term."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return pr + kd_weight(lam, epoch) * kd


def kd_weight(lam: float, epoch: int) -> float:
    return float(lam) ** int(epoch)


# -- optimiser ------------------------------------------------------------------


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place update of the parameters that received a gradient."""
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for k, gk in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            gk = gk.astype(params[k].dtype, copy=False)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * gk
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * gk * gk
            upd = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] -= upd.astype(params[k].dtype)


# -- checkpoints ------------------------------------------------------------------

_CKPT_MAGIC = b"LPRC"


def save_checkpoint(path: str | os.PathLike, model: ModelState, extra: dict | None = None) -> None:
    """Write a JSON tensor table followed by little-endian float32 payloads."""
    table = []
    offset = 0
    blobs = []
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                      "offset": offset})
        offset += arr.nbytes
        blobs.append(arr.tobytes())
    header = {"tensors": table, "stage": list(model.stage),
              "descriptor_dim": model.descriptor_dim, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> ModelState:
    raw = Path(path).read_bytes()
    if raw[:4] != _CKPT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack_from("<Q", raw, 4)
    header = json.loads(raw[12:12 + hlen])
    body = memoryview(raw)[12 + hlen:]
    params = {}
    for ent in header["tensors"]:
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=ent["offset"])
        params[ent["name"]] = arr.reshape(ent["shape"]).astype(np.float32)
    return ModelState(params, header["descriptor_dim"], tuple(header["stage"]))


def checkpoint_extra(path: str | os.PathLike) -> dict:
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack_from("<Q", raw, 4)
    return json.loads(raw[12:12 + hlen])["extra"]


def backprop(model: ModelState, X: np.ndarray, loss_fn, trainable: set[str] | None = None):
    """Forward ``X``, evaluate ``loss_fn(desc) -> (loss, d_desc)`` and backpropagate.

    Only parameters in ``trainable`` receive gradients.
    """
    prompt_grad = trainable is None or any(k.startswith(PROMPT_PREFIX) for k in trainable)
    desc, cache = model_forward(model, X, prompt_grad)
    loss, d_desc = loss_fn(desc)
    if not np.isfinite(loss):
        raise ModelError(f"non-finite loss {loss}")
    if trainable is not None and not trainable:
        return loss, {}
    return loss, model_backward(model, cache, d_desc, trainable)
