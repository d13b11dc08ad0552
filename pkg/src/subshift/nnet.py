"""One-hidden-layer tanh network with exact hand-derived gradients.

Supports three head configurations: a single sigmoid head, k routed heads
(each sample's loss flows only through its group's head), and an optional
per-class adversary bank predicting group from the hidden representation.
Everything is plain numpy; gradients are validated against central finite
differences in the test suite.

Batch loss convention: loss = (1/B) * sum_i weight_i * bce_i. The batch
size, not the weight total, normalizes, so scaling all weights scales the
loss and every gradient by the same factor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatch

__all__ = [
    "ModelParams",
    "AdamState",
    "init_params",
    "forward",
    "bce_loss_and_grad",
    "per_sample_losses",
    "cfair_loss_and_grad",
    "grad_reversal_backward",
    "adam_init",
    "sgd_adam_step",
    "params_to_json",
    "params_from_json",
]

_FIELDS = ("w1", "b1", "w_heads", "b_heads", "w_adv", "b_adv")


@dataclass(frozen=True)
class ModelParams:
    w1: np.ndarray
    b1: np.ndarray
    w_heads: np.ndarray
    b_heads: np.ndarray
    w_adv: np.ndarray | None = None
    b_adv: np.ndarray | None = None

    @property
    def n_heads(self) -> int:
        return self.w_heads.shape[0]

    def map(self, fn, *others: "ModelParams") -> "ModelParams":
        out = {}
        for f in _FIELDS:
            mine = getattr(self, f)
            if mine is None:
                out[f] = None
                continue
            out[f] = fn(mine, *[getattr(o, f) for o in others])
        return ModelParams(**out)


def init_params(
    dim: int,
    hidden: int = 16,
    n_heads: int = 1,
    adv_groups: int = 0,
    n_classes: int = 2,
    seed: int = 0,
) -> ModelParams:
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, hidden))
    w_heads = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(n_heads, hidden))
    w_adv = b_adv = None
    if adv_groups > 0:
        w_adv = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(n_classes, adv_groups, hidden))
        b_adv = np.zeros((n_classes, adv_groups))
    return ModelParams(
        w1=w1,
        b1=np.zeros(hidden),
        w_heads=w_heads,
        b_heads=np.zeros(n_heads),
        w_adv=w_adv,
        b_adv=b_adv,
    )


def forward(params: ModelParams, x: np.ndarray):
    """Return (logits, hidden). Logits are [B] for one head, [B, k] otherwise."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != params.w1.shape[0]:
        raise DimensionMismatch(f"{x.shape[1]} features vs {params.w1.shape[0]} input weights")
    hidden = np.tanh(x @ params.w1 + params.b1)
    logits = hidden @ params.w_heads.T + params.b_heads
    if params.n_heads == 1:
        logits = logits[:, 0]
    return logits, hidden


def _routed_logits(logits: np.ndarray, head_ids) -> np.ndarray:
    if logits.ndim == 1:
        return logits
    return logits[np.arange(len(logits)), np.asarray(head_ids)]


def _bce(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z) - y * z


def per_sample_losses(params: ModelParams, x, y, head_ids=None) -> np.ndarray:
    logits, _ = forward(params, x)
    if head_ids is not None and logits.ndim == 2:
        logits = _routed_logits(logits, head_ids)
    return _bce(logits, np.asarray(y, dtype=float))


def _zero_grads_like(params: ModelParams) -> dict:
    return {f: (None if getattr(params, f) is None else np.zeros_like(getattr(params, f))) for f in _FIELDS}


def bce_loss_and_grad(params: ModelParams, x, y, sample_weights=None, head_ids=None):
    """Weighted batch BCE and exact gradients for encoder plus heads.

    head_ids routes each sample through one head; required when the model
    has several. Adversary parameters, if present, receive zero gradient.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    b = len(y)
    w = np.ones(b) if sample_weights is None else np.asarray(sample_weights, dtype=float)
    logits, hidden = forward(params, x)
    multi = logits.ndim == 2
    if multi and head_ids is None:
        raise DimensionMismatch("multi-head model needs head_ids")
    z = _routed_logits(logits, head_ids) if multi else logits

    loss = float(np.sum(w * _bce(z, y)) / b)
    dz = w * (expit(z) - y) / b

    if multi:
        dlogits = np.zeros_like(logits)
        dlogits[np.arange(b), np.asarray(head_ids)] = dz
    else:
        dlogits = dz[:, None]

    g = _zero_grads_like(params)
    g["w_heads"] = dlogits.T @ hidden
    g["b_heads"] = dlogits.sum(axis=0)
    d_hidden = dlogits @ params.w_heads
    dz1 = d_hidden * (1.0 - hidden**2)
    g["w1"] = x.T @ dz1
    g["b1"] = dz1.sum(axis=0)
    return loss, ModelParams(**g)


def grad_reversal_backward(adversary_grads, mu: float):
    """Encoder-side contribution of an adversary gradient: scaled by -mu."""
    if isinstance(adversary_grads, ModelParams):
        return adversary_grads.map(lambda a: -mu * a)
    return -mu * np.asarray(adversary_grads)


def cfair_loss_and_grad(params: ModelParams, x, y, g_ids, mu: float):
    """Joint step for the adversarial configuration.

    The main head minimizes BCE. Each class's adversary minimizes softmax
    cross-entropy predicting the group among that class's samples (batch-mean
    normalized). The encoder receives the BCE gradient minus mu times the
    adversary gradient (reversal); adversaries receive their own gradient.
    Returns (bce_loss, adversary_loss, grads).
    """
    if params.w_adv is None:
        raise DimensionMismatch("model has no adversary parameters")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=int)
    g_ids = np.asarray(g_ids, dtype=int)
    b = len(y)

    logits, hidden = forward(params, x)
    z = logits
    yf = y.astype(float)
    bce = float(np.sum(_bce(z, yf)) / b)
    dz = (expit(z) - yf) / b
    dlogits = dz[:, None]

    grads = _zero_grads_like(params)
    grads["w_heads"] = dlogits.T @ hidden
    grads["b_heads"] = dlogits.sum(axis=0)
    d_hidden_bce = dlogits @ params.w_heads

    adv_loss = 0.0
    d_hidden_adv = np.zeros_like(hidden)
    grads["w_adv"] = np.zeros_like(params.w_adv)
    grads["b_adv"] = np.zeros_like(params.b_adv)
    n_classes = params.w_adv.shape[0]
    for c in range(n_classes):
        idx = np.nonzero(y == c)[0]
        if len(idx) == 0:
            continue
        h_c = hidden[idx]
        za = h_c @ params.w_adv[c].T + params.b_adv[c]
        za = za - za.max(axis=1, keepdims=True)
        p = np.exp(za)
        p /= p.sum(axis=1, keepdims=True)
        targets = g_ids[idx]
        adv_loss += float(-np.sum(np.log(p[np.arange(len(idx)), targets])) / b)
        dza = p.copy()
        dza[np.arange(len(idx)), targets] -= 1.0
        dza /= b
        grads["w_adv"][c] = dza.T @ h_c
        grads["b_adv"][c] = dza.sum(axis=0)
        d_hidden_adv[idx] += dza @ params.w_adv[c]

    d_hidden = d_hidden_bce + grad_reversal_backward(d_hidden_adv, mu)
    dz1 = d_hidden * (1.0 - hidden**2)
    grads["w1"] = x.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return bce, adv_loss, ModelParams(**grads)


def params_to_json(params: ModelParams) -> str:
    """Flat-vector serialization with a shape header, for reproducibility audits."""
    payload = {"shapes": {}, "values": {}}
    for f in _FIELDS:
        arr = getattr(params, f)
        if arr is None:
            continue
        payload["shapes"][f] = list(arr.shape)
        payload["values"][f] = arr.ravel().tolist()
    return json.dumps(payload, sort_keys=True)


def params_from_json(text: str) -> ModelParams:
    payload = json.loads(text)
    fields = {}
    for f in _FIELDS:
        if f not in payload["shapes"]:
            fields[f] = None
            continue
        fields[f] = np.asarray(payload["values"][f], dtype=float).reshape(payload["shapes"][f])
    return ModelParams(**fields)


@dataclass(frozen=True)
class AdamState:
    m: ModelParams
    v: ModelParams
    t: int


def adam_init(params: ModelParams) -> AdamState:
    zeros = params.map(np.zeros_like)
    return AdamState(m=zeros, v=zeros, t=0)


def sgd_adam_step(
    params: ModelParams,
    grads: ModelParams,
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """One Adam step with decoupled weight decay; returns (params, state)."""
    t = state.t + 1
    m = state.m.map(lambda m_, g_: beta1 * m_ + (1.0 - beta1) * g_, grads)
    v = state.v.map(lambda v_, g_: beta2 * v_ + (1.0 - beta2) * g_**2, grads)
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t

    def upd(p_, m_, v_):
        step = lr * (m_ / bc1) / (np.sqrt(v_ / bc2) + eps)
        return p_ - step - lr * weight_decay * p_

    new_params = params.map(upd, m, v)
    return new_params, AdamState(m=m, v=v, t=t)
