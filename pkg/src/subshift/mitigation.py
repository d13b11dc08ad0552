"""Training procedures that consume subgroup labels.

Six methods share one encoder architecture and optimizer so that outcome
differences are attributable to the grouping signal alone:

* erm          -- plain weighted-BCE baseline, ignores groups
* gdro         -- online worst-group reweighting with exponentiated updates
* resampling   -- group-balanced minibatch construction
* domain_ind   -- one classification head per group, routed training
* cfair        -- per-class group adversaries with gradient reversal
* jtt          -- two-stage error upweighting, tuned on validation data

domain_ind and cfair refuse groupings that depend on the label, since their
mechanisms would leak y into inference; the check uses the scheme name when
the dataset carries one and falls back to a structural test.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import expit

from . import nnet
from .errors import EmptyGroup, InvalidScheme, YBasedGrouping
from .grouping import GroupingScheme, Y_BASED_KINDS

__all__ = [
    "TrainConfig",
    "TrainedModel",
    "train",
    "train_erm",
    "train_gdro",
    "train_resampling",
    "train_domain_ind",
    "train_cfair",
    "train_jtt",
    "history_to_csv",
]

JTT_STAGE1_GRID = (1, 2)
JTT_UPWEIGHT_GRID = (5.0, 20.0, 50.0)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_decay_epoch: int = 10
    lr_decay_factor: float = 0.1
    hidden: int = 16
    gdro_eta: float = 0.01
    gdro_size_adjust: float = 1.0
    cfair_mu: float = 0.1
    jtt_stage1_epochs: int | None = None
    jtt_upweight: float | None = None
    domain_ind_rule: str = "max_abs"
    seed: int = 0


@dataclass(frozen=True)
class TrainedModel:
    params: nnet.ModelParams
    method: str
    config: TrainConfig
    history: tuple
    scheme: str | None = None
    info: dict = field(default_factory=dict)

    def predict_scores(self, x: np.ndarray) -> np.ndarray:
        logits, _ = nnet.forward(self.params, x)
        if logits.ndim == 1:
            return expit(logits)
        if self.method == "domain_ind" and self.config.domain_ind_rule == "sum":
            return expit(logits.sum(axis=1))
        pick = np.argmax(np.abs(logits), axis=1)
        return expit(logits[np.arange(len(logits)), pick])


def _group_count(dataset) -> int:
    if dataset.group is None:
        raise InvalidScheme("dataset has no group labels; annotate it first")
    k = dataset.group_count
    if k is None:
        k = int(np.max(dataset.group)) + 1
    return int(k)


def _indices_by_group(dataset, k: int) -> list[np.ndarray]:
    idx = [np.nonzero(dataset.group == g)[0] for g in range(k)]
    for g, rows in enumerate(idx):
        if len(rows) == 0:
            raise EmptyGroup(f"group {g} has no training samples")
    return idx


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    if epoch >= cfg.lr_decay_epoch:
        return cfg.lr * cfg.lr_decay_factor
    return cfg.lr


def _check_y_free(dataset, k: int) -> None:
    """Refuse groupings that encode the label."""
    name = dataset.group_scheme
    if name is not None:
        try:
            scheme = GroupingScheme.from_name(name)
        except InvalidScheme:
            scheme = None
        if scheme is not None:
            if scheme.kind in Y_BASED_KINDS:
                raise YBasedGrouping(f"{name} groups are a function of y")
            return
    for g in range(k):
        labels = np.unique(dataset.y[dataset.group == g])
        if len(labels) < 2:
            raise YBasedGrouping(
                f"group {g} contains a single class; grouping may encode y"
            )


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _run_plain(dataset, cfg: TrainConfig, sample_weights=None, seed=None):
    """Shared ERM loop; JTT stage 2 passes per-sample weights."""
    x = dataset.features
    y = dataset.y.astype(float)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = nnet.init_params(x.shape[1], cfg.hidden, seed=cfg.seed if seed is None else seed)
    state = nnet.adam_init(params)
    history = []
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        losses = []
        for batch in _epoch_batches(len(y), cfg.batch_size, rng):
            w = None if sample_weights is None else sample_weights[batch]
            loss, grads = nnet.bce_loss_and_grad(params, x[batch], y[batch], sample_weights=w)
            params, state = nnet.sgd_adam_step(params, grads, state, lr, cfg.weight_decay)
            losses.append(loss)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "group_weights": None})
    return params, tuple(history)


def train_erm(dataset, cfg: TrainConfig) -> TrainedModel:
    params, history = _run_plain(dataset, cfg)
    return TrainedModel(params=params, method="erm", config=cfg, history=history)


def train_gdro(dataset, cfg: TrainConfig) -> TrainedModel:
    """Online group DRO.

    Group weights q live on the simplex. Each batch, groups present update
    q_g <- q_g * exp(eta * (mean batch loss of g + C / sqrt(n_g))) with n_g
    the full-train group size, then q renormalizes and every sample is
    weighted B * q_g / (batch count of g), which makes the weighted batch
    loss equal sum_g q_g * (mean loss of g).
    """
    k = _group_count(dataset)
    _indices_by_group(dataset, k)
    x = dataset.features
    y = dataset.y.astype(float)
    groups = dataset.group
    n_g = np.array([(groups == g).sum() for g in range(k)], dtype=float)
    adjust = cfg.gdro_size_adjust / np.sqrt(n_g)

    rng = np.random.default_rng(cfg.seed)
    params = nnet.init_params(x.shape[1], cfg.hidden, seed=cfg.seed)
    state = nnet.adam_init(params)
    q = np.full(k, 1.0 / k)
    history = []
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        losses = []
        for batch in _epoch_batches(len(y), cfg.batch_size, rng):
            g_b = groups[batch]
            sample_loss = nnet.per_sample_losses(params, x[batch], y[batch])
            present = np.unique(g_b)
            for g in present:
                mean_loss = float(sample_loss[g_b == g].mean())
                q[g] *= np.exp(cfg.gdro_eta * (mean_loss + adjust[g]))
            q /= q.sum()
            counts = np.bincount(g_b, minlength=k).astype(float)
            w = len(batch) * q[g_b] / counts[g_b]
            loss, grads = nnet.bce_loss_and_grad(params, x[batch], y[batch], sample_weights=w)
            params, state = nnet.sgd_adam_step(params, grads, state, lr, cfg.weight_decay)
            losses.append(loss)
        history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "group_weights": q.copy()}
        )
    return TrainedModel(
        params=params, method="gdro", config=cfg, history=history, scheme=dataset.group_scheme
    )


def train_resampling(dataset, cfg: TrainConfig) -> TrainedModel:
    """Group-balanced sampling with replacement: batches pick a group
    uniformly, then a sample uniformly inside it."""
    k = _group_count(dataset)
    by_group = _indices_by_group(dataset, k)
    x = dataset.features
    y = dataset.y.astype(float)
    rng = np.random.default_rng(cfg.seed)
    params = nnet.init_params(x.shape[1], cfg.hidden, seed=cfg.seed)
    state = nnet.adam_init(params)
    steps_per_epoch = max(1, int(np.ceil(len(y) / cfg.batch_size)))
    history = []
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        losses = []
        for _ in range(steps_per_epoch):
            picks = rng.integers(0, k, size=cfg.batch_size)
            batch = np.empty(cfg.batch_size, dtype=int)
            for g in range(k):
                mask = picks == g
                m = int(mask.sum())
                if m:
                    batch[mask] = by_group[g][rng.integers(0, len(by_group[g]), size=m)]
            loss, grads = nnet.bce_loss_and_grad(params, x[batch], y[batch])
            params, state = nnet.sgd_adam_step(params, grads, state, lr, cfg.weight_decay)
            losses.append(loss)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "group_weights": None})
    return TrainedModel(
        params=params, method="resampling", config=cfg, history=history, scheme=dataset.group_scheme
    )


def train_domain_ind(dataset, cfg: TrainConfig) -> TrainedModel:
    """One head per group; each sample trains only its group's head.

    Inference has no group label, so scores come from the head with the
    largest |logit| (default) or from the sum of all head logits.
    """
    k = _group_count(dataset)
    _indices_by_group(dataset, k)
    _check_y_free(dataset, k)
    if cfg.domain_ind_rule not in ("max_abs", "sum"):
        raise InvalidScheme(f"unknown inference rule {cfg.domain_ind_rule!r}")
    x = dataset.features
    y = dataset.y.astype(float)
    groups = dataset.group
    rng = np.random.default_rng(cfg.seed)
    params = nnet.init_params(x.shape[1], cfg.hidden, n_heads=k, seed=cfg.seed)
    state = nnet.adam_init(params)
    history = []
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        losses = []
        for batch in _epoch_batches(len(y), cfg.batch_size, rng):
            loss, grads = nnet.bce_loss_and_grad(
                params, x[batch], y[batch], head_ids=groups[batch]
            )
            params, state = nnet.sgd_adam_step(params, grads, state, lr, cfg.weight_decay)
            losses.append(loss)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "group_weights": None})
    return TrainedModel(
        params=params, method="domain_ind", config=cfg, history=history, scheme=dataset.group_scheme
    )


def train_cfair(dataset, cfg: TrainConfig) -> TrainedModel:
    """Adversarial group removal: per-class discriminators predict the group
    from the hidden layer; their gradient reaches the encoder reversed and
    scaled by mu. All parameters update in the same optimizer step."""
    k = _group_count(dataset)
    _indices_by_group(dataset, k)
    _check_y_free(dataset, k)
    if k < 2:
        raise InvalidScheme("adversarial training needs at least two groups")
    x = dataset.features
    y = dataset.y
    groups = dataset.group
    rng = np.random.default_rng(cfg.seed)
    params = nnet.init_params(x.shape[1], cfg.hidden, adv_groups=k, seed=cfg.seed)
    state = nnet.adam_init(params)
    history = []
    for epoch in range(cfg.epochs):
        lr = _lr_at(cfg, epoch)
        losses = []
        adv_losses = []
        for batch in _epoch_batches(len(y), cfg.batch_size, rng):
            bce, adv, grads = nnet.cfair_loss_and_grad(
                params, x[batch], y[batch], groups[batch], cfg.cfair_mu
            )
            params, state = nnet.sgd_adam_step(params, grads, state, lr, cfg.weight_decay)
            losses.append(bce)
            adv_losses.append(adv)
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "group_weights": None,
                "adversary_loss": float(np.mean(adv_losses)),
            }
        )
    return TrainedModel(
        params=params, method="cfair", config=cfg, history=history, scheme=dataset.group_scheme
    )


def _accuracy(scores: np.ndarray, y: np.ndarray) -> float:
    return float(((scores >= 0.5).astype(int) == y).mean())


def _selection_score(model: TrainedModel, val) -> float:
    scores = model.predict_scores(val.features)
    if val.group is None:
        return _accuracy(scores, val.y)
    k = int(np.max(val.group)) + 1 if val.group_count is None else val.group_count
    accs = []
    for g in range(k):
        mask = val.group == g
        if mask.any():
            accs.append(_accuracy(scores[mask], val.y[mask]))
    return min(accs)


def train_jtt(dataset, val, cfg: TrainConfig) -> TrainedModel:
    """Two-stage upweighting without train-time group labels.

    Stage one is a short ERM run; its training-set errors (threshold 0.5)
    get weight lambda in a from-scratch stage-two run. The (stage-1 epochs,
    lambda) pair comes from a small grid tuned on validation data: by
    worst-group accuracy when the validation split carries groups, by
    overall accuracy otherwise. Pinning both fields in the config collapses
    the grid to that single cell.
    """
    s1_grid = JTT_STAGE1_GRID if cfg.jtt_stage1_epochs is None else (cfg.jtt_stage1_epochs,)
    up_grid = JTT_UPWEIGHT_GRID if cfg.jtt_upweight is None else (cfg.jtt_upweight,)

    best = None
    for s1 in s1_grid:
        stage1_cfg = replace(cfg, epochs=int(s1))
        stage1_params, _ = _run_plain(dataset, stage1_cfg)
        logits, _ = nnet.forward(stage1_params, dataset.features)
        wrong = (expit(logits) >= 0.5).astype(int) != dataset.y
        if not wrong.any():
            warnings.warn("stage-1 model makes no training errors; upweighting is a no-op")
        for lam in up_grid:
            weights = np.where(wrong, float(lam), 1.0)
            params, history = _run_plain(dataset, cfg, sample_weights=weights)
            candidate = TrainedModel(
                params=params,
                method="jtt",
                config=cfg,
                history=history,
                scheme=dataset.group_scheme,
                info={"stage1_epochs": int(s1), "upweight": float(lam), "n_upweighted": int(wrong.sum())},
            )
            score = _selection_score(candidate, val)
            if best is None or score > best[0]:
                best = (score, candidate)
    return best[1]


_TRAINERS = {
    "erm": train_erm,
    "gdro": train_gdro,
    "resampling": train_resampling,
    "domain_ind": train_domain_ind,
    "cfair": train_cfair,
}


def train(method: str, dataset, cfg: TrainConfig, val=None) -> TrainedModel:
    if method == "jtt":
        if val is None:
            raise InvalidScheme("jtt needs a validation split for model selection")
        return train_jtt(dataset, val, cfg)
    if method not in _TRAINERS:
        raise InvalidScheme(f"unknown method {method!r}")
    return _TRAINERS[method](dataset, cfg)


def history_to_csv(history: Sequence[dict]) -> str:
    """Render epoch history; group-weight columns appear when any row has them."""
    k = 0
    for row in history:
        gw = row.get("group_weights")
        if gw is not None:
            k = max(k, len(gw))
    buf = io.StringIO()
    cols = ["epoch", "train_loss"] + [f"group_{g}_weight" for g in range(k)]
    buf.write(",".join(cols) + "\n")
    for row in history:
        cells = [str(int(row["epoch"])), f"{row['train_loss']:.6f}"]
        gw = row.get("group_weights")
        for g in range(k):
            cells.append(f"{gw[g]:.6f}" if gw is not None else "")
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()
