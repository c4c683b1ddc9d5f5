"""Losses, adaptation schedule and the training loop."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from . import autograd as ag
from .autograd import DETERMINISTIC, MC_EVAL, TRAIN, NonFiniteError, Tensor
from .data import NOISE_LABEL, DomainBatch, DomainDataset, batch_iter
from .models import ModelBundle
from .optim import SGD
from .uncertainty import (
    ENTROPY,
    VARIANCE,
    adaptive_weights,
    entropy_uncertainty,
    mc_logits,
    minmax_normalize,
    normalize_entropy,
    variance_uncertainty,
)

SOURCE_ONLY = "source_only"
ADVERSARIAL_PLAIN = "adversarial_plain"
UNCERTAINTY_FULL = "uncertainty_full"
MODES = (SOURCE_ONLY, ADVERSARIAL_PLAIN, UNCERTAINTY_FULL)

EVAL_CHUNK = 512


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    mode: str = UNCERTAINTY_FULL
    uncertainty_metric: str = ENTROPY
    T: int = 12
    tau: float = 1.5
    tau_c: float = 1.8
    t_u: float = 0.2
    gamma: float = -10.0
    lambda_u_ratio: float = 0.25
    discrepancy_q: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    lu_through_classifier: bool = True
    force_lambda_adv: float | None = None
    force_lambda_u: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.uncertainty_metric not in (ENTROPY, VARIANCE):
            raise ValueError(f"uncertainty_metric must be entropy or variance")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.discrepancy_q not in (1, 2):
            raise ValueError("discrepancy_q must be 1 or 2")


@dataclass
class LossReport:
    step: int
    l_c: float
    l_adv: float
    l_u: float
    l_final: float
    lambda_adv: float
    lambda_u: float
    mean_source_uncertainty: float
    mean_target_uncertainty: float
    survivor_frac_s: float
    survivor_frac_t: float
    adversarial_skipped: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


def lambda_schedule(m: float, gamma: float = -10.0) -> float:
    """Adaptation weight ramp ``2 / (1 + exp(gamma * m)) - 1`` for progress ``m`` in [0, 1]."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"training progress must lie in [0, 1], got {m}")
    return 2.0 / (1.0 + math.exp(gamma * m)) - 1.0


def classification_loss(bundle: ModelBundle, xs, ys, tau_c: float, step: int = 0,
                        pass_index: int = 0, mode: str = TRAIN) -> tuple[Tensor, Tensor]:
    """Tempered source cross-entropy from one stochastic pass.

    Returns ``(loss, features)`` so the features can be reused downstream.
    """
    if len(ys) == 0:
        raise ValueError("empty source batch")
    feats = bundle.extract_features(xs, mode, step, pass_index)
    logits = bundle.classify(feats, mode, step, pass_index)
    return ag.cross_entropy(ag.softmax_temp(logits, tau_c), ys), feats


def adversarial_loss(bundle: ModelBundle, source_feats: Tensor, target_feats: Tensor,
                     source_u, target_u, alpha_s, alpha_t, lambda_adv: float,
                     step: int = 0) -> Tensor:
    """Weighted domain-classification loss, with generator opposition through a
    reversal layer of strength ``lambda_adv``.  All-zero weights give a zero
    loss with zero gradients."""
    alpha_s = np.asarray(alpha_s, dtype=np.float64)
    alpha_t = np.asarray(alpha_t, dtype=np.float64)
    d_s = bundle.discriminate(source_feats, source_u, lambda_adv, TRAIN, step)
    d_t = bundle.discriminate(target_feats, target_u, lambda_adv, TRAIN, step)
    src = ag.mean(ag.mul(ag.log(d_s), alpha_s))
    tgt = ag.mean(ag.mul(ag.log(ag.add(1.0, ag.neg(d_t))), alpha_t))
    return ag.neg(ag.add(src, tgt))


def uncertainty_discrepancy(source_u, target_u, q: int = 2) -> Tensor:
    """``|mean(source_u) - mean(target_u)| ** q`` over the two batches."""
    source_u, target_u = ag.as_tensor(source_u), ag.as_tensor(target_u)
    if source_u.size == 0 or target_u.size == 0:
        raise ValueError("uncertainty discrepancy needs both domains")
    if q not in (1, 2):
        raise ValueError("q must be 1 or 2")
    gap = ag.add(ag.mean(source_u), ag.neg(ag.mean(target_u)))
    return ag.power(ag.absolute(gap), q)


def _schedule(cfg: TrainConfig, step: int, total_steps: int) -> tuple[float, float]:
    if cfg.mode == SOURCE_ONLY:
        return 0.0, 0.0
    m = min(step / max(total_steps, 1), 1.0)
    lam_adv = lambda_schedule(m, cfg.gamma) if cfg.force_lambda_adv is None else cfg.force_lambda_adv
    if cfg.mode != UNCERTAINTY_FULL:
        return lam_adv, 0.0
    lam_u = cfg.lambda_u_ratio * lam_adv if cfg.force_lambda_u is None else cfg.force_lambda_u
    return lam_adv, lam_u


def train_step(bundle: ModelBundle, batch: DomainBatch, cfg: TrainConfig, step: int,
               optimizer: SGD, total_steps: int) -> LossReport:
    try:
        return _train_step(bundle, batch, cfg, step, optimizer, total_steps)
    except NonFiniteError as exc:
        optimizer.zero_grad()
        raise TrainingDiverged(f"non-finite value at step {step}: {exc}") from exc


def _train_step(bundle, batch, cfg, step, optimizer, total_steps):
    lam_adv, lam_u = _schedule(cfg, step, total_steps)
    xs = ag.as_tensor(batch.xs)
    n = len(batch.xs)
    # the supervised pass uses the pass index right after the MC passes
    l_c, f_s = classification_loss(bundle, xs, batch.ys, cfg.tau_c, step, pass_index=cfg.T)
    loss = l_c
    l_adv_v = l_u_v = 0.0
    u_s_mean = u_t_mean = float("nan")
    frac_s = frac_t = 0.0
    skipped = False

    if cfg.mode != SOURCE_ONLY:
        if batch.xt is None:
            raise ValueError(f"mode {cfg.mode} needs target samples")
        xt = ag.as_tensor(batch.xt)
        f_t = bundle.extract_features(xt, TRAIN, step, cfg.T + 1)
        cond_s = cond_t = None
        alpha_s, alpha_t = np.ones(n), np.ones(len(batch.xt))
        if cfg.mode == UNCERTAINTY_FULL:
            logits = mc_logits(bundle, ag.concat([xs, xt], axis=0), cfg.T, step, TRAIN,
                               detach_classifier=not cfg.lu_through_classifier)
            if cfg.uncertainty_metric == ENTROPY:
                _, ent = entropy_uncertainty(logits, cfg.T, cfg.tau)
                u = ag.scale(ent, 1.0 / math.log(bundle.n_classes))
                cond = u.data[:, None]
                gate = u.data
            else:
                var = variance_uncertainty(logits, cfg.T)
                u = ag.mean(var, axis=1)
                cond = var.data
                gate = minmax_normalize(u.data)
            w_s = adaptive_weights(gate[:n], cfg.t_u)
            w_t = adaptive_weights(gate[n:], cfg.t_u)
            alpha_s, alpha_t = w_s.weights, w_t.weights
            frac_s, frac_t = w_s.survivor_fraction, w_t.survivor_fraction
            cond_s, cond_t = cond[:n], cond[n:]
            u_src, u_tgt = ag.take(u, slice(0, n)), ag.take(u, slice(n, None))
            u_s_mean, u_t_mean = float(u_src.data.mean()), float(u_tgt.data.mean())
            l_u = uncertainty_discrepancy(u_src, u_tgt, cfg.discrepancy_q)
            l_u_v = l_u.item()
            loss = ag.add(loss, ag.scale(l_u, lam_u))
        else:
            frac_s = frac_t = 1.0
        batch.alpha_s, batch.alpha_t = alpha_s, alpha_t
        # no survivors in either domain: skip the adversarial term this step
        skipped = not (alpha_s.any() or alpha_t.any())
        if not skipped:
            l_adv = adversarial_loss(bundle, f_s, f_t, cond_s, cond_t, alpha_s, alpha_t, lam_adv, step)
            l_adv_v = l_adv.item()
            loss = ag.add(loss, l_adv)

    loss.backward()
    optimizer.step(allow_missing=True)
    l_c_v = l_c.item()
    return LossReport(
        step=step,
        l_c=l_c_v,
        l_adv=l_adv_v,
        l_u=l_u_v,
        l_final=l_c_v + lam_adv * l_adv_v + lam_u * l_u_v,
        lambda_adv=lam_adv,
        lambda_u=lam_u,
        mean_source_uncertainty=u_s_mean,
        mean_target_uncertainty=u_t_mean,
        survivor_frac_s=frac_s,
        survivor_frac_t=frac_t,
        adversarial_skipped=skipped,
    )


def evaluate(bundle: ModelBundle, features, labels=None, T: int = 12, tau: float = 1.5,
             mode: str = "mc", metric: str = ENTROPY, chunk: int = EVAL_CHUNK) -> dict:
    """MC-marginalised accuracy (temperature 1) and mean uncertainty.

    Uncertainty is normalized entropy under ``tau`` or class-mean logit variance.
    Rows labeled with the noise sentinel count towards uncertainty only.
    ``mode="deterministic_expectation"`` turns dropout off and uses one pass.
    """
    x = np.asarray(features, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    probs, ent, var = predict_mc(bundle, x, T, tau, mode, chunk)
    u = normalize_entropy(ent, bundle.n_classes) if metric == ENTROPY else var
    out = {"n": len(x), "mean_uncertainty": float(u.mean()),
           "mean_entropy_u": float(normalize_entropy(ent, bundle.n_classes).mean()),
           "mean_variance_u": float(var.mean())}
    if labels is not None:
        y = np.asarray(labels)
        pred = probs.argmax(axis=1)
        known = y != NOISE_LABEL
        out["accuracy"] = float((pred[known] == y[known]).mean()) if known.any() else float("nan")
        out["per_class_accuracy"] = {
            int(c): float((pred[y == c] == c).mean()) for c in np.unique(y[known])
        }
    return out


def predict_mc(bundle: ModelBundle, x: np.ndarray, T: int, tau: float, mode: str = "mc",
               chunk: int = EVAL_CHUNK):
    """Chunked MC evaluation on the evaluation dropout streams.

    Returns (mean probs at temperature 1, raw entropy under ``tau``,
    class-mean logit variance).
    """
    if mode not in ("mc", "deterministic_expectation"):
        raise ValueError(f"unknown evaluation mode {mode!r}")
    drop_mode, passes = (MC_EVAL, T) if mode == "mc" else (DETERMINISTIC, 1)
    probs, ents, vars_ = [], [], []
    for k, start in enumerate(range(0, len(x), chunk)):
        block = ag.Tensor(x[start:start + chunk])
        feats = bundle.extract_features(block, drop_mode, k, range(passes), eval_streams=True)
        logits = bundle.classify(feats, drop_mode, k, range(passes), eval_streams=True)
        p1, _ = entropy_uncertainty(logits, passes, 1.0)
        _, e = entropy_uncertainty(logits, passes, tau)
        probs.append(p1.data)
        ents.append(e.data)
        vars_.append(variance_uncertainty(logits, passes).data.mean(axis=1))
    return np.vstack(probs), np.concatenate(ents), np.concatenate(vars_)


def fit(bundle: ModelBundle, source: DomainDataset, target: DomainDataset | None,
        cfg: TrainConfig, epoch_callback: Callable | None = None,
        optimizer: SGD | None = None) -> list[list[LossReport]]:
    """Run ``cfg.epochs`` epochs; ``epoch_callback(epoch, reports)`` after each."""
    if cfg.mode != SOURCE_ONLY and target is None:
        raise ValueError(f"mode {cfg.mode} needs a target domain")
    train_target = target if cfg.mode != SOURCE_ONLY else None
    opt = optimizer or SGD(bundle.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    limit = len(source) if train_target is None else min(len(source), len(train_target))
    per_epoch = len(source) // min(cfg.batch_size, limit)
    total_steps = cfg.epochs * per_epoch
    history = []
    step = bundle.step
    for epoch in range(cfg.epochs):
        reports = []
        for batch in batch_iter(source, train_target, min(cfg.batch_size, limit), cfg.seed, epoch):
            reports.append(train_step(bundle, batch, cfg, step, opt, total_steps))
            step += 1
            bundle.step = step
        history.append(reports)
        if epoch_callback is not None:
            epoch_callback(epoch, reports)
    return history


def summarize(reports: Iterable[LossReport]) -> dict:
    """Epoch means of the per-step report fields (NaN-aware)."""
    reports = list(reports)
    keys = ("l_c", "l_adv", "l_u", "l_final", "lambda_adv", "lambda_u",
            "mean_source_uncertainty", "mean_target_uncertainty", "survivor_frac_s", "survivor_frac_t")
    out = {}
    for k in keys:
        vals = np.array([getattr(r, k) for r in reports], dtype=np.float64)
        out[k] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
    out["skipped_steps"] = sum(r.adversarial_skipped for r in reports)
    return out
