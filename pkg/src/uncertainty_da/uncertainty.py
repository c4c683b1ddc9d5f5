"""Monte Carlo dropout predictions, entropy/variance uncertainty and the
uncertainty-based adversarial sample weights."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import LOG_FLOOR, MC_EVAL, Tensor

ENTROPY = "entropy"
VARIANCE = "variance"


@dataclass
class MCPrediction:
    pass_logits: np.ndarray  # [T, B, C]
    mean_probs: np.ndarray  # [B, C]
    entropy_u: np.ndarray  # [B], raw nats
    variance_u: np.ndarray  # [B], class-averaged logit variance
    T: int
    tau: float

    @property
    def n_classes(self) -> int:
        return self.mean_probs.shape[1]

    @property
    def normalized_entropy(self) -> np.ndarray:
        return normalize_entropy(self.entropy_u, self.n_classes)

    @property
    def class_variance(self) -> np.ndarray:
        d = self.pass_logits - self.pass_logits[:1]
        return ((d - d.mean(axis=0)) ** 2).mean(axis=0)


@dataclass
class AdaptiveWeights:
    weights: np.ndarray
    threshold: float
    survivor_count: int

    @property
    def survivor_fraction(self) -> float:
        return self.survivor_count / max(len(self.weights), 1)


def mc_logits(bundle, x, T: int, step: int = 0, mode: str = MC_EVAL,
              eval_streams: bool = False, detach_classifier: bool = False) -> Tensor:
    """``T`` stochastic passes through feature extractor and classifier, stacked
    pass-major into a ``[T * B, C]`` tensor (pass indices ``0 .. T-1``)."""
    if T < 1:
        raise ValueError(f"need at least one MC pass, got T={T}")
    passes = range(T)
    feats = bundle.extract_features(x, mode, step, passes, eval_streams)
    return bundle.classify(feats, mode, step, passes, eval_streams, detach_params=detach_classifier)


def entropy_uncertainty(stacked_logits: Tensor, T: int, tau: float) -> tuple[Tensor, Tensor]:
    """(mean tempered probabilities ``[B, C]``, entropy ``[B]``) from stacked pass logits."""
    n, c = stacked_logits.shape
    probs = ag.softmax_temp(stacked_logits, tau)
    mean_probs = ag.mean(ag.reshape(probs, (T, n // T, c)), axis=0)
    ent = ag.neg(ag.total(ag.mul(mean_probs, ag.log(mean_probs)), axis=1))
    return mean_probs, ent


def variance_uncertainty(stacked_logits: Tensor, T: int) -> Tensor:
    """Per-class population variance of the raw logits across passes, ``[B, C]``."""
    n, c = stacked_logits.shape
    per_pass = ag.reshape(stacked_logits, (T, n // T, c))
    # offset by the first pass so identical passes give exactly zero
    shifted = ag.add(per_pass, ag.neg(ag.take(per_pass, slice(0, 1))))
    centred = ag.add(shifted, ag.neg(ag.mean(shifted, axis=0)))
    return ag.mean(ag.mul(centred, centred), axis=0)


def mc_predict(bundle, x, T: int, tau: float, step: int = 0,
               eval_streams: bool = False) -> MCPrediction:
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    logits = mc_logits(bundle, ag.as_tensor(np.asarray(x, dtype=np.float64)), T, step,
                       eval_streams=eval_streams).detach()
    n, c = logits.shape
    return prediction_from_logits(logits.data.reshape(T, n // T, c), tau)


def prediction_from_logits(pass_logits, tau: float) -> MCPrediction:
    """Summaries of an existing ``[T, B, C]`` stack of raw pass outputs."""
    a = np.asarray(pass_logits, dtype=np.float64)
    if a.ndim != 3 or a.shape[0] < 1:
        raise ValueError(f"expected [T, B, C] pass logits, got shape {a.shape}")
    T, n, c = a.shape
    stacked = Tensor(a.reshape(T * n, c))
    mean_probs, ent = entropy_uncertainty(stacked, T, tau)
    var = variance_uncertainty(stacked, T)
    return MCPrediction(a, mean_probs.data, ent.data, var.data.mean(axis=1), T, tau)


def entropy_of(row) -> float:
    """Shannon entropy (nats) of one probability row."""
    p = np.asarray(row, dtype=np.float64)
    if p.ndim != 1 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("entropy_of expects a probability vector summing to 1")
    return float(-(p * np.log(np.maximum(p, LOG_FLOOR))).sum())


def variance_of(pass_logits) -> float:
    """Class-averaged population variance of one sample's ``[T, C]`` raw outputs."""
    a = np.asarray(pass_logits, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1:
        raise ValueError("variance_of expects a [T, C] array with T >= 1")
    d = a - a[0]
    return float(((d - d.mean(axis=0)) ** 2).mean(axis=0).mean())


def normalize_entropy(entropy, n_classes: int):
    """Entropy on the ``[0, 1]`` scale (divide by ``ln C``)."""
    return entropy / math.log(n_classes)


def minmax_normalize(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    lo, hi = u.min(), u.max()
    if hi - lo <= 0:
        return np.zeros_like(u)
    return (u - lo) / (hi - lo)


def adaptive_weights(uncertainties, t_u: float) -> AdaptiveWeights:
    """Zero weight above ``t_u``; survivors get ``n_surv * softmax(-u)`` over survivors."""
    u = np.asarray(uncertainties, dtype=np.float64)
    keep = u <= t_u
    n_surv = int(keep.sum())
    w = np.zeros_like(u)
    if n_surv:
        # shifting by the survivor minimum leaves the ratio unchanged
        e = np.exp(-(u[keep] - u[keep].min()))
        w[keep] = n_surv * e / e.sum()
    return AdaptiveWeights(w, float(t_u), n_surv)
