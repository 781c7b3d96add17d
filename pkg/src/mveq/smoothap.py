"""Smooth average precision training objective with analytic gradients.

For a query feature q with positive set P and negative set N (all unit-norm),
with scores s_i = f_i . q and rank offsets D_ij = s_j - s_i:

    ap = (1/|P|) sum_{i in P} (1 + sum_{j in P, j != i} sig(D_ij / tau))
                              -------------------------------------------
         (1 + sum_{j in P, j != i} sig(D_ij / tau) + sum_{j in N} sig(D_ij / tau))

The j = i self-term is excluded by default (it contributes a constant 1/2 and
breaks the hard-ranking limit); include_self_term=True restores the literal
sum. As tau -> 0 with distinct scores, ap converges to classical average
precision. The training loss is 1 - ap.

Also provides the multi-positive InfoNCE contrastive baseline and the exact
(hard) average precision oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass
class RankingInstance:
    query: np.ndarray  # (C,)
    positives: np.ndarray  # (Kp, C)
    negatives: np.ndarray  # (Kn, C)
    temperature: float = 1.0

    def __post_init__(self):
        self.query = np.asarray(self.query, dtype=np.float64)
        self.positives = np.asarray(self.positives, dtype=np.float64).reshape(-1, self.query.size)
        self.negatives = np.asarray(self.negatives, dtype=np.float64).reshape(-1, self.query.size)
        if self.positives.shape[0] < 1:
            raise ConfigurationError("at least one positive is required")
        if self.temperature <= 0:
            raise ConfigurationError(f"temperature must be positive, got {self.temperature}")
        for name, arr in (("query", self.query[None]), ("positives", self.positives), ("negatives", self.negatives)):
            if arr.size and np.max(np.abs(np.linalg.norm(arr, axis=1) - 1.0)) > 1e-6:
                raise ConfigurationError(f"{name} must be unit-norm within 1e-6")


@dataclass
class LossGrad:
    loss: float
    d_query: np.ndarray
    d_positives: np.ndarray
    d_negatives: np.ndarray


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _ranking_terms(inst: RankingInstance, include_self_term: bool):
    sp = inst.positives @ inst.query  # (Kp,)
    sn = inst.negatives @ inst.query  # (Kn,)
    tau = inst.temperature
    spp = _sigmoid((sp[None, :] - sp[:, None]) / tau)  # sig(D_ij), j positive
    np.fill_diagonal(spp, 0.5 if include_self_term else 0.0)
    spn = _sigmoid((sn[None, :] - sp[:, None]) / tau)  # sig(D_ij), j negative
    a = 1.0 + spp.sum(axis=1)
    b = spn.sum(axis=1)
    return sp, sn, spp, spn, a, b


def smooth_ap(inst: RankingInstance, include_self_term: bool = False) -> float:
    """Smoothed average precision in (0, 1]."""
    _, _, _, _, a, b = _ranking_terms(inst, include_self_term)
    return float(np.mean(a / (a + b)))


def smooth_ap_grad(inst: RankingInstance, include_self_term: bool = False) -> LossGrad:
    """Loss 1 - smooth_ap with analytic gradients w.r.t. all input vectors."""
    sp, sn, spp, spn, a, b = _ranking_terms(inst, include_self_term)
    kp = sp.shape[0]
    tau = inst.temperature

    # d ap / dA_i and d ap / dB_i for term_i = A_i / (A_i + B_i).
    denom = (a + b) ** 2
    d_a = b / denom / kp
    d_b = -a / denom / kp

    # sig'((s_j - s_i)/tau) / tau; the diagonal never moves (D_ii == 0).
    gpp = spp * (1.0 - spp) / tau
    np.fill_diagonal(gpp, 0.0)
    gpn = spn * (1.0 - spn) / tau

    # Scores enter through A_i (j positive) and B_i (j negative).
    d_sp = (
        gpp.T @ d_a  # s_k as the "j" of every other positive's A_i
        - gpp.sum(axis=1) * d_a  # s_k as the "i" in its own A_k
        - gpn.sum(axis=1) * d_b  # s_k as the "i" in its own B_k
    )
    d_sn = gpn.T @ d_b  # t_n as the "j" in every positive's B_i

    # d loss = -d ap; chain through the dot products with the query.
    d_sp = -d_sp
    d_sn = -d_sn
    d_query = d_sp @ inst.positives + (d_sn @ inst.negatives if sn.size else 0.0)
    return LossGrad(
        loss=1.0 - float(np.mean(a / (a + b))),
        d_query=np.asarray(d_query, dtype=np.float64),
        d_positives=d_sp[:, None] * inst.query[None, :],
        d_negatives=d_sn[:, None] * inst.query[None, :],
    )


def exact_ap(pos_scores, neg_scores) -> float:
    """Classical average precision; ties rank negatives first (pessimistic)."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if np.any(np.isnan(pos)) or np.any(np.isnan(neg)):
        raise ConfigurationError("scores must not contain NaN")
    items = [(-s, 1) for s in pos] + [(-s, 0) for s in neg]
    items.sort()  # descending score; negatives (flag 0) first on ties
    hits = 0
    total = 0.0
    for rank, (_, is_pos) in enumerate(items, start=1):
        if is_pos:
            hits += 1
            total += hits / rank
    return total / max(hits, 1)


def contrastive_loss(inst: RankingInstance, temp: float = 0.07) -> LossGrad:
    """Multi-positive InfoNCE baseline with analytic gradients.

    loss = -log( sum_p e^{s_p/temp} / (sum_p e^{s_p/temp} + sum_n e^{s_n/temp}) )
    """
    if temp <= 0:
        raise ConfigurationError(f"temp must be positive, got {temp}")
    sp = inst.positives @ inst.query
    sn = inst.negatives @ inst.query
    m = max(sp.max(), sn.max() if sn.size else -np.inf)
    ep = np.exp((sp - m) / temp)
    en = np.exp((sn - m) / temp) if sn.size else np.zeros(0)
    zp = ep.sum()
    z = zp + en.sum()
    loss = float(np.log(z) - np.log(zp))
    d_sp = (ep / z - ep / zp) / temp
    d_sn = (en / z) / temp
    d_query = d_sp @ inst.positives + (d_sn @ inst.negatives if sn.size else 0.0)
    return LossGrad(
        loss=loss,
        d_query=np.asarray(d_query, dtype=np.float64),
        d_positives=d_sp[:, None] * inst.query[None, :],
        d_negatives=d_sn[:, None] * inst.query[None, :],
    )
