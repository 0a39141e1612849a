"""Scalar training objectives: source cross-entropy, adversarial domain
classification (plain and entropy-reweighted), squared MMD with an RBF
kernel, and the L1 budget penalty on the group weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

# discriminator outputs are clamped into [EPS, 1-EPS] before the log
EPS = 1e-7

DANN = "dann"
DANNPE = "dannpe"
MMD = "mmd"
VARIANTS = (DANN, DANNPE, MMD)


@dataclass
class AlignmentVariant:
    """Which alignment objective to use and its knobs.

    grl_lambda scales the flipped gradient for the adversarial variants and
    acts as a plain loss weight for MMD. sigma is the RBF bandwidth; None
    means "resolve with the median heuristic on the first batch".
    """

    name: str
    grl_lambda: float = 1.0
    sigma: Optional[float] = None

    def __post_init__(self) -> None:
        if self.name not in VARIANTS:
            raise ValueError(f"unknown alignment variant {self.name!r}")
        if not np.isfinite(self.grl_lambda) or self.grl_lambda < 0.0:
            raise ValueError("grl_lambda must be finite and >= 0")
        if self.sigma is not None and not self.sigma > 0.0:
            raise ValueError("sigma must be positive")

    @property
    def adversarial(self) -> bool:
        return self.name in (DANN, DANNPE)


@dataclass
class AlignmentInfo:
    """Plain-float view of one alignment evaluation for reporting."""

    dom_cls: Optional[float]  # discriminator BCE; None for MMD
    dom: float                # alignment objective: -dom_cls, or mmd^2
    clamped: bool = False


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true classes."""
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    return T.scale(T.reduce_mean(T.pick(T.log_softmax(logits), labels)), -1.0)


def entropy_weights(probs: Tensor) -> Tensor:
    """Per-sample weights exp(-entropy); detached so no gradient reaches C."""
    p = probs.values
    if p.ndim != 2:
        raise ValueError("entropy_weights expects n x K probabilities")
    if np.any(p < 0.0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("rows must be distributions (nonnegative, sum to 1)")
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0.0, p * np.log(p), 0.0)
    return Tensor(np.exp(plogp.sum(axis=1)))


def domain_cls_loss(d_src: Tensor, d_tgt: Tensor,
                    w_src: Optional[Tensor] = None,
                    w_tgt: Optional[Tensor] = None) -> Tensor:
    """Two-domain BCE: -mean log d_src - mean log(1 - d_tgt).

    Optional nonnegative weights are normalized to mean one per domain batch
    and applied inside the means. Inputs are clamped to [EPS, 1-EPS] so the
    loss stays finite; a clamp sets the "domain_output_clamped" tape flag.
    """
    term_s = _bce_term(d_src, w_src, true_side=True)
    term_t = _bce_term(d_tgt, w_tgt, true_side=False)
    return T.add(term_s, term_t)


def _bce_term(d: Tensor, w: Optional[Tensor], true_side: bool) -> Tensor:
    if d.values.ndim != 2 or d.shape[1] != 1:
        raise ValueError(f"discriminator outputs must be n x 1, got {d.shape}")
    clamped = T.clip(d, EPS, 1.0 - EPS)
    if clamped.tape is not None and np.any(clamped.values != d.values):
        clamped.tape.flags.add("domain_output_clamped")
    inner = clamped if true_side else T.sub(_ones_like(clamped), clamped)
    ll = T.log(inner)
    if w is not None:
        wv = w.values
        if np.any(wv < 0.0):
            raise ValueError("weights must be nonnegative")
        norm = (wv / wv.mean()).reshape(-1, 1)
        if norm.shape != ll.values.shape:
            raise ValueError(f"weight shape {w.shape} does not match batch {d.shape}")
        ll = T.mul(ll, Tensor(norm))
    return T.scale(T.reduce_mean(ll), -1.0)


def _ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.values))


def mmd2_rbf(fs: Tensor, ft: Tensor, sigma: float) -> Tensor:
    """Biased squared-MMD V-statistic with kernel exp(-||f - f'||^2 / (2 sigma))."""
    if not sigma > 0.0:
        raise ValueError("sigma must be positive")
    if fs.shape[0] == 0 or ft.shape[0] == 0:
        raise ValueError("mmd2_rbf needs at least one sample per domain")
    inv = -1.0 / (2.0 * sigma)
    k_ss = T.reduce_mean(T.exp(T.scale(T.pairwise_sqdist(fs, fs), inv)))
    k_tt = T.reduce_mean(T.exp(T.scale(T.pairwise_sqdist(ft, ft), inv)))
    k_st = T.reduce_mean(T.exp(T.scale(T.pairwise_sqdist(fs, ft), inv)))
    return T.sub(T.add(k_ss, k_tt), T.scale(k_st, 2.0))


def median_sq_dist(fs: np.ndarray, ft: np.ndarray) -> float:
    """Median heuristic bandwidth: median pairwise squared distance over the
    pooled batch, off-diagonal pairs only."""
    pooled = np.concatenate([fs, ft], axis=0)
    diff = pooled[:, None, :] - pooled[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    vals = sq[~np.eye(sq.shape[0], dtype=bool)]
    med = float(np.median(vals))
    return med if med > 0.0 else 1.0


def beta_penalty(beta: Tensor, budget: float) -> Tensor:
    """L1 budget penalty |sum(beta) - budget|; subgradient 0 at the kink."""
    gap = T.sub(T.reduce_sum(beta), Tensor(np.asarray(float(budget))))
    return T.absolute(gap)


def alignment_loss(variant: AlignmentVariant, fs: Tensor, ft: Tensor,
                   classifier: Optional[nn.ClassifierHead] = None,
                   discriminator: Optional[nn.DomainDiscriminator] = None,
                   dropout_rng: Optional[np.random.Generator] = None,
                   weights_override: Optional[tuple[np.ndarray, np.ndarray]] = None,
                   ) -> tuple[Tensor, AlignmentInfo]:
    """Scalar alignment objective over source/target features.

    For the adversarial variants the returned scalar is the discriminator BCE
    computed on gradient-reversed inputs: minimizing it trains the
    discriminator while the shared parameters receive the flipped (alignment)
    gradient, scaled by grl_lambda. For MMD it is grl_lambda * mmd^2.

    weights_override pins the entropy weights to given arrays instead of
    recomputing them from the live probabilities; finite-difference checks use
    it because the weights are detached from the gradient by design.
    """
    if variant.name == MMD:
        if variant.sigma is None:
            raise ValueError("sigma unresolved; call median_sq_dist on the first batch")
        raw = mmd2_rbf(fs, ft, variant.sigma)
        loss = T.scale(raw, variant.grl_lambda) if variant.grl_lambda != 1.0 else raw
        return loss, AlignmentInfo(dom_cls=None, dom=float(raw.values))

    if discriminator is None:
        raise ValueError("adversarial variants need a discriminator")
    w_src = w_tgt = None
    if variant.name == DANNPE:
        if classifier is None:
            raise ValueError("dannpe needs the classifier for probability inputs")
        zs = T.exp(T.log_softmax(classifier.forward(fs)))
        zt = T.exp(T.log_softmax(classifier.forward(ft)))
        if weights_override is not None:
            w_src, w_tgt = Tensor(weights_override[0]), Tensor(weights_override[1])
        else:
            w_src = entropy_weights(zs)
            w_tgt = entropy_weights(zt)
    else:
        zs, zt = fs, ft
    d_src = discriminator.forward(nn.grl(zs, variant.grl_lambda), dropout_rng=dropout_rng)
    d_tgt = discriminator.forward(nn.grl(zt, variant.grl_lambda), dropout_rng=dropout_rng)
    loss = domain_cls_loss(d_src, d_tgt, w_src, w_tgt)
    dom_cls = float(loss.values)
    clamped = loss.tape is not None and "domain_output_clamped" in loss.tape.flags
    return loss, AlignmentInfo(dom_cls=dom_cls, dom=-dom_cls, clamped=clamped)
