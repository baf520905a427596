"""Training objectives: classification, compositionality regularizers and the
orthogonality penalty on attribute embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .model import AttributeEmbedding, ClassifierHead, EncoderParams, classify, derivation_matrix, encode

VARIANTS = ("none", "hard", "soft")
SOFT_IMPLS = ("raw_margin", "one_vs_all_logistic")
LAST = "last"


@dataclass
class LossConfig:
    variant: str = "none"
    lam: float = 1.0
    beta: float = 0.0
    soft_impl: str = "one_vs_all_logistic"
    neg_sample_ratio: float = 1.0
    neg_sampling: bool = True
    deep_layers: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.deep_layers = frozenset(int(i) for i in self.deep_layers)
        if self.variant not in VARIANTS:
            raise ContractError("variant must be one of %s, got %r" % (VARIANTS, self.variant))
        if self.soft_impl not in SOFT_IMPLS:
            raise ContractError("soft_impl must be one of %s, got %r" % (SOFT_IMPLS, self.soft_impl))
        if self.lam < 0 or self.beta < 0:
            raise ContractError("lambda and beta must be non-negative")
        if not self.neg_sample_ratio > 0:
            raise ContractError("neg_sample_ratio must be positive")

    @property
    def layers(self) -> list:
        """Regularized layers: tapped hidden layers then the embedding."""
        return sorted(self.deep_layers) + [LAST]


def _as_multi_hot(derivations, k: int) -> np.ndarray:
    if isinstance(derivations, np.ndarray) and derivations.ndim == 2:
        if derivations.shape[1] != k:
            raise ContractError("multi-hot width %d does not match vocabulary %d" % (derivations.shape[1], k))
        return derivations
    return derivation_matrix(derivations, k)


# ---------------------------------------------------------------------------
# feature-level losses


def hard_comp(features, eta: AttributeEmbedding, derivations) -> Tensor:
    """Mean cosine distance between each feature row and its attribute sum."""
    multi_hot = _as_multi_hot(derivations, eta.k)
    if (multi_hot.sum(axis=1) == 0).any():
        raise ContractError("hard compositionality needs a non-empty derivation for every example")
    target = ad.matmul(multi_hot, eta.eta)
    cos = ad.cosine_similarity(features, target)
    return ad.sub(1.0, ad.mean(cos))


def sample_attribute_mask(multi_hot: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Supervision mask: all positives plus ``ratio * |D|`` random negatives per row.

    At least one negative is drawn per row (so examples with an empty
    derivation still contribute), capped at the negatives available.
    """
    mask = multi_hot.copy()
    for row in range(multi_hot.shape[0]):
        positives = int(multi_hot[row].sum())
        negatives = np.flatnonzero(multi_hot[row] == 0)
        if negatives.size == 0:
            continue
        n = min(negatives.size, max(1, int(round(ratio * positives))))
        mask[row, rng.choice(negatives, size=n, replace=False)] = 1.0
    return mask


def soft_comp(features, eta: AttributeEmbedding, derivations, cfg: LossConfig, rng=None) -> Tensor:
    multi_hot = _as_multi_hot(derivations, eta.k)
    scores = ad.matmul(features, ad.transpose(eta.eta))
    if cfg.soft_impl == "raw_margin":
        # sum over absent attributes minus sum over present ones
        signs = 1.0 - 2.0 * multi_hot
        return ad.mean(ad.sum_(ad.mul(scores, signs), axis=1))
    if cfg.neg_sampling:
        if rng is None:
            raise ContractError("negative sampling needs an rng")
        weights = sample_attribute_mask(multi_hot, cfg.neg_sample_ratio, rng)
    else:
        weights = None
    return ad.bce_with_logits(scores, multi_hot, weights)


def orthogonality_penalty(eta: AttributeEmbedding) -> Tensor:
    """Mean absolute entry of ``eta eta^T - I``."""
    gram = ad.matmul(eta.eta, ad.transpose(eta.eta))
    return ad.mean(ad.abs_(ad.sub(gram, np.eye(eta.k))))


def residual_norms(features: np.ndarray, eta: np.ndarray, multi_hot: np.ndarray) -> np.ndarray:
    return np.linalg.norm(features - multi_hot @ eta, axis=1)


# ---------------------------------------------------------------------------
# model-level entry points


def _features(theta: EncoderParams, batch):
    f, _ = encode(theta, batch)
    return f if f.ndim == 2 else ad.reshape(f, (1, -1))


def hard_comp_loss(theta: EncoderParams, eta: AttributeEmbedding, batch, derivations) -> Tensor:
    return hard_comp(_features(theta, batch), eta, derivations)


def soft_comp_loss(theta: EncoderParams, eta: AttributeEmbedding, batch, derivations, cfg: LossConfig, rng=None):
    return soft_comp(_features(theta, batch), eta, derivations, cfg, rng)


def residual_diagnostic(theta: EncoderParams, eta: AttributeEmbedding, batch, derivations) -> list:
    """Per-example norm of the part of the embedding not explained by attributes."""
    with ad.no_grad():
        f = _features(theta, batch).data
    return residual_norms(f, eta.eta.data, _as_multi_hot(derivations, eta.k)).tolist()


@dataclass
class LossTerms:
    cls: Tensor
    comp: Tensor | None
    orth: Tensor | None
    total: Tensor


def loss_terms(
    theta: EncoderParams,
    eta_set: dict,
    head: ClassifierHead,
    batch,
    labels,
    derivations,
    cfg: LossConfig,
    rng=None,
) -> LossTerms:
    """Classification loss plus the configured regularizers.

    ``eta_set`` maps each regularized layer (hidden-layer index, or ``LAST``
    for the embedding) to its own attribute embedding.
    """
    f, taps = encode(theta, batch)
    cls = ad.softmax_cross_entropy(classify(head, f), labels)
    if cfg.variant == "none":
        return LossTerms(cls, None, None, cls)
    missing = [layer for layer in cfg.layers if layer not in eta_set]
    if missing:
        raise ContractError("no attribute embedding for layers %s" % missing)
    multi_hot = _as_multi_hot(derivations, eta_set[LAST].k)

    comp = orth = None
    for layer in cfg.layers:
        feats = f if layer == LAST else taps[layer]
        eta = eta_set[layer]
        if cfg.variant == "hard":
            term = hard_comp(feats, eta, multi_hot)
        else:
            term = soft_comp(feats, eta, multi_hot, cfg, rng)
        comp = term if comp is None else ad.add(comp, term)
        if cfg.beta > 0:
            pen = orthogonality_penalty(eta)
            orth = pen if orth is None else ad.add(orth, pen)

    total = ad.add(cls, ad.scale(comp, cfg.lam))
    if orth is not None:
        total = ad.add(total, ad.scale(orth, cfg.beta))
    return LossTerms(cls, comp, orth, total)


def total_loss(theta, eta_set, head, batch, labels, derivations, cfg: LossConfig, rng=None) -> Tensor:
    return loss_terms(theta, eta_set, head, batch, labels, derivations, cfg, rng).total
