"""Few-shot evaluation on frozen representations.

Covers episode sampling, classifier-head training (linear or cosine), top-k
scoring, the prototypical-network baseline and a reconstruction-based
compositionality meter.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SplitDataset
from .errors import ContractError, NumericError
from .model import AttributeEmbedding, ClassifierHead, DEFAULT_COSINE_SCALE, classify, encode, init_head

LABEL_SPACES = ("novel_only", "joint")
DEFAULT_ITERS = {"cosine": 100, "linear": 200}


@dataclass
class EpisodeSpec:
    n_shot: int = 1
    query_per_class: int = 15
    label_space: str = "novel_only"
    seed: int = 0
    trials: int = 20
    base_support_per_class: int = 20

    def __post_init__(self):
        if self.n_shot < 1 or self.query_per_class < 1 or self.trials < 1:
            raise ContractError("n_shot, query_per_class and trials must be at least 1")
        if self.label_space not in LABEL_SPACES:
            raise ContractError("label_space must be one of %s" % (LABEL_SPACES,))


@dataclass
class FrozenFeatures:
    embeddings: np.ndarray  # N x m, aligned with dataset examples
    labels: np.ndarray
    checkpoint_hash: str = ""


@dataclass
class Episode:
    classes: tuple  # category ids; position = label index
    support_idx: np.ndarray
    support_y: np.ndarray
    query_idx: np.ndarray
    query_y: np.ndarray


@dataclass
class Scores:
    top1: float
    top5: float
    degenerate_top5: bool = False


def extract_features(theta, dataset: SplitDataset, checkpoint_hash: str = "") -> FrozenFeatures:
    with ad.no_grad():
        f, _ = encode(theta, dataset.features)
    if not checkpoint_hash:
        checkpoint_hash = hashlib.sha256(
            b"".join(np.ascontiguousarray(w.data).tobytes() + b.data.tobytes() for w, b in theta.layers)
        ).hexdigest()[:16]
    return FrozenFeatures(f.data.copy(), dataset.labels.copy(), checkpoint_hash)


# ---------------------------------------------------------------------------
# episodes


def sample_episode(dataset: SplitDataset, features: FrozenFeatures | None, spec: EpisodeSpec, trial: int) -> Episode:
    """Draw support and query indices for one trial.

    Every novel class contributes ``n_shot`` support and ``query_per_class``
    query examples. The joint label space adds base classes: support from the
    base training slice and queries from the held-out base validation slice.
    Deterministic in ``(spec.seed, trial)``.
    """
    rng = np.random.default_rng([spec.seed, trial])
    need = spec.n_shot + spec.query_per_class
    support, s_y, query, q_y = [], [], [], []
    classes = list(dataset.novel_categories)
    for label, c in enumerate(dataset.novel_categories):
        idx = dataset.indices_of(c)
        if idx.size < need:
            raise ContractError(
                "novel class %d has %d examples, episode needs %d (n_shot=%d + query=%d)"
                % (c, idx.size, need, spec.n_shot, spec.query_per_class)
            )
        pick = rng.permutation(idx)[:need]
        support.append(pick[: spec.n_shot])
        query.append(pick[spec.n_shot :])
        s_y.append(np.full(spec.n_shot, label))
        q_y.append(np.full(spec.query_per_class, label))

    if spec.label_space == "joint":
        train_idx, val_idx = dataset.base_split()
        train_set, val_set = set(train_idx.tolist()), set(val_idx.tolist())
        for c in dataset.base_categories:
            label = len(classes)
            classes.append(c)
            idx = dataset.indices_of(c)
            tr = np.array([i for i in idx if i in train_set], dtype=np.int64)
            va = np.array([i for i in idx if i in val_set], dtype=np.int64)
            if tr.size == 0 or va.size == 0:
                raise ContractError("base class %d has no training or validation examples" % c)
            ns = min(spec.base_support_per_class, tr.size)
            nq = min(spec.query_per_class, va.size)
            support.append(rng.permutation(tr)[:ns])
            query.append(rng.permutation(va)[:nq])
            s_y.append(np.full(ns, label))
            q_y.append(np.full(nq, label))

    return Episode(
        tuple(classes),
        np.concatenate(support).astype(np.int64),
        np.concatenate(s_y).astype(np.int64),
        np.concatenate(query).astype(np.int64),
        np.concatenate(q_y).astype(np.int64),
    )


# ---------------------------------------------------------------------------
# heads


def train_head(
    support_x: np.ndarray,
    support_y: np.ndarray,
    kind: str = "cosine",
    iters: int | None = None,
    lr: float = 0.1,
    augment: bool = False,
    rng: np.random.Generator | None = None,
    num_classes: int | None = None,
    momentum: float = 0.9,
    scale: float = DEFAULT_COSINE_SCALE,
) -> ClassifierHead:
    """Fit a classifier head on frozen support features by full-batch SGD.

    With ``augment`` each iteration jitters the support features with
    Gaussian noise of 0.1 x the per-dimension support standard deviation.
    """
    support_x = np.asarray(support_x, dtype=np.float64)
    support_y = np.asarray(support_y, dtype=np.int64)
    if support_y.size == 0:
        raise ContractError("empty support set")
    iters = DEFAULT_ITERS[kind] if iters is None else iters
    if iters < 1:
        raise ContractError("iters must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    num_classes = int(support_y.max()) + 1 if num_classes is None else num_classes
    head = init_head(kind, num_classes, support_x.shape[1], rng, scale)
    params = head.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    jitter = 0.1 * support_x.std(axis=0) if augment else None

    for it in range(iters):
        x = support_x + rng.normal(size=support_x.shape) * jitter if augment else support_x
        for p in params:
            p.grad = np.zeros_like(p.data)
        loss = ad.softmax_cross_entropy(classify(head, x), support_y)
        if not math.isfinite(float(loss.data)):
            raise NumericError("non-finite loss while training head at iteration %d" % it)
        ad.backward(loss)
        for p, v in zip(params, velocity):
            v *= momentum
            v += p.grad
            p.data -= lr * v
    return head


def ranked(logits: np.ndarray) -> np.ndarray:
    """Class indices by decreasing logit; ties go to the lower index."""
    return np.argsort(-logits, axis=1, kind="stable")


def score_logits(logits: np.ndarray, labels: np.ndarray) -> Scores:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("empty query set")
    order = ranked(logits)
    top1 = float(np.mean(order[:, 0] == labels))
    n_classes = logits.shape[1]
    if n_classes < 6:
        return Scores(top1, 1.0, True)
    top5 = float(np.mean((order[:, :5] == labels[:, None]).any(axis=1)))
    return Scores(top1, top5, False)


def evaluate(head: ClassifierHead, query_x, query_y) -> Scores:
    with ad.no_grad():
        logits = classify(head, np.asarray(query_x, dtype=np.float64)).data
    return score_logits(np.atleast_2d(logits), np.asarray(query_y))


def prototype_logits(support_x, support_y, query_x, num_classes: int | None = None) -> np.ndarray:
    support_x = np.asarray(support_x, dtype=np.float64)
    support_y = np.asarray(support_y)
    query_x = np.asarray(query_x, dtype=np.float64)
    num_classes = int(support_y.max()) + 1 if num_classes is None else num_classes
    protos = np.zeros((num_classes, support_x.shape[1]))
    for c in range(num_classes):
        members = support_x[support_y == c]
        if members.shape[0] == 0:
            raise ContractError("class %d has no support examples" % c)
        protos[c] = members.mean(axis=0)
    d2 = (query_x**2).sum(axis=1)[:, None] - 2.0 * query_x @ protos.T + (protos**2).sum(axis=1)[None, :]
    return -d2


def prototypical_baseline(support_x, support_y, query_x, query_y, num_classes: int | None = None) -> Scores:
    """Nearest class-mean classification by squared Euclidean distance."""
    return score_logits(prototype_logits(support_x, support_y, query_x, num_classes), np.asarray(query_y))


# ---------------------------------------------------------------------------
# episode driver


@dataclass
class MetricsRecord:
    method: str
    n_shot: int
    label_space: str
    top1_mean: float
    top1_std: float
    top5_mean: float
    top5_std: float
    seed_count: int
    degenerate_top5: bool = False


def _mean_std(values) -> tuple:
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), std


def aggregate(method: str, n_shot: int, label_space: str, scores) -> MetricsRecord:
    scores = list(scores)
    t1 = _mean_std([s.top1 for s in scores])
    t5 = _mean_std([s.top5 for s in scores])
    return MetricsRecord(
        method, n_shot, label_space, t1[0], t1[1], t5[0], t5[1], len(scores), any(s.degenerate_top5 for s in scores)
    )


def run_episodes(
    dataset: SplitDataset,
    features: FrozenFeatures,
    spec: EpisodeSpec,
    method: str = "cosine",
    augment: bool = False,
    iters: int | None = None,
    lr: float = 0.1,
) -> list:
    """Per-trial scores for one method ("cosine", "linear" or "prototypical")."""
    out = []
    for trial in range(spec.trials):
        ep = sample_episode(dataset, features, spec, trial)
        sx, qx = features.embeddings[ep.support_idx], features.embeddings[ep.query_idx]
        n_classes = len(ep.classes)
        if method == "prototypical":
            out.append(prototypical_baseline(sx, ep.support_y, qx, ep.query_y, n_classes))
            continue
        rng = np.random.default_rng([spec.seed, trial, 7])
        head = train_head(sx, ep.support_y, method, iters, lr, augment, rng, n_classes)
        out.append(evaluate(head, qx, ep.query_y))
    return out


# ---------------------------------------------------------------------------
# compositionality meter


@dataclass
class CompositionalityFit:
    eta: np.ndarray
    fit_distance: float
    heldout_distance: float
    converged: bool


def _cosine_distance_np(f: np.ndarray, target: np.ndarray) -> float:
    num = (f * target).sum(axis=1)
    den = np.linalg.norm(f, axis=1) * np.linalg.norm(target, axis=1)
    return float(np.mean(1.0 - num / den))


def fit_compositionality(
    embeddings: np.ndarray,
    multi_hot: np.ndarray,
    split_fraction: float = 0.8,
    iters: int = 500,
    lr: float = 10.0,
    seed: int = 0,
    init: str = "random",
) -> CompositionalityFit:
    """Fit attribute embeddings to frozen features and score held-out reconstruction.

    ``split_fraction`` of the examples (shuffled by ``seed``) fit ``eta`` by
    gradient descent on the mean cosine distance between each embedding and
    its attribute sum; the rest are scored.
    """
    if not 0 < split_fraction < 1:
        raise ContractError("split_fraction must lie in (0, 1)")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    multi_hot = np.asarray(multi_hot, dtype=np.float64)
    if (multi_hot.sum(axis=1) == 0).any():
        raise ContractError("every example needs a non-empty derivation")
    n, m = embeddings.shape
    k = multi_hot.shape[1]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_fit = min(n - 1, max(1, int(round(split_fraction * n))))
    fit, held = perm[:n_fit], perm[n_fit:]

    if init == "lstsq":
        eta0 = np.linalg.lstsq(multi_hot[fit], embeddings[fit], rcond=None)[0]
    else:
        eta0 = rng.normal(0.0, 1.0 / np.sqrt(m), size=(k, m))
    eta = AttributeEmbedding(Tensor(eta0, requires_grad=True))
    f_fit = embeddings[fit]
    mh_fit = multi_hot[fit]

    prev = math.inf
    rising = 0
    converged = True
    for _ in range(iters):
        eta.eta.grad = np.zeros_like(eta.eta.data)
        target = ad.matmul(mh_fit, eta.eta)
        loss = ad.sub(1.0, ad.mean(ad.cosine_similarity(f_fit, target)))
        value = float(loss.data)
        rising = rising + 1 if value > prev else 0
        if rising >= 10 and converged:
            converged = False
            warnings.warn("compositionality fit loss increased for 10 consecutive steps", RuntimeWarning)
        prev = value
        ad.backward(loss)
        eta.eta.data -= lr * eta.eta.grad

    e = eta.eta.data
    return CompositionalityFit(
        e.copy(),
        _cosine_distance_np(f_fit, mh_fit @ e),
        _cosine_distance_np(embeddings[held], multi_hot[held] @ e),
        converged,
    )


def measure_compositionality(
    features: FrozenFeatures,
    table: dict,
    split_fraction: float = 0.8,
    iters: int = 500,
    lr: float = 10.0,
    seed: int = 0,
    k: int | None = None,
) -> float:
    """Held-out mean cosine distance after fitting attribute embeddings.

    ``k`` defaults to one past the largest attribute index in ``table``.
    """
    labels = features.labels
    missing = sorted({int(c) for c in labels} - set(table))
    if missing:
        raise ContractError("categories without derivations: %s" % missing)
    if k is None:
        k = 1 + max((a for d in table.values() for a in d), default=-1)
    multi_hot = np.zeros((labels.size, k))
    for row, c in enumerate(labels):
        multi_hot[row, list(table[int(c)])] = 1.0
    return fit_compositionality(features.embeddings, multi_hot, split_fraction, iters, lr, seed).heldout_distance
