"""Synthetic compositional datasets, attribute-table tooling and file I/O."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field
from math import comb
from typing import Mapping, Sequence

import numpy as np

from .errors import ContractError, GenerationError, IncompleteAnnotationError, ParseError, VersionError

DATASET_MAGIC = "comprepr-dataset"
DATASET_VERSION = 1


@dataclass
class AttributeVocabulary:
    names: list
    hierarchy: list = field(default_factory=list)  # (parent, child) edges

    def __post_init__(self):
        self.names = [str(n) for n in self.names]
        self.hierarchy = [(int(p), int(c)) for p, c in self.hierarchy]
        if len(set(self.names)) != len(self.names):
            raise ContractError("attribute names must be unique")
        k = len(self.names)
        parent = {}
        for p, c in self.hierarchy:
            if not (0 <= p < k and 0 <= c < k) or p == c:
                raise ContractError("invalid hierarchy edge (%d, %d)" % (p, c))
            if c in parent:
                raise ContractError("attribute %d has more than one parent" % c)
            parent[c] = p
        for start in parent:
            seen = {start}
            node = start
            while node in parent:
                node = parent[node]
                if node in seen:
                    raise ContractError("hierarchy contains a cycle through attribute %d" % start)
                seen.add(node)
        self._parent = parent

    def __len__(self):
        return len(self.names)

    def parent(self, attr: int):
        return self._parent.get(attr)

    def ancestors(self, attr: int) -> list:
        out = []
        node = self._parent.get(attr)
        while node is not None:
            out.append(node)
            node = self._parent.get(node)
        return out


def make_derivation(attrs, k: int) -> tuple:
    attrs = sorted(int(a) for a in attrs)
    if len(set(attrs)) != len(attrs):
        raise ContractError("derivation has duplicate attributes: %s" % attrs)
    if attrs and (attrs[0] < 0 or attrs[-1] >= k):
        raise ContractError("derivation %s out of range for vocabulary of %d" % (attrs, k))
    return tuple(attrs)


@dataclass
class GroundTruth:
    mixing: np.ndarray  # d_in x k
    nuisance: np.ndarray  # d_in x r
    sigma_noise: float


@dataclass
class SplitDataset:
    features: np.ndarray  # N x d_in
    labels: np.ndarray  # N
    base_categories: tuple
    novel_categories: tuple
    table: dict  # category id -> derivation tuple
    vocab: AttributeVocabulary
    ground_truth: GroundTruth | None = None
    val_fraction: float = 0.1

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.base_categories = tuple(sorted(int(c) for c in self.base_categories))
        self.novel_categories = tuple(sorted(int(c) for c in self.novel_categories))
        if set(self.base_categories) & set(self.novel_categories):
            raise ContractError("base and novel categories overlap")
        known = set(self.base_categories) | set(self.novel_categories)
        unknown = set(self.labels.tolist()) - known
        if unknown:
            raise ContractError("examples with categories outside both splits: %s" % sorted(unknown))
        missing = known - set(self.table)
        if missing:
            raise ContractError("categories without derivations: %s" % sorted(missing))
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ContractError("features %s do not match %d labels" % (self.features.shape, self.labels.size))

    @property
    def k(self) -> int:
        return len(self.vocab)

    @property
    def d_in(self) -> int:
        return self.features.shape[1]

    def indices_of(self, category: int) -> np.ndarray:
        return np.flatnonzero(self.labels == category)

    def base_split(self):
        """(train indices, validation indices) over base examples.

        The last ``ceil(val_fraction * n)`` examples of each base category, in
        file order, form the validation slice.
        """
        train, val = [], []
        for c in self.base_categories:
            idx = self.indices_of(c)
            n_val = int(math.ceil(self.val_fraction * idx.size)) if idx.size > 1 else 0
            train.append(idx[: idx.size - n_val])
            val.append(idx[idx.size - n_val :])
        return np.concatenate(train).astype(np.int64), np.concatenate(val).astype(np.int64)

    def multi_hot(self, categories) -> np.ndarray:
        out = np.zeros((len(categories), self.k))
        for row, c in enumerate(categories):
            out[row, list(self.table[int(c)])] = 1.0
        return out


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class SyntheticSpec:
    k: int = 30
    a_per_cat: int = 5
    n_base: int = 40
    n_novel: int = 20
    per_cat: int = 100
    novel_per_cat: int = 20
    d_in: int = 64
    r_nuisance: int = 8
    sigma_noise: float = 0.3
    val_fraction: float = 0.1


def _unit_columns(rng, rows, cols):
    m = rng.normal(size=(rows, cols))
    if cols:
        m /= np.linalg.norm(m, axis=0, keepdims=True)
    return m


def _draw_subsets(rng, pool, size, count, taken, what):
    pool = np.asarray(sorted(pool))
    if comb(pool.size, size) - sum(1 for t in taken if set(t) <= set(pool.tolist())) < count:
        raise GenerationError("cannot draw %d distinct %d-subsets for %s from %d attributes" % (count, size, what, pool.size))
    out = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 1000 * count + 1000:
            raise GenerationError("failed to realize distinct derivations for %s" % what)
        cand = tuple(sorted(rng.choice(pool, size=size, replace=False).tolist()))
        if cand not in taken:
            taken.add(cand)
            out.append(cand)
    return out


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SplitDataset:
    """Draw a dataset whose features are linear mixtures of category attributes.

    ``x = G @ onehot(D(y)) + H @ u + noise`` with unit-norm columns in ``G``
    and ``H``, ``u ~ N(0, I_r)`` and isotropic Gaussian noise. Novel
    categories only combine attributes that occur in some base category.
    """
    s = spec
    if not 1 <= s.a_per_cat < s.k:
        raise ContractError("need 1 <= a_per_cat < k (got a_per_cat=%d, k=%d)" % (s.a_per_cat, s.k))
    if s.n_base < 1 or s.n_novel < 1:
        raise ContractError("need at least one base and one novel category")
    if s.d_in < s.k:
        raise ContractError("d_in (%d) must be at least k (%d)" % (s.d_in, s.k))
    if s.per_cat < 1 or s.novel_per_cat < 1 or s.r_nuisance < 0 or s.sigma_noise < 0:
        raise ContractError("invalid per-category counts or noise settings")
    if comb(s.k, s.a_per_cat) < s.n_base + s.n_novel:
        raise GenerationError(
            "only %d distinct derivations of size %d exist over %d attributes, %d needed"
            % (comb(s.k, s.a_per_cat), s.a_per_cat, s.k, s.n_base + s.n_novel)
        )

    rng = np.random.default_rng(seed)
    mixing = _unit_columns(rng, s.d_in, s.k)
    nuisance = _unit_columns(rng, s.d_in, s.r_nuisance)

    taken: set = set()
    base = _draw_subsets(rng, range(s.k), s.a_per_cat, s.n_base, taken, "base categories")
    seen = sorted({a for d in base for a in d})
    if len(seen) < s.a_per_cat:
        raise GenerationError("base categories cover only %d attributes" % len(seen))
    novel = _draw_subsets(rng, seen, s.a_per_cat, s.n_novel, taken, "novel categories")

    table = {c: d for c, d in enumerate(base + novel)}
    base_ids = tuple(range(s.n_base))
    novel_ids = tuple(range(s.n_base, s.n_base + s.n_novel))

    feats, labels = [], []
    for c in base_ids + novel_ids:
        n = s.per_cat if c < s.n_base else s.novel_per_cat
        onehot = np.zeros(s.k)
        onehot[list(table[c])] = 1.0
        x = np.tile(mixing @ onehot, (n, 1))
        if s.r_nuisance:
            x += rng.normal(size=(n, s.r_nuisance)) @ nuisance.T
        if s.sigma_noise > 0:
            x += rng.normal(scale=s.sigma_noise, size=(n, s.d_in))
        feats.append(x)
        labels.append(np.full(n, c))

    vocab = AttributeVocabulary(["attr_%02d" % i for i in range(s.k)])
    return SplitDataset(
        np.concatenate(feats),
        np.concatenate(labels),
        base_ids,
        novel_ids,
        table,
        vocab,
        GroundTruth(mixing, nuisance, float(s.sigma_noise)),
        s.val_fraction,
    )


# ---------------------------------------------------------------------------
# attribute tables


def aggregate_attributes(image_level: Mapping, min_cats: int = 5):
    """Collapse per-image binary attributes to category level.

    A category has an attribute when at least half of its images do.
    Attributes positive for fewer than ``min_cats`` categories are dropped.
    Returns ``(table, kept)`` where ``kept[new_index]`` is the original index.
    """
    if not image_level:
        raise ContractError("no categories to aggregate")
    cats = list(image_level)
    positive = {}
    width = None
    for c in cats:
        if len(image_level[c]) == 0:
            raise ContractError("category %r has no annotated images" % (c,))
        rows = np.atleast_2d(np.asarray(image_level[c], dtype=np.float64))
        if rows.shape[0] == 0:
            raise ContractError("category %r has no annotated images" % (c,))
        if width is None:
            width = rows.shape[1]
        elif rows.shape[1] != width:
            raise ContractError("inconsistent attribute count for category %r" % (c,))
        positive[c] = rows.mean(axis=0) >= 0.5
    counts = np.sum([positive[c] for c in cats], axis=0)
    kept = [int(a) for a in np.flatnonzero(counts >= min_cats)]
    remap = {old: new for new, old in enumerate(kept)}
    table = {c: tuple(remap[a] for a in np.flatnonzero(positive[c]) if a in remap) for c in cats}
    return table, kept


def prune_hierarchy(answers: Mapping, vocab: AttributeVocabulary) -> np.ndarray:
    """Expand partial yes/no answers to a full 0/1 vector.

    Attributes under a "no" ancestor are negative without being asked; every
    other attribute needs an explicit answer.
    """
    k = len(vocab)
    out = np.zeros(k, dtype=np.int64)
    missing = []
    for a in range(k):
        ancestors = vocab.ancestors(a)
        if any(not _truthy(answers.get(p, True)) for p in ancestors):
            continue
        # every ancestor answered yes (ancestors themselves are checked on their own turn)
        if any(p not in answers for p in ancestors):
            continue
        if a not in answers:
            missing.append(a)
            continue
        out[a] = 1 if _truthy(answers[a]) else 0
    if missing:
        raise IncompleteAnnotationError(vocab.names[a] for a in missing)
    return out


def _truthy(answer) -> bool:
    if isinstance(answer, str):
        if answer.lower() in ("yes", "y", "1", "true"):
            return True
        if answer.lower() in ("no", "n", "0", "false"):
            return False
        raise ContractError("unrecognized answer %r" % answer)
    return bool(answer)


def subsample_attributes(table: Mapping, vocab: AttributeVocabulary, fraction: float, seed: int):
    """Keep ``ceil(fraction * k)`` attributes chosen uniformly at random.

    Surviving attributes keep their relative order; derivations and hierarchy
    edges are restricted and reindexed.
    """
    if not 0 < fraction <= 1:
        raise ContractError("fraction must lie in (0, 1], got %r" % fraction)
    k = len(vocab)
    n_keep = min(k, int(math.ceil(fraction * k - 1e-9)))
    rng = np.random.default_rng(seed)
    kept = sorted(rng.choice(k, size=n_keep, replace=False).tolist()) if n_keep < k else list(range(k))
    remap = {old: new for new, old in enumerate(kept)}
    new_table = {c: tuple(remap[a] for a in d if a in remap) for c, d in table.items()}
    edges = [(remap[p], remap[c]) for p, c in vocab.hierarchy if p in remap and c in remap]
    return new_table, AttributeVocabulary([vocab.names[a] for a in kept], edges)


def subsample_dataset(dataset: SplitDataset, fraction: float, seed: int) -> SplitDataset:
    table, vocab = subsample_attributes(dataset.table, dataset.vocab, fraction, seed)
    return SplitDataset(
        dataset.features,
        dataset.labels,
        dataset.base_categories,
        dataset.novel_categories,
        table,
        vocab,
        dataset.ground_truth,
        dataset.val_fraction,
    )


def write_attribute_matrix(path, table: Mapping, names: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category"] + list(names))
        for c in sorted(table):
            row = [0] * len(names)
            for a in table[c]:
                row[a] = 1
            w.writerow([c] + row)


def read_attribute_matrix(path):
    """Read a categories x attributes 0/1 CSV. Returns ``(table, names)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError("empty attribute matrix", 1)
    names = rows[0][1:]
    table = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(names) + 1:
            raise ParseError("expected %d columns, got %d" % (len(names) + 1, len(row)), lineno)
        try:
            cid = int(row[0])
            bits = [int(v) for v in row[1:]]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if any(b not in (0, 1) for b in bits):
            raise ParseError("attribute entries must be 0 or 1", lineno)
        table[cid] = tuple(i for i, b in enumerate(bits) if b)
    return table, names


# ---------------------------------------------------------------------------
# dataset files


def _matrix_record(m: np.ndarray) -> dict:
    return {"shape": list(m.shape), "values": [float(v) for v in m.reshape(-1)]}


def _float(v: float) -> str:
    return repr(float(v))


def dumps_dataset(ds: SplitDataset) -> str:
    out = io.StringIO()
    out.write("%s v%d\n" % (DATASET_MAGIC, DATASET_VERSION))
    out.write("vocab %s\n" % json.dumps({"names": ds.vocab.names, "edges": [list(e) for e in ds.vocab.hierarchy]}))
    entries = [[c, "base", list(ds.table[c])] for c in ds.base_categories]
    entries += [[c, "novel", list(ds.table[c])] for c in ds.novel_categories]
    out.write(
        "categories %s\n"
        % json.dumps({"val_fraction": ds.val_fraction, "n_examples": int(ds.labels.size), "entries": entries})
    )
    if ds.ground_truth is None:
        out.write("ground_truth null\n")
    else:
        gt = ds.ground_truth
        rec = {"G": _matrix_record(gt.mixing), "H": _matrix_record(gt.nuisance), "sigma_noise": gt.sigma_noise}
        out.write("ground_truth %s\n" % json.dumps(rec))
    for x, c in zip(ds.features, ds.labels):
        out.write("ex %d %s\n" % (c, " ".join(_float(v) for v in x)))
    return out.getvalue()


def save_dataset(ds: SplitDataset, path) -> None:
    text = dumps_dataset(ds)
    tmp = "%s.tmp%d" % (path, os.getpid())
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _section(line: str, name: str, lineno: int):
    prefix = name + " "
    if not line.startswith(prefix):
        raise ParseError("expected '%s' section" % name, lineno)
    try:
        return json.loads(line[len(prefix) :])
    except json.JSONDecodeError as exc:
        raise ParseError("bad %s record: %s" % (name, exc), lineno) from None


def _matrix(rec, lineno):
    try:
        return np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError("bad matrix record: %s" % exc, lineno) from None


def loads_dataset(text: str) -> SplitDataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty dataset file", 1)
    head = lines[0].split()
    if len(head) != 2 or head[0] != DATASET_MAGIC or not head[1].startswith("v"):
        raise ParseError("missing '%s' header" % DATASET_MAGIC, 1)
    if head[1] != "v%d" % DATASET_VERSION:
        raise VersionError("unsupported dataset version %s (expected v%d)" % (head[1], DATASET_VERSION))
    if len(lines) < 4:
        raise ParseError("truncated dataset header", len(lines) + 1)

    vocab_rec = _section(lines[1], "vocab", 2)
    cat_rec = _section(lines[2], "categories", 3)
    gt_rec = _section(lines[3], "ground_truth", 4)
    try:
        vocab = AttributeVocabulary(vocab_rec["names"], [tuple(e) for e in vocab_rec["edges"]])
        table, base, novel = {}, [], []
        for cid, split, attrs in cat_rec["entries"]:
            table[int(cid)] = make_derivation(attrs, len(vocab))
            (base if split == "base" else novel).append(int(cid))
            if split not in ("base", "novel"):
                raise ValueError("unknown split %r" % split)
        n_examples = int(cat_rec["n_examples"])
        val_fraction = float(cat_rec["val_fraction"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError("bad header record: %s" % exc, 2) from None
    gt = None
    if gt_rec is not None:
        try:
            gt = GroundTruth(_matrix(gt_rec["G"], 4), _matrix(gt_rec["H"], 4), float(gt_rec["sigma_noise"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError("bad ground_truth record: %s" % exc, 4) from None

    body = lines[4:]
    if len(body) != n_examples:
        raise ParseError("expected %d examples, found %d" % (n_examples, len(body)), len(lines) + 1)
    labels = np.empty(n_examples, dtype=np.int64)
    rows = []
    width = None
    for i, line in enumerate(body):
        lineno = i + 5
        parts = line.split(" ")
        if parts[0] != "ex" or len(parts) < 3:
            raise ParseError("expected an 'ex' record", lineno)
        try:
            labels[i] = int(parts[1])
            row = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError("expected %d feature values, got %d" % (width, len(row)), lineno)
        rows.append(row)
    feats = np.asarray(rows, dtype=np.float64).reshape(n_examples, width or 0)
    try:
        return SplitDataset(feats, labels, base, novel, table, vocab, gt, val_fraction)
    except ContractError as exc:
        raise ParseError(str(exc), 3) from None


def load_dataset(path) -> SplitDataset:
    with open(path) as fh:
        return loads_dataset(fh.read())


def derivation_sizes(ds: SplitDataset) -> dict:
    hist: dict = {}
    for c in ds.base_categories + ds.novel_categories:
        hist[len(ds.table[c])] = hist.get(len(ds.table[c]), 0) + 1
    return hist

