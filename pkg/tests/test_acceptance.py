"""Acceptance suite: one test, and one PASS/FAIL line, per criterion.

The experiment criteria (5, 6, 7) share one sweep over five seeds of the
default synthetic data, trained once per session.
"""

import itertools
import json
import time

import numpy as np
import pytest

from comprepr import autodiff as ad
from comprepr.cli import gradcheck_report, main
from comprepr.data import (
    AttributeVocabulary,
    SyntheticSpec,
    aggregate_attributes,
    dumps_dataset,
    generate_synthetic,
    load_dataset,
    loads_dataset,
    prune_hierarchy,
    save_dataset,
    subsample_dataset,
)
from comprepr.fewshot import (
    EpisodeSpec,
    FrozenFeatures,
    extract_features,
    measure_compositionality,
    prototypical_baseline,
    run_episodes,
    sample_episode,
)
from comprepr.losses import LossConfig, orthogonality_penalty, soft_comp, total_loss
from comprepr.model import AttributeEmbedding, classify, encode, init_attribute_embedding, init_encoder, init_head
from comprepr.trainer import RunConfig, train_base

SEEDS = (0, 1, 2, 3, 4)
TRIALS = 20

# Frozen from a three-seed pilot, where the soft+orth gain over the baseline
# was 0.155 to 0.213 at 1-shot and 0.157 to 0.232 at 5-shot.
GAIN_1SHOT = 0.10
GAIN_5SHOT = 0.10

# Frozen from one Monte Carlo pilot: i.i.d. features matched in shape and row
# norm scored about 1.0, exact attribute sums about 2e-6.
RANDOM_FLOOR = 0.2

RUNS = {
    "none": (LossConfig(variant="none"), 1.0),
    "soft_orth": (LossConfig(variant="soft", beta=0.001), 1.0),
    "soft": (LossConfig(variant="soft"), 1.0),
    "hard": (LossConfig(variant="hard"), 1.0),
    "soft_orth_0.25": (LossConfig(variant="soft", beta=0.001), 0.25),
    "soft_orth_0.05": (LossConfig(variant="soft", beta=0.001), 0.05),
}


def _novel_top1(ds, theta, seed, n_shot):
    feats = extract_features(theta, ds)
    spec = EpisodeSpec(n_shot=n_shot, seed=seed, trials=TRIALS)
    return float(np.mean([s.top1 for s in run_episodes(ds, feats, spec, "cosine")]))


@pytest.fixture(scope="module")
def sweep():
    """results[name] -> dict of per-seed arrays: shot1, shot5, val, seconds."""
    out = {name: {"shot1": [], "shot5": [], "val": [], "seconds": []} for name in RUNS}
    for seed in SEEDS:
        full = generate_synthetic(SyntheticSpec(), seed)
        for name, (loss, fraction) in RUNS.items():
            ds = full if fraction == 1.0 else subsample_dataset(full, fraction, seed)
            t0 = time.perf_counter()
            res = train_base(RunConfig(loss=loss, seed=seed), ds)
            row = out[name]
            row["shot1"].append(_novel_top1(ds, res.theta, seed, 1))
            row["shot5"].append(_novel_top1(ds, res.theta, seed, 5))
            row["seconds"].append(time.perf_counter() - t0)
            row["val"].append(res.record.rows[-1]["base_val_top1"])
    return {name: {k: np.array(v) for k, v in cols.items()} for name, cols in out.items()}


def test_criterion_1_gradients(verdict):
    t0 = time.perf_counter()
    report = gradcheck_report(seeds=20, eps=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - t0
    worst = max(report, key=lambda r: r["max_error"])
    ok = len(report) == 12 and all(r["passed"] for r in report) and elapsed < 30
    assert verdict(1, ok, "%d cases, worst %.2e (%s), %.1fs" % (len(report), worst["max_error"], " ".join(worst["case"].split()), elapsed))


def test_criterion_2_loss_identities(verdict):
    rng = np.random.default_rng(11)
    k, m, b, c = 7, 4, 5, 3
    theta = init_encoder([6, 8, m], rng)
    head = init_head("cosine", c, m, rng)
    eta_set = {"last": init_attribute_embedding(k, m, rng)}
    x = rng.normal(size=(b, 6))
    y = rng.integers(0, c, size=b)
    derivs = [set(rng.choice(k, size=3, replace=False).tolist()) for _ in range(b)]

    logits = classify(head, encode(theta, x)[0]).data
    shifted = logits - logits.max(axis=1, keepdims=True)
    ce = float(np.mean(np.log(np.exp(shifted).sum(axis=1)) - shifted[np.arange(b), y]))
    none = float(total_loss(theta, eta_set, head, x, y, derivs, LossConfig(variant="none", lam=3.0, beta=1.0)).data)
    err_a = abs(none - ce)

    eta = rng.normal(size=(k, m))
    feats = rng.normal(size=(b, m))
    loop = 0.0
    for f, d in zip(feats, derivs):
        loop += sum(f @ eta[j] for j in range(k) if j not in d) - sum(f @ eta[j] for j in d)
    margin = soft_comp(feats, AttributeEmbedding(ad.Tensor(eta)), derivs, LossConfig(variant="soft", soft_impl="raw_margin"))
    err_b = abs(float(margin.data) - loop / b)

    orth_q = float(orthogonality_penalty(AttributeEmbedding(ad.Tensor(np.eye(5)[[3, 0, 4]]))).data)
    orth_dup = float(orthogonality_penalty(AttributeEmbedding(ad.Tensor(np.array([[1.0, 0.0], [1.0, 0.0]])))).data)
    ok = err_a < 1e-12 and err_b < 1e-12 and orth_q == 0.0 and orth_dup == 0.5
    detail = "ce err %.1e, margin err %.1e, orth(orthonormal) %.1e, orth(dup) %r" % (err_a, err_b, orth_q, orth_dup)
    assert verdict(2, ok, detail)


def test_criterion_3_tre_oracle(verdict):
    t0 = time.perf_counter()
    ds = generate_synthetic(SyntheticSpec(), 0)
    rng = np.random.default_rng(100)
    eta = rng.normal(size=(ds.k, 16))
    exact = ds.multi_hot(ds.labels) @ eta
    noise = rng.normal(size=exact.shape)
    matched = noise * (np.linalg.norm(exact, axis=1) / np.linalg.norm(noise, axis=1))[:, None]
    d_exact = measure_compositionality(FrozenFeatures(exact, ds.labels), ds.table, k=ds.k)
    d_random = measure_compositionality(FrozenFeatures(matched, ds.labels), ds.table, k=ds.k)
    elapsed = time.perf_counter() - t0
    ok = d_exact < 1e-3 and d_random > RANDOM_FLOOR and elapsed < 60
    assert verdict(3, ok, "exact %.2e, matched random %.3f, %.1fs" % (d_exact, d_random, elapsed))


def test_criterion_4_hard_constraint(verdict):
    ds = generate_synthetic(SyntheticSpec(sigma_noise=0.0), 0)
    res = train_base(RunConfig(loss=LossConfig(variant="hard", lam=15.0), seed=0), ds)
    s = res.record.residual
    ratio = s["residual_mean"] / s["embedding_norm_mean"]
    ok = ratio < 0.1 and s["cosine_distance_mean"] < 0.05
    assert verdict(4, ok, "residual/|f| %.3f (need < 0.1), 1-cos %.2e (need < 0.05)" % (ratio, s["cosine_distance_mean"]))


def test_criterion_5_fewshot_gain(sweep, verdict):
    comp, base = sweep["soft_orth"], sweep["none"]
    g1 = comp["shot1"].mean() - base["shot1"].mean()
    g5 = comp["shot5"].mean() - base["shot5"].mean()
    seconds = comp["seconds"].sum() + base["seconds"].sum()
    ok = g1 >= max(0.03, GAIN_1SHOT) and g5 >= GAIN_5SHOT and seconds < 600
    detail = "1-shot %.3f vs %.3f (gain %.3f), 5-shot %.3f vs %.3f (gain %.3f), %.0fs" % (
        comp["shot1"].mean(), base["shot1"].mean(), g1, comp["shot5"].mean(), base["shot5"].mean(), g5, seconds
    )
    assert verdict(5, ok, detail)


def test_criterion_6_orderings(sweep, verdict):
    def at_least(a, b):
        # ties allowed within one across-seed standard deviation
        tol = max(a.std(ddof=1), b.std(ddof=1))
        return a.mean() >= b.mean() - tol

    so, s, h, none = (sweep[n]["shot1"] for n in ("soft_orth", "soft", "hard", "none"))
    order = at_least(so, s) and at_least(s, h)
    base_gap = sweep["soft_orth"]["val"].mean() - sweep["none"]["val"].mean()
    novel_gap = so.mean() - none.mean()
    ok = order and base_gap < novel_gap
    detail = "1-shot soft+orth %.3f, soft %.3f, hard %.3f; base-val gap %.3f < novel gap %.3f" % (
        so.mean(), s.mean(), h.mean(), base_gap, novel_gap
    )
    assert verdict(6, ok, detail)


def test_criterion_7_attribute_sweep(sweep, verdict):
    full, quarter, tiny, none = (sweep[n]["shot1"].mean() for n in ("soft_orth", "soft_orth_0.25", "soft_orth_0.05", "none"))
    ok = quarter > none and full >= tiny
    assert verdict(7, ok, "1-shot at 1.0 %.3f, 0.25 %.3f, 0.05 %.3f, baseline %.3f" % (full, quarter, tiny, none))


def _loop_prototypes(sx, sy, qx, qy, n_classes):
    correct1 = correct5 = 0
    protos = []
    for c in range(n_classes):
        members = [sx[i] for i in range(len(sy)) if sy[i] == c]
        protos.append(sum(members) / len(members))
    for q, label in zip(qx, qy):
        dist = [float(np.sum((q - p) ** 2)) for p in protos]
        order = sorted(range(n_classes), key=lambda c: (dist[c], c))
        correct1 += order[0] == label
        correct5 += label in order[:5]
    return correct1 / len(qy), correct5 / len(qy)


def test_criterion_8_harness(tmp_path, verdict):
    ds = generate_synthetic(SyntheticSpec(k=12, a_per_cat=3, n_base=8, n_novel=7, per_cat=30, novel_per_cat=20, d_in=12), 1)
    rng = np.random.default_rng(5)
    feats = FrozenFeatures(rng.normal(size=(ds.labels.size, 6)), ds.labels)
    mismatches = 0
    for trial in range(50):
        spec = EpisodeSpec(n_shot=int(rng.integers(1, 6)), query_per_class=5, label_space=("novel_only", "joint")[trial % 2], seed=trial)
        ep = sample_episode(ds, feats, spec, trial)
        sx, qx = feats.embeddings[ep.support_idx], feats.embeddings[ep.query_idx]
        got = prototypical_baseline(sx, ep.support_y, qx, ep.query_y, len(ep.classes))
        mismatches += (got.top1, got.top5) != _loop_prototypes(sx, ep.support_y, qx, ep.query_y, len(ep.classes))

    data, ckpt = tmp_path / "d.txt", tmp_path / "m.ckpt"
    save_dataset(ds, data)
    net = ["--hidden-dim", "16", "--embedding-dim", "8"]
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--variant", "soft", "--epochs-pretrain", "2", "--epochs-finetune", "2", *net]) == 0
    files = []
    for name in ("a", "b"):
        out = tmp_path / name
        argv = ["eval", "--data", str(data), "--checkpoint", str(ckpt), "--out", str(out), "--trials", "3"]
        assert main(argv + ["--heads", "cosine,linear", "--baseline", "prototypical", "--n-shot", "1,2,5"]) == 0
        files.append(out.read_bytes())
    rows = [json.loads(line) for line in files[0].decode().splitlines()[1:]]
    ordered = all(r["top1_mean"] <= r["top5_mean"] for r in rows)
    ok = mismatches == 0 and ordered and len(rows) == 18 and files[0] == files[1]
    detail = "%d/50 prototype mismatches, top1<=top5 on %d records: %s, bitwise repeat: %s" % (
        mismatches, len(rows), ordered, files[0] == files[1]
    )
    assert verdict(8, ok, detail)


def _brute_aggregate(image_level, min_cats):
    cats = list(image_level)
    width = len(image_level[cats[0]][0])
    pos = {c: [2 * sum(img[a] for img in image_level[c]) >= len(image_level[c]) for a in range(width)] for c in cats}
    kept = [a for a in range(width) if sum(pos[c][a] for c in cats) >= min_cats]
    return {c: tuple(i for i, a in enumerate(kept) if pos[c][a]) for c in cats}, kept


def _all_forests(k):
    for parents in itertools.product(*[[None] + list(range(child)) for child in range(k)]):
        yield [(p, c) for c, p in enumerate(parents) if p is not None]


def test_criterion_9_data_tooling(tmp_path, verdict):
    failures = []

    ds = generate_synthetic(SyntheticSpec(), 3)
    save_dataset(ds, tmp_path / "d.txt")
    back = load_dataset(tmp_path / "d.txt")
    same = (
        back.features.tobytes() == ds.features.tobytes()
        and np.array_equal(back.labels, ds.labels)
        and back.table == ds.table
        and dumps_dataset(back) == dumps_dataset(ds)
        and dumps_dataset(loads_dataset(dumps_dataset(ds))) == dumps_dataset(ds)
    )
    if not same:
        failures.append("roundtrip")

    # every 1-category table of up to 4 images over 2 attributes
    n_agg = 0
    for n_img in range(1, 5):
        for bits in itertools.product((0, 1), repeat=2 * n_img):
            image = {0: [list(bits[2 * i : 2 * i + 2]) for i in range(n_img)]}
            n_agg += 1
            if aggregate_attributes(image, 1) != _brute_aggregate(image, 1):
                failures.append("aggregate %r" % image)
    # min-category filter at every positive count around the threshold
    for n_pos in range(9):
        image = {c: [[int(c < n_pos), 1]] for c in range(8)}
        n_agg += 1
        if aggregate_attributes(image)[1] != ([0, 1] if n_pos >= 5 else [1]):
            failures.append("min_cats %d" % n_pos)
    rng = np.random.default_rng(9)
    for _ in range(2000):
        width = int(rng.integers(1, 7))
        image = {c: rng.integers(0, 2, size=(int(rng.integers(1, 7)), width)).tolist() for c in range(int(rng.integers(1, 12)))}
        min_cats = int(rng.integers(1, 6))
        n_agg += 1
        if aggregate_attributes(image, min_cats) != _brute_aggregate(image, min_cats):
            failures.append("aggregate random")

    def expected(vocab, answers):
        yes = {a: answers[a] in (True, "yes") for a in answers}
        return [int(yes[a] and all(yes[p] for p in vocab.ancestors(a))) for a in range(len(vocab))]

    # every forest on up to 5 nodes with every yes/no assignment
    n_prune = 0
    for k in range(1, 6):
        for edges in _all_forests(k):
            vocab = AttributeVocabulary(["a%d" % i for i in range(k)], edges)
            for bits in itertools.product((True, False), repeat=k):
                answers = dict(enumerate(bits))
                n_prune += 1
                want = expected(vocab, answers)
                out = prune_hierarchy(answers, vocab)
                # answers below a "no" are never consulted
                trimmed = {a: v for a, v in answers.items() if all(answers[p] for p in vocab.ancestors(a))}
                if list(out) != want or list(prune_hierarchy(trimmed, vocab)) != want:
                    failures.append("prune %r %r" % (edges, bits))
    for _ in range(300):
        k = int(rng.integers(6, 14))
        edges = [(int(rng.integers(0, c)), c) for c in range(1, k) if rng.random() < 0.7]
        vocab = AttributeVocabulary(["a%d" % i for i in range(k)], edges)
        answers = {a: ("yes", "no")[int(rng.integers(0, 2))] for a in range(k)}
        n_prune += 1
        if list(prune_hierarchy(answers, vocab)) != expected(vocab, answers):
            failures.append("prune random")

    ok = not failures
    detail = "roundtrip %s, %d aggregate and %d prune cases, %d failures %s" % (same, n_agg, n_prune, len(failures), failures[:3])
    assert verdict(9, ok, detail)
