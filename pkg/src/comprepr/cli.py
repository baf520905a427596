"""Command-line entry point.

Subcommands: ``gen-data``, ``train``, ``eval``, ``tre``, ``ablate-attrs`` and
``gradcheck``. Settings come from built-in defaults, then an optional YAML
config file (``--config``), then flags. The effective configuration and its
hash are written into every output file.

Exit codes: 0 success, 1 failed self-check, 2 bad configuration or violated
precondition, 3 numeric failure, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import autodiff as ad
from .autodiff import Tensor
from .data import SyntheticSpec, generate_synthetic, load_dataset, save_dataset, subsample_dataset
from .errors import (
    ComprError,
    ContractError,
    DegenerateVectorError,
    DimensionError,
    GenerationError,
    IncompleteAnnotationError,
    NumericError,
    ParseError,
    VersionError,
)
from .fewshot import (
    EpisodeSpec,
    aggregate,
    extract_features,
    fit_compositionality,
    run_episodes,
)
from .losses import LAST, LossConfig, total_loss
from .model import encode, init_attribute_embedding, init_encoder, init_head
from .trainer import RunConfig, checkpoint_variant, load_arrays, load_checkpoint, named_parameters, train_base

log = logging.getLogger("comprepr")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4
SEED_ENV = "COMPREPR_SEED"


class ConfigError(ContractError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainOptions:
    epochs_pretrain: int = 60
    epochs_finetune: int = 60
    batch_size: int = 32
    head: str = "cosine"
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: tuple = ((40, 0.1),)
    hidden_dim: int = 128
    embedding_dim: int = 64
    cosine_scale: float = 10.0

    def __post_init__(self):
        if self.head not in ("cosine", "linear"):
            raise ConfigError("train.head must be cosine or linear, got %r" % self.head)
        self.schedule = tuple((int(e), float(m)) for e, m in self.schedule)


@dataclass
class EvalOptions:
    n_shots: tuple = (1, 2, 5)
    label_spaces: tuple = ("novel_only", "joint")
    heads: tuple = ("cosine",)
    augment: bool = False
    baseline: str | None = None
    trials: int = 20
    query_per_class: int = 15
    base_support_per_class: int = 20
    head_iters: int | None = None
    head_lr: float = 0.1

    def __post_init__(self):
        self.n_shots = tuple(int(n) for n in self.n_shots)
        self.label_spaces = tuple(self.label_spaces)
        self.heads = tuple(self.heads)
        bad = [h for h in self.heads if h not in ("cosine", "linear")]
        if bad:
            raise ConfigError("unknown head kinds: %s" % bad)
        if self.baseline not in (None, "prototypical"):
            raise ConfigError("baseline must be prototypical or empty, got %r" % self.baseline)
        # validates counts and label spaces
        for space in self.label_spaces:
            for n in self.n_shots:
                EpisodeSpec(n, self.query_per_class, space, 0, self.trials, self.base_support_per_class)


@dataclass
class TreOptions:
    split_fraction: float = 0.8
    iters: int = 500
    lr: float = 10.0

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise ConfigError("tre.split_fraction must lie in (0, 1)")


@dataclass
class AblateOptions:
    fractions: tuple = (1.0, 0.75, 0.5, 0.25, 0.15, 0.05)
    seeds: tuple = (0, 1, 2, 3, 4)
    orth_beta: float = 0.001
    n_shots: tuple = (1, 5)

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.n_shots = tuple(int(n) for n in self.n_shots)
        bad = [f for f in self.fractions if not 0 < f <= 1]
        if bad:
            raise ConfigError("attribute fractions must lie in (0, 1], got %s" % bad)
        if not self.seeds:
            raise ConfigError("ablate.seeds is empty")


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainOptions = field(default_factory=TrainOptions)
    eval: EvalOptions = field(default_factory=EvalOptions)
    tre: TreOptions = field(default_factory=TreOptions)
    ablate: AblateOptions = field(default_factory=AblateOptions)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def run_config(self, dataset: str | None = None, checkpoint: str | None = None, **overrides) -> RunConfig:
        t = dataclasses.asdict(self.train)
        t.update(overrides)
        return RunConfig(dataset=dataset, loss=self.loss, seed=self.seed, checkpoint=checkpoint, **t)


SECTIONS = {
    "data": SyntheticSpec,
    "loss": LossConfig,
    "train": TrainOptions,
    "eval": EvalOptions,
    "tre": TreOptions,
    "ablate": AblateOptions,
}


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (set, frozenset)):
        return sorted(_plain(v) for v in value)
    if isinstance(value, np.generic):
        return value.item()
    return value


def _section(cls, values, name):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError("section %r must be a mapping" % name)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError("unknown keys in section %r: %s" % (name, ", ".join(unknown)))
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError("bad value in section %r: %s" % (name, exc)) from None


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc or {})
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError("unknown top-level keys: %s" % ", ".join(unknown))
    seed = doc.pop("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    return ExperimentConfig(seed=seed, **{name: _section(cls, doc.get(name), name) for name, cls in SECTIONS.items()})


def loads_config(text: str) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("config is not valid YAML: %s" % exc) from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    return config_from_dict(doc or {})


def _env_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError("%s must be an integer, got %r" % (SEED_ENV, raw)) from None


def resolve_config(args) -> ExperimentConfig:
    """Defaults < environment seed < config file < flags."""
    doc = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping")
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in doc.items()}
    if "seed" not in doc and _env_seed() is not None:
        doc["seed"] = _env_seed()
    for (section, key), value in _flag_overrides(args).items():
        if section is None:
            doc[key] = value
        else:
            if doc.get(section) is None:
                doc[section] = {}
            doc[section][key] = value
    return config_from_dict(doc)


def _ints(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _floats(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _words(text):
    return [v.strip() for v in text.split(",") if v.strip()]


# flag dest -> (section, key); section None means top level
FLAG_MAP = {
    "seed": (None, "seed"),
    "k": ("data", "k"),
    "a_per_cat": ("data", "a_per_cat"),
    "n_base": ("data", "n_base"),
    "n_novel": ("data", "n_novel"),
    "per_cat": ("data", "per_cat"),
    "novel_per_cat": ("data", "novel_per_cat"),
    "d_in": ("data", "d_in"),
    "r_nuisance": ("data", "r_nuisance"),
    "sigma_noise": ("data", "sigma_noise"),
    "variant": ("loss", "variant"),
    "lam": ("loss", "lam"),
    "orth_beta": ("loss", "beta"),
    "soft_impl": ("loss", "soft_impl"),
    "neg_sample_ratio": ("loss", "neg_sample_ratio"),
    "neg_sampling": ("loss", "neg_sampling"),
    "deep_layers": ("loss", "deep_layers"),
    "epochs_pretrain": ("train", "epochs_pretrain"),
    "epochs_finetune": ("train", "epochs_finetune"),
    "batch_size": ("train", "batch_size"),
    "head": ("train", "head"),
    "lr": ("train", "lr"),
    "hidden_dim": ("train", "hidden_dim"),
    "embedding_dim": ("train", "embedding_dim"),
    "n_shot": ("eval", "n_shots"),
    "label_spaces": ("eval", "label_spaces"),
    "heads": ("eval", "heads"),
    "augment": ("eval", "augment"),
    "baseline": ("eval", "baseline"),
    "trials": ("eval", "trials"),
    "split_fraction": ("tre", "split_fraction"),
    "tre_iters": ("tre", "iters"),
    "tre_lr": ("tre", "lr"),
    "fractions": ("ablate", "fractions"),
    "seeds": ("ablate", "seeds"),
    "ablate_beta": ("ablate", "orth_beta"),
}


def _flag_overrides(args) -> dict:
    out = {}
    for dest, target in FLAG_MAP.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[target] = value
    return out


# ---------------------------------------------------------------------------
# output helpers


def atomic_write_text(path, text: str) -> None:
    tmp = "%s.tmp%d" % (path, os.getpid())
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _header(cfg: ExperimentConfig, command: str, **extra) -> str:
    head = {"command": command, "config_hash": cfg.config_hash(), "config": cfg.to_dict()}
    head.update(extra)
    return json.dumps(head, sort_keys=True)


def _jsonl(lines) -> str:
    return "".join(line + "\n" for line in lines)


def _file_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


def _emit(msg: str) -> None:
    sys.stdout.write(msg + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    ds = generate_synthetic(cfg.data, cfg.seed)
    save_dataset(ds, args.out)
    sizes = {}
    for c in ds.base_categories + ds.novel_categories:
        sizes[len(ds.table[c])] = sizes.get(len(ds.table[c]), 0) + 1
    _emit(
        "wrote %s: %d examples, %d base + %d novel categories, k=%d, d_in=%d, seed=%d"
        % (args.out, ds.labels.size, len(ds.base_categories), len(ds.novel_categories), ds.k, ds.d_in, cfg.seed)
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    dataset = load_dataset(args.data)
    run = cfg.run_config(dataset=args.data, checkpoint=args.out)
    result = train_base(run, dataset)
    result.record.config_hash = cfg.config_hash()
    record_path = args.record or args.out + ".record.jsonl"
    atomic_write_text(record_path, _header(cfg, "train", data=args.data) + "\n" + result.record.dumps())
    last = result.record.rows[-1] if result.record.rows else {}
    _emit(
        "trained %s (%s): %d epochs, base_val_top1=%s, checkpoint %s, record %s"
        % (
            cfg.loss.variant,
            cfg.train.head,
            len(result.record.rows),
            "%.4f" % last["base_val_top1"] if last else "n/a",
            args.out,
            record_path,
        )
    )
    return EXIT_OK


def _load_model(path):
    arrays = load_arrays(path)
    return load_checkpoint(path), checkpoint_variant(arrays)


def evaluate_checkpoint(cfg: ExperimentConfig, dataset, checkpoint_path) -> list:
    """Metric rows for every (method, n_shot, label_space) the config asks for."""
    state, variant = _load_model(checkpoint_path)
    feats = extract_features(state.theta, dataset, _file_hash(checkpoint_path))
    ev = cfg.eval
    methods = [(h, "%s_aug" % h if ev.augment else h) for h in ev.heads]
    if ev.baseline:
        methods.append((ev.baseline, ev.baseline))
    rows = []
    for method, label in methods:
        for space in ev.label_spaces:
            for n in ev.n_shots:
                spec = EpisodeSpec(n, ev.query_per_class, space, cfg.seed, ev.trials, ev.base_support_per_class)
                scores = run_episodes(dataset, feats, spec, method, ev.augment, ev.head_iters, ev.head_lr)
                rec = aggregate(label, n, space, scores)
                rows.append(
                    {
                        "method": rec.method,
                        "variant": variant,
                        "n_shot": rec.n_shot,
                        "label_space": rec.label_space,
                        "top1_mean": rec.top1_mean,
                        "top1_std": rec.top1_std,
                        "top5_mean": rec.top5_mean,
                        "top5_std": rec.top5_std,
                        "seed_count": rec.seed_count,
                        "degenerate_top5": rec.degenerate_top5,
                        "config_hash": cfg.config_hash(),
                    }
                )
    return rows


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError("checkpoint not found: %s" % args.checkpoint)
    dataset = load_dataset(args.data)
    rows = evaluate_checkpoint(cfg, dataset, args.checkpoint)
    head = _header(cfg, "eval", data=args.data, checkpoint=args.checkpoint, checkpoint_hash=_file_hash(args.checkpoint))
    atomic_write_text(args.out, _jsonl([head] + [json.dumps(r) for r in rows]))
    for r in rows:
        _emit(
            "%-14s %-10s %d-shot top1 %.4f +- %.4f  top5 %.4f +- %.4f"
            % (r["method"], r["label_space"], r["n_shot"], r["top1_mean"], r["top1_std"], r["top5_mean"], r["top5_std"])
        )
    _emit("wrote %d records to %s" % (len(rows), args.out))
    return EXIT_OK


def tre_report(cfg: ExperimentConfig, dataset, checkpoint_path) -> dict:
    state, variant = _load_model(checkpoint_path)
    feats = extract_features(state.theta, dataset)
    base = np.isin(dataset.labels, dataset.base_categories)
    fit = fit_compositionality(
        feats.embeddings[base],
        dataset.multi_hot(dataset.labels[base]),
        cfg.tre.split_fraction,
        cfg.tre.iters,
        cfg.tre.lr,
        cfg.seed,
    )
    return {
        "variant": variant,
        "fit_distance": fit.fit_distance,
        "heldout_distance": fit.heldout_distance,
        "converged": fit.converged,
        "config_hash": cfg.config_hash(),
    }


def cmd_tre(args) -> int:
    cfg = resolve_config(args)
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError("checkpoint not found: %s" % args.checkpoint)
    report = tre_report(cfg, load_dataset(args.data), args.checkpoint)
    if args.out:
        head = _header(cfg, "tre", data=args.data, checkpoint=args.checkpoint)
        atomic_write_text(args.out, _jsonl([head, json.dumps(report)]))
    _emit("fit distance %.6g  held-out distance %.6g%s" % (
        report["fit_distance"], report["heldout_distance"], "" if report["converged"] else "  (fit did not converge)"))
    return EXIT_OK


def _ablate_job(job):
    cfg_dict, data_path, fraction, seed = job
    cfg = config_from_dict(cfg_dict)
    dataset = load_dataset(data_path)
    sub = subsample_dataset(dataset, fraction, seed) if fraction < 1 else dataset
    loss = dataclasses.replace(cfg.loss, variant="soft", beta=cfg.ablate.orth_beta)
    run = dataclasses.replace(cfg.run_config(), loss=loss, seed=seed)
    result = train_base(run, sub)
    feats = extract_features(result.theta, sub)
    out = {"k": sub.k}
    for n in cfg.ablate.n_shots:
        spec = EpisodeSpec(n, cfg.eval.query_per_class, "novel_only", seed, cfg.eval.trials)
        rec = aggregate("cosine", n, "novel_only", run_episodes(sub, feats, spec, "cosine"))
        out[n] = rec.top1_mean
    return out


def ablate_rows(cfg: ExperimentConfig, data_path: str, jobs: int = 1) -> list:
    ab = cfg.ablate
    work = [(cfg.to_dict(), data_path, f, s) for f in ab.fractions for s in ab.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ablate_job, work))
    else:
        results = [_ablate_job(w) for w in work]
    rows = []
    per = len(ab.seeds)
    for i, fraction in enumerate(ab.fractions):
        chunk = results[i * per : (i + 1) * per]
        row = {"fraction": fraction, "n_attributes": chunk[0]["k"], "seed_count": per}
        for n in ab.n_shots:
            vals = np.array([r[n] for r in chunk])
            row["top1_%dshot_mean" % n] = float(vals.mean())
            row["top1_%dshot_std" % n] = float(vals.std(ddof=1)) if per > 1 else 0.0
        row["config_hash"] = cfg.config_hash()
        rows.append(row)
    return rows


def cmd_ablate_attrs(args) -> int:
    cfg = resolve_config(args)
    load_dataset(args.data)  # fail fast on a bad file
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    rows = ablate_rows(cfg, args.data, args.jobs)
    atomic_write_text(args.out, _jsonl([_header(cfg, "ablate-attrs", data=args.data)] + [json.dumps(r) for r in rows]))
    for r in rows:
        shots = "  ".join(
            "%d-shot %.4f +- %.4f" % (n, r["top1_%dshot_mean" % n], r["top1_%dshot_std" % n]) for n in cfg.ablate.n_shots
        )
        _emit("fraction %.2f (%d attributes): %s" % (r["fraction"], r["n_attributes"], shots))
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradient self-check

GRADCHECK_CASES = [
    (variant, impl, orth, deep)
    for variant, impl in (("hard", None), ("soft", "raw_margin"), ("soft", "one_vs_all_logistic"))
    for orth in (False, True)
    for deep in (False, True)
]


def _case_name(variant, impl, orth, deep) -> str:
    name = variant if impl is None else "%s/%s" % (variant, impl)
    return "%-24s orth=%d deep=%d" % (name, orth, deep)


def _tiny_problem(seed, deep):
    rng = np.random.default_rng([seed, 11])
    k, d_in, hidden, m, classes, batch = 5, 3, 4, 3, 3, 4
    taps = (0, 1) if deep else ()
    while True:
        theta = init_encoder([d_in, hidden, hidden, m], rng, tap_layers=taps)
        for _, b in theta.layers:
            b.data[:] = rng.uniform(0.05, 0.2, size=b.shape)
        x = rng.normal(size=(batch, d_in))
        with ad.no_grad():
            f, hidden_out = encode(theta, x)
        # cosine terms need every compared vector to be nonzero
        if all(np.linalg.norm(t.data, axis=1).min() > 1e-3 for t in [f, *hidden_out.values()]):
            break
    head = init_head("cosine", classes, m, rng)
    eta_set = {layer: init_attribute_embedding(k, m if layer == LAST else hidden, rng) for layer in list(taps) + [LAST]}
    y = rng.integers(0, classes, size=batch)
    derivs = [set(rng.choice(k, size=int(rng.integers(1, 4)), replace=False).tolist()) for _ in range(batch)]
    return theta, eta_set, head, x, y, derivs


def _corrupting_term(param: Tensor, amount: float = 1e-3) -> Tensor:
    # contributes 0 to the value but a constant to the analytic gradient
    return Tensor._result(np.asarray(0.0), (param,), lambda g: (np.full_like(param.data, amount * g),))


def gradcheck_report(seeds: int = 20, eps: float = 1e-5, tol: float = 1e-4, corrupt: str | None = None) -> list:
    """One entry per loss configuration: worst relative error over ``seeds`` instances."""
    out = []
    for variant, impl, orth, deep in GRADCHECK_CASES:
        cfg = LossConfig(
            variant=variant,
            lam=1.5,
            beta=0.05 if orth else 0.0,
            soft_impl=impl or "one_vs_all_logistic",
            neg_sampling=False,
            deep_layers=(0, 1) if deep else (),
        )
        worst = (0.0, None, None, None)
        for seed in range(seeds):
            theta, eta_set, head, x, y, derivs = _tiny_problem(seed, deep)
            named = named_parameters(theta, eta_set, head)
            names, params = list(named), list(named.values())

            def objective():
                loss = total_loss(theta, eta_set, head, x, y, derivs, cfg)
                if corrupt is not None and corrupt in named:
                    loss = ad.add(loss, _corrupting_term(named[corrupt]))
                return loss

            res = ad.check_gradients(objective, params, eps)
            if res.max_error >= worst[0]:
                worst = (res.max_error, names[res.param], tuple(int(i) for i in res.coord), seed)
        out.append(
            {
                "case": _case_name(variant, impl, orth, deep),
                "max_error": worst[0],
                "param": worst[1],
                "coord": worst[2],
                "seed": worst[3],
                "passed": worst[0] < tol,
            }
        )
    return out


def cmd_gradcheck(args) -> int:
    report = gradcheck_report(args.seeds, args.eps, args.tol, args.corrupt)
    failed = 0
    for r in report:
        status = "PASS" if r["passed"] else "FAIL"
        line = "%s %s max_rel_err=%.3e" % (status, r["case"], r["max_error"])
        if not r["passed"]:
            failed += 1
            line += " at %s%s (seed %d)" % (r["param"], list(r["coord"]), r["seed"])
        _emit(line)
    _emit("%d/%d objectives passed (tolerance %g, eps %g, %d seeds)" % (len(report) - failed, len(report), args.tol, args.eps, args.seeds))
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_common(p, seed=True):
    p.add_argument("--config", help="YAML experiment config")
    if seed:
        p.add_argument("--seed", type=int, help="overrides the config file and $%s" % SEED_ENV)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data_flags(p):
    g = p.add_argument_group("generator")
    g.add_argument("--k", type=int, help="attribute vocabulary size")
    g.add_argument("--a-per-cat", type=int)
    g.add_argument("--n-base", type=int)
    g.add_argument("--n-novel", type=int)
    g.add_argument("--per-cat", type=int)
    g.add_argument("--novel-per-cat", type=int)
    g.add_argument("--d-in", type=int)
    g.add_argument("--r-nuisance", type=int)
    g.add_argument("--sigma-noise", type=float)


def _add_train_flags(p, variant=True):
    g = p.add_argument_group("training")
    if variant:
        g.add_argument("--variant", choices=("none", "hard", "soft"))
        g.add_argument("--orth-beta", type=float, help="orthogonality weight")
    g.add_argument("--lambda", dest="lam", type=float, help="regularizer weight")
    g.add_argument("--soft-impl", choices=("raw_margin", "one_vs_all_logistic"))
    g.add_argument("--neg-sample-ratio", type=float)
    g.add_argument("--no-neg-sampling", dest="neg_sampling", action="store_const", const=False)
    g.add_argument("--deep-layers", type=_ints, help="comma-separated hidden layer indices")
    g.add_argument("--epochs-pretrain", type=int)
    g.add_argument("--epochs-finetune", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--head", choices=("cosine", "linear"))
    g.add_argument("--lr", type=float)
    g.add_argument("--hidden-dim", type=int)
    g.add_argument("--embedding-dim", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="comprepr", description="Compositional representation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pretrain then finetune on base categories")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--record", help="run record path (default: <out>.record.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="few-shot evaluation of a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="metrics file")
    p.add_argument("--n-shot", type=_ints, help="e.g. 1,2,5")
    p.add_argument("--label-spaces", type=_words, help="novel_only,joint")
    p.add_argument("--heads", type=_words, help="cosine,linear")
    p.add_argument("--augment", action="store_const", const=True)
    p.add_argument("--baseline", choices=("prototypical",))
    p.add_argument("--trials", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tre", help="measure compositionality of a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--split-fraction", type=float)
    p.add_argument("--iters", dest="tre_iters", type=int)
    p.add_argument("--lr", dest="tre_lr", type=float)
    p.set_defaults(func=cmd_tre)

    p = sub.add_parser("ablate-attrs", help="attribute-count sweep with the soft+orth model")
    _add_common(p, seed=False)
    _add_train_flags(p, variant=False)
    p.add_argument("--orth-beta", dest="ablate_beta", type=float)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", type=_floats, help="default 1,0.75,0.5,0.25,0.15,0.05")
    p.add_argument("--seeds", type=_ints, help="default 0,1,2,3,4")
    p.add_argument("--trials", type=int)
    p.add_argument("--jobs", type=int, default=1, help="parallel runs")
    p.set_defaults(func=cmd_ablate_attrs)

    p = sub.add_parser("gradcheck", help="finite-difference check of every objective")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)  # test hook: parameter name
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (NumericError, DegenerateVectorError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (OSError, ParseError, VersionError)):
        return EXIT_IO
    if isinstance(exc, (ContractError, GenerationError, DimensionError, IncompleteAnnotationError, ComprError, ValueError)):
        return EXIT_CONFIG
    raise exc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # mapped to exit codes; anything unexpected re-raises
        code = _exit_code(exc)
        sys.stderr.write("comprepr %s: error: %s\n" % (args.command, exc))
        return code


if __name__ == "__main__":
    sys.exit(main())
