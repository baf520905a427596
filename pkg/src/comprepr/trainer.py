"""Base-category representation training.

Phase 1 trains the encoder and base head with the classification loss only;
phase 2 continues for ``epochs_finetune`` epochs with the configured
regularizers (a plain continuation when the variant is ``none``).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SplitDataset, load_dataset
from .errors import ContractError, NumericError, ParseError, VersionError
from .losses import LAST, VARIANTS, LossConfig, loss_terms, residual_norms
from .model import (
    DEFAULT_COSINE_SCALE,
    AttributeEmbedding,
    ClassifierHead,
    EncoderParams,
    classify,
    encode,
    init_attribute_embedding,
    init_encoder,
    init_head,
)

log = logging.getLogger(__name__)

CKPT_MAGIC = b"comprepr-ckpt v1\n"


# ---------------------------------------------------------------------------
# optimizer


def lr_at(schedule, epoch: int, base_lr: float = 0.1) -> float:
    """Base rate times every multiplier whose milestone is ``<= epoch``."""
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    items = schedule.items() if isinstance(schedule, dict) else schedule
    lr = base_lr
    for milestone, mult in sorted(items):
        if milestone <= epoch:
            lr *= mult
    return lr


@dataclass
class OptimizerState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: tuple = ((40, 0.1),)
    velocity: dict = field(default_factory=dict)
    no_decay: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError("learning rate must be positive")


def sgd_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """Momentum SGD with weight decay folded into the gradient.

    ``v <- momentum * v + g + wd * p``; ``p <- p - lr * v``. Parameters whose
    names are in ``state.no_decay`` skip the decay term.
    """
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient for parameter %s" % name)
        data = p.data if isinstance(p, Tensor) else p
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(data)
        step = g if name in state.no_decay or state.weight_decay == 0 else g + state.weight_decay * data
        v = state.momentum * v + step
        state.velocity[name] = v
        data -= state.lr * v


# ---------------------------------------------------------------------------
# configuration and records


@dataclass
class RunConfig:
    dataset: str | None = None
    loss: LossConfig = field(default_factory=LossConfig)
    epochs_pretrain: int = 60
    epochs_finetune: int = 60
    batch_size: int = 32
    seed: int = 0
    head: str = "cosine"
    checkpoint: str | None = None
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: tuple = ((40, 0.1),)
    hidden_dim: int = 128
    embedding_dim: int = 64
    cosine_scale: float = DEFAULT_COSINE_SCALE

    def __post_init__(self):
        if self.epochs_pretrain < 0 or self.epochs_finetune < 0:
            raise ContractError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")
        self.schedule = tuple((int(e), float(m)) for e, m in self.schedule)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss"]["deep_layers"] = sorted(self.loss.deep_layers)
        d["schedule"] = [list(s) for s in self.schedule]
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("checkpoint", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


RECORD_FIELDS = ("epoch", "loss_cls", "loss_comp", "loss_orth", "base_val_top1", "lr")


@dataclass
class RunRecord:
    rows: list = field(default_factory=list)
    residual: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    config_hash: str = ""

    def column(self, name: str) -> np.ndarray:
        return np.array([row[name] for row in self.rows])

    def dumps(self) -> str:
        lines = [json.dumps({f: row[f] for f in RECORD_FIELDS}) for row in self.rows]
        summary = {"summary": True, "config_hash": self.config_hash, "wall_clock": self.wall_clock}
        summary.update(self.residual)
        lines.append(json.dumps(summary))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        _atomic_write(path, self.dumps().encode())


@dataclass
class TrainState:
    theta: EncoderParams
    eta_set: dict
    head: ClassifierHead
    opt: OptimizerState
    epoch: int = 0


@dataclass
class TrainResult:
    theta: EncoderParams
    eta_set: dict
    head: ClassifierHead
    record: RunRecord
    state: TrainState | None = None


# ---------------------------------------------------------------------------
# checkpoints


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    prime = 0x100000001B3
    mask = 0xFFFFFFFFFFFFFFFF
    for byte in data:
        h = ((h ^ byte) * prime) & mask
    return h


def _atomic_write(path, payload: bytes) -> None:
    tmp = "%s.tmp%d" % (path, os.getpid())
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_arrays(path, arrays: dict) -> None:
    """Write named fp64 arrays: header, count, then ``name shape`` + raw LE bytes each."""
    body = [b"%d\n" % len(arrays)]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        if " " in name or "\n" in name:
            raise ContractError("tensor names may not contain whitespace: %r" % name)
        body.append(("%s %s\n" % (name, ",".join(str(d) for d in arr.shape))).encode())
        body.append(arr.tobytes())
    payload = b"".join(body)
    _atomic_write(path, CKPT_MAGIC + payload + struct.pack("<Q", fnv1a64(payload)))


def load_arrays(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"comprepr-ckpt "):
        raise ParseError("not a checkpoint file")
    if not blob.startswith(CKPT_MAGIC):
        raise VersionError("unsupported checkpoint version: %r" % blob.split(b"\n", 1)[0])
    if len(blob) < len(CKPT_MAGIC) + 8:
        raise ParseError("truncated checkpoint")
    payload, (checksum,) = blob[len(CKPT_MAGIC) : -8], struct.unpack("<Q", blob[-8:])
    if fnv1a64(payload) != checksum:
        raise ParseError("checkpoint checksum mismatch")
    pos = payload.index(b"\n") + 1
    count = int(payload[: pos - 1])
    out = {}
    for _ in range(count):
        end = payload.index(b"\n", pos)
        name, shape_txt = payload[pos:end].decode().split(" ")
        shape = tuple(int(s) for s in shape_txt.split(",")) if shape_txt else ()
        n = int(np.prod(shape)) if shape else 1
        start = end + 1
        out[name] = np.frombuffer(payload[start : start + 8 * n], dtype="<f8").astype(np.float64).reshape(shape)
        pos = start + 8 * n
    return out


def _eta_key(layer) -> str:
    return "eta.last" if layer == LAST else "eta.%d" % layer


def named_parameters(theta: EncoderParams, eta_set: dict, head: ClassifierHead) -> dict:
    params = dict(theta.named_parameters())
    params.update(head.named_parameters("head"))
    for layer, eta in eta_set.items():
        params[_eta_key(layer)] = eta.eta
    return params


def save_checkpoint(path, state: TrainState, variant: str | None = None) -> None:
    arrays = {name: t.data for name, t in named_parameters(state.theta, state.eta_set, state.head).items()}
    for name, v in sorted(state.opt.velocity.items()):
        arrays["velocity." + name] = v
    arrays["meta.epoch"] = np.array([state.epoch], dtype=np.float64)
    arrays["meta.cosine_scale"] = np.array([state.head.scale])
    if variant is not None:
        arrays["meta.variant"] = np.array([VARIANTS.index(variant)], dtype=np.float64)
    save_arrays(path, arrays)


def checkpoint_variant(arrays: dict):
    """Loss variant recorded in a checkpoint, or None for untagged files."""
    code = arrays.get("meta.variant")
    return None if code is None else VARIANTS[int(code[0])]


def load_checkpoint(path, opt: OptimizerState | None = None) -> TrainState:
    arrays = load_arrays(path)
    n_layers = len({k.split(".")[1] for k in arrays if k.startswith("encoder.")})
    layers = [
        (Tensor(arrays["encoder.%d.weight" % i], True), Tensor(arrays["encoder.%d.bias" % i], True))
        for i in range(n_layers)
    ]
    eta_set = {}
    for name, arr in arrays.items():
        if name.startswith("eta."):
            tag = name.split(".", 1)[1]
            eta_set[LAST if tag == "last" else int(tag)] = AttributeEmbedding(Tensor(arr, True))
    theta = EncoderParams(layers, frozenset(k for k in eta_set if k != LAST))
    kind = "linear" if "head.bias" in arrays else "cosine"
    head = ClassifierHead(
        kind,
        Tensor(arrays["head.weight"], True),
        Tensor(arrays["head.bias"], True) if kind == "linear" else None,
        float(arrays["meta.cosine_scale"][0]),
    )
    opt = opt or OptimizerState()
    opt.velocity = {k[len("velocity.") :]: v.copy() for k, v in arrays.items() if k.startswith("velocity.")}
    return TrainState(theta, eta_set, head, opt, int(arrays["meta.epoch"][0]))


# ---------------------------------------------------------------------------
# training


def init_state(config: RunConfig, dataset: SplitDataset) -> TrainState:
    rng = np.random.default_rng([config.seed, 0])
    cfg = config.loss
    h, m = config.hidden_dim, config.embedding_dim
    theta = init_encoder([dataset.d_in, h, h, m], rng, tap_layers=cfg.deep_layers)
    head = init_head(config.head, len(dataset.base_categories), m, rng, config.cosine_scale)
    eta_set = {}
    for layer in cfg.layers:
        dim = m if layer == LAST else theta.hidden_dim(layer)
        eta_set[layer] = init_attribute_embedding(dataset.k, dim, rng)
    opt = OptimizerState(
        config.lr,
        config.momentum,
        config.weight_decay,
        config.schedule,
        no_decay=frozenset(_eta_key(layer) for layer in eta_set),
    )
    return TrainState(theta, eta_set, head, opt)


def base_accuracy(theta, head, features, labels) -> float:
    if len(labels) == 0:
        return float("nan")
    with ad.no_grad():
        f, _ = encode(theta, features)
        logits = classify(head, f).data
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def run_epoch(state: TrainState, config: RunConfig, dataset: SplitDataset, prepared=None) -> dict:
    """Train one epoch; returns the record row for it."""
    x, y, multi_hot, val_x, val_y = prepared or _prepare(dataset)
    epoch = state.epoch
    finetune = epoch >= config.epochs_pretrain
    phase_epoch = epoch - config.epochs_pretrain if finetune else epoch
    state.opt.lr = lr_at(state.opt.schedule, phase_epoch, config.lr)
    cfg = config.loss if finetune else dataclasses.replace(config.loss, variant="none")

    batch_rng = np.random.default_rng([config.seed, 1, epoch])
    sample_rng = np.random.default_rng([config.seed, 2, epoch])
    order = batch_rng.permutation(y.size)

    params = dict(state.theta.named_parameters())
    params.update(state.head.named_parameters("head"))
    if cfg.variant != "none":
        for layer, eta in state.eta_set.items():
            params[_eta_key(layer)] = eta.eta

    sums = {"cls": 0.0, "comp": 0.0, "orth": 0.0}
    n_batches = 0
    for start in range(0, y.size, config.batch_size):
        idx = order[start : start + config.batch_size]
        for p in params.values():
            p.grad = np.zeros_like(p.data)
        terms = loss_terms(state.theta, state.eta_set, state.head, x[idx], y[idx], multi_hot[idx], cfg, sample_rng)
        total = float(terms.total.data)
        if not math.isfinite(total):
            raise NumericError("non-finite loss at epoch %d, step %d" % (epoch, n_batches))
        ad.backward(terms.total)
        try:
            sgd_step(params, {k: p.grad for k, p in params.items()}, state.opt)
        except NumericError as exc:
            raise NumericError("%s (epoch %d, step %d)" % (exc, epoch, n_batches)) from None
        sums["cls"] += float(terms.cls.data)
        sums["comp"] += float(terms.comp.data) if terms.comp is not None else 0.0
        sums["orth"] += float(terms.orth.data) if terms.orth is not None else 0.0
        n_batches += 1

    state.epoch += 1
    n = max(n_batches, 1)
    return {
        "epoch": epoch,
        "loss_cls": sums["cls"] / n,
        "loss_comp": sums["comp"] / n,
        "loss_orth": sums["orth"] / n,
        "base_val_top1": base_accuracy(state.theta, state.head, val_x, val_y),
        "lr": state.opt.lr,
    }


def _prepare(dataset: SplitDataset):
    if not dataset.base_categories:
        raise ContractError("dataset has no base categories")
    train_idx, val_idx = dataset.base_split()
    class_index = {c: i for i, c in enumerate(dataset.base_categories)}
    y_all = np.array([class_index.get(int(c), -1) for c in dataset.labels])
    multi_hot = dataset.multi_hot(dataset.labels[train_idx])
    return (
        dataset.features[train_idx],
        y_all[train_idx],
        multi_hot,
        dataset.features[val_idx],
        y_all[val_idx],
    )


def residual_summary(state: TrainState, dataset: SplitDataset) -> dict:
    train_idx, _ = dataset.base_split()
    with ad.no_grad():
        f, _ = encode(state.theta, dataset.features[train_idx])
    f = f.data
    multi_hot = dataset.multi_hot(dataset.labels[train_idx])
    eta = state.eta_set[LAST].eta.data
    res = residual_norms(f, eta, multi_hot)
    target = multi_hot @ eta
    denom = np.linalg.norm(f, axis=1) * np.linalg.norm(target, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0, (f * target).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0)
    return {
        "residual_mean": float(res.mean()),
        "embedding_norm_mean": float(np.linalg.norm(f, axis=1).mean()),
        "cosine_distance_mean": float(np.mean(1.0 - cos)),
    }


def train_base(config: RunConfig, dataset: SplitDataset | None = None, state: TrainState | None = None) -> TrainResult:
    """Run (or resume) the pretrain-then-finetune protocol.

    Checkpoints go to ``config.checkpoint`` (when set) at the phase boundary
    and at the end.
    """
    if dataset is None:
        if config.dataset is None:
            raise ContractError("no dataset given")
        dataset = load_dataset(config.dataset)
    t0 = time.perf_counter()
    state = state or init_state(config, dataset)
    prepared = _prepare(dataset)
    record = RunRecord(config_hash=config.config_hash())
    total_epochs = config.epochs_pretrain + config.epochs_finetune
    while state.epoch < total_epochs:
        row = run_epoch(state, config, dataset, prepared)
        record.rows.append(row)
        log.debug("epoch %d: %s", row["epoch"], row)
        if config.checkpoint and state.epoch == config.epochs_pretrain and config.epochs_finetune:
            save_checkpoint(config.checkpoint + ".pretrain", state, "none")
    if config.checkpoint:
        save_checkpoint(config.checkpoint, state, config.loss.variant if config.epochs_finetune else "none")
    record.residual = residual_summary(state, dataset)
    record.wall_clock = time.perf_counter() - t0
    return TrainResult(state.theta, state.eta_set, state.head, record, state)
