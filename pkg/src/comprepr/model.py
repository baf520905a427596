"""Encoder MLP, attribute embedding and classifier heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError

DEFAULT_COSINE_SCALE = 10.0


@dataclass
class EncoderParams:
    layers: list  # [(weight[out x in], bias[out]), ...]
    tap_layers: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.tap_layers = frozenset(self.tap_layers)
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w1.shape[1] != w0.shape[0]:
                raise DimensionError("layer dimensions do not chain: %s -> %s" % (w0.shape, w1.shape))
        bad = [i for i in self.tap_layers if not 0 <= i < len(self.layers) - 1]
        if bad:
            raise DimensionError("tap layers %s are not hidden layers" % sorted(bad))

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    def hidden_dim(self, index: int) -> int:
        return self.layers[index][0].shape[0]

    def named_parameters(self):
        for i, (w, b) in enumerate(self.layers):
            yield "encoder.%d.weight" % i, w
            yield "encoder.%d.bias" % i, b


@dataclass
class AttributeEmbedding:
    eta: Tensor  # k x m

    @property
    def k(self) -> int:
        return self.eta.shape[0]

    @property
    def dim(self) -> int:
        return self.eta.shape[1]


@dataclass
class ClassifierHead:
    kind: str  # "linear" | "cosine"
    weights: Tensor  # C x m
    bias: Tensor | None = None
    scale: float = DEFAULT_COSINE_SCALE

    def __post_init__(self):
        if self.kind not in ("linear", "cosine"):
            raise ValueError("unknown head kind %r" % self.kind)
        if self.kind == "linear" and self.bias is None:
            self.bias = Tensor(np.zeros(self.weights.shape[0]), requires_grad=self.weights.requires_grad)
        if self.kind == "cosine" and not self.scale > 0:
            raise ValueError("cosine scale must be positive")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    def parameters(self) -> list:
        return [self.weights] + ([self.bias] if self.kind == "linear" else [])

    def named_parameters(self, prefix="head"):
        yield prefix + ".weight", self.weights
        if self.kind == "linear":
            yield prefix + ".bias", self.bias


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_encoder(dims: Iterable[int], rng: np.random.Generator, tap_layers=()) -> EncoderParams:
    """Build an MLP with layer sizes ``dims`` (e.g. ``[64, 128, 128, 64]``)."""
    dims = list(dims)
    layers = []
    for n_in, n_out in zip(dims, dims[1:]):
        layers.append(
            (
                Tensor(glorot_uniform(rng, n_out, n_in), requires_grad=True),
                Tensor(np.zeros(n_out), requires_grad=True),
            )
        )
    return EncoderParams(layers, frozenset(tap_layers))


def init_attribute_embedding(k: int, m: int, rng: np.random.Generator) -> AttributeEmbedding:
    return AttributeEmbedding(Tensor(rng.normal(0.0, 1.0 / np.sqrt(m), size=(k, m)), requires_grad=True))


def init_head(kind: str, num_classes: int, m: int, rng: np.random.Generator, scale=DEFAULT_COSINE_SCALE):
    weights = Tensor(glorot_uniform(rng, num_classes, m), requires_grad=True)
    bias = Tensor(np.zeros(num_classes), requires_grad=True) if kind == "linear" else None
    return ClassifierHead(kind, weights, bias, scale)


def encode(theta: EncoderParams, x):
    """Run the MLP on one input vector or a row batch.

    Returns the final (linear) layer output and a dict of post-relu hidden
    activations for the indices in ``theta.tap_layers``.
    """
    h = ad.as_tensor(x)
    if h.shape[-1] != theta.input_dim:
        raise DimensionError("input dimension %d does not match encoder input %d" % (h.shape[-1], theta.input_dim))
    taps = {}
    last = len(theta.layers) - 1
    for i, (w, b) in enumerate(theta.layers):
        h = ad.affine(h, w, b)
        if i < last:
            h = ad.relu(h)
            if i in theta.tap_layers:
                taps[i] = h
    return h, taps


def derivation_matrix(derivations, k: int) -> np.ndarray:
    """Multi-hot rows, one per derivation."""
    out = np.zeros((len(derivations), k))
    for row, attrs in enumerate(derivations):
        attrs = list(attrs)
        if attrs and (min(attrs) < 0 or max(attrs) >= k):
            raise IndexError("attribute index out of range for vocabulary of %d" % k)
        out[row, attrs] = 1.0
    return out


def embed_derivation(eta: AttributeEmbedding, derivation) -> Tensor:
    """Sum of the embedding rows selected by ``derivation`` (zero when empty)."""
    onehot = derivation_matrix([derivation], eta.k)[0]
    return ad.matmul(onehot, eta.eta)


def embed_derivations(eta: AttributeEmbedding, multi_hot: np.ndarray) -> Tensor:
    return ad.matmul(multi_hot, eta.eta)


def attribute_scores(eta: AttributeEmbedding, f) -> Tensor:
    """Dot product of ``f`` with every attribute embedding (rows of a batch too)."""
    f = ad.as_tensor(f)
    if f.shape[-1] != eta.dim:
        raise DimensionError("feature dimension %d does not match embedding %s" % (f.shape[-1], eta.eta.shape))
    if f.ndim == 1:
        return ad.matmul(eta.eta, f)
    return ad.matmul(f, ad.transpose(eta.eta))


def classify(head: ClassifierHead, f) -> Tensor:
    f = ad.as_tensor(f)
    if f.shape[-1] != head.weights.shape[1]:
        raise DimensionError("feature %s does not match head weights %s" % (f.shape, head.weights.shape))
    if head.kind == "linear":
        return ad.affine(f, head.weights, head.bias)
    w = ad.l2_normalize(head.weights)
    cos = ad.matmul(w, ad.l2_normalize(f)) if f.ndim == 1 else ad.matmul(ad.l2_normalize(f), ad.transpose(w))
    return ad.scale(cos, head.scale)
