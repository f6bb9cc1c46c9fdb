"""Trainable span scorer: embeddings, local mixer, feed-forward, biaffine.

The scorer replaces a heavyweight pretrained encoder with the smallest
stack that gives boundary tokens context: an embedding lookup, one width-3
local mixing layer, and two feed-forward layers (hidden sizes ``h`` and
``h/2``).  Span potentials come from a per-label biaffine form on the
boundary embeddings::

    s[i, j, k] = e_i' U1_k e_j + (e_i + e_j)' U2_k + b_k

All forward passes have matching hand-written reverse-mode gradients,
including the Jacobian of per-sentence potential normalization; the test
suite certifies every parameter gradient against central finite
differences.

Model files are self-describing: magic, a little-endian uint32 format
version, a JSON config block (dimensions, label schema, vocabulary, array
shapes, payload checksum), then the raw little-endian float64 parameter
arrays concatenated in ``PARAM_ORDER``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .chart import LabelSchema
from .errors import (
    BadConfig,
    DimensionMismatch,
    EmptySentence,
    ModelFormatError,
)
from .inference import ScoreChart, tril_cells, triu_cells

UNK_TOKEN = "<unk>"

MODEL_MAGIC = b"TCRF"
MODEL_FORMAT_VERSION = 1

PARAM_ORDER = (
    "emb",
    "mix_w",
    "mix_b",
    "ff1_w",
    "ff1_b",
    "ff2_w",
    "ff2_b",
    "bi_u1",
    "bi_u2",
    "bi_b",
)

# Degenerate-scale floor for potential normalization.
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class Vocab:
    """Token-to-index map with a dedicated unknown token at index 0."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.tokens or self.tokens[0] != UNK_TOKEN:
            raise BadConfig(f"vocabulary must start with {UNK_TOKEN!r}")
        if len(set(self.tokens)) != len(self.tokens):
            raise BadConfig("vocabulary tokens must be unique")
        object.__setattr__(
            self, "index", {tok: i for i, tok in enumerate(self.tokens)}
        )

    @classmethod
    def build(cls, tokens: Iterable[str]) -> "Vocab":
        seen = sorted(set(tokens) - {UNK_TOKEN})
        return cls(tokens=(UNK_TOKEN, *seen))

    @property
    def unk_index(self) -> int:
        return 0

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.index.get(t, 0) for t in tokens], dtype=np.int64)


@dataclass(frozen=True)
class ScorerConfig:
    embed_dim: int
    hidden_dim: int
    schema: LabelSchema

    def __post_init__(self) -> None:
        if self.embed_dim < 2 or self.hidden_dim < 2:
            raise BadConfig("embed_dim and hidden_dim must be at least 2")
        if self.hidden_dim % 2:
            raise BadConfig(f"hidden_dim must be even, got {self.hidden_dim}")

    @property
    def half_dim(self) -> int:
        return self.hidden_dim // 2


@dataclass
class ScorerParams:
    """All trainable arrays.  Shapes (V = vocab size, d = embed_dim,
    h = hidden_dim, L = label count):

    emb (V, d); mix_w (d, 3d); mix_b (d,); ff1_w (h, d); ff1_b (h,);
    ff2_w (h/2, h); ff2_b (h/2,); bi_u1 (L, h/2, h/2); bi_u2 (L, h/2);
    bi_b (L,).
    """

    vocab: Vocab
    config: ScorerConfig
    emb: np.ndarray
    mix_w: np.ndarray
    mix_b: np.ndarray
    ff1_w: np.ndarray
    ff1_b: np.ndarray
    ff2_w: np.ndarray
    ff2_b: np.ndarray
    bi_u1: np.ndarray
    bi_u2: np.ndarray
    bi_b: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_ORDER}

    def copy(self) -> "ScorerParams":
        return ScorerParams(
            vocab=self.vocab,
            config=self.config,
            **{name: getattr(self, name).copy() for name in PARAM_ORDER},
        )

    def parameter_count(self) -> int:
        return sum(a.size for a in self.arrays().values())


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(vocab: Vocab, config: ScorerConfig, seed: int) -> ScorerParams:
    """Deterministic initialization: uniform Glorot weights, zero biases.

    Arrays are drawn in ``PARAM_ORDER`` so the same seed always yields
    bit-identical parameters.
    """
    if len(vocab) == 0:
        raise BadConfig("empty vocabulary")
    d, h = config.embed_dim, config.hidden_dim
    h2 = config.half_dim
    n_labels = config.schema.n_labels
    rng = np.random.default_rng(seed)
    return ScorerParams(
        vocab=vocab,
        config=config,
        emb=_glorot(rng, (len(vocab), d), len(vocab), d),
        mix_w=_glorot(rng, (d, 3 * d), 3 * d, d),
        mix_b=np.zeros(d),
        ff1_w=_glorot(rng, (h, d), d, h),
        ff1_b=np.zeros(h),
        ff2_w=_glorot(rng, (h2, h), h, h2),
        ff2_b=np.zeros(h2),
        bi_u1=_glorot(rng, (n_labels, h2, h2), h2, h2),
        bi_u2=_glorot(rng, (n_labels, h2), h2, 1),
        bi_b=np.zeros(n_labels),
    )


class EncodeCache(NamedTuple):
    """Forward activations kept for the backward pass."""

    ids: np.ndarray
    ctx: np.ndarray  # (n, 3d) concatenated neighbor embeddings
    zm: np.ndarray  # mixer pre-activation
    a0: np.ndarray  # mixer activation
    z1: np.ndarray  # first feed-forward pre-activation
    a1: np.ndarray  # first feed-forward activation
    out: np.ndarray  # contextual embeddings, (n, h/2)


def _forward_encode(ids: np.ndarray, params: ScorerParams) -> EncodeCache:
    if len(ids) == 0:
        raise EmptySentence("cannot encode an empty sentence")
    d = params.config.embed_dim
    x = params.emb[ids]
    zero = np.zeros((1, d))
    left = np.concatenate([zero, x[:-1]], axis=0)
    right = np.concatenate([x[1:], zero], axis=0)
    ctx = np.concatenate([left, x, right], axis=1)
    zm = ctx @ params.mix_w.T + params.mix_b
    a0 = np.maximum(zm, 0.0)
    z1 = a0 @ params.ff1_w.T + params.ff1_b
    a1 = np.maximum(z1, 0.0)
    out = a1 @ params.ff2_w.T + params.ff2_b
    return EncodeCache(ids=ids, ctx=ctx, zm=zm, a0=a0, z1=z1, a1=a1, out=out)


def encode(tokens: Sequence[str], params: ScorerParams) -> np.ndarray:
    """Contextual embeddings ``e_1 .. e_n``, each of size ``h/2``.

    Each token sees its immediate neighbors through the width-3 mixer;
    sentence edges are padded with zero vectors.
    """
    return _forward_encode(params.vocab.encode(tokens), params).out


def biaffine_scores(embeddings: np.ndarray, params: ScorerParams) -> ScoreChart:
    """Span potentials for every cell ``i <= j`` and every label."""
    h2 = params.config.half_dim
    if embeddings.ndim != 2 or embeddings.shape[1] != h2:
        raise DimensionMismatch(
            f"embeddings have shape {embeddings.shape}, expected (n, {h2})"
        )
    e = embeddings
    n = e.shape[0]
    # tmp[i, k, b] = sum_a e[i, a] U1[k, a, b]
    tmp = np.tensordot(e, params.bi_u1, axes=([1], [1]))
    bilinear = (tmp @ e.T).transpose(0, 2, 1)
    linear = (e[:, None, :] + e[None, :, :]) @ params.bi_u2.T
    s = bilinear + linear + params.bi_b[None, None, :]
    s[tril_cells(n)] = 0.0
    return ScoreChart(s=s, schema=params.config.schema)


class NormalizeCache(NamedTuple):
    mean: float
    std: float
    degenerate: bool
    normalized: np.ndarray


def _normalize_with_cache(chart: ScoreChart) -> tuple[ScoreChart, NormalizeCache]:
    n = chart.n
    iu, ju = triu_cells(n)
    vals = chart.s[iu, ju, :]
    mean = float(vals.mean())
    std = float(np.sqrt(((vals - mean) ** 2).mean()))
    degenerate = std < STD_FLOOR
    out = chart.s - mean if degenerate else (chart.s - mean) / std
    out[tril_cells(n)] = 0.0
    cache = NormalizeCache(mean=mean, std=std, degenerate=degenerate, normalized=out)
    return ScoreChart(s=out, schema=chart.schema), cache


def potential_normalize(chart: ScoreChart) -> ScoreChart:
    """Standardize all valid potentials of one sentence in place.

    Subtracts the mean and divides by the population standard deviation of
    the upper-triangular entries; a chart with essentially constant scores
    is only mean-centered.
    """
    normalized, _ = _normalize_with_cache(chart)
    return normalized


def _normalize_backward(
    cache: NormalizeCache, grad: np.ndarray, n: int
) -> np.ndarray:
    """Chain a gradient w.r.t. normalized scores back to raw scores."""
    iu, ju = triu_cells(n)
    g = grad[iu, ju, :]
    out = np.zeros_like(grad)
    if cache.degenerate:
        out[iu, ju, :] = g - g.mean()
        return out
    y = cache.normalized[iu, ju, :]
    out[iu, ju, :] = (g - g.mean() - y * (g * y).mean()) / cache.std
    return out


def _biaffine_backward(
    e: np.ndarray, params: ScorerParams, grad: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of the biaffine layer plus the embedding gradient."""
    row = grad.sum(axis=1)  # (n, L)
    col = grad.sum(axis=0)  # (n, L)
    # t1[i, k, b] = sum_j grad[i, j, k] e[j, b]
    t1 = np.tensordot(grad, e, axes=([1], [0]))
    grads = {
        "bi_u1": np.tensordot(e, t1, axes=([0], [0])).transpose(1, 0, 2),
        "bi_u2": (row + col).T @ e,
        "bi_b": grad.sum(axis=(0, 1)),
    }
    # ue[k, a, j] = sum_b U1[k, a, b] e[j, b]; eu[i, k, b] = sum_a e[i, a] U1[k, a, b]
    ue = params.bi_u1 @ e.T
    eu = np.tensordot(e, params.bi_u1, axes=([1], [1]))
    de = (
        np.tensordot(grad, ue, axes=([1, 2], [2, 0]))
        + np.tensordot(grad, eu, axes=([0, 2], [0, 1]))
        + (row + col) @ params.bi_u2
    )
    return grads, de


def _encode_backward(
    cache: EncodeCache, params: ScorerParams, de: np.ndarray
) -> dict[str, np.ndarray]:
    d = params.config.embed_dim
    grads: dict[str, np.ndarray] = {}
    grads["ff2_w"] = de.T @ cache.a1
    grads["ff2_b"] = de.sum(axis=0)
    da1 = de @ params.ff2_w
    dz1 = da1 * (cache.z1 > 0.0)
    grads["ff1_w"] = dz1.T @ cache.a0
    grads["ff1_b"] = dz1.sum(axis=0)
    da0 = dz1 @ params.ff1_w
    dzm = da0 * (cache.zm > 0.0)
    grads["mix_w"] = dzm.T @ cache.ctx
    grads["mix_b"] = dzm.sum(axis=0)
    dctx = dzm @ params.mix_w
    demb = np.zeros_like(params.emb)
    ids = cache.ids
    n = len(ids)
    np.add.at(demb, ids, dctx[:, d : 2 * d])
    if n > 1:
        np.add.at(demb, ids[: n - 1], dctx[1:, :d])
        np.add.at(demb, ids[1:], dctx[: n - 1, 2 * d :])
    grads["emb"] = demb
    return grads


def _backward_from_caches(
    cache: EncodeCache,
    ncache: NormalizeCache,
    params: ScorerParams,
    score_gradient: np.ndarray,
) -> dict[str, np.ndarray]:
    n = len(cache.ids)
    raw_grad = _normalize_backward(ncache, score_gradient, n)
    bi_grads, de = _biaffine_backward(cache.out, params, raw_grad)
    grads = _encode_backward(cache, params, de)
    grads.update(bi_grads)
    return {name: grads[name] for name in PARAM_ORDER}


def backward(
    tokens: Sequence[str], params: ScorerParams, score_gradient: np.ndarray
) -> dict[str, np.ndarray]:
    """Exact parameter gradients for a loss given via ``score_gradient``.

    ``score_gradient`` is the loss gradient with respect to the NORMALIZED
    score chart (the chart the training objective consumes); the chain
    runs back through normalization, the biaffine layer, the feed-forward
    stack, the mixer, and the embedding table.
    """
    cache = _forward_encode(params.vocab.encode(tokens), params)
    raw = biaffine_scores(cache.out, params)
    if score_gradient.shape != raw.s.shape:
        raise DimensionMismatch(
            f"score gradient shape {score_gradient.shape} != chart {raw.s.shape}"
        )
    _, ncache = _normalize_with_cache(raw)
    return _backward_from_caches(cache, ncache, params, score_gradient)


def score_sentence(tokens: Sequence[str], params: ScorerParams) -> ScoreChart:
    """Full forward pass: encode, biaffine, potential normalization."""
    cache = _forward_encode(params.vocab.encode(tokens), params)
    raw = biaffine_scores(cache.out, params)
    return potential_normalize(raw)


def save_model(params: ScorerParams, path: str) -> None:
    """Write a self-describing model file (see module docstring)."""
    arrays = params.arrays()
    payload = b"".join(
        np.ascontiguousarray(arrays[name], dtype="<f8").tobytes()
        for name in PARAM_ORDER
    )
    header = {
        "embed_dim": params.config.embed_dim,
        "hidden_dim": params.config.hidden_dim,
        "observed_labels": list(params.config.schema.observed_labels),
        "latent_label_count": params.config.schema.latent_label_count,
        "vocab_tokens": list(params.vocab.tokens),
        "arrays": [
            {"name": name, "shape": list(arrays[name].shape)}
            for name in PARAM_ORDER
        ],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_model(path: str) -> ScorerParams:
    """Read a model file, verifying magic, version, shapes, and checksum."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16:
        raise ModelFormatError(f"{path}: truncated model file")
    if data[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"{path}: model format version {version} is not supported "
            f"(this build reads version {MODEL_FORMAT_VERSION})"
        )
    (header_len,) = struct.unpack_from("<Q", data, 8)
    header_end = 16 + header_len
    try:
        header = json.loads(data[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"{path}: corrupt header ({exc})") from None
    payload = data[header_end:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise ModelFormatError(f"{path}: payload checksum mismatch")
    schema = LabelSchema(
        observed_labels=tuple(header["observed_labels"]),
        latent_label_count=header["latent_label_count"],
    )
    config = ScorerConfig(
        embed_dim=header["embed_dim"],
        hidden_dim=header["hidden_dim"],
        schema=schema,
    )
    vocab = Vocab(tokens=tuple(header["vocab_tokens"]))
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    expected = [(a["name"], tuple(a["shape"])) for a in header["arrays"]]
    if [name for name, _ in expected] != list(PARAM_ORDER):
        raise ModelFormatError(f"{path}: unexpected parameter array list")
    for name, shape in expected:
        size = int(np.prod(shape)) if shape else 1
        end = offset + 8 * size
        if end > len(payload):
            raise ModelFormatError(f"{path}: truncated payload at array {name!r}")
        arrays[name] = (
            np.frombuffer(payload[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        )
        offset = end
    if offset != len(payload):
        raise ModelFormatError(f"{path}: trailing bytes after parameter arrays")
    return ScorerParams(vocab=vocab, config=config, **arrays)
