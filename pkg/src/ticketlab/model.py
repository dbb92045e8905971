"""Miniature two-stream cross-modal transformer.

Language tokens and visual region features each pass through their own
post-LN transformer encoder, then through cross-modality layers in which
each stream queries the other.  The mean-pooled language stream feeds a
single linear answer classifier.

Weights are stored ``[in, out]`` so a projection is ``x @ W + b``.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tape, Tensor

CLASSIFIER_W = "classifier.weight"
CLASSIFIER_B = "classifier.bias"
NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_lang_layers: int = 2
    n_vis_layers: int = 2
    n_cross_layers: int = 2
    vocab_size: int = 64
    n_regions: int = 8
    feat_dim: int = 16
    n_answers: int = 16
    max_question_len: int = 8

    def __post_init__(self):
        for field in ("d_model", "n_heads", "n_lang_layers", "n_vis_layers", "n_cross_layers",
                      "vocab_size", "n_regions", "feat_dim", "max_question_len"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")
        if self.n_answers < 2:
            raise ValueError("n_answers must be >= 2")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


class ParamSet:
    """Ordered named weights, each flagged prunable or protected.

    Iteration order is the construction order and is part of the contract:
    pruning ties and checkpoint layout both follow it.
    """

    def __init__(self, entries=()):
        self._data: dict[str, np.ndarray] = {}
        self._prunable: dict[str, bool] = {}
        for name, value, prunable in entries:
            self.add(name, value, prunable)

    def add(self, name: str, value, prunable: bool) -> None:
        if name in self._data:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._data[name] = np.asarray(value, dtype=np.float64)
        self._prunable[name] = bool(prunable)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self._data:
            raise KeyError(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._data[name].shape:
            raise DimensionError(f"{name}: shape {value.shape} != {self._data[name].shape}")
        self._data[name] = value

    def __contains__(self, name) -> bool:
        return name in self._data

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    @property
    def names(self) -> list[str]:
        return list(self._data)

    def is_prunable(self, name: str) -> bool:
        return self._prunable[name]

    def prunable_names(self) -> list[str]:
        return [n for n, p in self._prunable.items() if p]

    def items(self):
        return self._data.items()

    def entries(self):
        for n, v in self._data.items():
            yield n, v, self._prunable[n]

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {n: v.shape for n, v in self._data.items()}

    def prunable_count(self) -> int:
        return int(sum(self._data[n].size for n in self.prunable_names()))

    def copy(self) -> ParamSet:
        return ParamSet((n, v.copy(), p) for n, v, p in self.entries())

    def digest(self) -> str:
        """SHA-256 over names, shapes and raw little-endian float64 bytes."""
        h = hashlib.sha256()
        for n, v, p in self.entries():
            h.update(n.encode())
            h.update(repr(v.shape).encode())
            h.update(b"\x01" if p else b"\x00")
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def equals(self, other: ParamSet) -> bool:
        """Bit-exact equality of names, flags and values."""
        if self.names != other.names:
            return False
        return all(
            self._prunable[n] == other._prunable[n]
            and np.array_equal(self._data[n].view(np.uint64), other._data[n].view(np.uint64))
            for n in self._data
        )


# ---------------------------------------------------------------------------
# layout


def _attn_layout(prefix: str, d: int):
    for p in ("q", "k", "v", "o"):
        yield f"{prefix}.{p}_proj.weight", (d, d), "weight"
        yield f"{prefix}.{p}_proj.bias", (d,), "zero"


def _norm_layout(prefix: str, d: int):
    yield f"{prefix}.gain", (d,), "one"
    yield f"{prefix}.bias", (d,), "zero"


def _ffn_layout(prefix: str, d: int, dff: int):
    yield f"{prefix}.fc1.weight", (d, dff), "weight"
    yield f"{prefix}.fc1.bias", (dff,), "zero"
    yield f"{prefix}.fc2.weight", (dff, d), "weight"
    yield f"{prefix}.fc2.bias", (d,), "zero"


def _self_block_layout(prefix: str, d: int, dff: int):
    yield from _attn_layout(f"{prefix}.attn", d)
    yield from _norm_layout(f"{prefix}.attn_norm", d)
    yield from _ffn_layout(f"{prefix}.ffn", d, dff)
    yield from _norm_layout(f"{prefix}.ffn_norm", d)


def param_layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, kind) for every parameter; kind is one of
    ``embedding``, ``weight``, ``output``, ``zero``, ``one``."""
    d, dff = config.d_model, config.d_ff
    out = [
        ("lang.tok_emb.weight", (config.vocab_size, d), "embedding"),
        ("lang.pos_emb.weight", (config.max_question_len, d), "embedding"),
        *_norm_layout("lang.emb_norm", d),
        ("vis.feat_proj.weight", (config.feat_dim, d), "weight"),
        ("vis.feat_proj.bias", (d,), "zero"),
        ("vis.pos_emb.weight", (config.n_regions, d), "embedding"),
        *_norm_layout("vis.emb_norm", d),
    ]
    for i in range(config.n_lang_layers):
        out.extend(_self_block_layout(f"lang.{i}", d, dff))
    for i in range(config.n_vis_layers):
        out.extend(_self_block_layout(f"vis.{i}", d, dff))
    for i in range(config.n_cross_layers):
        p = f"cross.{i}"
        out.extend(_attn_layout(f"{p}.lang_cross", d))
        out.extend(_norm_layout(f"{p}.lang_cross_norm", d))
        out.extend(_attn_layout(f"{p}.vis_cross", d))
        out.extend(_norm_layout(f"{p}.vis_cross_norm", d))
        out.extend(_self_block_layout(f"{p}.lang_self", d, dff))
        out.extend(_self_block_layout(f"{p}.vis_self", d, dff))
    out.append((CLASSIFIER_W, (d, config.n_answers), "output"))
    out.append((CLASSIFIER_B, (config.n_answers,), "zero"))
    return out


def glorot_bound(shape: tuple[int, ...]) -> float:
    fan_in, fan_out = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _init_value(shape, kind: str, rng: np.random.Generator) -> np.ndarray:
    if kind == "zero":
        return np.zeros(shape)
    if kind == "one":
        return np.ones(shape)
    b = glorot_bound(shape)
    return rng.uniform(-b, b, size=shape)


def _param_rng(seed: int, index: int) -> np.random.Generator:
    # one stream per parameter so any single tensor can be redrawn alone
    return np.random.default_rng([seed, index])


def init_model(config: ModelConfig, seed: int) -> ParamSet:
    ps = ParamSet()
    for i, (name, shape, kind) in enumerate(param_layout(config)):
        ps.add(name, _init_value(shape, kind, _param_rng(seed, i)), kind == "weight")
    return ps


def reinit_classifier(params: ParamSet, config: ModelConfig, seed: int) -> ParamSet:
    """Copy of ``params`` whose classifier is drawn as ``init_model(config, seed)`` would."""
    out = params.copy()
    for i, (name, shape, kind) in enumerate(param_layout(config)):
        if name in (CLASSIFIER_W, CLASSIFIER_B):
            out[name] = _init_value(shape, kind, _param_rng(seed, i))
    return out


# ---------------------------------------------------------------------------
# blocks


def _linear(x: Tensor, p, prefix: str) -> Tensor:
    return T.linear(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"])


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def attention_context(query: Tensor, context: Tensor, p, prefix: str, n_heads: int,
                      key_pad=None, probe: dict | None = None) -> Tensor:
    """Merged multi-head attention output before the output projection.

    ``key_pad`` is a boolean [batch, n_ctx] array marking padded keys.
    When ``probe`` is given, the attention probabilities are stored in it.
    """
    q = _split_heads(_linear(query, p, f"{prefix}.q_proj"), n_heads)
    k = _split_heads(_linear(context, p, f"{prefix}.k_proj"), n_heads)
    v = _split_heads(_linear(context, p, f"{prefix}.v_proj"), n_heads)
    dh = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if key_pad is not None and np.any(key_pad):
        scores = T.add(scores, Tensor(np.where(key_pad, NEG_INF, 0.0)[:, None, None, :]))
    weights = T.softmax(scores, axis=-1)
    if probe is not None:
        probe[prefix] = weights.data
    return _merge_heads(T.matmul(weights, v))


def attention(query: Tensor, context: Tensor, p, prefix: str, n_heads: int,
              key_pad=None, probe: dict | None = None) -> Tensor:
    """Multi-head scaled dot-product attention of ``query`` over ``context``."""
    ctx = attention_context(query, context, p, prefix, n_heads, key_pad, probe)
    return _linear(ctx, p, f"{prefix}.o_proj")


def _feed_forward(x: Tensor, p, prefix: str) -> Tensor:
    return _linear(T.gelu(_linear(x, p, f"{prefix}.fc1")), p, f"{prefix}.fc2")


def _norm(x: Tensor, p, prefix: str) -> Tensor:
    return T.layer_norm(x, p[f"{prefix}.gain"], p[f"{prefix}.bias"])


def _check_width(x: Tensor, d: int, what: str) -> None:
    if x.data.ndim != 3 or x.shape[-1] != d:
        raise DimensionError(f"{what}: expected [batch, len, {d}], got {x.shape}")


def attention_sublayer(x: Tensor, p, prefix: str, config: ModelConfig,
                       key_pad=None, probe: dict | None = None) -> Tensor:
    """layer_norm(x + self_attention(x))."""
    _check_width(x, config.d_model, prefix)
    a = attention(x, x, p, f"{prefix}.attn", config.n_heads, key_pad, probe)
    return _norm(T.add(x, a), p, f"{prefix}.attn_norm")


def self_attention_block(x: Tensor, p, prefix: str, config: ModelConfig,
                         key_pad=None, probe: dict | None = None) -> Tensor:
    """Self-attention + residual + LN, then GELU FFN + residual + LN."""
    x = attention_sublayer(x, p, prefix, config, key_pad, probe)
    return _norm(T.add(x, _feed_forward(x, p, f"{prefix}.ffn")), p, f"{prefix}.ffn_norm")


def cross_attention_block(lang: Tensor, vis: Tensor, p, prefix: str, config: ModelConfig,
                          lang_pad=None, probe: dict | None = None) -> tuple[Tensor, Tensor]:
    """Bidirectional cross-attention from the same inputs, then per-stream self blocks."""
    _check_width(lang, config.d_model, f"{prefix} (language)")
    _check_width(vis, config.d_model, f"{prefix} (vision)")
    if lang.shape[0] != vis.shape[0]:
        raise DimensionError(f"{prefix}: batch {lang.shape[0]} vs {vis.shape[0]}")
    l_ctx = attention(lang, vis, p, f"{prefix}.lang_cross", config.n_heads, None, probe)
    v_ctx = attention(vis, lang, p, f"{prefix}.vis_cross", config.n_heads, lang_pad, probe)
    lang = _norm(T.add(lang, l_ctx), p, f"{prefix}.lang_cross_norm")
    vis = _norm(T.add(vis, v_ctx), p, f"{prefix}.vis_cross_norm")
    lang = self_attention_block(lang, p, f"{prefix}.lang_self", config, lang_pad, probe)
    vis = self_attention_block(vis, p, f"{prefix}.vis_self", config, None, probe)
    return lang, vis


# ---------------------------------------------------------------------------


def bind(params: ParamSet, tape: Tape | None) -> dict[str, Tensor]:
    """Wrap params as graph leaves on ``tape`` (or as constants)."""
    if tape is None:
        return {n: Tensor(v) for n, v in params.items()}
    return {n: tape.watch(n, v) for n, v in params.items()}


def forward_batch(params: ParamSet, config: ModelConfig, tokens, lengths, regions,
                  tape: Tape | None = None, probe: dict | None = None) -> Tensor:
    """Logits [batch, n_answers] for padded token ids [batch, L] and regions [batch, R, F]."""
    tokens = np.asarray(tokens)
    lengths = np.asarray(lengths)
    regions = np.asarray(regions, dtype=np.float64)
    b, L = tokens.shape
    if L > config.max_question_len:
        raise DimensionError(f"question length {L} exceeds max_question_len={config.max_question_len}")
    if regions.shape != (b, config.n_regions, config.feat_dim):
        raise DimensionError(
            f"regions: expected {(b, config.n_regions, config.feat_dim)}, got {regions.shape}")
    if np.any(lengths < 1) or np.any(lengths > L):
        raise DimensionError("question lengths must lie in [1, padded length]")
    p = bind(params, tape)
    pad = np.arange(L)[None, :] >= lengths[:, None]

    lang = T.embedding(p["lang.tok_emb.weight"], tokens)
    lang = T.add(lang, T.embedding(p["lang.pos_emb.weight"], np.arange(L)))
    lang = _norm(lang, p, "lang.emb_norm")
    vis = _linear(Tensor(regions), p, "vis.feat_proj")
    vis = T.add(vis, T.embedding(p["vis.pos_emb.weight"], np.arange(config.n_regions)))
    vis = _norm(vis, p, "vis.emb_norm")

    for i in range(config.n_lang_layers):
        lang = self_attention_block(lang, p, f"lang.{i}", config, pad, probe)
    for i in range(config.n_vis_layers):
        vis = self_attention_block(vis, p, f"vis.{i}", config, None, probe)
    for i in range(config.n_cross_layers):
        lang, vis = cross_attention_block(lang, vis, p, f"cross.{i}", config, pad, probe)

    pool = (~pad).astype(np.float64) / lengths[:, None]
    pooled = T.sum(T.mul(lang, Tensor(pool[:, :, None])), axis=1)
    return T.linear(pooled, p[CLASSIFIER_W], p[CLASSIFIER_B])


def forward(params: ParamSet, config: ModelConfig, question, regions,
            tape: Tape | None = None) -> Tensor:
    """Logits [n_answers] for one question (token ids) and its region features."""
    q = np.asarray(question)
    if q.ndim != 1 or q.size < 1:
        raise DimensionError("question must be a non-empty 1-D token sequence")
    if q.size > config.max_question_len:
        raise DimensionError(f"question length {q.size} exceeds max_question_len={config.max_question_len}")
    regions = np.asarray(regions, dtype=np.float64)
    if regions.shape != (config.n_regions, config.feat_dim):
        raise DimensionError(f"regions: expected {(config.n_regions, config.feat_dim)}, got {regions.shape}")
    logits = forward_batch(params, config, q[None, :], np.array([q.size]), regions[None], tape)
    return T.reshape(logits, (config.n_answers,))
