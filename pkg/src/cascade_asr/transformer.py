"""Encoder-decoder Transformer for speech and text sequence transduction.

One model class covers both stages of the cascade: the acoustic model takes
feature frames through a linear projection + layer norm into the model
dimension, the text model takes token ids through an embedding.  Decoders are
auto-regressive with causal masking; a third sub-layer attends over the
encoder memory.  Post-norm residuals throughout: LayerNorm(x + Sublayer(x)).
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

PRESETS = {
    "D512-H8": dict(n_layers=6, d_model=512, n_heads=8, d_k=64, d_v=64,
                    warmup_steps=4000),
    "D1024-H16": dict(n_layers=6, d_model=1024, n_heads=16, d_k=64, d_v=64,
                      warmup_steps=12000),
}


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_k: int
    d_v: int
    warmup_steps: int
    output_vocab_size: int
    input_dim: int = 0            # feature dim (feature input mode)
    input_vocab_size: int = 0     # token input mode
    d_ff: int = 0                 # defaults to 4*d_model
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        if self.n_heads * self.d_v != self.d_model:
            raise ConfigError(
                f"h*d_v ({self.n_heads}*{self.d_v}) must equal d_model "
                f"({self.d_model})")
        if bool(self.input_dim) == bool(self.input_vocab_size):
            raise ConfigError("exactly one of input_dim / input_vocab_size "
                              "must be set")

    @classmethod
    def from_preset(cls, name, output_vocab_size, input_dim=0,
                    input_vocab_size=0, **overrides):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; "
                              f"choose from {sorted(PRESETS)}")
        kw = dict(PRESETS[name])
        kw.update(overrides)
        return cls(output_vocab_size=output_vocab_size, input_dim=input_dim,
                   input_vocab_size=input_vocab_size, **kw)

    @property
    def uses_features(self):
        return self.input_dim > 0


@dataclass
class MultiHeadParams:
    """Projections for one multi-head attention block.

    wq/wk/wv hold all heads side by side (d_model x h*d_k etc.); head i is
    the i-th trailing-axis slice.  wo maps the h*d_v concatenation back to
    d_model.
    """
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass
class EncoderMemory:
    z: Tensor                 # T' x d_model
    valid: np.ndarray         # boolean, True = real frame/token


def positional_encoding(length, d_model, dtype=np.float64):
    """Sinusoidal position table: sin on even dims, cos on odd dims."""
    if d_model % 2 != 0:
        raise ConfigError("d_model must be even for sinusoidal encodings")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(dtype)


def causal_mask(length):
    """Boolean T x T mask; (i, j) allowed iff j <= i."""
    return np.tril(np.ones((length, length), dtype=bool))


def scaled_dot_attention(q, k, v, mask=None, collector=None, key=None):
    """softmax(Q K^T / sqrt(d_k)) V with optional boolean mask (True=attend).

    Disallowed positions get zero weight exactly; a query with every
    position masked is a contract violation.
    """
    d_k = q.shape[-1]
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d_k))
    if mask is None:
        weights = T.softmax_rows(scores)
    else:
        weights = T.masked_softmax_rows(scores, mask)
    if collector is not None:
        collector[key] = weights.data.copy()
    return T.matmul(weights, v)


def multi_head_attention(q_in, k_in, v_in, params, n_heads, mask=None,
                         collector=None, key_prefix=None):
    """h parallel attention heads over learned projections, concatenated
    and re-projected."""
    d_k = params.wq.shape[1] // n_heads
    d_v = params.wv.shape[1] // n_heads
    qs = T.split_last(T.matmul(q_in, params.wq), [d_k] * n_heads)
    ks = T.split_last(T.matmul(k_in, params.wk), [d_k] * n_heads)
    vs = T.split_last(T.matmul(v_in, params.wv), [d_v] * n_heads)
    heads = []
    for i in range(n_heads):
        key = key_prefix + (i,) if key_prefix is not None else None
        heads.append(scaled_dot_attention(qs[i], ks[i], vs[i], mask=mask,
                                          collector=collector, key=key))
    return T.matmul(T.concat_last(heads), params.wo)


class _Dropout:
    """Inverted dropout driven by an explicit rng; identity when disabled."""

    def __init__(self, rate, rng):
        self.rate = rate
        self.rng = rng

    def __call__(self, x):
        if self.rng is None or self.rate <= 0.0:
            return x
        keep = 1.0 - self.rate
        mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / keep
        return T.mul(x, mask)


class Transformer:
    """The full encoder-decoder model with named parameters."""

    def __init__(self, cfg: ModelConfig, seed=0, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params = {}
        rng = np.random.default_rng(seed)
        self._build(rng)

    # -- parameter construction -------------------------------------------

    def _add(self, name, value):
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def _add_mha(self, prefix, rng):
        c = self.cfg
        self._add(f"{prefix}.wq", T.glorot(rng, c.d_model, c.n_heads * c.d_k))
        self._add(f"{prefix}.wk", T.glorot(rng, c.d_model, c.n_heads * c.d_k))
        self._add(f"{prefix}.wv", T.glorot(rng, c.d_model, c.n_heads * c.d_v))
        self._add(f"{prefix}.wo", T.glorot(rng, c.n_heads * c.d_v, c.d_model))

    def _add_ln(self, prefix):
        d = self.cfg.d_model
        self._add(f"{prefix}.g", np.ones(d))
        self._add(f"{prefix}.b", np.zeros(d))

    def _add_ff(self, prefix, rng):
        c = self.cfg
        self._add(f"{prefix}.w1", T.glorot(rng, c.d_model, c.d_ff))
        self._add(f"{prefix}.b1", np.zeros(c.d_ff))
        self._add(f"{prefix}.w2", T.glorot(rng, c.d_ff, c.d_model))
        self._add(f"{prefix}.b2", np.zeros(c.d_model))

    def _build(self, rng):
        c = self.cfg
        if c.uses_features:
            self._add("enc.input.w", T.glorot(rng, c.input_dim, c.d_model))
            self._add("enc.input.b", np.zeros(c.d_model))
            self._add_ln("enc.input.ln")
        else:
            self._add("enc.embed",
                      rng.normal(0.0, c.d_model ** -0.5,
                                 size=(c.input_vocab_size, c.d_model)))
        for l in range(c.n_layers):
            self._add_mha(f"enc.l{l}.self", rng)
            self._add_ln(f"enc.l{l}.ln1")
            self._add_ff(f"enc.l{l}.ff", rng)
            self._add_ln(f"enc.l{l}.ln2")
        self._add("dec.embed",
                  rng.normal(0.0, c.d_model ** -0.5,
                             size=(c.output_vocab_size, c.d_model)))
        for l in range(c.n_layers):
            self._add_mha(f"dec.l{l}.self", rng)
            self._add_ln(f"dec.l{l}.ln1")
            self._add_mha(f"dec.l{l}.cross", rng)
            self._add_ln(f"dec.l{l}.ln2")
            self._add_ff(f"dec.l{l}.ff", rng)
            self._add_ln(f"dec.l{l}.ln3")
        self._add("dec.out.w", T.glorot(rng, c.d_model, c.output_vocab_size))
        self._add("dec.out.b", np.zeros(c.output_vocab_size))

    # -- helpers -----------------------------------------------------------

    def _mha_params(self, prefix):
        p = self.params
        return MultiHeadParams(p[f"{prefix}.wq"], p[f"{prefix}.wk"],
                               p[f"{prefix}.wv"], p[f"{prefix}.wo"])

    def _ln(self, prefix, x):
        return T.layer_norm(x, self.params[f"{prefix}.g"],
                            self.params[f"{prefix}.b"])

    def _ff(self, prefix, x):
        p = self.params
        h = T.relu(T.add(T.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
        return T.add(T.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])

    def _pe(self, length):
        return positional_encoding(length, self.cfg.d_model, dtype=self.dtype)

    # -- forward -----------------------------------------------------------

    def encode(self, inputs, valid=None, dropout_rng=None, collector=None):
        """Map feature frames (T x input_dim) or token ids to memory.

        valid: optional boolean mask marking real positions; padded
        positions are excluded from attention keys.
        """
        c = self.cfg
        drop = _Dropout(c.dropout_rate, dropout_rng)
        if c.uses_features:
            feats = inputs if isinstance(inputs, Tensor) else \
                Tensor(np.asarray(inputs, dtype=self.dtype))
            if feats.shape[-1] != c.input_dim:
                raise ConfigError(
                    f"feature dim {feats.shape[-1]} != input_dim {c.input_dim}")
            x = T.add(T.matmul(feats, self.params["enc.input.w"]),
                      self.params["enc.input.b"])
            x = self._ln("enc.input.ln", x)
        else:
            ids = np.asarray(inputs, dtype=np.int64)
            x = T.scale(T.embedding(self.params["enc.embed"], ids),
                        math.sqrt(c.d_model))
        n = x.shape[0]
        if valid is None:
            valid = np.ones(n, dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        x = drop(T.add(x, self._pe(n)))
        attn_mask = np.broadcast_to(valid[None, :], (n, n))
        for l in range(c.n_layers):
            a = multi_head_attention(
                x, x, x, self._mha_params(f"enc.l{l}.self"), c.n_heads,
                mask=attn_mask, collector=collector,
                key_prefix=("enc_self", l))
            x = self._ln(f"enc.l{l}.ln1", T.add(x, drop(a)))
            f = self._ff(f"enc.l{l}.ff", x)
            x = self._ln(f"enc.l{l}.ln2", T.add(x, drop(f)))
        return EncoderMemory(z=x, valid=valid)

    def decoder_logprobs(self, memory, prefix_ids, prefix_valid=None,
                         dropout_rng=None, collector=None):
        """Log-probability rows for every prefix position (Tp x V).

        Row t is the next-token distribution after consuming
        prefix_ids[:t+1]; causal masking keeps it independent of later
        prefix positions.
        """
        c = self.cfg
        ids = np.asarray(prefix_ids, dtype=np.int64)
        if ids.size == 0:
            raise ContractError("decoder prefix must be non-empty")
        drop = _Dropout(c.dropout_rate, dropout_rng)
        tp = ids.shape[0]
        if prefix_valid is None:
            prefix_valid = np.ones(tp, dtype=bool)
        prefix_valid = np.asarray(prefix_valid, dtype=bool)
        x = T.scale(T.embedding(self.params["dec.embed"], ids),
                    math.sqrt(c.d_model))
        x = drop(T.add(x, self._pe(tp)))
        self_mask = causal_mask(tp) & prefix_valid[None, :]
        # a position may always see itself, even when it is padding
        np.fill_diagonal(self_mask, True)
        cross_mask = np.broadcast_to(memory.valid[None, :],
                                     (tp, memory.valid.shape[0]))
        for l in range(c.n_layers):
            a = multi_head_attention(
                x, x, x, self._mha_params(f"dec.l{l}.self"), c.n_heads,
                mask=self_mask, collector=collector,
                key_prefix=("dec_self", l))
            x = self._ln(f"dec.l{l}.ln1", T.add(x, drop(a)))
            a = multi_head_attention(
                x, memory.z, memory.z, self._mha_params(f"dec.l{l}.cross"),
                c.n_heads, mask=cross_mask, collector=collector,
                key_prefix=("dec_cross", l))
            x = self._ln(f"dec.l{l}.ln2", T.add(x, drop(a)))
            f = self._ff(f"dec.l{l}.ff", x)
            x = self._ln(f"dec.l{l}.ln3", T.add(x, drop(f)))
        logits = T.add(T.matmul(x, self.params["dec.out.w"]),
                       self.params["dec.out.b"])
        return T.log_softmax_rows(logits)

    def decode_step(self, memory, prefix_ids, start_id=None):
        """Next-token log-probability row after the given prefix."""
        ids = list(prefix_ids)
        if not ids:
            raise ContractError("decode_step: empty prefix")
        if start_id is not None and ids[0] != start_id:
            raise ContractError("decode_step: prefix must begin with the "
                                "start token")
        return self.decoder_logprobs(memory, ids).data[-1]

    # -- checkpoint io -----------------------------------------------------

    def save_checkpoint(self, path, extra=None, meta=None):
        save_checkpoint(path, self.cfg, self.params, extra=extra, meta=meta)

    @classmethod
    def load_checkpoint(cls, path, dtype=None):
        cfg, tensors, extra, meta = load_checkpoint(path)
        dt = np.dtype(dtype) if dtype is not None else tensors[
            next(iter(tensors))].dtype
        model = cls(cfg, seed=0, dtype=dt)
        for name, arr in tensors.items():
            if name not in model.params:
                raise ConfigError(f"checkpoint parameter {name!r} not in model")
            if model.params[name].shape != arr.shape:
                raise ConfigError(f"checkpoint shape mismatch for {name!r}")
            model.params[name].data = arr.astype(dt)
        return model, extra, meta


MAGIC = "CKPT1"


def save_checkpoint(path, cfg, params, extra=None, meta=None):
    """Text header (config json, then one `name ndim dims... offset` line per
    tensor) followed by raw little-endian float32 data."""
    entries = list(params.items())
    if extra:
        entries += list(extra.items())
    blobs, offset = [], 0
    lines = [MAGIC,
             json.dumps({"config": asdict(cfg), "meta": meta or {}},
                        sort_keys=True)]
    for name, t in entries:
        arr = np.ascontiguousarray(
            (t.data if isinstance(t, Tensor) else np.asarray(t)),
            dtype="<f4")
        lines.append(" ".join([name, str(arr.ndim)]
                              + [str(d) for d in arr.shape] + [str(offset)]))
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    lines.append("DATA")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Inverse of save_checkpoint; splits model params from extra tensors."""
    with open(path, "rb") as f:
        raw = f.read()
    head_end = raw.index(b"DATA\n") + len(b"DATA\n")
    lines = raw[:head_end].decode("utf-8").splitlines()
    if lines[0] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    payload = json.loads(lines[1])
    cfg = ModelConfig(**payload["config"])
    data = raw[head_end:]
    tensors, extra = {}, {}
    for line in lines[2:-1]:
        parts = line.split()
        name, ndim = parts[0], int(parts[1])
        shape = tuple(int(d) for d in parts[2:2 + ndim])
        offset = int(parts[2 + ndim])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count,
                            offset=offset).reshape(shape).copy()
        (extra if name.startswith("opt.") else tensors)[name] = arr
    return cfg, tensors, extra, payload.get("meta", {})
