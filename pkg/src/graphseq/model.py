"""Decoder-only transformer with interleaved gated message passing.

The base model is a small pre-norm causal transformer over byte-level
tokens. After designated blocks, a GraphSAGE layer runs over a derived
graph of the partially serialized output: each derived node reads the
hidden state of the last token describing it, aggregates the mean of its
in-neighbors (which always precede it in the sequence), and the result is
added to the hidden state one position after the node's span, scaled by a
learned gate tanh(a) that starts at zero. Injection therefore never moves
information backwards, and a freshly initialized model is exactly
equivalent to the same model without message passing.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codec import EOS_ID, PAD_ID, IncrementalParser, VOCAB
from .maskgraph import MpStructure, mp_structure_from_state

MP_MODES = ("none", "edges", "correspondences")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = len(VOCAB)
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 4
    ff_dim: int = 256
    max_seq_len: int = 512
    mp_mode: str = "none"
    mp_after_layers: tuple[int, ...] | None = None  # None: after every block
    gate_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.num_heads != 0:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.mp_mode not in MP_MODES:
            raise ValueError(f"unknown mp_mode {self.mp_mode!r}")
        if self.mp_mode == "none":
            object.__setattr__(self, "mp_after_layers", ())
        elif self.mp_after_layers is None:
            object.__setattr__(self, "mp_after_layers", tuple(range(self.num_layers)))
        else:
            layers = tuple(sorted(set(int(i) for i in self.mp_after_layers)))
            if any(i < 0 or i >= self.num_layers for i in layers):
                raise ValueError("mp_after_layers indices out of range")
            object.__setattr__(self, "mp_after_layers", layers)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def init_params(config: ModelConfig) -> dict[str, Tensor]:
    """Fresh parameters: normal(0, 0.02) matrices, zero biases, unit
    layer-norm gains, zero gates. Base weights are drawn before any
    message-passing weights, so two configs differing only in mp_mode share
    identical base weights for the same seed."""
    rng = np.random.default_rng(config.seed)
    h, f, v = config.embed_dim, config.ff_dim, config.vocab_size
    params: dict[str, Tensor] = {}

    def mat(name, shape):
        params[name] = Tensor(rng.normal(0.0, 0.02, size=shape))

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape))

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape))

    mat("tok_emb", (v, h))
    mat("pos_emb", (config.max_seq_len, h))
    for i in range(config.num_layers):
        ones(f"block{i}.ln1.gain", (h,))
        zeros(f"block{i}.ln1.bias", (h,))
        for w in ("wq", "wk", "wv", "wo"):
            mat(f"block{i}.attn.{w}", (h, h))
        for b in ("bq", "bk", "bv", "bo"):
            zeros(f"block{i}.attn.{b}", (h,))
        ones(f"block{i}.ln2.gain", (h,))
        zeros(f"block{i}.ln2.bias", (h,))
        mat(f"block{i}.ff.w1", (h, f))
        zeros(f"block{i}.ff.b1", (f,))
        mat(f"block{i}.ff.w2", (f, h))
        zeros(f"block{i}.ff.b2", (h,))
    ones("ln_f.gain", (h,))
    zeros("ln_f.bias", (h,))
    mat("out.w", (h, v))
    zeros("out.b", (v,))
    for i in config.mp_after_layers:
        mat(f"mp{i}.w_self", (h, h))
        mat(f"mp{i}.w_neigh", (h, h))
        zeros(f"mp{i}.bias", (h,))
        zeros(f"mp{i}.gate", ())
    return params


@dataclass(frozen=True)
class MpBatch:
    """Per-batch message-passing structure, padded to the widest example."""

    gather_idx: np.ndarray  # (B, K) int64, token position per derived node
    agg: np.ndarray  # (B, K, K) row-normalized in-neighbor weights
    inject_idx: np.ndarray  # (B, K) int64, clipped injection targets
    inject_mask: np.ndarray  # (B, K, 1) 1.0 where the node is real and in range


def build_mp_batch(structures: Sequence[MpStructure | None], seq_len: int) -> MpBatch | None:
    widths = [s.num_nodes if s is not None else 0 for s in structures]
    k = max(widths, default=0)
    if k == 0:
        return None
    b = len(structures)
    gather_idx = np.zeros((b, k), dtype=np.int64)
    agg = np.zeros((b, k, k))
    inject_idx = np.zeros((b, k), dtype=np.int64)
    inject_mask = np.zeros((b, k, 1))
    for bi, s in enumerate(structures):
        if s is None or s.num_nodes == 0:
            continue
        kb = s.num_nodes
        pos = s.positions
        gather_idx[bi, :kb] = pos
        for src, dst in s.arcs:
            agg[bi, dst, src] = 1.0
        indeg = agg[bi].sum(axis=1, keepdims=True)
        np.divide(agg[bi], indeg, out=agg[bi], where=indeg > 0)
        target = pos + 1
        ok = target < seq_len
        inject_idx[bi, :kb] = np.where(ok, target, 0)
        inject_mask[bi, :kb, 0] = ok.astype(np.float64)
    return MpBatch(gather_idx=gather_idx, agg=agg, inject_idx=inject_idx, inject_mask=inject_mask)


def _sage(h: Tensor, agg: np.ndarray, w_self: Tensor, w_neigh: Tensor, bias: Tensor) -> Tensor:
    neigh = ad.matmul_const(agg, h)
    return (h @ w_self) + (neigh @ w_neigh) + bias


def graphsage_layer(
    node_features,
    arcs: Sequence[tuple[int, int]],
    w_self,
    w_neigh,
    bias,
) -> Tensor:
    """One GraphSAGE step: out[v] = h[v] W_self + mean_{(u,v)} h[u] W_neigh + bias,
    with the mean over an empty in-neighborhood defined as the zero vector.
    Arcs are 0-based (src, dst) pairs over the feature rows."""
    h = node_features if isinstance(node_features, Tensor) else Tensor(node_features)
    w_self = w_self if isinstance(w_self, Tensor) else Tensor(w_self)
    w_neigh = w_neigh if isinstance(w_neigh, Tensor) else Tensor(w_neigh)
    bias = bias if isinstance(bias, Tensor) else Tensor(bias)
    k, dim = h.data.shape[-2], h.data.shape[-1]
    if w_self.data.shape != (dim, dim) or w_neigh.data.shape != (dim, dim) or bias.data.shape != (dim,):
        raise ValueError("weight shapes do not match the feature dimension")
    agg = np.zeros((k, k))
    for src, dst in arcs:
        if not (0 <= src < k and 0 <= dst < k):
            raise ValueError(f"arc ({src}, {dst}) references a missing node")
        agg[dst, src] = 1.0
    indeg = agg.sum(axis=1, keepdims=True)
    np.divide(agg, indeg, out=agg, where=indeg > 0)
    return _sage(h, agg, w_self, w_neigh, bias)


def _attention(params, config, x: Tensor, i: int, mask: np.ndarray) -> Tensor:
    b, t, h = x.data.shape
    nh, dh = config.num_heads, config.head_dim
    p = params

    def heads(name_w, name_b):
        proj = (x @ p[f"block{i}.attn.{name_w}"]) + p[f"block{i}.attn.{name_b}"]
        return ad.transpose(ad.reshape(proj, (b, t, nh, dh)), (0, 2, 1, 3))

    q = heads("wq", "bq")
    k = heads("wk", "bk")
    v = heads("wv", "bv")
    scores = ad.mul_const(q @ ad.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dh))
    weights = ad.softmax_masked(scores, mask)
    ctx = ad.reshape(ad.transpose(weights @ v, (0, 2, 1, 3)), (b, t, h))
    return (ctx @ p[f"block{i}.attn.wo"]) + p[f"block{i}.attn.bo"]


def _feedforward(params, config, x: Tensor, i: int) -> Tensor:
    hidden = ad.gelu((x @ params[f"block{i}.ff.w1"]) + params[f"block{i}.ff.b1"])
    return (hidden @ params[f"block{i}.ff.w2"]) + params[f"block{i}.ff.b2"]


def _mp_inject(params, config, x: Tensor, i: int, mpb: MpBatch) -> Tensor:
    h = ad.gather_rows(x, mpb.gather_idx)
    sage = _sage(h, mpb.agg, params[f"mp{i}.w_self"], params[f"mp{i}.w_neigh"], params[f"mp{i}.bias"])
    if config.gate_enabled:
        sage = sage * ad.tanh(params[f"mp{i}.gate"])
    sage = ad.mul_const(sage, mpb.inject_mask)
    return ad.scatter_add_rows(x, mpb.inject_idx, sage)


def _normalize_structure(structure, batch_size: int, seq_len: int) -> MpBatch | None:
    if structure is None:
        return None
    if isinstance(structure, MpBatch):
        return structure
    if isinstance(structure, MpStructure):
        structure = [structure]
    return build_mp_batch(list(structure), seq_len)


def forward(params: dict[str, Tensor], config: ModelConfig, tokens, structure=None) -> Tensor:
    """Next-token logits for every position. ``tokens`` is (T,) or (B, T);
    ``structure`` is an ``MpStructure`` (or one per batch row, or a
    prebuilt ``MpBatch``) aligned to full-sequence token positions. Logits
    at position t depend only on tokens[0..t]."""
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    tokens2d = tokens[None, :] if single else tokens
    b, t = tokens2d.shape
    if t > config.max_seq_len:
        raise ValueError(f"sequence length {t} exceeds max_seq_len {config.max_seq_len}")
    mpb = _normalize_structure(structure, b, t) if config.mp_mode != "none" else None

    mask = np.tril(np.ones((t, t), dtype=bool))
    x = ad.embedding(params["tok_emb"], tokens2d) + ad.embedding(params["pos_emb"], np.arange(t))
    for i in range(config.num_layers):
        x = x + _attention(params, config, ad.layer_norm(x, params[f"block{i}.ln1.gain"], params[f"block{i}.ln1.bias"]), i, mask)
        x = x + _feedforward(params, config, ad.layer_norm(x, params[f"block{i}.ln2.gain"], params[f"block{i}.ln2.bias"]), i)
        if mpb is not None and i in config.mp_after_layers:
            x = _mp_inject(params, config, x, i, mpb)
    x = ad.layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])
    logits = (x @ params["out.w"]) + params["out.b"]
    return ad.reshape(logits, (t, config.vocab_size)) if single else logits


def backward(params: dict[str, Tensor], config: ModelConfig, batch, loss_spec):
    """Loss value plus gradients for every parameter (gate scalars included)."""
    from .training import compute_loss  # local import; training drives this module

    for p in params.values():
        p.zero_grad()
    logits = forward(params, config, batch.tokens, batch.mp)
    loss = compute_loss(logits, batch, loss_spec)
    loss.backward()
    grads = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    return float(loss.data), grads


@dataclass(frozen=True)
class SamplePolicy:
    greedy: bool = False
    temperature: float = 1.0
    top_k: int = 0  # 0 keeps the full distribution

    def __post_init__(self):
        if not self.greedy and self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.top_k < 0:
            raise ValueError("top_k must be >= 0")


def _pick_token(logits_row: np.ndarray, policy: SamplePolicy, rng: np.random.Generator) -> int:
    if policy.greedy:
        return int(np.argmax(logits_row))
    z = logits_row / policy.temperature
    if 0 < policy.top_k < z.shape[0]:
        kth = np.partition(z, -policy.top_k)[-policy.top_k]
        z = np.where(z >= kth, z, -np.inf)
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    cum = np.cumsum(p)
    return int(min(np.searchsorted(cum, rng.random(), side="right"), z.shape[0] - 1))


def sample_batch(
    params: dict[str, Tensor],
    config: ModelConfig,
    prompts: np.ndarray,
    policy: SamplePolicy,
    max_new_tokens: int,
    rng_seeds: Sequence,
) -> list[np.ndarray]:
    """Autoregressively extend a batch of equal-length prompts. After each
    emitted token the incremental parser updates, and message passing runs
    only over the closed portion of each partial serialization, so
    step-wise logits match a teacher-forced forward pass over the same
    prefix. Returns full sequences (prompt plus generation, EOS included
    when emitted)."""
    prompts = np.asarray(prompts, dtype=np.int64)
    b, p_len = prompts.shape
    rngs = [np.random.default_rng(s) for s in rng_seeds]
    parsers = [IncrementalParser() for _ in range(b)]
    buf = np.full((b, p_len + max_new_tokens), PAD_ID, dtype=np.int64)
    buf[:, :p_len] = prompts
    lengths = np.full(b, p_len)
    done = np.zeros(b, dtype=bool)
    empty = MpStructure(positions=np.zeros(0, dtype=np.int64), arcs=())

    cur = p_len
    while cur < p_len + max_new_tokens and cur < config.max_seq_len and not done.all():
        if config.mp_mode != "none":
            structures = [
                empty if done[bi] else mp_structure_from_state(parsers[bi], config.mp_mode, offset=p_len)
                for bi in range(b)
            ]
        else:
            structures = None
        with ad.no_grad():
            logits = forward(params, config, buf[:, :cur], structures)
        last = logits.data[:, cur - 1, :]
        for bi in range(b):
            if done[bi]:
                continue
            tok = _pick_token(last[bi], policy, rngs[bi])
            buf[bi, cur] = tok
            lengths[bi] = cur + 1
            if tok == EOS_ID:
                done[bi] = True
            else:
                parsers[bi].push(tok)
        cur += 1
    return [buf[bi, : lengths[bi]].copy() for bi in range(b)]


def sample(
    params: dict[str, Tensor],
    config: ModelConfig,
    prompt,
    policy: SamplePolicy,
    max_new_tokens: int,
    rng_seed,
) -> np.ndarray:
    """Single-prompt convenience wrapper around ``sample_batch``."""
    prompt = np.asarray(prompt, dtype=np.int64)
    return sample_batch(params, config, prompt[None, :], policy, max_new_tokens, [rng_seed])[0]


# --- checkpoint format -------------------------------------------------------
#
# Text header (magic, version, config as key=value) followed by named
# tensors: one "tensor=<name> shape=<d0,d1,...>" line, then row-major
# little-endian float64 payload bytes. Round-trips byte-exactly.

_MAGIC = b"graphseq-checkpoint\n"
_FORMAT_VERSION = 1


def _config_to_lines(config: ModelConfig) -> list[str]:
    lines = []
    for f in fields(ModelConfig):
        value = getattr(config, f.name)
        if f.name == "mp_after_layers":
            value = ",".join(str(i) for i in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"config.{f.name}={value}")
    return lines


def _config_from_dict(raw: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in raw:
            continue
        text = raw[f.name]
        if f.name == "mp_after_layers":
            kwargs[f.name] = tuple(int(x) for x in text.split(",") if x) or ()
        elif f.name in ("mp_mode",):
            kwargs[f.name] = text
        elif f.name == "gate_enabled":
            kwargs[f.name] = text == "true"
        else:
            kwargs[f.name] = int(text)
    return ModelConfig(**kwargs)


def save_checkpoint(path, config: ModelConfig, params: dict[str, Tensor], extra: dict[str, np.ndarray] | None = None) -> None:
    tensors: dict[str, np.ndarray] = {f"param.{k}": v.data for k, v in params.items()}
    for k, v in (extra or {}).items():
        tensors[f"extra.{k}"] = np.asarray(v, dtype=np.float64)
    out = io.BytesIO()
    out.write(_MAGIC)
    out.write(f"format_version={_FORMAT_VERSION}\n".encode())
    for line in _config_to_lines(config):
        out.write((line + "\n").encode())
    out.write(f"tensor_count={len(tensors)}\n".encode())
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        shape = ",".join(str(d) for d in arr.shape)
        out.write(f"tensor={name} shape={shape}\n".encode())
        out.write(arr.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(out.getvalue())
    os.replace(tmp, path)


class CheckpointError(RuntimeError):
    """Raised on a corrupt or unsupported checkpoint file."""


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = io.BytesIO(fh.read())
    if blob.readline() != _MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version_line = blob.readline().decode().strip()
    if version_line != f"format_version={_FORMAT_VERSION}":
        raise CheckpointError(f"unsupported checkpoint version: {version_line}")
    raw_config: dict[str, str] = {}
    line = blob.readline().decode().strip()
    while line.startswith("config."):
        key, _, value = line.partition("=")
        raw_config[key[len("config."):]] = value
        line = blob.readline().decode().strip()
    if not line.startswith("tensor_count="):
        raise CheckpointError("missing tensor count")
    count = int(line.partition("=")[2])
    config = _config_from_dict(raw_config)
    params: dict[str, Tensor] = {}
    extra: dict[str, np.ndarray] = {}
    for _ in range(count):
        header = blob.readline().decode().strip()
        if not header.startswith("tensor="):
            raise CheckpointError(f"bad tensor header: {header!r}")
        name_part, _, shape_part = header[len("tensor="):].partition(" shape=")
        shape = tuple(int(d) for d in shape_part.split(",") if d)
        n_bytes = 8 * int(np.prod(shape, dtype=np.int64)) if shape else 8
        payload = blob.read(n_bytes)
        if len(payload) != n_bytes:
            raise CheckpointError(f"truncated tensor payload for {name_part}")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        if name_part.startswith("param."):
            params[name_part[len("param."):]] = Tensor(arr)
        elif name_part.startswith("extra."):
            extra[name_part[len("extra."):]] = arr
        else:
            raise CheckpointError(f"unknown tensor namespace in {name_part!r}")
    return config, params, extra


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy()) for k, v in params.items()}


def with_base_weights(target: dict[str, Tensor], source: dict[str, Tensor]) -> dict[str, Tensor]:
    """Copy every parameter present in ``source`` into a clone of ``target``
    (used to share base transformer weights across message-passing modes)."""
    out = clone_params(target)
    for name, tensor in source.items():
        if name in out:
            out[name] = Tensor(tensor.data.copy())
    return out
