"""Training: loss variants, Adam with linear decay, batching, checkpoint
selection on validation loss.

Three interchangeable objectives share the same summed negative
log-likelihood over the serialized-graph region of each sequence (the
conditional description tokens never contribute): ``per_example`` divides
by the number of sequences in the batch, ``per_token`` by the total number
of contributing tokens in the batch, and ``expected_tokens`` by a constant
estimated once from the training set. Only the first makes an example's
weight independent of which batch it lands in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import model as nn
from .autodiff import Tensor
from .codec import EOS_ID, PAD_ID, SEP_ID, encode, incremental_parse
from .maskgraph import MpStructure, mp_structure_from_state

LOSS_KINDS = ("per_example", "per_token", "expected_tokens")


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass(frozen=True)
class LossSpec:
    kind: str = "per_example"
    expected_token_count: float | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.kind == "expected_tokens":
            if self.expected_token_count is None or self.expected_token_count <= 0:
                raise ValueError("expected_tokens loss needs expected_token_count > 0")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-7
    grad_clip_norm: float = 1.0
    batch_size: int = 16
    max_epochs: int = 30
    schedule: str = "linear"
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "beta1", "beta2", "adam_eps", "weight_decay", "grad_clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.schedule != "linear":
            raise ValueError("only the linear-decay-to-zero schedule is supported")


@dataclass(frozen=True)
class PreparedExample:
    """One (description, serialized graph) pair, tokenized and aligned."""

    tokens: np.ndarray  # desc ids, <SEP>, graph ids, <EOS>
    sep_pos: int
    n_tokens: int  # loss-contributing tokens: graph ids plus <EOS>
    structure: MpStructure | None


def prepare_example(desc: str, graph: str, mp_mode: str = "none") -> PreparedExample:
    desc_ids = encode(desc)
    graph_ids = encode(graph)
    tokens = np.asarray(desc_ids + [SEP_ID] + graph_ids + [EOS_ID], dtype=np.int64)
    sep_pos = len(desc_ids)
    structure = None
    if mp_mode != "none":
        parser = incremental_parse(graph_ids, complete=True)
        if parser.malformed:
            raise ValueError(f"training record does not parse: {graph!r}")
        structure = mp_structure_from_state(parser, mp_mode, offset=sep_pos + 1)
    return PreparedExample(tokens=tokens, sep_pos=sep_pos, n_tokens=len(graph_ids) + 1, structure=structure)


def prepare_dataset(records: Sequence[tuple[str, str]], mp_mode: str = "none") -> list[PreparedExample]:
    return [prepare_example(desc, graph, mp_mode) for desc, graph in records]


@dataclass(frozen=True)
class Batch:
    tokens: np.ndarray  # (B, T) padded with <PAD>
    targets: np.ndarray  # (B, T) next token per position (<PAD> where unused)
    loss_mask: np.ndarray  # (B, T) 1.0 where the prediction contributes
    n_tokens: np.ndarray  # (B,) true contributing lengths
    mp: nn.MpBatch | None
    indices: tuple[int, ...]

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def collate(examples: Sequence[PreparedExample], indices: Sequence[int]) -> Batch:
    chosen = [examples[i] for i in indices]
    width = max(ex.tokens.shape[0] for ex in chosen)
    b = len(chosen)
    tokens = np.full((b, width), PAD_ID, dtype=np.int64)
    loss_mask = np.zeros((b, width))
    n_tokens = np.zeros(b, dtype=np.int64)
    for row, ex in enumerate(chosen):
        t = ex.tokens.shape[0]
        tokens[row, :t] = ex.tokens
        # Position t predicts token t+1: contributions run from the <SEP>
        # position (predicting the first graph token) through the position
        # before <EOS> (predicting <EOS>).
        loss_mask[row, ex.sep_pos : ex.sep_pos + ex.n_tokens] = 1.0
        n_tokens[row] = ex.n_tokens
    targets = np.full((b, width), PAD_ID, dtype=np.int64)
    targets[:, :-1] = tokens[:, 1:]
    structures = [ex.structure for ex in chosen]
    mp = nn.build_mp_batch(structures, width) if any(s is not None for s in structures) else None
    return Batch(tokens=tokens, targets=targets, loss_mask=loss_mask, n_tokens=n_tokens, mp=mp, indices=tuple(indices))


def make_batches(dataset: Sequence[PreparedExample], batch_size: int, seed: int, epoch: int) -> list[Batch]:
    """Random batches keyed by (seed, epoch); same key, same batches."""
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(dataset))
    return [
        collate(dataset, order[start : start + batch_size].tolist())
        for start in range(0, len(dataset), batch_size)
    ]


def compute_loss(logits: Tensor, batch: Batch, spec: LossSpec) -> Tensor:
    """Negative log-likelihood over graph tokens plus <EOS>, divided by the
    normalizer the loss kind prescribes."""
    if batch.size == 0:
        raise ValueError("empty batch")
    logp = ad.log_softmax(logits)
    picked = ad.gather_last(logp, batch.targets)
    nll = ad.sum_all(ad.mul_const(picked, -batch.loss_mask))
    if spec.kind == "per_example":
        denom = float(batch.size)
    elif spec.kind == "per_token":
        denom = float(batch.n_tokens.sum())
    else:
        denom = float(spec.expected_token_count)
    return ad.mul_const(nll, 1.0 / denom)


def estimate_expected_tokens(dataset: Sequence[PreparedExample], batch_size: int, seed: int) -> float:
    """Mean per-batch total of contributing tokens over one epoch's batching;
    the constant normalizer for the ``expected_tokens`` loss."""
    totals = [float(b.n_tokens.sum()) for b in make_batches(dataset, batch_size, seed, epoch=0)]
    return float(np.mean(totals))


def linear_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Linear decay from base_lr at step 0 to exactly 0 at the final step."""
    denom = max(total_steps - 1, 1)
    return base_lr * max(1.0 - step / denom, 0.0)


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    total = 0.0
    for name in sorted(grads):
        g = grads[name]
        total += float((g * g).sum())
    return math.sqrt(total)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm;
    returns the pre-clip norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
    )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float, cfg: TrainConfig) -> None:
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads[name] + cfg.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


def _sequential_batches(dataset: Sequence[PreparedExample], batch_size: int) -> list[Batch]:
    return [
        collate(dataset, list(range(start, min(start + batch_size, len(dataset)))))
        for start in range(0, len(dataset), batch_size)
    ]


def validation_loss(params: dict[str, Tensor], config: nn.ModelConfig, dataset: Sequence[PreparedExample], batch_size: int) -> float:
    """Mean per-example NLL over a dataset (the per_example objective),
    used for checkpoint selection regardless of the training loss kind."""
    spec = LossSpec(kind="per_example")
    total = 0.0
    with ad.no_grad():
        for batch in _sequential_batches(dataset, batch_size):
            loss = compute_loss(nn.forward(params, config, batch.tokens, batch.mp), batch, spec)
            total += float(loss.data) * batch.size
    return total / len(dataset)


@dataclass
class TrainResult:
    params: dict[str, Tensor]  # parameters from the best-validation epoch
    best_epoch: int
    best_val_loss: float
    val_losses: list[float]
    log: list[str]
    adam_state: AdamState  # optimizer state captured at the best epoch
    steps_run: int


def train(
    config: nn.ModelConfig,
    train_set: Sequence[PreparedExample],
    val_set: Sequence[PreparedExample],
    tcfg: TrainConfig,
    loss_spec: LossSpec,
    initial_params: dict[str, Tensor] | None = None,
) -> TrainResult:
    """Full training run: Adam with linear learning-rate decay over the
    planned total steps, global gradient clipping, one validation pass per
    epoch, and best-validation checkpointing. Bit-reproducible for fixed
    seeds. Raises ``DivergenceError`` if the loss becomes non-finite."""
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    longest = max(ex.tokens.shape[0] for ex in list(train_set) + list(val_set))
    if longest > config.max_seq_len:
        raise ValueError(f"dataset sequence length {longest} exceeds max_seq_len {config.max_seq_len}")

    params = initial_params if initial_params is not None else nn.init_params(config)
    adam = init_adam(params)
    steps_per_epoch = math.ceil(len(train_set) / tcfg.batch_size)
    total_steps = steps_per_epoch * tcfg.max_epochs
    log: list[str] = []
    val_losses: list[float] = []
    best_val = math.inf
    best_epoch = -1
    best_params = nn.clone_params(params)
    best_adam = AdamState(m={k: v.copy() for k, v in adam.m.items()}, v={k: v.copy() for k, v in adam.v.items()}, step=adam.step)

    step = 0
    for epoch in range(tcfg.max_epochs):
        for batch in make_batches(train_set, tcfg.batch_size, tcfg.seed, epoch):
            loss_value, grads = nn.backward(params, config, batch, loss_spec)
            if not math.isfinite(loss_value):
                raise DivergenceError(f"non-finite loss {loss_value} at step {step}")
            norm = clip_gradients(grads, tcfg.grad_clip_norm)
            lr = linear_lr(step, total_steps, tcfg.learning_rate)
            adam_step(params, grads, adam, lr, tcfg)
            log.append(f"step={step} epoch={epoch} lr={lr:.10g} loss={loss_value:.10g} grad_norm={norm:.10g}")
            step += 1
        vloss = validation_loss(params, config, val_set, tcfg.batch_size)
        val_losses.append(vloss)
        if vloss < best_val:
            best_val = vloss
            best_epoch = epoch
            best_params = nn.clone_params(params)
            best_adam = AdamState(m={k: v.copy() for k, v in adam.m.items()}, v={k: v.copy() for k, v in adam.v.items()}, step=adam.step)
    return TrainResult(
        params=best_params,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        val_losses=val_losses,
        log=log,
        adam_state=best_adam,
        steps_run=step,
    )
