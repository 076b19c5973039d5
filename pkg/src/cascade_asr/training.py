"""Label-smoothed teacher-forced training with Adam, warmup and clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, TrainingDiverged
from .tensor import GradientTape, Tensor


@dataclass
class TrainConfig:
    epsilon_ls: float = 0.1
    max_grad_norm: float = 5.0
    batch_size: int = 16
    max_steps: int = 1000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    checkpoint_interval: int = 0      # 0 = final checkpoint only
    warmup_steps: int = 0             # 0 = take from model config
    lr_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.epsilon_ls < 1.0:
            raise ContractError(f"epsilon_ls out of range: {self.epsilon_ls}")
        if self.max_grad_norm <= 0:
            raise ContractError("max_grad_norm must be positive")


@dataclass
class Batch:
    """Length-padded block of utterances plus validity masks."""
    inputs: list              # per-utterance features (T x d) or token ids
    input_valid: list         # boolean mask per utterance (pads False)
    targets: np.ndarray       # B x Umax token ids, PAD-filled
    target_valid: np.ndarray  # B x Umax booleans


def label_smoothed_loss(logprobs, target_ids, eps, pad_id):
    """Cross-entropy against (1-eps)*onehot + eps*uniform over non-PAD
    classes, averaged over non-PAD target positions."""
    total, count = label_smoothed_loss_sum(logprobs, target_ids, eps, pad_id)
    if count == 0:
        raise ContractError("all target positions are PAD")
    return T.scale(total, 1.0 / count)


def label_smoothed_loss_sum(logprobs, target_ids, eps, pad_id):
    """Unaveraged variant: (summed loss Tensor, number of scored positions)."""
    targets = np.asarray(target_ids, dtype=np.int64)
    tp, v = logprobs.shape
    if targets.shape[0] != tp:
        raise ContractError(f"target length {targets.shape[0]} != "
                            f"logprob rows {tp}")
    keep = targets != pad_id
    k = v - 1  # non-PAD classes share the smoothing mass
    q = np.full((tp, v), eps / k, dtype=logprobs.dtype)
    q[:, pad_id] = 0.0
    q[np.arange(tp), targets] += 1.0 - eps
    q[~keep] = 0.0
    total = T.scale(T.sum_all(T.mul(logprobs, q)), -1.0)
    return total, int(keep.sum())


def lr_schedule(step, d_model, warmup):
    """Inverse-sqrt schedule with linear warmup; peaks at step == warmup."""
    if step < 1:
        raise ContractError(f"step must be >= 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def clip_gradients(grads, max_norm):
    """Scale all gradients by max_norm/g when the global L2 norm g exceeds
    max_norm; direction is preserved."""
    sq = 0.0
    for g in grads.values():
        sq += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = math.sqrt(sq)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    factor = max_norm / norm
    return {k: g * np.asarray(factor, dtype=g.dtype)
            for k, g in grads.items()}, norm


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()},
                   t=0)


def adam_step(params, grads, state, lr, betas=(0.9, 0.98), eps=1e-9):
    """One in-place Adam update with bias correction."""
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.data.dtype)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        mhat = m / np.asarray(bc1, dtype=p.data.dtype)
        vhat = v / np.asarray(bc2, dtype=p.data.dtype)
        p.data = p.data - np.asarray(lr, dtype=p.data.dtype) * mhat / (
            np.sqrt(vhat) + np.asarray(eps, dtype=p.data.dtype))


def make_batches(dataset, batch_size, pad_id, epoch_rng=None):
    """Bucket by input length to limit padding, then batch; batch order is
    shuffled when an rng is given."""
    def in_len(sample):
        x = sample[0]
        return x.shape[0] if hasattr(x, "shape") else len(x)

    order = sorted(range(len(dataset)), key=lambda i: (in_len(dataset[i]), i))
    groups = [order[i:i + batch_size]
              for i in range(0, len(order), batch_size)]
    if epoch_rng is not None:
        groups = [groups[i] for i in epoch_rng.permutation(len(groups))]
    batches = []
    for idxs in groups:
        samples = [dataset[i] for i in idxs]
        umax = max(len(t) for _, t in samples)
        targets = np.full((len(samples), umax), pad_id, dtype=np.int64)
        valid = np.zeros((len(samples), umax), dtype=bool)
        for r, (_, tgt) in enumerate(samples):
            targets[r, :len(tgt)] = tgt
            valid[r, :len(tgt)] = True
        batches.append(Batch(
            inputs=[x for x, _ in samples],
            input_valid=[np.ones(in_len(s), dtype=bool) for s in samples],
            targets=targets, target_valid=valid))
    return batches


def batch_loss(model, batch, eps, pad_id, dropout_rng=None):
    """Mean label-smoothed loss over the batch's non-PAD target positions.

    Teacher forcing: decoder consumes targets shifted right (everything but
    the final token); the loss scores everything but the start token.
    """
    totals, count = None, 0
    for row in range(batch.targets.shape[0]):
        tgt = batch.targets[row][batch.target_valid[row]]
        memory = model.encode(batch.inputs[row], dropout_rng=dropout_rng)
        logp = model.decoder_logprobs(memory, tgt[:-1],
                                      dropout_rng=dropout_rng)
        part, n = label_smoothed_loss_sum(logp, tgt[1:], eps, pad_id)
        totals = part if totals is None else T.add(totals, part)
        count += n
    if count == 0:
        raise ContractError("batch contains no scoreable target positions")
    return T.scale(totals, 1.0 / count)


def train(model, dataset, cfg, pad_id, state=None, start_step=0,
          log_file=None, checkpoint_fn=None, callback=None):
    """Deterministic training loop; returns (loss_log, AdamState).

    loss_log rows are (step, lr, loss).  checkpoint_fn(step) is invoked at
    every checkpoint interval and at the end; callback(step, loss, model)
    may return True to stop early.
    """
    if not dataset:
        raise ContractError("empty dataset")
    state = state or AdamState.for_params(model.params)
    warmup = cfg.warmup_steps or model.cfg.warmup_steps
    log = []
    step = start_step

    def batch_stream():
        # the batch at a given step index is a pure function of the seed,
        # so a resumed run sees exactly the continuation
        epoch = 0
        while True:
            rng = np.random.default_rng([cfg.seed, 11, epoch])
            yield from make_batches(dataset, cfg.batch_size, pad_id, rng)
            epoch += 1

    stream = batch_stream()
    for _ in range(start_step):
        next(stream)
    while step < cfg.max_steps:
        batch = next(stream)
        step += 1
        drop_rng = np.random.default_rng([cfg.seed, 7, step])
        with GradientTape() as tape:
            loss = batch_loss(model, batch, cfg.epsilon_ls, pad_id,
                              dropout_rng=drop_rng)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise TrainingDiverged(step, loss_value)
        tape.backward(loss)
        grads = {name: tape.gradient(p) for name, p in model.params.items()}
        grads, _ = clip_gradients(grads, cfg.max_grad_norm)
        lr = cfg.lr_scale * lr_schedule(step, model.cfg.d_model, warmup)
        adam_step(model.params, grads, state, lr,
                  betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
        log.append((step, lr, loss_value))
        if log_file is not None:
            log_file.write(f"{step}\t{lr:.10e}\t{loss_value:.10e}\n")
        if checkpoint_fn is not None and cfg.checkpoint_interval and \
                step % cfg.checkpoint_interval == 0:
            checkpoint_fn(step, state)
        if callback is not None and callback(step, loss_value, model):
            break
    if checkpoint_fn is not None:
        checkpoint_fn(step, state)
    return log, state


def adam_state_to_extra(state):
    extra = {}
    for name, arr in state.m.items():
        extra[f"opt.m.{name}"] = arr
    for name, arr in state.v.items():
        extra[f"opt.v.{name}"] = arr
    return extra


def adam_state_from_extra(extra, params, t):
    state = AdamState.for_params(params)
    state.t = t
    for name, p in params.items():
        if f"opt.m.{name}" in extra:
            state.m[name] = extra[f"opt.m.{name}"].astype(p.data.dtype)
            state.v[name] = extra[f"opt.v.{name}"].astype(p.data.dtype)
    return state


def teacher_forced_accuracy(model, dataset):
    """Fraction of next-token argmax predictions matching the targets."""
    hits, total = 0, 0
    for inputs, tgt in dataset:
        tgt = np.asarray(tgt, dtype=np.int64)
        memory = model.encode(inputs)
        logp = model.decoder_logprobs(memory, tgt[:-1])
        pred = logp.data.argmax(axis=-1)
        hits += int((pred == tgt[1:]).sum())
        total += tgt.shape[0] - 1
    return hits / max(total, 1)
