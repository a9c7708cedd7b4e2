"""SGD training with truncated BPTT, hard gradient clipping, and the
validation-perplexity learning-rate halving schedule.

The schedule counts epochs whose validation PPL rose above the previous
epoch's value; at the configured count (default 3) the rate is halved and
the counter cleared. The default counter is cumulative (an improvement does
not clear it); the consecutive variant is available via TrainConfig.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .data import encode_batches
from .errors import ConfigError, DimensionError, TrainingAbort
from .tensor import backward, clip_gradients, seed_stream

SCHEDULES = ("cumulative", "consecutive")


@dataclass
class TrainConfig:
    lr: float = 1.0
    clip: float = 2.0
    batch_size: int = 32
    unroll: int = 49
    max_epochs: int = 1
    patience: int = 3
    seed: int = 0
    schedule: str = "cumulative"

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if not self.clip > 0:
            raise ConfigError(f"clip bound must be positive, got {self.clip}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if self.unroll < 1:
            raise ConfigError(f"unroll must be >= 1, got {self.unroll}")
        if self.max_epochs < 0:
            raise ConfigError(f"max epochs must be >= 0, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")


@dataclass
class TrainState:
    """Progress of one fit run; epoch counts completed epochs."""

    epoch: int = 0
    lr: float = 1.0
    best_valid_ppl: float = math.inf
    best_epoch: int = 0
    increase_count: int = 0
    prev_valid_ppl: float = math.inf
    curve: list = field(default_factory=list)  # (epoch, train_nll, valid_nll, valid_ppl, lr)
    best_params: dict | None = None  # name -> ndarray snapshot at the best epoch


CURVE_HEADER = "epoch,train_nll,valid_nll,valid_ppl,lr"


def format_curve(rows) -> str:
    lines = [CURVE_HEADER]
    for epoch, train_nll, valid_nll, valid_ppl, lr in rows:
        lines.append(",".join([str(int(epoch))] + [repr(float(x))
                     for x in (train_nll, valid_nll, valid_ppl, lr)]))
    return "\n".join(lines) + "\n"


def update_schedule(state: TrainState, new_valid_ppl: float, patience: int = 3,
                    mode: str = "cumulative") -> TrainState:
    """Apply the end-of-epoch rate rule and remember the PPL for next time."""
    if mode not in SCHEDULES:
        raise ConfigError(f"schedule must be one of {SCHEDULES}, got {mode!r}")
    if new_valid_ppl > state.prev_valid_ppl:
        state.increase_count += 1
    elif mode == "consecutive":
        state.increase_count = 0
    if state.increase_count >= patience:
        state.lr = state.lr / 2.0  # exact in binary floating point
        state.increase_count = 0
    state.prev_valid_ppl = new_valid_ppl
    return state


def sgd_step(named_params: dict, grads: dict, lr: float) -> None:
    """theta <- theta - lr * grad, in place; grads are already clipped."""
    for name, p in named_params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name} is {g.shape}, parameter is {p.data.shape}")
        p.data -= p.data.dtype.type(lr) * g


def train_epoch(model, batches, lr: float, clip: float, epoch: int = 0):
    """One pass over the batches; returns (summed NLL, counted tokens).

    The reported loss is the pre-update value per batch, clipping happens
    before every update, and a non-finite loss aborts with diagnostics.
    """
    named = model.named_parameters()
    total = 0.0
    tokens = 0
    for index, batch in enumerate(batches):
        loss, count = model.sequence_nll(batch)
        if count == 0:
            continue
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingAbort(
                f"non-finite loss {value} at epoch {epoch}, batch {index} (lr={lr})",
                batch_index=index, lr=lr,
            )
        model.zero_grad()
        backward(loss)
        grads = clip_gradients({k: p.grad for k, p in named.items()}, clip)
        sgd_step(named, grads, lr)
        total += value
        tokens += count
    return total, tokens


def dataset_nll(model, batches):
    """(mean per-token NLL, PPL) over a fixed batch list; no mutation."""
    total = 0.0
    tokens = 0
    for batch in batches:
        loss, count = model.sequence_nll(batch)
        total += loss.item()
        tokens += count
    if tokens == 0:
        return 0.0, 1.0
    nll = total / tokens
    # exp overflows float64 past ~709; a diverged model's PPL is honestly inf
    return nll, math.exp(nll) if nll < 709.0 else math.inf


def snapshot_params(model) -> dict:
    return {k: p.data.copy() for k, p in model.named_parameters().items()}


def restore_params(model, snapshot: dict) -> None:
    for k, p in model.named_parameters().items():
        p.data[:] = snapshot[k]


def fit(model, train_records, valid_records, vocab, config: TrainConfig,
        contexts=None, state: TrainState | None = None, on_epoch=None) -> TrainState:
    """Run up to config.max_epochs epochs and keep the best-validation
    parameter snapshot in the returned state.

    Batch order reshuffles every epoch from a seed derived from
    (config.seed, epoch number), so a resumed run replays the identical
    stream without carrying RNG state. Passing the state of a finished
    epoch continues the numbering (resume).
    """
    config.validate()
    if config.unroll != model.config.unroll:
        raise ConfigError(
            f"train unroll {config.unroll} != model unroll {model.config.unroll}"
        )
    if state is None:
        state = TrainState(lr=config.lr)
    ctx_store = contexts if model.config.fusion != "none" else None
    valid_batches = encode_batches(valid_records, vocab, config.unroll,
                                   config.batch_size, contexts=ctx_store)
    while state.epoch < config.max_epochs:
        epoch = state.epoch + 1
        rng = seed_stream(config.seed, f"shuffle/epoch{epoch}")
        batches = encode_batches(train_records, vocab, config.unroll,
                                 config.batch_size, contexts=ctx_store, rng=rng)
        lr_used = state.lr
        total, tokens = train_epoch(model, batches, lr_used, config.clip, epoch=epoch)
        train_nll = total / tokens if tokens else 0.0
        valid_nll, valid_ppl = dataset_nll(model, valid_batches)
        state.epoch = epoch
        if valid_ppl < state.best_valid_ppl:
            state.best_valid_ppl = valid_ppl
            state.best_epoch = epoch
            state.best_params = snapshot_params(model)
        update_schedule(state, valid_ppl, patience=config.patience, mode=config.schedule)
        state.curve.append((epoch, train_nll, valid_nll, valid_ppl, lr_used))
        if on_epoch is not None:
            on_epoch(state)
    return state
