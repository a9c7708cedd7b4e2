"""Full sequence model: embedding lookup, recurrent unrolling, softmax
decoder, and masked sequence negative log likelihood.

Sentences are framed [BOS, w_1, ..., w_L, EOS]; the model consumes a token
and predicts the next one, starting from a zero hidden state, with the
context vector projected once per sequence and reused at every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cells, tensor as tz
from .data import BOS_ID, SequenceBatch
from .errors import ConfigError, DataError, DimensionError, UsageError
from .tensor import Tensor

ARCHITECTURES = cells.ARCHITECTURES
FUSION_MODES = cells.FUSION_MODES


@dataclass
class ModelConfig:
    arch: str = "delta-rnn"
    hidden: int = 64
    vocab: int = 0  # filled from the vocabulary at build time
    context_dim: int = 2048
    fusion: str = "none"
    fusion_bias: bool = True
    unroll: int = 49
    decoder_bias: bool = True
    lstm_activation: str = "tanh"

    def validate(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.hidden < 1 or self.vocab < 1:
            raise ConfigError(f"hidden={self.hidden} and vocab={self.vocab} must be >= 1")
        if self.unroll < 1:
            raise ConfigError(f"unroll length must be >= 1, got {self.unroll}")
        if self.fusion != "none" and self.context_dim < 1:
            raise ConfigError(f"context dim must be >= 1, got {self.context_dim}")
        if self.fusion == "inner" and self.arch != "delta-rnn":
            raise ConfigError("inner fusion is only defined for delta-rnn")


@dataclass
class DecoderParams:
    U: Tensor  # |V| x H; rows double as output-side word embeddings
    b_U: Tensor | None = None


class SequenceModel:
    """A recurrent cell plus decoder operating on SequenceBatch inputs."""

    def __init__(self, config: ModelConfig, cell, decoder: DecoderParams, dtype=np.float32):
        config.validate()
        self.config = config
        self.cell = cell
        self.decoder = decoder
        self.dtype = np.dtype(dtype)
        if decoder.U.shape != (config.vocab, config.hidden):
            raise DimensionError(
                f"decoder is {decoder.U.shape}, config wants ({config.vocab}, {config.hidden})"
            )

    # -- parameter plumbing ------------------------------------------------

    def named_parameters(self) -> dict:
        out = cells.named_cell_params(self.cell)
        out["decoder.U"] = self.decoder.U
        if self.decoder.b_U is not None:
            out["decoder.b_U"] = self.decoder.b_U
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        tz.zero_grad(self.parameters())

    # -- forward machinery ---------------------------------------------------

    def _validate_ids(self, tokens: np.ndarray) -> None:
        bad = (tokens < 0) | (tokens >= self.config.vocab)
        if bad.any():
            t, b = np.argwhere(bad)[0]
            raise DataError(
                f"token id {tokens[t, b]} out of range 0..{self.config.vocab - 1}"
                f" at step {t}, sequence {b}"
            )

    def _gain(self, contexts, batch_size: int) -> Tensor | None:
        """Per-sequence context gain, or None for a text-only model."""
        if self.config.fusion == "none":
            if contexts is not None:
                raise UsageError("text-only model got context vectors; drop them or build a fused model")
            return None
        ctx = None
        if contexts is not None:
            ctx = np.asarray(contexts, dtype=self.dtype)
        return cells.project_context(self.cell.fusion, ctx, batch_size=batch_size, dtype=self.dtype)

    def _embed(self, ids: np.ndarray):
        names = cells.input_matrix_names(self.config.arch)
        looked = tuple(tz.embed_columns(getattr(self.cell, n), ids) for n in names)
        return looked[0] if len(looked) == 1 else looked

    def _step(self, ids: np.ndarray, state: cells.StepState, gain) -> cells.StepState:
        emb = self._embed(ids)
        if self.config.arch == "delta-rnn":
            return cells.delta_rnn_step(self.cell, emb, state.h, gain)
        if self.config.arch == "gru":
            return cells.gru_step(self.cell, emb, state.h, gain)
        return cells.lstm_step(self.cell, emb, state, gain)

    def _logits(self, h: Tensor) -> Tensor:
        out = tz.matmul(h, tz.transpose(self.decoder.U))
        if self.decoder.b_U is not None:
            out = tz.add_row(out, self.decoder.b_U)
        return out

    def start_state(self, batch_size: int = 1, contexts=None):
        """(zero recurrent state, context gain) for incremental decoding."""
        state = cells.init_state(self.config.arch, batch_size, self.config.hidden, self.dtype)
        return state, self._gain(contexts, batch_size)

    def advance(self, state: cells.StepState, gain, ids):
        """Feed one token per sequence; returns (new state, log P rows)."""
        ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
        new_state = self._step(ids, state, gain)
        logp = tz.log_softmax_rows(self._logits(new_state.h))
        return new_state, logp.data

    def forward_sequence(self, batch: SequenceBatch) -> list:
        """Per-step next-token distributions, one B x |V| tensor per row of
        batch.tokens; entry t conditions on rows 0..t."""
        self._validate_ids(batch.tokens)
        state, gain = self.start_state(batch.batch_size, batch.contexts)
        dists = []
        for t in range(batch.tokens.shape[0]):
            state = self._step(batch.tokens[t], state, gain)
            dists.append(tz.softmax_rows(self._logits(state.h)))
        return dists

    def sequence_nll(self, batch: SequenceBatch):
        """(loss tensor, counted targets): sum of -log P over masked targets.

        A batch with no masked targets returns (constant zero, 0); the zero
        count is the caller's flag that nothing was scored.
        """
        self._validate_ids(batch.tokens)
        masked_rows = np.flatnonzero(batch.mask.any(axis=1))
        if masked_rows.size == 0:
            return tz.const(np.zeros((1, 1), dtype=self.dtype)), 0
        last = int(masked_rows[-1])
        state, gain = self.start_state(batch.batch_size, batch.contexts)
        total = None
        for t in range(last):  # consuming row t predicts row t+1
            state = self._step(batch.tokens[t], state, gain)
            target = batch.tokens[t + 1]
            logp = tz.log_softmax_rows(self._logits(state.h))
            picked = tz.take_per_row(logp, target)
            m = tz.const(batch.mask[t + 1].reshape(-1, 1).astype(self.dtype))
            contrib = tz.hadamard(picked, m)
            total = contrib if total is None else tz.add(total, contrib)
        loss = tz.scale(tz.sum_all(total), -1.0)
        return loss, int(batch.mask.sum())

    def predict_next(self, prefix, context=None) -> np.ndarray:
        """Distribution over the next token after consuming the prefix."""
        ids = np.asarray(prefix, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise UsageError("prefix must be a nonempty 1-D id sequence")
        if ids[0] != BOS_ID:
            raise UsageError(f"prefix must start with BOS (id {BOS_ID}), got {ids[0]}")
        self._validate_ids(ids.reshape(-1, 1))
        ctx = None if context is None else np.atleast_2d(np.asarray(context, dtype=self.dtype))
        state, gain = self.start_state(1, ctx)
        dist = None
        for t in range(ids.size):
            state = self._step(ids[t: t + 1], state, gain)
            dist = tz.softmax_rows(self._logits(state.h))
        return dist.data[0].copy()


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> SequenceModel:
    """Fresh model: weight matrices U(-0.1, 0.1), biases zero, mixing
    vectors and b_M ones; deterministic per (config, seed)."""
    config.validate()
    dtype = np.dtype(dtype)
    fusion = None
    if config.fusion != "none":
        fusion = cells.init_fusion(
            tz.seed_stream(seed, "init/fusion"), config.hidden, config.context_dim,
            config.fusion, use_bias=config.fusion_bias, dtype=dtype,
        )
    cell = cells.init_cell(
        config.arch, config.hidden, config.vocab, tz.seed_stream(seed, "init/cell"),
        dtype=dtype, fusion=fusion, lstm_activation=config.lstm_activation,
    )
    rng = tz.seed_stream(seed, "init/decoder")
    decoder = DecoderParams(
        U=tz.param(rng.uniform(-0.1, 0.1, size=(config.vocab, config.hidden)).astype(dtype)),
        b_U=tz.param(np.zeros((1, config.vocab), dtype=dtype)) if config.decoder_bias else None,
    )
    return SequenceModel(config, cell, decoder, dtype=dtype)
