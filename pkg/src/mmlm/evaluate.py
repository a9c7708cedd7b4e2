"""Perplexity evaluation under the three train/test conditions, decoder-row
nearest-neighbor analysis, and beam-search sampling.

Conditions: L-L is a text-only model on text; LV-LV is a fused model with
its stored context vectors; LV-L is the same fused model with every context
replaced by the zero vector (evaluating without the visual channel).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import BOS_ID, EOS_ID, SequenceBatch, Vocabulary
from .errors import ConfigError, DataError, UsageError
from .model import DecoderParams, SequenceModel

CONDITIONS = ("L-L", "LV-LV", "LV-L")


def _strip_contexts(batch: SequenceBatch) -> SequenceBatch:
    return replace(batch, contexts=None) if batch.contexts is not None else batch


def _zero_contexts(batch: SequenceBatch, dim: int) -> SequenceBatch:
    return replace(batch, contexts=np.zeros((batch.batch_size, dim), dtype=np.float32))


def evaluate(model: SequenceModel, batches, condition: str):
    """(mean per-token NLL, PPL) on the batches under one condition.

    Pure: parameters are read, never written; repeated calls are
    bit-identical. L-L strips any stored contexts (on a fused model that
    coincides with LV-L, since a missing context is the zero vector);
    LV-L substitutes zero vectors; LV-LV requires stored contexts.
    """
    if condition not in CONDITIONS:
        raise UsageError(f"condition must be one of {CONDITIONS}, got {condition!r}")
    if condition != "L-L" and model.config.fusion == "none":
        raise UsageError(f"{condition} needs a fused model; this one has fusion=none")
    total = 0.0
    tokens = 0
    for batch in batches:
        if condition == "L-L":
            batch = _strip_contexts(batch)
        elif condition == "LV-L":
            batch = _zero_contexts(batch, model.config.context_dim)
        elif batch.contexts is None:
            raise UsageError("LV-LV needs stored context vectors; use LV-L for the null condition")
        loss, count = model.sequence_nll(batch)
        total += loss.item()
        tokens += count
    if tokens == 0:
        return 0.0, 1.0
    nll = total / tokens
    # exp overflows float64 past ~709; a diverged model's PPL is honestly inf
    return nll, math.exp(nll) if nll < 709.0 else math.inf


@dataclass
class EvalRow:
    model_id: str
    condition: str
    language: str
    nll: float
    ppl: float


EVAL_CSV_HEADER = "model,condition,language,nll,ppl"


def render_eval_csv(rows) -> str:
    lines = [EVAL_CSV_HEADER]
    for r in rows:
        lines.append(f"{r.model_id},{r.condition},{r.language},{r.nll:.3f},{r.ppl:.3f}")
    return "\n".join(lines) + "\n"


def render_eval_text(rows) -> str:
    """Aligned table with the same 3-decimal numbers as the CSV form."""
    header = ("Model", "Condition", "Language", "NLL", "PPL")
    body = [(r.model_id, r.condition, r.language, f"{r.nll:.3f}", f"{r.ppl:.3f}") for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h)
              for i, h in enumerate(header)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(header), fmt(tuple("-" * w for w in widths))]
    lines += [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


@dataclass
class NeighborReport:
    query: str
    neighbors: list  # (word, cosine), cosine non-increasing


def nearest_neighbors(decoder: DecoderParams, query: str, vocab: Vocabulary,
                      k: int = 10) -> NeighborReport:
    """Top-k non-special words by cosine between decoder rows.

    Ties break toward the lower vocabulary id; the query row itself is
    excluded; asking for more neighbors than exist returns them all.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    qid = vocab.token_to_id.get(query)
    if qid is None or Vocabulary.is_special(qid):
        raise DataError(f"query {query!r} is not a vocabulary word")
    rows = decoder.U.data.astype(np.float64)
    q = rows[qid]
    norms = np.sqrt((rows * rows).sum(axis=1))
    qn = max(float(np.sqrt(q @ q)), 1e-12)
    cos = rows @ q / (np.maximum(norms, 1e-12) * qn)
    order = sorted(
        (wid for wid in range(len(vocab)) if wid != qid and not Vocabulary.is_special(wid)),
        key=lambda wid: (-cos[wid], wid),
    )
    return NeighborReport(query, [(vocab.word(w), float(cos[w])) for w in order[:k]])


def render_neighbors_text(reports) -> str:
    lines = []
    for rep in reports:
        lines.append(rep.query)
        for word, c in rep.neighbors:
            lines.append(f"  {word}  {c:.3f}")
        lines.append("")
    return "\n".join(lines)


def render_neighbors_csv(reports) -> str:
    lines = ["query,rank,word,cosine"]
    for rep in reports:
        for rank, (word, c) in enumerate(rep.neighbors, start=1):
            lines.append(f"{rep.query},{rank},{word},{c:.3f}")
    return "\n".join(lines) + "\n"


@dataclass
class Hypothesis:
    ids: tuple  # word ids only, no BOS/EOS
    logprob: float


def beam_search(model: SequenceModel, context=None, width: int = 13,
                max_len: int | None = None, length_normalize: bool = False) -> list:
    """Length-bounded beam search from BOS; hypotheses complete on EOS.

    max_len bounds generated tokens including the closing EOS. Candidate
    tokens are the non-special words plus EOS (PAD/UNK/BOS are never
    proposed). Scores are total log probabilities, unnormalized unless
    length_normalize is set (which divides by token count for ranking).
    Only completed hypotheses are returned, sorted best-first; EOS is a
    live candidate from the very first step, so the pool is never empty.
    """
    if width < 1:
        raise ConfigError(f"beam width must be >= 1, got {width}")
    if max_len is None:
        max_len = model.config.unroll
    if max_len < 1:
        raise ConfigError(f"max_len must be >= 1, got {max_len}")
    ctx = None
    if context is not None:
        ctx = np.atleast_2d(np.asarray(context, dtype=model.dtype))
    state, gain = model.start_state(1, ctx)
    state, logp = model.advance(state, gain, BOS_ID)
    words = list(range(4, model.config.vocab))
    live = [((), 0.0, state, logp[0])]
    completed = []
    for step in range(1, max_len + 1):
        for ids, score, _, lp in live:
            completed.append(Hypothesis(ids, score + float(lp[EOS_ID])))
        if step == max_len:
            break
        extensions = []
        for ids, score, st, lp in live:
            for w in words:
                extensions.append((ids + (w,), score + float(lp[w]), st, w))
        extensions.sort(key=lambda e: (-e[1], e[0]))
        live = []
        for ids, score, st, w in extensions[:width]:
            new_state, lp = model.advance(st, gain, w)
            live.append((ids, score, new_state, lp[0]))
        if not live:
            break

    def rank_key(h: Hypothesis):
        score = h.logprob / max(len(h.ids) + 1, 1) if length_normalize else h.logprob
        return (-score, len(h.ids), h.ids)

    return sorted(completed, key=rank_key)


def render_samples_text(hypotheses, vocab: Vocabulary, label: str) -> str:
    lines = [label]
    for h in hypotheses:
        words = " ".join(vocab.word(i) for i in h.ids)
        lines.append(f"  {h.logprob:9.3f}  {words}")
    return "\n".join(lines) + "\n"
