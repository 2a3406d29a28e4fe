"""Sentence-level risk annotations and the per-token signals derived from them.

A target response is segmented into sentences, each carrying a factuality-risk
score in [0, 1] and optional dependency edges pointing back at earlier
sentences whose content it relies on.  A sentence's effective risk is the max
of its own raw risk and the raw risks of its immediate predecessors; the
per-token support weight is one minus the effective risk of the enclosing
sentence.  Token positions covered by fact-aligned spans additionally get a
binary fact-active mask.

All operations here are pure functions; returned containers are immutable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import AnnotationError

# Token texts ending with any of these close a sentence.
SENTENCE_TERMINALS = (".", "!", "?", "\n")

RISK_ONEHOP = "onehop"
RISK_FIXPOINT = "fixpoint"
RISK_MODES = (RISK_ONEHOP, RISK_FIXPOINT)


@dataclass(frozen=True)
class SentenceSpan:
    """One sentence of the target, as a half-open token range with a risk score."""

    index: int        # 1-based sentence id
    token_start: int  # inclusive
    token_end: int    # exclusive
    risk: float = 0.0


@dataclass(frozen=True)
class FactSpan:
    """A token span marking one atomic factual commitment inside a sentence."""

    fact_id: int
    token_start: int
    token_end: int
    sentence: int  # owning sentence id


@dataclass(frozen=True)
class DependencyEdge:
    """Sentence `dst` relies on factual content introduced in sentence `src`.

    Serialized as {"from": src, "to": dst}; `src < dst` always.
    """

    src: int
    dst: int


@dataclass(frozen=True)
class RiskGraph:
    """Sentences plus dependency edges, with effective risks filled in."""

    sentences: tuple[SentenceSpan, ...]
    edges: tuple[DependencyEdge, ...]
    effective_risk: tuple[float, ...]


@dataclass(frozen=True)
class TokenSignals:
    """Per-token training signals: fact-active mask, support weight, valid mask.

    fact_mask is a subset of valid_mask by construction; support_weight is
    1 - effective_risk of the enclosing sentence, and exactly 1.0 for tokens
    outside every sentence.
    """

    fact_mask: np.ndarray       # bool [T]
    support_weight: np.ndarray  # float64 [T]
    valid_mask: np.ndarray      # bool [T]

    def __len__(self) -> int:
        return len(self.valid_mask)


def propagate_risk(
    sentences: Sequence[SentenceSpan],
    edges: Sequence[DependencyEdge],
    mode: str = RISK_ONEHOP,
) -> RiskGraph:
    """Compute effective risks: each sentence takes the max of its own raw risk
    and the raw risks of its immediate predecessors.

    mode="fixpoint" propagates transitively instead (predecessors contribute
    their effective risk); since edges always point forward, a single pass in
    sentence-id order reaches the fixpoint.
    """
    if mode not in RISK_MODES:
        raise ValueError(f"unknown risk propagation mode: {mode!r}")
    by_id = {s.index: i for i, s in enumerate(sentences)}
    if len(by_id) != len(sentences):
        raise AnnotationError("duplicate sentence ids")
    for s in sentences:
        if not 0.0 <= s.risk <= 1.0:
            raise AnnotationError(f"sentence {s.index} risk {s.risk} outside [0, 1]")
    for e in edges:
        if e.src not in by_id or e.dst not in by_id:
            raise AnnotationError(f"edge {e.src}->{e.dst} references an unknown sentence id")
        if e.src >= e.dst:
            raise AnnotationError(f"edge {e.src}->{e.dst} must point from an earlier to a later sentence")

    raw = [s.risk for s in sentences]
    eff = list(raw)
    source = eff if mode == RISK_FIXPOINT else raw
    for i in sorted(range(len(sentences)), key=lambda i: sentences[i].index):
        sid = sentences[i].index
        incoming = [source[by_id[e.src]] for e in edges if e.dst == sid]
        if incoming:
            eff[i] = max(eff[i], max(incoming))
    return RiskGraph(tuple(sentences), tuple(edges), tuple(eff))


def derive_token_signals(
    graph: RiskGraph,
    facts: Sequence[FactSpan],
    valid: Sequence[int] | np.ndarray,
    length: int,
) -> TokenSignals:
    """Turn a risk graph plus fact spans into per-token signals of the given length.

    The fact mask is the union of all fact spans intersected with the valid
    mask; overlapping fact spans collapse into one.  Tokens outside every
    sentence get support weight 1 and no fact mask.
    """
    valid_mask = np.asarray(valid, dtype=bool)
    if valid_mask.shape != (length,):
        raise AnnotationError(f"valid mask has shape {valid_mask.shape}, expected ({length},)")

    support = np.ones(length, dtype=np.float64)
    for s, eff in zip(graph.sentences, graph.effective_risk):
        if not (0 <= s.token_start < s.token_end <= length):
            raise AnnotationError(
                f"sentence {s.index} span [{s.token_start}, {s.token_end}) outside [0, {length})"
            )
        support[s.token_start:s.token_end] = 1.0 - eff

    spans = {s.index: s for s in graph.sentences}
    in_fact = np.zeros(length, dtype=bool)
    for f in facts:
        owner = spans.get(f.sentence)
        if owner is None:
            raise AnnotationError(f"fact {f.fact_id} references unknown sentence {f.sentence}")
        if not (0 <= f.token_start < f.token_end <= length):
            raise AnnotationError(
                f"fact {f.fact_id} span [{f.token_start}, {f.token_end}) outside [0, {length})"
            )
        if f.token_start < owner.token_start or f.token_end > owner.token_end:
            raise AnnotationError(f"fact {f.fact_id} extends outside sentence {f.sentence}")
        in_fact[f.token_start:f.token_end] = True

    fact_mask = in_fact & valid_mask
    for arr in (fact_mask, support, valid_mask):
        arr.setflags(write=False)
    return TokenSignals(fact_mask=fact_mask, support_weight=support, valid_mask=valid_mask)


def sentence_ids(sentences: Iterable[SentenceSpan], length: int) -> np.ndarray:
    """Sentence id per token position; -1 for tokens outside every sentence."""
    sid = np.full(length, -1, dtype=np.int64)
    for s in sentences:
        sid[s.token_start:s.token_end] = s.index
    return sid


def segment_sentences(token_texts: Sequence[str]) -> list[SentenceSpan]:
    """Partition a token sequence into sentences by terminal punctuation.

    A boundary falls after every token whose text ends with '.', '!', '?',
    or a newline; a trailing partial sentence is closed at the end.  Risks
    are left at 0.0 for the caller to fill in.
    """
    if not token_texts:
        raise ValueError("cannot segment an empty token sequence")
    spans: list[SentenceSpan] = []
    start = 0
    for i, text in enumerate(token_texts):
        if text.endswith(SENTENCE_TERMINALS):
            spans.append(SentenceSpan(index=len(spans) + 1, token_start=start, token_end=i + 1))
            start = i + 1
    if start < len(token_texts):
        spans.append(SentenceSpan(index=len(spans) + 1, token_start=start, token_end=len(token_texts)))
    return spans


def annotation_violations(
    sentences: Sequence[SentenceSpan],
    facts: Sequence[FactSpan],
    edges: Sequence[DependencyEdge],
    length: int,
    valid: Sequence[int] | None = None,
) -> list[str]:
    """All data-contract violations in one annotation set, as stable reason tags.

    Used by corpus filtering; an empty list means the example is clean.
    """
    reasons: list[str] = []

    def add(reason: str) -> None:
        if reason not in reasons:
            reasons.append(reason)

    prev_end = 0
    for pos, s in enumerate(sentences):
        if s.index != pos + 1:
            add("sentence-index")
        if not (0 <= s.token_start < s.token_end <= length):
            add("sentence-span-range")
        elif s.token_start < prev_end:
            add("sentence-span-order")
        prev_end = max(prev_end, s.token_end)
        if not 0.0 <= s.risk <= 1.0:
            add("risk-range")

    ids = {s.index for s in sentences}
    span_by_id = {s.index: s for s in sentences}
    seen: set[tuple[int, int]] = set()
    for e in edges:
        if e.src == e.dst:
            add("self-edge")
        elif e.src > e.dst:
            add("edge-not-forward")
        if e.src not in ids or e.dst not in ids:
            add("edge-unknown-sentence")
        if (e.src, e.dst) in seen:
            add("duplicate-edge")
        seen.add((e.src, e.dst))

    for f in facts:
        if not (0 <= f.token_start < f.token_end <= length):
            add("fact-span-range")
            continue
        owner = span_by_id.get(f.sentence)
        if owner is None:
            add("fact-unknown-sentence")
        elif f.token_start < owner.token_start or f.token_end > owner.token_end:
            add("fact-outside-sentence")

    if valid is not None and len(valid) != length:
        add("valid-mask-length")
    return reasons
