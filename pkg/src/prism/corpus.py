"""Synthetic annotated corpora with planted facts, risks, and dependencies.

The generator writes tiny question/answer pairs over a closed vocabulary:
each target sentence states one or more key/value facts ("k3 is v7 .").
A seeded fraction of the keys is corrupted - every occurrence states the
same wrong value and the sentence carries a high risk score - which is
exactly the kind of consistently unsupported target an overconfident model
learns to reproduce.  Sentences that restate an earlier sentence's key get
a dependency edge to each prior mention, so their risk arrives purely
through propagation.

Also holds the JSONL schema for annotated examples:

    {"input": [...], "target": [...],
     "sentences": [{"start", "end", "risk"}, ...],
     "facts": [{"id", "start", "end", "sentence"}, ...],
     "edges": [{"from", "to"}, ...]}

One record per line, UTF-8, LF.  An optional "valid" field (0/1 list over
target positions) is honoured when present; unknown fields are preserved
across a read/write round trip.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, CorpusFormatError
from .fact_graph import (
    DependencyEdge,
    FactSpan,
    SentenceSpan,
    annotation_violations,
)

# Fixed special token ids; keys, values, and filler follow in that order.
TOKEN_BOS = 0
TOKEN_PERIOD = 1
TOKEN_REL = 2
TOKEN_QMARK = 3
TOKEN_QUERY = 4
N_SPECIAL = 5

# Tokens per fact statement: key, relation, value.
_FACT_TOKENS = 3


@dataclass
class AnnotatedExample:
    """A tokenized instruction/response pair with factual-risk annotations.

    Spans, masks, and edges index into target_tokens only; the input is
    context and never carries annotations.
    """

    input_tokens: list[int]
    target_tokens: list[int]
    valid_mask: list[int]
    sentences: list[SentenceSpan]
    facts: list[FactSpan]
    edges: list[DependencyEdge]
    extra: dict = field(default_factory=dict)


@dataclass
class GeneratorConfig:
    vocab_size: int = 64
    n_examples: int = 500
    n_keys: int = 12
    n_values: int = 12
    facts_per_sentence: int = 1
    sentence_length: int = 4      # tokens per sentence incl. terminal period
    sentences_min: int = 2
    sentences_max: int = 4
    corruption_fraction: float = 0.25
    risk_min: float = 0.6
    risk_max: float = 0.95
    dependency_p: float = 0.25
    chunk_limit: int = 200
    plant_defects: int = 0
    seed: int = 0
    out: str = "corpus.jsonl"

    def validate(self) -> None:
        if self.n_examples < 1:
            raise ConfigError("n_examples must be >= 1")
        if self.n_keys < 1 or self.n_values < 1:
            raise ConfigError("n_keys and n_values must be >= 1")
        if self.corruption_fraction > 0 and self.n_values < 2:
            raise ConfigError("corruption needs at least two distinct values")
        if self.facts_per_sentence < 1:
            raise ConfigError("facts_per_sentence must be >= 1")
        if _FACT_TOKENS * self.facts_per_sentence + 1 > self.sentence_length:
            raise ConfigError(
                f"fact density {self.facts_per_sentence} exceeds sentence length "
                f"{self.sentence_length} (needs {_FACT_TOKENS * self.facts_per_sentence + 1} tokens)"
            )
        if not 1 <= self.sentences_min <= self.sentences_max:
            raise ConfigError("need 1 <= sentences_min <= sentences_max")
        for name in ("corruption_fraction", "dependency_p", "risk_min", "risk_max"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {p}")
        if self.risk_min > self.risk_max:
            raise ConfigError("risk_min must not exceed risk_max")
        if self.chunk_limit < 1:
            raise ConfigError("chunk_limit must be >= 1")
        if self.plant_defects < 0:
            raise ConfigError("plant_defects must be >= 0")
        if self.plant_defects > 0 and self.sentences_min < 2:
            raise ConfigError("defect planting needs sentences_min >= 2")
        needed = N_SPECIAL + self.n_keys + self.n_values
        fillers = self.sentence_length - (_FACT_TOKENS * self.facts_per_sentence + 1)
        if fillers > 0:
            needed += 1
        if self.vocab_size < needed:
            raise ConfigError(
                f"vocab_size {self.vocab_size} too small for {self.n_keys} keys, "
                f"{self.n_values} values, and specials (need >= {needed})"
            )


def key_token(config: GeneratorConfig, k: int) -> int:
    return N_SPECIAL + k


def value_token(config: GeneratorConfig, v: int) -> int:
    return N_SPECIAL + config.n_keys + v


def filler_token(config: GeneratorConfig, i: int) -> int:
    return N_SPECIAL + config.n_keys + config.n_values + i


def n_filler(config: GeneratorConfig) -> int:
    return config.vocab_size - N_SPECIAL - config.n_keys - config.n_values


def token_strings(config: GeneratorConfig) -> list[str]:
    """The generator's fixed id -> text bijection."""
    texts = ["<bos>", ".", "is", "?", "q"]
    texts += [f"k{i}" for i in range(config.n_keys)]
    texts += [f"v{i}" for i in range(config.n_values)]
    texts += [f"w{i}" for i in range(n_filler(config))]
    return texts


def generate(config: GeneratorConfig) -> list[AnnotatedExample]:
    """Deterministically generate an annotated corpus from the config seed.

    Corrupted keys always state one fixed wrong value, so a plain
    likelihood-trained model becomes confidently wrong exactly where the
    risk labels say it should not.

    Non-fact tokens are all predictable from their context window: the first
    stated key is named in the input, every later fresh statement uses the
    successor key ((previous + 1) mod n_keys), and when sentences are longer
    than their fact statements the first padding slot echoes the most recent
    key as a filler token (remaining padding is random filler).  Capability
    metrics therefore have a real ceiling instead of a noise floor.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)

    true_value = rng.integers(0, config.n_values, size=config.n_keys)
    n_corrupt = int(round(config.corruption_fraction * config.n_keys))
    corrupt_keys = set(rng.permutation(config.n_keys)[:n_corrupt].tolist())
    stated_value = true_value.copy()
    for k in sorted(corrupt_keys):
        wrong = int(rng.integers(0, config.n_values - 1))
        if wrong >= true_value[k]:
            wrong += 1
        stated_value[k] = wrong

    fillers = n_filler(config)
    pad = config.sentence_length - (_FACT_TOKENS * config.facts_per_sentence + 1)
    examples = []
    for _ in range(config.n_examples):
        n_sent = int(rng.integers(config.sentences_min, config.sentences_max + 1))
        target: list[int] = []
        sentences: list[SentenceSpan] = []
        facts: list[FactSpan] = []
        edges: list[DependencyEdge] = []
        mentions: list[tuple[int, int]] = []  # (sentence id, key)
        first_key = int(rng.integers(0, config.n_keys))
        prev_key: int | None = None
        for j in range(1, n_sent + 1):
            start = len(target)
            for i in range(pad):
                if i == 0:
                    echo = prev_key if prev_key is not None else first_key
                    target.append(filler_token(config, echo % fillers))
                else:
                    target.append(filler_token(config, int(rng.integers(0, fillers))))
            risk = 0.0
            incoming: set[int] = set()
            for _slot in range(config.facts_per_sentence):
                prior = [(jj, kk) for jj, kk in mentions if jj < j]
                if prior and rng.random() < config.dependency_p:
                    _, key = prior[int(rng.integers(0, len(prior)))]
                    incoming.update(jj for jj, kk in prior if kk == key)
                else:
                    key = first_key if prev_key is None else (prev_key + 1) % config.n_keys
                    if key in corrupt_keys:
                        risk = max(risk, float(rng.uniform(config.risk_min, config.risk_max)))
                target.append(key_token(config, key))
                target.append(TOKEN_REL)
                facts.append(
                    FactSpan(fact_id=len(facts), token_start=len(target), token_end=len(target) + 1, sentence=j)
                )
                target.append(value_token(config, int(stated_value[key])))
                mentions.append((j, key))
                prev_key = key
            target.append(TOKEN_PERIOD)
            sentences.append(SentenceSpan(index=j, token_start=start, token_end=len(target), risk=risk))
            edges.extend(DependencyEdge(src, j) for src in sorted(incoming))

        input_tokens = [TOKEN_QUERY, key_token(config, first_key), TOKEN_QMARK]
        examples.append(
            AnnotatedExample(
                input_tokens=input_tokens,
                target_tokens=target,
                valid_mask=[1] * len(target),
                sentences=sentences,
                facts=facts,
                edges=edges,
            )
        )

    for i in range(config.plant_defects):
        examples.append(_plant_defect(examples[i % config.n_examples], kind=i % 4))
    return examples


def _plant_defect(base: AnnotatedExample, kind: int) -> AnnotatedExample:
    """A structurally broken clone of `base`; verify_and_filter must drop it."""
    ex = AnnotatedExample(
        input_tokens=list(base.input_tokens),
        target_tokens=list(base.target_tokens),
        valid_mask=list(base.valid_mask),
        sentences=list(base.sentences),
        facts=list(base.facts),
        edges=list(base.edges),
    )
    if kind == 0:
        ex.edges.append(DependencyEdge(1, 1))
    elif kind == 1:
        ex.edges.append(DependencyEdge(2, 1))
    elif kind == 2:
        ex.sentences[0] = replace(ex.sentences[0], risk=1.5)
    else:
        t = len(ex.target_tokens)
        ex.facts.append(FactSpan(fact_id=len(ex.facts), token_start=t, token_end=t + 1, sentence=1))
    return ex


@dataclass
class Chunk:
    """A sentence-aligned slice of an example; oversize means one indivisible
    sentence region exceeded the limit and became its own chunk."""

    example: AnnotatedExample
    oversize: bool


def chunk(example: AnnotatedExample, limit: int) -> list[Chunk]:
    """Split an example on sentence boundaries into chunks of at most `limit`
    target tokens (greedy packing).

    Tokens between or after sentences travel with the preceding sentence;
    concatenating the chunk targets reproduces the original target exactly.
    Dependency edges whose source lands in an earlier chunk are folded into
    the dependent sentence's raw risk (max with the source's raw risk), which
    preserves one-hop effective risks.  Each chunk repeats the input tokens.
    """
    if limit < 1:
        raise ConfigError("chunk limit must be >= 1")
    t_len = len(example.target_tokens)
    if not example.sentences:
        return [Chunk(example=example, oversize=t_len > limit)]

    # Region i: sentence i plus any following gap tokens (leading gap joins region 0).
    starts = [0] + [s.token_start for s in example.sentences[1:]]
    ends = starts[1:] + [t_len]

    groups: list[list[int]] = []
    current: list[int] = []
    used = 0
    for i, (a, b) in enumerate(zip(starts, ends)):
        size = b - a
        if current and used + size > limit:
            groups.append(current)
            current, used = [], 0
        current.append(i)
        used += size
    if current:
        groups.append(current)

    raw_risk = {s.index: s.risk for s in example.sentences}
    chunks = []
    for group in groups:
        lo, hi = starts[group[0]], ends[group[-1]]
        inside = {example.sentences[i].index for i in group}
        renumber = {example.sentences[i].index: new + 1 for new, i in enumerate(group)}
        sentences = []
        for i in group:
            s = example.sentences[i]
            risk = s.risk
            for e in example.edges:
                if e.dst == s.index and e.src not in inside:
                    risk = max(risk, raw_risk[e.src])
            sentences.append(
                SentenceSpan(
                    index=renumber[s.index],
                    token_start=s.token_start - lo,
                    token_end=s.token_end - lo,
                    risk=risk,
                )
            )
        facts = [
            replace(f, token_start=f.token_start - lo, token_end=f.token_end - lo, sentence=renumber[f.sentence])
            for f in example.facts
            if f.sentence in inside
        ]
        edges = [
            DependencyEdge(renumber[e.src], renumber[e.dst])
            for e in example.edges
            if e.src in inside and e.dst in inside
        ]
        chunks.append(
            Chunk(
                example=AnnotatedExample(
                    input_tokens=list(example.input_tokens),
                    target_tokens=example.target_tokens[lo:hi],
                    valid_mask=example.valid_mask[lo:hi],
                    sentences=sentences,
                    facts=facts,
                    edges=edges,
                    extra=dict(example.extra),
                ),
                oversize=hi - lo > limit,
            )
        )
    return chunks


@dataclass
class FilterReport:
    kept: list[AnnotatedExample]
    rejected: list[tuple[AnnotatedExample, list[str]]]
    reason_counts: dict[str, int]


def verify_and_filter(examples: Sequence[AnnotatedExample]) -> FilterReport:
    """Drop examples violating any annotation invariant; keep the rest.

    Filtering never raises; each rejected example carries its reason tags.
    """
    kept: list[AnnotatedExample] = []
    rejected: list[tuple[AnnotatedExample, list[str]]] = []
    counts: dict[str, int] = {}
    for ex in examples:
        reasons = annotation_violations(
            ex.sentences, ex.facts, ex.edges, len(ex.target_tokens), ex.valid_mask
        )
        if reasons:
            rejected.append((ex, reasons))
            for r in reasons:
                counts[r] = counts.get(r, 0) + 1
        else:
            kept.append(ex)
    return FilterReport(kept=kept, rejected=rejected, reason_counts=counts)


def _require(condition: bool, message: str, lineno: int | None) -> None:
    if not condition:
        raise CorpusFormatError(message, lineno)


def _token_list(obj: object, name: str, lineno: int | None) -> list[int]:
    _require(isinstance(obj, list), f"field {name!r} must be a list", lineno)
    out = []
    for tok in obj:  # type: ignore[union-attr]
        _require(isinstance(tok, int) and not isinstance(tok, bool) and tok >= 0,
                 f"field {name!r} must contain nonnegative token ids", lineno)
        out.append(tok)
    return out


def example_from_record(record: dict, lineno: int | None = None) -> AnnotatedExample:
    """Decode one JSONL record, checking field presence, types, and ranges."""
    _require(isinstance(record, dict), "record must be a JSON object", lineno)
    for name in ("input", "target", "sentences", "facts", "edges"):
        _require(name in record, f"missing field {name!r}", lineno)

    input_tokens = _token_list(record["input"], "input", lineno)
    target_tokens = _token_list(record["target"], "target", lineno)

    sentences = []
    for i, s in enumerate(record["sentences"]):
        _require(isinstance(s, dict), "field 'sentences' must contain objects", lineno)
        for key in ("start", "end", "risk"):
            _require(key in s, f"sentence missing field {key!r}", lineno)
        _require(isinstance(s["start"], int) and isinstance(s["end"], int),
                 "sentence fields 'start'/'end' must be integers", lineno)
        risk = s["risk"]
        _require(isinstance(risk, (int, float)) and not isinstance(risk, bool),
                 "field 'risk' must be a number", lineno)
        _require(0.0 <= risk <= 1.0, f"field 'risk' out of range [0, 1]: {risk}", lineno)
        sentences.append(SentenceSpan(index=i + 1, token_start=s["start"], token_end=s["end"], risk=float(risk)))

    facts = []
    for f in record["facts"]:
        _require(isinstance(f, dict), "field 'facts' must contain objects", lineno)
        for key in ("id", "start", "end", "sentence"):
            _require(key in f, f"fact missing field {key!r}", lineno)
        _require(isinstance(f["start"], int) and isinstance(f["end"], int) and isinstance(f["sentence"], int),
                 "fact fields 'start'/'end'/'sentence' must be integers", lineno)
        facts.append(FactSpan(fact_id=f["id"], token_start=f["start"], token_end=f["end"], sentence=f["sentence"]))

    edges = []
    for e in record["edges"]:
        _require(isinstance(e, dict), "field 'edges' must contain objects", lineno)
        for key in ("from", "to"):
            _require(key in e and isinstance(e[key], int), f"edge field {key!r} must be an integer", lineno)
        edges.append(DependencyEdge(src=e["from"], dst=e["to"]))

    if "valid" in record:
        valid = record["valid"]
        _require(isinstance(valid, list) and all(v in (0, 1) for v in valid),
                 "field 'valid' must be a list of 0/1", lineno)
        _require(len(valid) == len(target_tokens), "field 'valid' length must match 'target'", lineno)
        valid_mask = [int(v) for v in valid]
    else:
        valid_mask = [1] * len(target_tokens)

    known = {"input", "target", "sentences", "facts", "edges", "valid"}
    extra = {k: v for k, v in record.items() if k not in known}
    return AnnotatedExample(
        input_tokens=input_tokens,
        target_tokens=target_tokens,
        valid_mask=valid_mask,
        sentences=sentences,
        facts=facts,
        edges=edges,
        extra=extra,
    )


def example_to_record(example: AnnotatedExample) -> dict:
    record: dict = {
        "input": list(example.input_tokens),
        "target": list(example.target_tokens),
        "sentences": [
            {"start": s.token_start, "end": s.token_end, "risk": s.risk} for s in example.sentences
        ],
        "facts": [
            {"id": f.fact_id, "start": f.token_start, "end": f.token_end, "sentence": f.sentence}
            for f in example.facts
        ],
        "edges": [{"from": e.src, "to": e.dst} for e in example.edges],
    }
    if any(v == 0 for v in example.valid_mask):
        record["valid"] = list(example.valid_mask)
    record.update(example.extra)
    return record


def read_jsonl(path: str) -> list[AnnotatedExample]:
    """Read an annotated corpus; empty files yield an empty corpus.

    Malformed JSON or schema violations raise CorpusFormatError with the
    line number and offending field.
    """
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"invalid JSON: {exc.msg}", lineno) from exc
            examples.append(example_from_record(record, lineno))
    return examples


def write_jsonl(examples: Sequence[AnnotatedExample], path: str) -> None:
    """Write a corpus atomically (temp file, then rename), one record per line."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_record(ex)))
            fh.write("\n")
    os.replace(tmp, path)


def stats_table(examples: Sequence[AnnotatedExample]) -> str:
    """Plain-text summary of corpus size and annotation density."""
    n_facts = sum(len(ex.facts) for ex in examples)
    n_edges = sum(len(ex.edges) for ex in examples)
    n_sentences = sum(len(ex.sentences) for ex in examples)
    rows = [
        ("verified instances retained", len(examples)),
        ("fact items", n_facts),
        ("fact relations (dependency edges)", n_edges),
        ("span annotations (sentence + fact spans)", n_sentences + n_facts),
        ("chunks with at least one fact item", sum(1 for ex in examples if ex.facts)),
    ]
    label_width = max(len(label) for label, _ in rows)
    count_width = max(len(str(count)) for _, count in rows)
    lines = [f"{label:<{label_width}}  {count:>{count_width}}" for label, count in rows]
    return "\n".join(lines)
