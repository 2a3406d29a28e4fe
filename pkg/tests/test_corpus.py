"""Generator statistics, chunking, filtering, and JSONL round trips."""

import json

import numpy as np
import pytest

from prism.corpus import (
    AnnotatedExample,
    GeneratorConfig,
    N_SPECIAL,
    TOKEN_PERIOD,
    chunk,
    example_to_record,
    generate,
    key_token,
    n_filler,
    read_jsonl,
    stats_table,
    token_strings,
    verify_and_filter,
    write_jsonl,
)
from prism.errors import ConfigError, CorpusFormatError
from prism.fact_graph import (
    DependencyEdge,
    FactSpan,
    SentenceSpan,
    propagate_risk,
    segment_sentences,
)


def config(**overrides):
    base = dict(vocab_size=70, n_examples=50, n_keys=10, n_values=10,
                sentence_length=5, corruption_fraction=0.3, risk_min=0.5,
                risk_max=0.9, dependency_p=0.25, seed=13)
    base.update(overrides)
    return GeneratorConfig(**base)


class TestGenerate:
    def test_deterministic_under_seed(self):
        a = generate(config())
        b = generate(config())
        assert a == b

    def test_different_seed_differs(self):
        assert generate(config()) != generate(config(seed=14))

    def test_no_corruption_means_no_risk(self):
        examples = generate(config(corruption_fraction=0.0))
        for ex in examples:
            assert all(s.risk == 0.0 for s in ex.sentences)

    def test_corruption_fraction_shows_up_in_fact_spans(self):
        # ~30% of fact spans should sit in sentences with effective risk >= 0.5
        examples = generate(config(n_examples=1000, n_keys=20, n_values=20,
                                   corruption_fraction=0.3))
        risky = total = 0
        for ex in examples:
            graph = propagate_risk(ex.sentences, ex.edges)
            eff = {s.index: e for s, e in zip(graph.sentences, graph.effective_risk)}
            for f in ex.facts:
                total += 1
                risky += eff[f.sentence] >= 0.5
        assert total > 2000
        assert abs(risky / total - 0.3) < 0.05

    def test_annotations_all_pass_the_filter(self):
        report = verify_and_filter(generate(config(n_examples=200)))
        assert not report.rejected

    def test_token_texts_segment_back_to_sentence_spans(self):
        cfg = config()
        texts = token_strings(cfg)
        for ex in generate(cfg)[:20]:
            spans = segment_sentences([texts[t] for t in ex.target_tokens])
            assert [(s.token_start, s.token_end) for s in spans] == \
                   [(s.token_start, s.token_end) for s in ex.sentences]

    def test_dependency_edges_point_at_prior_mentions(self):
        examples = generate(config(n_examples=300, dependency_p=0.6))
        n_edges = 0
        for ex in examples:
            key_of = {}
            for f in ex.facts:
                key_of.setdefault(f.sentence, ex.target_tokens[f.token_start - 2])
            for e in ex.edges:
                n_edges += 1
                assert e.src < e.dst
                assert key_of[e.src] == key_of[e.dst]
        assert n_edges > 100

    def test_restatement_risk_arrives_by_propagation(self):
        # some restatements of corrupted facts carry raw risk 0 but inherit
        # effective risk through their edge
        examples = generate(config(n_examples=500, dependency_p=0.5))
        inherited = 0
        for ex in examples:
            graph = propagate_risk(ex.sentences, ex.edges)
            for s, eff in zip(graph.sentences, graph.effective_risk):
                if s.risk == 0.0 and eff >= 0.5:
                    inherited += 1
        assert inherited > 20

    def test_infeasible_density_rejected(self):
        with pytest.raises(ConfigError, match="density"):
            generate(config(facts_per_sentence=2, sentence_length=5))

    def test_vocab_too_small_rejected(self):
        with pytest.raises(ConfigError, match="vocab"):
            generate(config(vocab_size=20, n_keys=10, n_values=10))

    def test_planted_defects_are_rejected_by_filter(self):
        examples = generate(config(n_examples=40, plant_defects=6))
        assert len(examples) == 46
        report = verify_and_filter(examples)
        assert len(report.kept) == 40
        assert len(report.rejected) == 6
        assert report.reason_counts.get("self-edge", 0) == 2
        assert report.reason_counts.get("edge-not-forward", 0) == 2
        assert report.reason_counts.get("risk-range", 0) == 1
        assert report.reason_counts.get("fact-span-range", 0) == 1


def sentence_lengths_example(lengths):
    """One example whose sentences have the given token lengths."""
    target, sentences = [], []
    for j, n in enumerate(lengths, start=1):
        start = len(target)
        target.extend([N_SPECIAL] * (n - 1) + [TOKEN_PERIOD])
        sentences.append(SentenceSpan(j, start, len(target), risk=0.1 * j))
    return AnnotatedExample(
        input_tokens=[4], target_tokens=target, valid_mask=[1] * len(target),
        sentences=sentences, facts=[FactSpan(0, 1, 2, 1)], edges=[],
    )


class TestChunk:
    def test_greedy_sentence_packing(self):
        chunks = chunk(sentence_lengths_example([50, 60, 120]), limit=200)
        assert [len(c.example.target_tokens) for c in chunks] == [110, 120]
        assert not any(c.oversize for c in chunks)

    def test_single_oversize_sentence_flagged(self):
        chunks = chunk(sentence_lengths_example([250]), limit=200)
        assert len(chunks) == 1
        assert chunks[0].oversize

    def test_everything_fits_one_chunk(self):
        ex = sentence_lengths_example([30, 40])
        chunks = chunk(ex, limit=200)
        assert len(chunks) == 1
        assert chunks[0].example.target_tokens == ex.target_tokens

    def test_concatenation_reproduces_target(self):
        ex = sentence_lengths_example([7, 9, 4, 12, 3])
        chunks = chunk(ex, limit=10)
        joined = [t for c in chunks for t in c.example.target_tokens]
        assert joined == ex.target_tokens
        for c in chunks:
            for s in c.example.sentences:
                assert 0 <= s.token_start < s.token_end <= len(c.example.target_tokens)

    def test_never_splits_inside_sentence(self):
        ex = sentence_lengths_example([7, 9, 4, 12, 3])
        for c in chunk(ex, limit=10):
            spans = c.example.sentences
            assert spans[0].token_start == 0
            for a, b in zip(spans, spans[1:]):
                assert a.token_end == b.token_start

    def test_cross_chunk_edge_folds_into_raw_risk(self):
        # sentence 3 restates sentence 1's fact; when they land in different
        # chunks the dropped edge's source risk folds into sentence 3
        target = [5, 6, TOKEN_PERIOD] * 3
        sentences = [SentenceSpan(1, 0, 3, 0.8), SentenceSpan(2, 3, 6, 0.0),
                     SentenceSpan(3, 6, 9, 0.0)]
        ex = AnnotatedExample(
            input_tokens=[4], target_tokens=list(target), valid_mask=[1] * 9,
            sentences=sentences, facts=[], edges=[DependencyEdge(1, 3)],
        )
        whole = propagate_risk(ex.sentences, ex.edges).effective_risk
        chunks = chunk(ex, limit=6)
        assert [len(c.example.target_tokens) for c in chunks] == [6, 3]
        rebuilt = []
        for c in chunks:
            rebuilt.extend(propagate_risk(c.example.sentences, c.example.edges).effective_risk)
        assert rebuilt == list(whole)

    def test_generated_corpus_chunks_cleanly(self):
        for ex in generate(config(n_examples=30, sentences_min=3, sentences_max=4)):
            chunks = chunk(ex, limit=8)
            assert len(chunks) >= 2
            joined = [t for c in chunks for t in c.example.target_tokens]
            assert joined == ex.target_tokens
            assert not verify_and_filter([c.example for c in chunks]).rejected

    def test_limit_validated(self):
        with pytest.raises(ConfigError):
            chunk(sentence_lengths_example([3]), limit=0)


class TestVerifyAndFilter:
    def test_clean_input_all_kept(self):
        examples = generate(config(n_examples=20))
        report = verify_and_filter(examples)
        assert report.kept == examples
        assert not report.rejected
        assert report.reason_counts == {}

    def test_self_edge_reason(self):
        ex = generate(config(n_examples=1))[0]
        ex.edges.append(DependencyEdge(1, 1))
        report = verify_and_filter([ex])
        assert not report.kept
        assert report.rejected[0][1] == ["self-edge"]

    def test_idempotent(self):
        examples = generate(config(n_examples=30, plant_defects=4))
        first = verify_and_filter(examples)
        second = verify_and_filter(first.kept)
        assert second.kept == first.kept
        assert not second.rejected


class TestJsonl:
    def test_round_trip_identity(self, tmp_path):
        examples = generate(config(n_examples=40))
        path = str(tmp_path / "c.jsonl")
        write_jsonl(examples, path)
        assert read_jsonl(path) == examples

    def test_rewrite_is_byte_identical(self, tmp_path):
        examples = generate(config(n_examples=25))
        p1, p2 = str(tmp_path / "a.jsonl"), str(tmp_path / "b.jsonl")
        write_jsonl(examples, p1)
        write_jsonl(read_jsonl(p1), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_unknown_fields_preserved(self, tmp_path):
        record = example_to_record(generate(config(n_examples=1))[0])
        record["source"] = {"note": "kept"}
        path = tmp_path / "x.jsonl"
        path.write_text(json.dumps(record) + "\n")
        examples = read_jsonl(str(path))
        assert examples[0].extra == {"source": {"note": "kept"}}
        out = tmp_path / "y.jsonl"
        write_jsonl(examples, str(out))
        assert json.loads(out.read_text())["source"] == {"note": "kept"}

    def test_valid_mask_round_trips_when_partial(self, tmp_path):
        ex = generate(config(n_examples=1))[0]
        ex.valid_mask[0] = 0
        path = str(tmp_path / "v.jsonl")
        write_jsonl([ex], path)
        record = json.loads(open(path).read())
        assert record["valid"][0] == 0
        assert read_jsonl(path)[0].valid_mask == ex.valid_mask

    def test_empty_file_is_empty_corpus(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert read_jsonl(str(path)) == []

    def test_malformed_line_reports_line_number(self, tmp_path):
        good = json.dumps(example_to_record(generate(config(n_examples=1))[0]))
        path = tmp_path / "bad.jsonl"
        path.write_text(good + "\n{oops\n")
        with pytest.raises(CorpusFormatError, match="line 2") as err:
            read_jsonl(str(path))
        assert err.value.line_number == 2

    def test_risk_out_of_range_names_the_field(self, tmp_path):
        record = example_to_record(generate(config(n_examples=1))[0])
        record["sentences"][0]["risk"] = 1.7
        path = tmp_path / "risk.jsonl"
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(CorpusFormatError, match="'risk'"):
            read_jsonl(str(path))

    def test_missing_field_named(self, tmp_path):
        record = example_to_record(generate(config(n_examples=1))[0])
        del record["target"]
        path = tmp_path / "miss.jsonl"
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(CorpusFormatError, match="'target'"):
            read_jsonl(str(path))

    def test_write_is_atomic(self, tmp_path):
        path = tmp_path / "atomic.jsonl"
        write_jsonl(generate(config(n_examples=3)), str(path))
        assert path.exists()
        assert not (tmp_path / "atomic.jsonl.tmp").exists()


class TestStatsTable:
    def test_row_values(self):
        examples = generate(config(n_examples=30))
        table = stats_table(examples)
        lines = table.splitlines()
        assert len(lines) == 5
        assert lines[0].startswith("verified instances retained")
        assert lines[0].rstrip().endswith("30")
        n_facts = sum(len(ex.facts) for ex in examples)
        assert lines[1].rstrip().endswith(str(n_facts))
