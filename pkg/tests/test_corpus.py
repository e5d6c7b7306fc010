import json

import numpy as np
import pytest

from pblab.corpus import (
    CorpusSpec,
    Example,
    Vocab,
    generate_corpus,
    ground_truth_category,
    load_jsonl,
    load_vocab,
    save_jsonl,
    save_vocab,
)


def spec_223(**kw):
    base = dict(n_languages=2, n_classes=3, n_min=10, n_max=10, p_signal=0.3, p_noise=0.1,
                fillers_per_language=20, signals_per_language_class=5, seed=11)
    base.update(kw)
    return CorpusSpec(**base)


def test_degenerate_rates_all_signal():
    spec = spec_223(n_classes=2, p_signal=1.0, p_noise=0.0)
    vocab, examples = generate_corpus(spec, 30)
    for ex in examples:
        sig = vocab.signal_sets[ex.language][ex.label]
        assert all(t in sig for t in ex.tokens)


def test_per_cell_counts_and_category_frequencies():
    spec = spec_223()
    vocab, examples = generate_corpus(spec, 200)
    assert len(examples) == 2 * 3 * 200
    counts = {}
    for ex in examples:
        counts[(ex.language, ex.label)] = counts.get((ex.language, ex.label), 0) + 1
    assert all(c == 200 for c in counts.values())

    # Per-position category frequencies within 3-sigma binomial bounds.
    tallies = {"signal_pos": 0, "signal_other": 0, "filler": 0}
    total = 0
    for ex in examples:
        for t in ex.tokens:
            tallies[ground_truth_category(vocab, t, ex.language, ex.label)] += 1
            total += 1
    assert total >= 10_000
    for cat, p in (("signal_pos", 0.3), ("signal_other", 0.1), ("filler", 0.6)):
        bound = 3.0 * np.sqrt(p * (1 - p) / total)
        assert abs(tallies[cat] / total - p) <= bound, cat


def test_generation_deterministic():
    spec = spec_223()
    _, a = generate_corpus(spec, 50)
    _, b = generate_corpus(spec, 50)
    assert a == b


def test_spec_validation_errors():
    with pytest.raises(ValueError):
        spec_223(n_languages=1).validate()
    with pytest.raises(ValueError):
        spec_223(p_signal=0.0).validate()
    with pytest.raises(ValueError):
        spec_223(p_signal=0.7, p_noise=0.4).validate()
    # filler set would be empty while fillers can be drawn
    with pytest.raises(ValueError):
        spec_223(fillers_per_language=0).validate()
    with pytest.raises(ValueError):
        spec_223(signals_per_language_class=0).validate()
    # no filler draws possible: empty filler set is fine
    spec_223(p_signal=0.9, p_noise=0.1, fillers_per_language=0).validate()


def test_vocab_disjointness_after_generation():
    vocab, _ = generate_corpus(spec_223(), 5)
    vocab.validate()
    all_sets = list(vocab.filler_sets) + [s for per in vocab.signal_sets for s in per]
    seen = set()
    for s in all_sets:
        assert not (seen & s)
        seen |= s
    assert vocab.mask_id not in seen
    assert all(t < vocab.size for t in seen)


def test_ground_truth_categories():
    vocab, _ = generate_corpus(spec_223(), 1)
    sig00 = next(iter(vocab.signal_sets[0][0]))
    sig01 = next(iter(vocab.signal_sets[0][1]))
    fill0 = next(iter(vocab.filler_sets[0]))
    fill1 = next(iter(vocab.filler_sets[1]))
    assert ground_truth_category(vocab, sig00, 0, 0) == "signal_pos"
    assert ground_truth_category(vocab, sig01, 0, 0) == "signal_other"
    assert ground_truth_category(vocab, fill0, 0, 0) == "filler"
    assert ground_truth_category(vocab, fill1, 0, 0) == "foreign"
    assert ground_truth_category(vocab, sig00, 1, 0) == "foreign"
    with pytest.raises(ValueError):
        ground_truth_category(vocab, vocab.mask_id, 0, 0)


def test_jsonl_round_trip_exact(tmp_path):
    vocab, examples = generate_corpus(spec_223(), 20)
    save_jsonl(examples, vocab, tmp_path / "c.jsonl")
    save_vocab(vocab, tmp_path / "v.json")
    vocab2 = load_vocab(tmp_path / "v.json")
    assert vocab2 == vocab
    loaded_vocab, loaded = load_jsonl(tmp_path / "c.jsonl", vocab2)
    assert loaded == examples
    assert loaded_vocab.content_hash() == vocab.content_hash()


def test_load_fresh_vocab_first_seen_order(tmp_path):
    lines = [
        {"id": "a", "lang": "fr", "label": "x", "tokens": ["t1", "t2"]},
        {"id": "b", "lang": "en", "label": "y", "tokens": ["t2", "t3"]},
        {"id": "c", "lang": "fr", "label": "x", "text": "t3 t4"},
    ]
    path = tmp_path / "d.jsonl"
    path.write_text("\n".join(json.dumps(r) for r in lines) + "\n")
    vocab, examples = load_jsonl(path)
    assert len(examples) == 3
    assert vocab.token_strings == ("t1", "t2", "t3", "t4")
    assert vocab.mask_id == 4
    assert vocab.lang_names == ("fr", "en")
    assert vocab.label_names == ("x", "y")
    assert examples[2].tokens == (2, 3)
    assert not vocab.has_ground_truth
    vocab.validate()


def test_load_errors_name_line_and_id(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "a", "lang": "fr", "label": "x", "tokens": ["t"]}\n'
                    '{"id": "b", "lang": "fr", "tokens": ["t"]}\n')
    with pytest.raises(ValueError, match="line 2.*label"):
        load_jsonl(path)

    path.write_text('{"id": "a", "lang": "fr", "label": "x", "tokens": ["t"]}\n'
                    '{"id": "a", "lang": "en", "label": "y", "tokens": ["u"]}\n')
    with pytest.raises(ValueError, match="duplicate id 'a'"):
        load_jsonl(path)


def test_load_ignores_unknown_fields(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text('{"id": "a", "lang": "fr", "label": "x", "tokens": ["t"], "extra": 42}\n')
    _, examples = load_jsonl(path)
    assert len(examples) == 1


def test_load_with_vocab_rejects_unknown_token(tmp_path):
    vocab, examples = generate_corpus(spec_223(), 2)
    path = tmp_path / "d.jsonl"
    path.write_text('{"id": "z", "lang": "L0", "label": "0", "tokens": ["nope"]}\n')
    with pytest.raises(ValueError, match="unknown token 'nope'"):
        load_jsonl(path, vocab)


def test_example_invariants():
    vocab, _ = generate_corpus(spec_223(), 1)
    with pytest.raises(ValueError, match="mask"):
        Example(id="x", language=0, label=0, tokens=(vocab.mask_id,)).validate(vocab)
    with pytest.raises(ValueError, match="empty"):
        Example(id="x", language=0, label=0, tokens=()).validate(vocab)
