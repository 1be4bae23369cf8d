import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spandistill.corpus import (
    ENTITY_POOL,
    PAD_INDEX,
    UNK_INDEX,
    VALUE_POOLS,
    Example,
    SynthSpec,
    Vocabulary,
    append_adversarial,
    corpus_hash,
    generate_synthetic,
    load_squad_json,
    tokenize,
    truncate_for_training,
    validate_examples,
    write_squad_json,
)
from spandistill.errors import ConfigError, DataError
from spandistill.evalspan import normalize_answer


# -- tokenizer ----------------------------------------------------------------


@pytest.mark.parametrize("text,expected", [
    ("It's 56.2%.", ["It's", "56.2%", "."]),
    ('"Hello," she said.', ['"', "Hello", ",", '"', "she", "said", "."]),
    ("What is Alice's age?", ["What", "is", "Alice's", "age", "?"]),
    ("(a.b)", ["(", "a.b", ")"]),
    ("...", [".", ".", "."]),
    ("", []),
    ("  spaced   out  ", ["spaced", "out"]),
], ids=["percent", "quotes", "question", "parens", "dots", "empty", "spaces"])
def test_tokenize_goldens(text, expected):
    tokens, offsets = tokenize(text)
    assert tokens == expected
    assert len(offsets) == len(tokens)


def test_tokenize_offsets_are_lossless():
    text = "Bruno's score is 142. \"Really,\" he said!"
    tokens, offsets = tokenize(text)
    for tok, (b, e) in zip(tokens, offsets):
        assert text[b:e] == tok


@given(st.text(alphabet="ab c.,'()!?%0", max_size=60))
@settings(max_examples=100, deadline=None)
def test_tokenize_offsets_property(text):
    tokens, offsets = tokenize(text)
    covered = set()
    prev_end = 0
    for tok, (b, e) in zip(tokens, offsets):
        assert text[b:e] == tok
        assert b >= prev_end  # non-overlapping, in order
        prev_end = e
        covered.update(range(b, e))
    non_space = {i for i, ch in enumerate(text) if not ch.isspace()}
    assert covered == non_space


# -- Example / validation -----------------------------------------------------


def make_example(context="Alice's age is 56.", question="What is Alice's age?",
                 answer="56", **kw):
    p_tokens, p_offsets = tokenize(context)
    q_tokens, _ = tokenize(question)
    start = p_tokens.index(answer)
    return Example(
        id=kw.pop("id", "ex-0"),
        question_tokens=q_tokens,
        passage_tokens=p_tokens,
        gold_spans=[(start, start)],
        raw_context=context,
        token_char_offsets=p_offsets,
        question_text=question,
        **kw,
    )


def test_gold_texts_reads_from_offsets():
    ex = make_example()
    assert ex.gold_texts() == ["56"]


def test_validate_examples_catches_bad_spans():
    ex = make_example()
    ex.gold_spans = [(0, 99)]
    with pytest.raises(DataError, match="outside passage"):
        validate_examples([ex])


def test_validate_examples_requires_gold_when_asked():
    ex = make_example()
    ex.gold_spans = []
    validate_examples([ex])  # unlabeled is fine by default
    with pytest.raises(DataError, match="gold span required"):
        validate_examples([ex], require_gold=True)


def test_validate_examples_checks_offset_count():
    ex = make_example()
    ex.token_char_offsets = ex.token_char_offsets[:-1]
    with pytest.raises(DataError, match="offsets"):
        validate_examples([ex])


# -- vocabulary ---------------------------------------------------------------


def test_vocabulary_reserved_indices_and_lowercasing():
    vocab = Vocabulary.from_examples([make_example()])
    assert vocab.index_to_token[PAD_INDEX] == "<pad>"
    assert vocab.index_to_token[UNK_INDEX] == "<unk>"
    idx = vocab.encode(["Alice's", "ALICE'S", "never-seen"])
    assert idx[0] == idx[1]
    assert idx[2] == UNK_INDEX
    assert idx.dtype == np.int64


def test_vocabulary_cap_keeps_most_frequent_then_alphabetical():
    exs = [make_example()] * 3
    full = Vocabulary.from_examples(exs)
    capped = Vocabulary.from_examples(exs, cap=4)
    assert len(capped) == 4
    # every kept token is at least as frequent as any dropped one
    assert set(capped.index_to_token[2:]) <= set(full.index_to_token[2:])


def test_vocabulary_save_load_round_trip(tmp_path):
    vocab = Vocabulary.from_examples([make_example()])
    path = tmp_path / "vocab.json"
    vocab.save(path)
    loaded = Vocabulary.load(path)
    assert loaded.index_to_token == vocab.index_to_token
    assert loaded.hash() == vocab.hash()


def test_vocabulary_load_rejects_corrupt_hash(tmp_path):
    path = tmp_path / "vocab.json"
    path.write_text(json.dumps({"tokens": ["alice"], "hash": "0" * 16}))
    with pytest.raises(DataError, match="hash"):
        Vocabulary.load(path)


# -- SQuAD-format I/O ---------------------------------------------------------


def test_squad_round_trip(tmp_path):
    examples = generate_synthetic(SynthSpec(seed=5, num_passages=4))
    path = tmp_path / "corpus.json"
    write_squad_json(examples, path)
    loaded = load_squad_json(path)
    assert len(loaded) == len(examples)
    for a, b in zip(examples, loaded):
        assert a.id == b.id
        assert a.passage_tokens == b.passage_tokens
        assert a.gold_spans == b.gold_spans
        assert a.adversarial == b.adversarial


def test_adversarial_flag_round_trips(tmp_path):
    examples = generate_synthetic(SynthSpec(seed=5, num_passages=3, adversarial=True))
    path = tmp_path / "adv.json"
    write_squad_json(examples, path)
    assert all(ex.adversarial for ex in load_squad_json(path))


def test_load_rejects_malformed_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"data": [oops')
    with pytest.raises(DataError, match=r"byte \d+"):
        load_squad_json(path)


def test_load_rejects_wrong_schema(tmp_path):
    path = tmp_path / "odd.json"
    path.write_text(json.dumps({"data": [{"title": "x"}]}))
    with pytest.raises(DataError, match="schema"):
        load_squad_json(path)


def squad_file(tmp_path, qas, context="Alice's age is 56."):
    payload = {"version": "1.1", "data": [{"title": "t", "paragraphs": [
        {"context": context, "qas": qas}]}]}
    path = tmp_path / "c.json"
    path.write_text(json.dumps(payload))
    return path


def test_load_keeps_unlabeled_examples(tmp_path):
    path = squad_file(tmp_path, [
        {"id": "q0", "question": "What is Alice's age?",
         "answers": [{"text": "56", "answer_start": 15}]},
        {"id": "q1", "question": "What is Alice's age?", "answers": []},
    ])
    examples, stats = load_squad_json(path, return_stats=True)
    assert [ex.id for ex in examples] == ["q0", "q1"]
    assert examples[1].gold_spans == []
    assert stats["unlabeled"] == 1


def test_load_drops_unmappable_answers(tmp_path):
    # answer text does not occur at the claimed offset
    path = squad_file(tmp_path, [
        {"id": "q0", "question": "What is Alice's age?",
         "answers": [{"text": "99", "answer_start": 15}]},
    ])
    examples, stats = load_squad_json(path, return_stats=True)
    assert examples == []
    assert stats["dropped_answers"] == 1
    assert stats["dropped_examples"] == 1


def test_load_deduplicates_answer_spans(tmp_path):
    ans = {"text": "56", "answer_start": 15}
    path = squad_file(tmp_path, [
        {"id": "q0", "question": "What is Alice's age?", "answers": [ans, dict(ans)]},
    ])
    examples = load_squad_json(path)
    assert len(examples[0].gold_spans) == 1


# -- synthetic generator -------------------------------------------------------


def test_generate_is_deterministic_and_byte_identical(tmp_path):
    spec = SynthSpec(seed=9, num_passages=6, adversarial=True)
    a_path, b_path = tmp_path / "a.json", tmp_path / "b.json"
    write_squad_json(generate_synthetic(spec), a_path)
    write_squad_json(generate_synthetic(spec), b_path)
    assert a_path.read_bytes() == b_path.read_bytes()
    assert corpus_hash(a_path) == corpus_hash(b_path)


def test_generate_seed_changes_output(tmp_path):
    a = generate_synthetic(SynthSpec(seed=1, num_passages=4))
    b = generate_synthetic(SynthSpec(seed=2, num_passages=4))
    assert [ex.raw_context for ex in a] != [ex.raw_context for ex in b]


def test_generate_shapes_and_golds():
    spec = SynthSpec(seed=3, num_passages=10, entities_per_passage=3)
    examples = generate_synthetic(spec)
    assert len(examples) == 30
    validate_examples(examples, require_gold=True)
    for ex in examples:
        entity = ex.question_tokens[2][:-2]
        attr = ex.question_tokens[3]
        assert f"{entity}'s" in ex.passage_tokens
        gold = ex.gold_texts()[0]
        assert gold in VALUE_POOLS[attr]


def test_generate_distractor_rate_one_shares_the_attribute():
    examples = generate_synthetic(SynthSpec(seed=4, num_passages=8, distractor_rate=1.0))
    for ex in examples:
        attr = ex.question_tokens[3]
        # the queried attribute names every fact in the passage
        assert ex.passage_tokens.count(attr) == 2


def test_generate_distractor_rate_zero_keeps_attributes_distinct():
    examples = generate_synthetic(SynthSpec(seed=4, num_passages=8, distractor_rate=0.0))
    for ex in examples:
        attr = ex.question_tokens[3]
        assert ex.passage_tokens.count(attr) == 1


def test_synth_spec_validation():
    with pytest.raises(ConfigError):
        SynthSpec(num_passages=0).validate()
    with pytest.raises(ConfigError):
        SynthSpec(distractor_rate=1.5).validate()
    with pytest.raises(ConfigError):
        SynthSpec(attribute_types=("age", "height")).validate()
    with pytest.raises(ConfigError):
        SynthSpec(attribute_types=()).validate()
    with pytest.raises(ConfigError):
        SynthSpec(entities_per_passage=len(ENTITY_POOL) + 1).validate()
    with pytest.raises(ConfigError):
        SynthSpec(entities_per_passage=3, attribute_types=("age", "pet"),
                  distractor_rate=0.5).validate()


# -- adversarial append --------------------------------------------------------


def adversarial_invariants(original, appended):
    assert appended.adversarial
    assert appended.gold_spans == original.gold_spans
    assert appended.passage_tokens[: len(original.passage_tokens)] == original.passage_tokens
    assert len(appended.passage_tokens) > len(original.passage_tokens)
    assert appended.raw_context.startswith(original.raw_context)
    # the distractor value never collides with a gold answer
    golds = {normalize_answer(g) for g in original.gold_texts()}
    tail = appended.raw_context[len(original.raw_context):]
    fake_value = tail.strip().rstrip(".").split()[-1]
    assert normalize_answer(fake_value) not in golds


def test_append_adversarial_pool_impostor():
    ex = make_example()
    adv = append_adversarial(ex, seed=0)
    adversarial_invariants(ex, adv)
    impostor = adv.passage_tokens[len(ex.passage_tokens)]
    assert impostor.endswith("'s")
    assert impostor not in ex.passage_tokens
    assert impostor[:-2] in ENTITY_POOL


def test_append_adversarial_mutate_impostor_is_out_of_pool():
    ex = make_example()
    adv = append_adversarial(ex, seed=0, impostor="mutate")
    adversarial_invariants(ex, adv)
    impostor = adv.passage_tokens[len(ex.passage_tokens)]
    assert impostor == "Alicex's"


def test_append_adversarial_is_deterministic():
    ex = make_example()
    a = append_adversarial(ex, seed=42)
    b = append_adversarial(ex, seed=42)
    assert a.raw_context == b.raw_context


def test_append_adversarial_untemplated_question():
    context = "The tower stands in Paris since 1889."
    ex = make_example(context=context, question="Where does the tower stand?",
                      answer="Paris")
    adv = append_adversarial(ex, seed=1)
    adversarial_invariants(ex, adv)


def test_append_adversarial_numeric_fallback():
    context = "The bridge opened in 1889 after storms."
    ex = make_example(context=context, question="When did the bridge open?",
                      answer="1889")
    adv = append_adversarial(ex, seed=1)
    adversarial_invariants(ex, adv)
    tail = adv.raw_context[len(ex.raw_context):]
    assert "1889" not in tail


def test_generated_adversarial_corpus_keeps_golds():
    plain = generate_synthetic(SynthSpec(seed=6, num_passages=5))
    adv = generate_synthetic(SynthSpec(seed=6, num_passages=5, adversarial=True))
    for p, a in zip(plain, adv):
        assert p.id == a.id
        adversarial_invariants(p, a)


# -- truncation ----------------------------------------------------------------


def test_truncate_caps_and_drops():
    short = make_example()
    long_ok = make_example(context="Alice's age is 56. " + "filler " * 50, id="long")
    kept, dropped = truncate_for_training([short, long_ok], cap=10)
    assert dropped == 0
    assert len(kept) == 2
    assert len(kept[1].passage_tokens) == 10

    # gold span beyond the cap: the example cannot be kept
    late_gold = make_example(context="filler " * 20 + "Alice's age is 56.", id="late")
    kept, dropped = truncate_for_training([short, late_gold], cap=10)
    assert dropped == 1
    assert [ex.id for ex in kept] == ["ex-0"]


def test_corpus_hash_tracks_content(tmp_path):
    p1, p2 = tmp_path / "x.json", tmp_path / "y.json"
    p1.write_text("same")
    p2.write_text("same")
    assert corpus_hash(p1) == corpus_hash(p2)
    p2.write_text("different")
    assert corpus_hash(p1) != corpus_hash(p2)
