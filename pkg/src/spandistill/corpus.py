"""Corpus handling: tokenization, SQuAD-format I/O, synthetic QA generation,
and the adversarial distractor-append transform.

Tokenization is whitespace splitting followed by peeling leading/trailing
punctuation characters into their own tokens. Character offsets are lossless:
the substring at each offset equals the token. Tokens are stored with their
original casing; lowercasing happens only at vocabulary lookup.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError
from .evalspan import normalize_answer, span_text

logger = logging.getLogger(__name__)

PAD_INDEX = 0
UNK_INDEX = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

# Characters peeled off chunk edges, one token per character. Deliberately
# excludes %, $, # and friends so value-like tokens ("56.2%") stay whole.
_EDGE_PUNCT = set(".,;:!?\"'()[]{}") | {"“", "”", "‘", "’", "–", "—"}

_WORD_RE = re.compile(r"\S+")


def tokenize(text: str) -> tuple[list[str], list[tuple[int, int]]]:
    """Split text into tokens plus (begin, end) character offsets."""
    tokens: list[str] = []
    offsets: list[tuple[int, int]] = []

    def emit(begin: int, end: int) -> None:
        tokens.append(text[begin:end])
        offsets.append((begin, end))

    for m in _WORD_RE.finditer(text):
        left, right = m.start(), m.end()
        lead = []
        while left < right and text[left] in _EDGE_PUNCT:
            lead.append((left, left + 1))
            left += 1
        trail = []
        while right > left and text[right - 1] in _EDGE_PUNCT:
            trail.append((right - 1, right))
            right -= 1
        for b, e in lead:
            emit(b, e)
        if left < right:
            emit(left, right)
        for b, e in reversed(trail):
            emit(b, e)
    return tokens, offsets


@dataclass
class Example:
    """One tokenized question-passage pair.

    gold_spans holds inclusive token-index pairs; it is empty only for
    unlabeled (augmented) examples, which participate in soft-target training
    but never in cross-entropy or answer-margin losses.
    """

    id: str
    question_tokens: list[str]
    passage_tokens: list[str]
    gold_spans: list[tuple[int, int]]
    raw_context: str
    token_char_offsets: list[tuple[int, int]]
    question_text: str = ""
    adversarial: bool = False

    def gold_texts(self) -> list[str]:
        return [span_text(self, s, e) for s, e in self.gold_spans]


def validate_examples(examples, require_gold: bool = False) -> None:
    """Check Example invariants; raises DataError naming the offender."""
    for ex in examples:
        m = len(ex.passage_tokens)
        if not ex.question_tokens or m < 1:
            raise DataError(f"example {ex.id}: empty question or passage")
        if require_gold and not ex.gold_spans:
            raise DataError(f"example {ex.id}: gold span required")
        for s, e in ex.gold_spans:
            if not 0 <= s <= e < m:
                raise DataError(f"example {ex.id}: gold span ({s}, {e}) outside passage of {m} tokens")
        if len(ex.token_char_offsets) != m:
            raise DataError(f"example {ex.id}: {len(ex.token_char_offsets)} offsets for {m} tokens")
        prev_end = -1
        for b, e in ex.token_char_offsets:
            if b < prev_end or e <= b or e > len(ex.raw_context):
                raise DataError(f"example {ex.id}: bad token offsets")
            prev_end = e


class Vocabulary:
    """Lowercased token/index mapping; index 0 is padding, 1 is unknown."""

    def __init__(self, tokens: list[str]):
        self.index_to_token = [PAD_TOKEN, UNK_TOKEN] + list(tokens)
        self.token_to_index = {t: i for i, t in enumerate(self.index_to_token)}
        if len(self.token_to_index) != len(self.index_to_token):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.index_to_token)

    @classmethod
    def from_examples(cls, examples, cap: int = 5000) -> "Vocabulary":
        counts: Counter = Counter()
        for ex in examples:
            counts.update(t.lower() for t in ex.question_tokens)
            counts.update(t.lower() for t in ex.passage_tokens)
        counts.pop(PAD_TOKEN, None)
        counts.pop(UNK_TOKEN, None)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        keep = [t for t, _ in ranked[: max(cap - 2, 0)]]
        return cls(keep)

    def encode(self, tokens) -> np.ndarray:
        return np.array(
            [self.token_to_index.get(t.lower(), UNK_INDEX) for t in tokens], dtype=np.int64
        )

    def hash(self) -> str:
        payload = "\n".join(self.index_to_token).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"tokens": self.index_to_token[2:], "hash": self.hash()}, fh, ensure_ascii=False)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        vocab = cls(payload["tokens"])
        if payload.get("hash") not in (None, vocab.hash()):
            raise DataError(f"vocabulary file {path} fails its own hash check")
        return vocab


# -- SQuAD-format I/O --------------------------------------------------------


def _covering_span(offsets, begin_char: int, end_char: int):
    """Token span covering a character range; None when out of range."""
    start_tok = None
    end_tok = None
    for i, (b, e) in enumerate(offsets):
        if start_tok is None and e > begin_char:
            start_tok = i
        if b <= end_char:
            end_tok = i
    if start_tok is None or end_tok is None or start_tok > end_tok:
        return None
    return start_tok, end_tok


def _align_answer(context, offsets, text, answer_start):
    if not text or answer_start < 0 or answer_start + len(text) > len(context):
        return None
    span = _covering_span(offsets, answer_start, answer_start + len(text) - 1)
    if span is None:
        return None
    covered = context[offsets[span[0]][0]:offsets[span[1]][1]]
    if normalize_answer(covered) != normalize_answer(text):
        return None
    return span


def load_squad_json(path, return_stats: bool = False):
    """Read a SQuAD v1.1 file into Examples.

    Answers align to the token span covering their character range; answers
    whose detokenized span does not normalize equal to the answer text are
    dropped and counted since they cannot be scored consistently. Questions
    with an empty answers list load as unlabeled examples.
    """
    with open(path, encoding="utf-8") as fh:
        raw = fh.read()
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed JSON at byte {e.pos}: {e.msg}") from e

    examples: list[Example] = []
    stats = {"examples": 0, "unlabeled": 0, "dropped_answers": 0, "dropped_examples": 0}
    try:
        articles = payload["data"]
        for article in articles:
            for para in article["paragraphs"]:
                context = para["context"]
                p_tokens, p_offsets = tokenize(context)
                for qa in para["qas"]:
                    q_text = qa["question"]
                    q_tokens, _ = tokenize(q_text)
                    spans = []
                    for ans in qa["answers"]:
                        span = _align_answer(context, p_offsets, ans["text"], ans["answer_start"])
                        if span is None:
                            stats["dropped_answers"] += 1
                        elif span not in spans:
                            spans.append(span)
                    if qa["answers"] and not spans:
                        stats["dropped_examples"] += 1
                        continue
                    if not qa["answers"]:
                        stats["unlabeled"] += 1
                    examples.append(
                        Example(
                            id=qa["id"],
                            question_tokens=q_tokens,
                            passage_tokens=p_tokens,
                            gold_spans=spans,
                            raw_context=context,
                            token_char_offsets=p_offsets,
                            question_text=q_text,
                            adversarial=bool(qa.get("adversarial", False)),
                        )
                    )
                    stats["examples"] += 1
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: not in SQuAD v1.1 schema ({e!r})") from e

    if stats["dropped_answers"] or stats["dropped_examples"]:
        logger.info(
            "%s: dropped %d unmappable answers, skipped %d answerless examples",
            path, stats["dropped_answers"], stats["dropped_examples"],
        )
    return (examples, stats) if return_stats else examples


def squad_payload(examples, title: str = "corpus") -> dict:
    """SQuAD v1.1 dict for a list of Examples; consecutive examples sharing a
    context become one paragraph."""
    paragraphs = []
    current = None
    for ex in examples:
        if current is None or current["context"] != ex.raw_context:
            current = {"context": ex.raw_context, "qas": []}
            paragraphs.append(current)
        qa = {
            "id": ex.id,
            "question": ex.question_text or " ".join(ex.question_tokens),
            "answers": [
                {
                    "text": span_text(ex, s, e),
                    "answer_start": ex.token_char_offsets[s][0],
                }
                for s, e in ex.gold_spans
            ],
        }
        if ex.adversarial:
            qa["adversarial"] = True
        current["qas"].append(qa)
    return {"version": "1.1", "data": [{"title": title, "paragraphs": paragraphs}]}


def write_squad_json(examples, path, title: str = "corpus") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(squad_payload(examples, title), fh, ensure_ascii=False, separators=(",", ":"))
        fh.write("\n")


# -- synthetic corpus --------------------------------------------------------

VALUE_POOLS = {
    "age": tuple(str(v) for v in range(21, 80)),
    "score": tuple(str(v) for v in range(100, 180)),
    "color": (
        "red", "blue", "green", "yellow", "purple", "orange", "silver",
        "black", "white", "brown", "violet", "crimson", "teal", "magenta",
    ),
    "city": (
        "Paris", "Berlin", "Madrid", "Lisbon", "Vienna", "Prague", "Dublin",
        "Oslo", "Helsinki", "Warsaw", "Athens", "Rome", "Tallinn", "Riga",
    ),
    "pet": (
        "cat", "dog", "parrot", "rabbit", "hamster", "turtle", "ferret",
        "canary", "gecko", "pony", "donkey", "pigeon",
    ),
    "job": (
        "teacher", "doctor", "baker", "pilot", "farmer", "singer", "painter",
        "lawyer", "plumber", "chemist", "tailor", "barber",
    ),
}

ENTITY_POOL = (
    "Alice", "Bruno", "Carla", "Dmitri", "Elena", "Felix", "Greta", "Hassan",
    "Ingrid", "Jonas", "Katja", "Liam", "Marta", "Nadia", "Omar", "Petra",
    "Quinn", "Rosa", "Stefan", "Tessa", "Umar", "Vera", "Wanda", "Xenia",
    "Yusuf", "Zelda", "Anton", "Bella", "Casper", "Dora", "Edgar", "Fiona",
    "Gustav", "Hanna", "Igor", "Jasmin", "Kurt", "Lena", "Milan", "Nora",
    "Oskar", "Paula", "Ralf", "Selma", "Tomas", "Ulla", "Viktor", "Wilma",
    "Xaver", "Yana", "Zoran", "Amira", "Boris", "Clara", "Daan", "Edith",
    "Frans", "Gia", "Henrik", "Iris",
)

_NUMERIC_RE = re.compile(r"[\d.,%$]+")


@dataclass(frozen=True)
class SynthSpec:
    """Deterministic recipe for a templated QA corpus.

    Each passage lists facts "<entity>'s <attribute> is <value>." and each
    question asks "What is <entity>'s <attribute>?" with the value token as
    the gold span. With probability distractor_rate a passage shares one
    attribute across all its entities, so every question in it has
    same-category confusing values. adversarial=True appends, per example, a
    sentence giving a conflicting same-category value for an impostor entity.
    """

    seed: int = 0
    num_passages: int = 100
    entities_per_passage: int = 2
    attribute_types: tuple[str, ...] = ("age", "color", "city", "pet", "job")
    distractor_rate: float = 1.0
    adversarial: bool = False

    def validate(self) -> None:
        if self.num_passages < 1 or self.entities_per_passage < 1:
            raise ConfigError("synthetic spec: counts must be positive")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ConfigError(f"distractor_rate must be in [0, 1], got {self.distractor_rate}")
        unknown = [a for a in self.attribute_types if a not in VALUE_POOLS]
        if unknown:
            raise ConfigError(f"unknown attribute types {unknown}; choose from {sorted(VALUE_POOLS)}")
        if not self.attribute_types:
            raise ConfigError("attribute_types must be non-empty")
        if self.distractor_rate < 1.0 and len(self.attribute_types) < self.entities_per_passage:
            raise ConfigError(
                "need at least entities_per_passage attribute types when distractor_rate < 1"
            )
        if self.entities_per_passage > len(ENTITY_POOL):
            raise ConfigError(f"at most {len(ENTITY_POOL)} entities per passage")


def _build_example(ex_id, question, context, answer_start, answer_text, adversarial=False):
    p_tokens, p_offsets = tokenize(context)
    q_tokens, _ = tokenize(question)
    span = _align_answer(context, p_offsets, answer_text, answer_start)
    if span is None:
        raise DataError(f"internal: generated answer failed to align in {ex_id}")
    return Example(
        id=ex_id,
        question_tokens=q_tokens,
        passage_tokens=p_tokens,
        gold_spans=[span],
        raw_context=context,
        token_char_offsets=p_offsets,
        question_text=question,
        adversarial=adversarial,
    )


def generate_synthetic(spec: SynthSpec) -> list[Example]:
    """Pure function of its recipe: same SynthSpec, byte-identical corpus."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    # separate stream so adversarial=True appends to the exact corpus the
    # plain spec would produce, example for example
    adv_rng = np.random.default_rng([spec.seed, 1])
    examples: list[Example] = []
    for p in range(spec.num_passages):
        entities = [ENTITY_POOL[i] for i in rng.choice(len(ENTITY_POOL), size=spec.entities_per_passage, replace=False)]
        shared = bool(rng.random() < spec.distractor_rate)
        if shared:
            attrs = [spec.attribute_types[int(rng.integers(len(spec.attribute_types)))]] * len(entities)
        else:
            picks = rng.choice(len(spec.attribute_types), size=len(entities), replace=False)
            attrs = [spec.attribute_types[int(i)] for i in picks]
        values = []
        used: dict[str, set] = {}
        for attr in attrs:
            pool = VALUE_POOLS[attr]
            taken = used.setdefault(attr, set())
            free = [v for v in pool if v not in taken]
            v = free[int(rng.integers(len(free)))]
            taken.add(v)
            values.append(v)
        order = list(rng.permutation(len(entities)))
        sentences = [f"{entities[i]}'s {attrs[i]} is {values[i]}." for i in order]
        context = " ".join(sentences)
        value_char = {}
        at = 0
        for pos, i in enumerate(order):
            sent = sentences[pos]
            value_char[i] = at + sent.index(f" {values[i]}.") + 1
            at += len(sent) + 1
        for qi in range(len(entities)):
            ex = _build_example(
                ex_id=f"synth-{spec.seed}-{p:05d}-{qi}",
                question=f"What is {entities[qi]}'s {attrs[qi]}?",
                context=context,
                answer_start=value_char[qi],
                answer_text=values[qi],
            )
            if spec.adversarial:
                ex = append_adversarial(ex, seed=int(adv_rng.integers(2**31)))
            examples.append(ex)
    return examples


def _templated_question(example):
    qt = example.question_tokens
    if (
        len(qt) == 5
        and qt[0] == "What"
        and qt[1] == "is"
        and qt[2].endswith("'s")
        and qt[3] in VALUE_POOLS
        and qt[4] == "?"
    ):
        return qt[2][:-2], qt[3]
    return None


def _mutate_token(token: str) -> str:
    if token.endswith("'s"):
        return token[:-2] + "x's"
    return token + "x"


def _numeric_distractor(text: str, avoid: set) -> str:
    digits = text
    for _ in range(10):
        digits = "".join(str((int(c) + 1) % 10) if c.isdigit() else c for c in digits)
        if normalize_answer(digits) not in avoid and not digits.startswith("0"):
            return digits
    return "7" + text


def append_adversarial(example: Example, seed: int, impostor: str = "pool") -> Example:
    """Append one distractor sentence; gold spans are unchanged.

    The sentence pairs an impostor entity with a conflicting value of the same
    surface category as the gold answer. impostor="pool" draws an entity name
    absent from the passage; impostor="mutate" perturbs the question's entity
    into an out-of-vocabulary near-duplicate.
    """
    rng = np.random.default_rng(seed)
    avoid = {normalize_answer(t) for t in example.gold_texts()}
    parsed = _templated_question(example)
    if parsed is not None:
        entity, attr = parsed
        if impostor == "mutate":
            fake_entity = _mutate_token(entity)
        else:
            present = set(example.passage_tokens)
            candidates = [n for n in ENTITY_POOL if n != entity and n + "'s" not in present and n not in present]
            fake_entity = candidates[int(rng.integers(len(candidates)))]
        pool = [
            v
            for v in VALUE_POOLS[attr]
            if normalize_answer(v) not in avoid and v not in example.passage_tokens
        ]
        fake_value = pool[int(rng.integers(len(pool)))]
        sentence = f"{fake_entity}'s {attr} is {fake_value}."
    else:
        gold = example.gold_texts()[0] if example.gold_spans else "thing"
        if _NUMERIC_RE.fullmatch(gold):
            fake_value = _numeric_distractor(gold, avoid)
        else:
            fake_value = " ".join(_mutate_token(t) for t in gold.split())
            if normalize_answer(fake_value) in avoid:
                fake_value += "x"
        content = [
            _mutate_token(t) if t[:1].isupper() else t
            for t in example.question_tokens[1:]
            if t not in {"?", "is", "are", "was", "were"}
        ]
        sentence = " ".join(content + ["is", fake_value, "."])

    context = example.raw_context + " " + sentence
    p_tokens, p_offsets = tokenize(context)
    if p_tokens[: len(example.passage_tokens)] != example.passage_tokens:
        raise DataError(f"example {example.id}: adversarial append changed the passage prefix")
    return replace(
        example,
        passage_tokens=p_tokens,
        raw_context=context,
        token_char_offsets=p_offsets,
        adversarial=True,
    )


def truncate_for_training(examples, cap: int) -> tuple[list[Example], int]:
    """Cap passage length; examples whose gold spans cross the cap are dropped."""
    kept: list[Example] = []
    dropped = 0
    for ex in examples:
        if len(ex.passage_tokens) <= cap:
            kept.append(ex)
            continue
        if any(e >= cap for _, e in ex.gold_spans):
            dropped += 1
            continue
        kept.append(
            replace(
                ex,
                passage_tokens=ex.passage_tokens[:cap],
                token_char_offsets=ex.token_char_offsets[:cap],
            )
        )
    return kept, dropped


def corpus_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]
