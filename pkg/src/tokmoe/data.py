"""Vocabulary, corpus ingestion (JSONL), splitting, and synthetic corpora.

Corpus files are UTF-8 JSONL, one object per line, pre-tokenized and
pre-delexicalized:

    {"context": ["tok", ...], "response": ["tok", ...], "intent": "hotel",
     "goal": {"entity": "[hotel_id]", "requested": ["[value_time]"]}}

``goal`` is optional. Entity mentions arrive already replaced by bracketed
placeholder tokens; tokenization is out of scope.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .config import BOS_ID, EOS_ID, PAD_ID, SPECIAL_TOKENS, UNK_ID
from .errors import DataError, DomainError, ParseError


@dataclass
class Goal:
    entity: str | None = None
    requested: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"entity": self.entity, "requested": list(self.requested)}


@dataclass
class Sample:
    context: list[str]
    response: list[str]
    intent: str
    goal: Goal | None = None

    def to_json(self) -> dict:
        out: dict = {
            "context": list(self.context),
            "response": list(self.response),
            "intent": self.intent,
        }
        if self.goal is not None:
            out["goal"] = self.goal.to_json()
        return out


@dataclass
class Corpus:
    samples: list[Sample]
    split: str = "train"  # train | valid | test

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class EncodedSample:
    """Id-space view of a sample; the response carries a trailing EOS."""

    context_ids: list[int]
    response_ids: list[int]
    intent: str
    sample: Sample


class Vocabulary:
    """Bijective token<->id map with four reserved specials (ids 0-3)."""

    def __init__(self, tokens: list[str], cap: int = 400) -> None:
        self.cap = cap
        self.id_to_token: list[str] = list(tokens)
        if self.id_to_token[:len(SPECIAL_TOKENS)] != list(SPECIAL_TOKENS):
            raise DataError("vocabulary must start with the reserved special tokens")
        if len(self.id_to_token) > cap:
            raise DataError(f"vocabulary size {len(self.id_to_token)} exceeds cap {cap}")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @classmethod
    def build(cls, corpus: Corpus, cap: int = 400) -> "Vocabulary":
        """Most frequent tokens up to ``cap`` minus the specials.

        Frequency ties break lexicographically, so identical corpora always
        produce identical vocabularies.
        """
        if len(corpus) == 0:
            raise DataError("cannot build a vocabulary from an empty corpus")
        counts: Counter[str] = Counter()
        for sample in corpus.samples:
            counts.update(sample.context)
            counts.update(sample.response)
        ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
        keep = [token for token, _ in ranked[: cap - len(SPECIAL_TOKENS)]]
        return cls(list(SPECIAL_TOKENS) + keep, cap=cap)

    def encode_token(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode_tokens(self, tokens: list[str]) -> list[int]:
        return [self.encode_token(t) for t in tokens]

    def decode_ids(self, ids: list[int], strip_specials: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip_specials and i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(self.id_to_token[i])
        return out


def encode_sample(vocab: Vocabulary, sample: Sample) -> EncodedSample:
    """Map tokens to ids (unknown -> UNK) and append EOS to the response."""
    return EncodedSample(
        context_ids=vocab.encode_tokens(sample.context),
        response_ids=vocab.encode_tokens(sample.response) + [EOS_ID],
        intent=sample.intent,
        sample=sample,
    )


def encode_corpus(vocab: Vocabulary, corpus: Corpus) -> list[EncodedSample]:
    return [encode_sample(vocab, s) for s in corpus.samples]


# ---------------------------------------------------------------------------
# JSONL ingestion


def _parse_sample(obj: dict, where: str) -> Sample:
    for key in ("context", "response", "intent"):
        if key not in obj:
            raise DataError(f"{where}: missing required field {key!r}")
    context = obj["context"]
    response = obj["response"]
    if not isinstance(context, list) or not context:
        raise DataError(f"{where}: 'context' must be a nonempty token list")
    if not isinstance(response, list) or not response:
        raise DataError(f"{where}: 'response' must be a nonempty token list")
    intent = obj["intent"]
    if not isinstance(intent, str) or not intent:
        raise DataError(f"{where}: 'intent' must be a nonempty string")
    goal = None
    if obj.get("goal") is not None:
        raw = obj["goal"]
        if not isinstance(raw, dict):
            raise DataError(f"{where}: 'goal' must be an object")
        goal = Goal(entity=raw.get("entity"), requested=list(raw.get("requested", [])))
    return Sample([str(t) for t in context], [str(t) for t in response], intent, goal)


def load_corpus_jsonl(path: str | Path, split: str = "train") -> Corpus:
    path = Path(path)
    samples: list[Sample] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        samples.append(_parse_sample(obj, f"{path}:{lineno}"))
    if split == "train" and not samples:
        raise DataError(f"{path}: train corpus is empty")
    return Corpus(samples, split=split)


def save_corpus_jsonl(corpus: Corpus, path: str | Path) -> None:
    lines = [json.dumps(s.to_json(), ensure_ascii=False) for s in corpus.samples]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def split_corpus(
    corpus: Corpus, fractions: tuple[float, float, float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[Corpus, Corpus, Corpus]:
    """Seeded shuffle followed by contiguous cuts; a disjoint cover."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DomainError(f"split fractions must sum to 1, got {fractions}")
    order = list(range(len(corpus)))
    random.Random(seed).shuffle(order)
    n = len(order)
    cut1 = int(fractions[0] * n)
    cut2 = int((fractions[0] + fractions[1]) * n)
    parts = (order[:cut1], order[cut1:cut2], order[cut2:])
    names = ("train", "valid", "test")
    return tuple(
        Corpus([corpus.samples[i] for i in idx], split=name)
        for idx, name in zip(parts, names)
    )  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Synthetic multi-intent corpus


@dataclass
class SynthSpec:
    """Knobs for the seeded synthetic corpus generator."""

    intents: int = 3
    shared_vocab: int = 14
    per_intent_vocab: int = 10
    samples_per_intent: int = 20
    context_len: tuple[int, int] = (4, 8)
    response_len: tuple[int, int] = (5, 9)
    seed: int = 13

    def __post_init__(self) -> None:
        if self.intents < 2:
            raise DomainError("synthetic corpora need at least 2 intents")
        for name in ("shared_vocab", "per_intent_vocab", "samples_per_intent"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        for name in ("context_len", "response_len"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise DomainError(f"{name} must be a (low, high) range with 1 <= low <= high")


_INTENT_NAMES = ["hotel", "train", "restaurant", "attraction", "taxi", "booking"]
_SHARED_WORDS = [
    "i", "you", "would", "like", "the", "a", "is", "at", "can", "help",
    "find", "need", "want", "there", "yes", "no", "thanks", "please", "for", "me",
]
_TOPIC_WORDS = [
    "area", "price", "time", "name", "phone", "address", "type", "stars",
    "food", "day", "people", "stay", "leave", "arrive", "depart", "fee",
    "post", "ref", "choice", "ticket",
]
_REQUESTABLE = ["[value_time]", "[value_price]", "[value_area]"]


def intent_names(k: int) -> list[str]:
    names = list(_INTENT_NAMES[:k])
    names += [f"domain{i}" for i in range(len(names), k)]
    return names


def _word_pool(base: list[str], count: int, prefix: str) -> list[str]:
    pool = list(base[:count])
    pool += [f"{prefix}{i}" for i in range(len(pool), count)]
    return pool


def generate_synthetic_corpus(spec: SynthSpec, extra_per_intent: int = 0) -> Corpus:
    """Seeded multi-intent corpus from a small template grammar.

    Each intent owns an exclusive word pool (never emitted under another
    intent) plus one entity placeholder; contexts and responses mix those
    with shared words roughly half-and-half, so per-intent unigram
    distributions are far apart. Every sample carries a goal with the
    intent's entity placeholder and 0-2 requested placeholders, all of
    which appear in the response. Contexts are unique across the corpus.
    """
    rng = random.Random(spec.seed)
    names = intent_names(spec.intents)
    shared = _word_pool(_SHARED_WORDS, spec.shared_vocab, "word")
    per_intent = spec.samples_per_intent + extra_per_intent
    seen_contexts: set[tuple[str, ...]] = set()
    samples: list[Sample] = []
    for intent in names:
        exclusive = [f"{intent}_{w}" for w in _word_pool(_TOPIC_WORDS, spec.per_intent_vocab, "w")]
        entity = f"[{intent}_id]"
        for _ in range(per_intent):
            for _attempt in range(200):
                ctx_len = rng.randint(*spec.context_len)
                context = [
                    rng.choice(exclusive if rng.random() < 0.5 else shared)
                    for _ in range(ctx_len)
                ]
                if tuple(context) not in seen_contexts:
                    seen_contexts.add(tuple(context))
                    break
            else:
                raise DomainError("could not draw a fresh context; widen the length range")
            requested = rng.sample(_REQUESTABLE, rng.randint(0, 2))
            resp_len = max(rng.randint(*spec.response_len), 1 + len(requested))
            response = [entity] + list(requested)
            while len(response) < resp_len:
                response.append(rng.choice(exclusive if rng.random() < 0.5 else shared))
            rng.shuffle(response)
            samples.append(Sample(context, response, intent, Goal(entity, requested)))
    return Corpus(samples, split="train")


def generate_synthetic_splits(spec: SynthSpec) -> tuple[Corpus, Corpus, Corpus]:
    """Train/valid/test corpora from one RNG stream, contexts disjoint.

    Valid and test each get ``max(2, samples_per_intent // 5)`` samples per
    intent, drawn after the training samples so the whole emission is a
    deterministic function of the spec.
    """
    holdout = max(2, spec.samples_per_intent // 5)
    full = generate_synthetic_corpus(spec, extra_per_intent=2 * holdout)
    per_intent = spec.samples_per_intent + 2 * holdout
    train: list[Sample] = []
    valid: list[Sample] = []
    test: list[Sample] = []
    for block in range(spec.intents):
        chunk = full.samples[block * per_intent:(block + 1) * per_intent]
        train.extend(chunk[: spec.samples_per_intent])
        valid.extend(chunk[spec.samples_per_intent: spec.samples_per_intent + holdout])
        test.extend(chunk[spec.samples_per_intent + holdout:])
    return (
        Corpus(train, split="train"),
        Corpus(valid, split="valid"),
        Corpus(test, split="test"),
    )
