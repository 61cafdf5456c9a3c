"""Synthetic styled question/answer corpora over a closed word-level vocabulary.

One fixed "world" assigns an object to every (subject, relation) fact.
A corpus seed picks which facts become QA pairs; a style then decorates the
answers. Because base pairs depend only on the seed, the neutral, anger and
sadness corpora of one seed share every question and differ only in the
style markers added to the answers.
"""

from __future__ import annotations

import enum
import itertools
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BOS, EOS, UNK, SHOUT = "<bos>", "<eos>", "<unk>", "<shout>"
SPECIALS = (BOS, EOS, UNK, SHOUT)

ANGER_LEXICON = ("unbelievable", "infuriating", "ridiculous")
SADNESS_LEXICON = ("alas", "bleak", "hopeless")
SADNESS_OPENER = ("oh", "dear")
PUNCTUATION = ("?", ".", "!", ",")


class Style(str, enum.Enum):
    NEUTRAL = "NEUTRAL"
    ANGER = "ANGER"
    SADNESS = "SADNESS"


MARKERS: dict[Style, frozenset[str]] = {
    Style.NEUTRAL: frozenset(),
    Style.ANGER: frozenset(ANGER_LEXICON) | {"!", SHOUT},
    Style.SADNESS: frozenset(SADNESS_LEXICON) | set(SADNESS_OPENER),
}


# ---------------------------------------------------------------- grammar

_ONSETS = ("b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z")
_NUCLEI = ("a", "e", "i", "o", "u")
_CODAS = ("n", "r", "l", "s", "th")


def _subject_names(n: int) -> list[str]:
    # CV-CV-C pseudo-words, taken in a fixed interleaved order
    names = []
    for o1, v1, o2, v2, c in itertools.product(_ONSETS, _NUCLEI, _ONSETS, _NUCLEI, _CODAS):
        names.append(o1 + v1 + o2 + v2 + c)
    step = 7919  # prime stride spreads the picks across the product space
    return [names[(i * step) % len(names)] for i in range(n)]


@dataclass(frozen=True)
class Relation:
    name: str
    question: str  # "{s}" marks the subject
    answer: str  # "{s}" subject, "{o}" object
    objects: tuple[str, ...]


RELATIONS: tuple[Relation, ...] = (
    Relation("color", "what color is {s} ?", "{s} is {o} .",
             ("red", "blue", "green", "yellow", "white", "black", "grey", "purple", "orange", "brown")),
    Relation("region", "where is {s} located ?", "{s} is located in the {o} .",
             ("north", "south", "east", "west", "valley", "mountains", "desert", "forest",
              "islands", "lowlands", "highlands", "marshes")),
    Relation("towers", "how many towers does {s} have ?", "{s} has {o} towers .",
             ("two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven",
              "twelve", "twenty")),
    Relation("founder", "who founded {s} ?", "{s} was founded by {o} .",
             ("alden", "brenna", "caius", "dorin", "elsa", "farah", "galen", "hilda", "ivo",
              "jora", "kellan", "liora", "magnus", "nerys", "osric")),
    Relation("century", "when was {s} built ?", "{s} was built in the {o} century .",
             ("first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth",
              "ninth", "tenth")),
    Relation("fame", "what is {s} known for ?", "{s} is known for its {o} .",
             ("bridges", "gardens", "markets", "libraries", "festivals", "bells", "harbors",
              "vineyards", "statues", "fountains", "bakeries", "mills", "orchards", "caves", "songs")),
    Relation("language", "what language is spoken in {s} ?", "people in {s} speak {o} .",
             ("velish", "marnic", "ostran", "quellan", "thesk", "durvian", "lomar", "pellish",
              "sarvic", "ennic")),
    Relation("export", "what is the main export of {s} ?", "the main export of {s} is {o} .",
             ("wool", "salt", "copper", "timber", "grain", "silk", "honey", "wine", "glass",
              "iron", "tea", "amber")),
    Relation("river", "which river flows through {s} ?", "the {o} river flows through {s} .",
             ("amber", "silver", "crooked", "quiet", "swift", "broad", "cold", "winding",
              "shallow", "deep")),
    Relation("population", "how many people live in {s} ?", "about {o} thousand people live in {s} .",
             ("two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "twenty",
              "fifty", "ninety")),
    Relation("animal", "what animal is the symbol of {s} ?", "the symbol of {s} is the {o} .",
             ("fox", "owl", "bear", "wolf", "heron", "stag", "hare", "eagle", "otter", "lynx",
              "swan", "boar")),
    Relation("weather", "what is the weather like in {s} ?", "the weather in {s} is usually {o} .",
             ("rainy", "sunny", "windy", "foggy", "mild", "cold", "dry", "humid", "stormy", "calm")),
)

N_SUBJECTS = 200
SUBJECTS: tuple[str, ...] = tuple(_subject_names(N_SUBJECTS))


def fact_object(subject_idx: int, relation_idx: int) -> str:
    """The world's fixed answer for one fact (independent of any corpus seed)."""
    rel = RELATIONS[relation_idx]
    k = (subject_idx * 131 + relation_idx * 71 + (subject_idx * relation_idx) % 17) % len(rel.objects)
    return rel.objects[k]


def grammar_capacity() -> int:
    return len(SUBJECTS) * len(RELATIONS)


def base_vocabulary() -> list[str]:
    """Every token the grammar, style transforms and specials can emit, in a fixed order."""
    vocab: list[str] = list(SPECIALS) + list(PUNCTUATION)
    seen = set(vocab)

    def push(tok):
        if tok not in seen:
            seen.add(tok)
            vocab.append(tok)

    for tok in (*ANGER_LEXICON, *SADNESS_OPENER, *SADNESS_LEXICON):
        push(tok)
    for rel in RELATIONS:
        for tok in (rel.question + " " + rel.answer).split():
            if tok not in ("{s}", "{o}"):
                push(tok)
        for obj in rel.objects:
            push(obj)
    for s in SUBJECTS:
        push(s)
    return vocab


# ---------------------------------------------------------------- tokenizer


class Tokenizer:
    """Whitespace word-level tokenizer; PAD is the EOS id."""

    def __init__(self, vocabulary: Sequence[str]):
        self.vocab = list(vocabulary)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("vocabulary contains duplicates")
        missing = [s for s in SPECIALS if s not in self.index]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")

    @classmethod
    def default(cls, size: int | None = 512) -> Tokenizer:
        """Grammar vocabulary padded with ``<extra_i>`` filler tokens up to ``size``."""
        vocab = base_vocabulary()
        if size is not None:
            if size < len(vocab):
                raise ValueError(f"vocabulary needs at least {len(vocab)} entries, got {size}")
            vocab += [f"<extra_{i}>" for i in range(size - len(vocab))]
        return cls(vocab)

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    pad_id = eos_id

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.index.get(tok, unk) for tok in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.vocab[int(i)] for i in ids)

    def tokens(self, ids: Iterable[int]) -> list[str]:
        return [self.vocab[int(i)] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.vocab), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Tokenizer:
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


# ---------------------------------------------------------------- corpora


@dataclass(frozen=True)
class QAPair:
    question: tuple[int, ...]
    answer: tuple[int, ...]
    style: Style

    def __post_init__(self):
        if not self.question or not self.answer:
            raise ValueError("question and answer must be nonempty")


@dataclass(frozen=True)
class CorpusSpec:
    style: Style = Style.NEUTRAL
    seed: int = 0
    n_pairs: int = 2000

    def to_dict(self) -> dict:
        return {"style": self.style.value, "seed": self.seed, "n_pairs": self.n_pairs}

    @classmethod
    def from_dict(cls, d: dict) -> CorpusSpec:
        return cls(Style(d["style"]), int(d["seed"]), int(d["n_pairs"]))


class CapacityWarning(UserWarning):
    """More pairs requested than the grammar has distinct facts."""


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *key])))


def base_pairs(seed: int, n_pairs: int) -> list[tuple[str, str]]:
    """Unstyled (question, answer) texts sampled from the fact grammar."""
    cap = grammar_capacity()
    rng = _rng(seed, 0)
    if n_pairs > cap:
        warnings.warn(f"{n_pairs} pairs exceed the {cap} distinct facts; sampling with replacement",
                      CapacityWarning, stacklevel=2)
        picks = rng.integers(0, cap, size=n_pairs)
    else:
        picks = rng.permutation(cap)[:n_pairs]
    out = []
    for p in picks:
        s_idx, r_idx = divmod(int(p), len(RELATIONS))
        rel, subj = RELATIONS[r_idx], SUBJECTS[s_idx]
        out.append((rel.question.format(s=subj),
                    rel.answer.format(s=subj, o=fact_object(s_idx, r_idx))))
    return out


def stylize(answer: Sequence[str], style: Style, seed: int) -> list[str]:
    """Decorate answer tokens with the style's markers (token strings in, out)."""
    style = Style(style)
    words = list(answer)
    if style is Style.NEUTRAL:
        return words
    rng = _rng(seed, 1)
    if style is Style.ANGER:
        out = [ANGER_LEXICON[int(rng.integers(len(ANGER_LEXICON)))]]
        for w in words:
            if w not in PUNCTUATION and rng.random() < 0.5:
                out.append(SHOUT)
            out.append(w)
        return out + ["!", "!"]
    closer = SADNESS_LEXICON[int(rng.integers(len(SADNESS_LEXICON)))]
    return [*SADNESS_OPENER, *words, closer]


def generate_corpus(spec: CorpusSpec, tokenizer: Tokenizer) -> list[QAPair]:
    out = []
    for i, (q, a) in enumerate(base_pairs(spec.seed, spec.n_pairs)):
        styled = stylize(a.split(), spec.style, seed=spec.seed * 1_000_003 + i)
        out.append(QAPair(tuple(tokenizer.encode(q)), tuple(tokenizer.encode(" ".join(styled))),
                          spec.style))
    return out


def marker_rate(tokens: Sequence[str], style: Style) -> float:
    """Fraction of ``tokens`` (strings) in the style's marker set; 0 for no tokens."""
    if not tokens:
        return 0.0
    markers = MARKERS[Style(style)]
    return sum(t in markers for t in tokens) / len(tokens)


def write_corpus(path, pairs: Sequence[QAPair], tokenizer: Tokenizer) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(json.dumps({"question": tokenizer.decode(p.question),
                                 "answer": tokenizer.decode(p.answer),
                                 "style": p.style.value}, sort_keys=True) + "\n")


def read_corpus(path, tokenizer: Tokenizer) -> list[QAPair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                pairs.append(QAPair(tuple(tokenizer.encode(rec["question"])),
                                    tuple(tokenizer.encode(rec["answer"])), Style(rec["style"])))
    return pairs


def ingest_text(path, tokenizer: Tokenizer, seq_len: int) -> list[list[int]]:
    """Whitespace-tokenize a UTF-8 text file into full ``seq_len`` chunks."""
    if seq_len < 1:
        raise ValueError("seq_len must be positive")
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ValueError(f"{path} is not valid UTF-8") from exc
    ids = tokenizer.encode(text)
    if not ids:
        raise ValueError(f"{path} contains no tokens")
    return [ids[i:i + seq_len] for i in range(0, len(ids) - seq_len + 1, seq_len)]
