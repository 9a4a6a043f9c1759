"""Tokenisation, datasets, synthetic tasks and raw character/word mutations.

Every whitespace chunk becomes one word, with leading/trailing punctuation
peeled off into their own single-character words.  Each word maps to exactly
one token: its vocabulary id, or a hash bucket (FNV-1a of the lowercased word)
placed after the vocabulary so distinct misspellings embed differently.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import DomainError

log = logging.getLogger(__name__)

PAD = "<pad>"
SEP = "<sep>"
SPECIALS = (PAD, SEP)

# printable ASCII without whitespace
INSERT_CHARS = "".join(chr(c) for c in range(33, 127))
MUTATION_KINDS = ("swap", "insert", "delete", "homoglyph")


def fnv1a_32(s: str) -> int:
    h = 0x811C9DC5
    for b in s.encode("utf-8"):
        h ^= b
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def _is_punct(ch: str) -> bool:
    return not ch.isalnum()


def split_words(text: str) -> list[str]:
    words: list[str] = []
    for chunk in text.lower().split():
        if chunk == SEP:
            words.append(SEP)
            continue
        i, j = 0, len(chunk)
        while i < j and _is_punct(chunk[i]):
            i += 1
        while j > i and _is_punct(chunk[j - 1]):
            j -= 1
        words.extend(chunk[:i])
        if i < j:
            words.append(chunk[i:j])
        words.extend(chunk[j:])
    return words


def is_punct_word(w: str) -> bool:
    return all(_is_punct(c) for c in w)


class Vocabulary:
    """Immutable lowercased word <-> id map with a content fingerprint."""

    def __init__(self, words: Iterable[str]):
        seen = dict.fromkeys(SPECIALS)
        for w in words:
            w = w.lower()
            if w not in seen:
                seen[w] = None
        self.id_to_word: tuple[str, ...] = tuple(seen)
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        self.pad_id = self.word_to_id[PAD]
        self.sep_id = self.word_to_id[SEP]
        self.fingerprint = hashlib.sha256("\n".join(self.id_to_word).encode("utf-8")).hexdigest()[:16]

    @classmethod
    def build(cls, texts: Iterable[str], min_count: int = 1) -> "Vocabulary":
        counts: dict[str, int] = {}
        for t in texts:
            for w in split_words(t):
                if w not in SPECIALS:
                    counts[w] = counts.get(w, 0) + 1
        words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
        return cls(words)

    def __len__(self) -> int:
        return len(self.id_to_word)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.word_to_id

    def is_special(self, token_id: int) -> bool:
        return token_id in (self.pad_id, self.sep_id)

    def token_id(self, word: str, n_hash_buckets: int) -> int:
        w = word.lower()
        idx = self.word_to_id.get(w)
        if idx is not None:
            return idx
        return len(self) + fnv1a_32(w) % n_hash_buckets

    def replacement_pool(self) -> np.ndarray:
        """Ids of whole in-vocabulary words usable as substitutes."""
        return np.array(
            [i for i, w in enumerate(self.id_to_word) if w not in SPECIALS and not is_punct_word(w)],
            dtype=np.int64,
        )


@dataclass(frozen=True)
class LabeledText:
    """One dataset record before tokenisation."""

    text: str
    label: int | None = None
    text_b: str | None = None

    def to_json(self) -> str:
        d = {"text": self.text, "label": self.label}
        if self.text_b is not None:
            d["text_b"] = self.text_b
        return json.dumps(d, ensure_ascii=False)


@dataclass(frozen=True)
class Sentence:
    raw: str
    words: tuple[str, ...]
    token_ids: tuple[int, ...]
    label: int | None = None

    def __post_init__(self):
        if len(self.words) != len(self.token_ids):
            raise ValueError("words and token_ids differ in length")

    def __len__(self) -> int:
        return len(self.words)

    @property
    def n_content_words(self) -> int:
        return sum(w != SEP for w in self.words)

    def with_word(self, idx: int, new_word: str, token_id: int) -> "Sentence":
        words = list(self.words)
        ids = list(self.token_ids)
        words[idx] = new_word
        ids[idx] = token_id
        return replace(self, raw=" ".join(words), words=tuple(words), token_ids=tuple(ids))

    def to_dict(self) -> dict:
        return {"raw": self.raw, "words": list(self.words), "token_ids": list(self.token_ids), "label": self.label}

    @classmethod
    def from_dict(cls, d: dict) -> "Sentence":
        return cls(d["raw"], tuple(d["words"]), tuple(d["token_ids"]), d.get("label"))


def tokenize(vocab: Vocabulary, raw_text: str, n_hash_buckets: int = 1024,
             label: int | None = None, text_b: str | None = None) -> Sentence:
    if not raw_text or not raw_text.strip():
        raise DomainError("cannot tokenize empty text")
    words = split_words(raw_text)
    if text_b is not None:
        words = words + [SEP] + split_words(text_b)
    if not any(not is_punct_word(w) and w != SEP for w in words):
        raise DomainError(f"no words in {raw_text!r}")
    ids = tuple(vocab.token_id(w, n_hash_buckets) if w != SEP else vocab.sep_id for w in words)
    raw = raw_text if text_b is None else f"{raw_text} {SEP} {text_b}"
    return Sentence(raw, tuple(words), ids, label)


def encode_records(vocab: Vocabulary, records: Sequence[LabeledText], n_hash_buckets: int = 1024) -> list[Sentence]:
    return [tokenize(vocab, r.text, n_hash_buckets, r.label, r.text_b) for r in records]


# ---------------------------------------------------------------- homoglyphs


def load_homoglyphs(path: str | Path | None = None) -> dict[str, str]:
    """Read the two-column (char, replacement) table; '#' lines are comments."""
    if path is None:
        text = resources.files("exitslow.data").joinpath("homoglyphs.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    table = {}
    for line in text.splitlines():
        if not line or line.startswith("#"):
            continue
        src, dst = line.split("\t")[:2]
        if src == dst:
            raise ValueError(f"identity homoglyph mapping for {src!r}")
        table[src] = dst
    return table


HOMOGLYPHS = load_homoglyphs()


# ---------------------------------------------------------------- mutations


def _swap(word, rng):
    spots = [i for i in range(len(word) - 1) if word[i] != word[i + 1]]
    if not spots:
        return None
    i = spots[rng.integers(len(spots))]
    return word[:i] + word[i + 1] + word[i] + word[i + 2:]


def _insert(word, rng):
    pos = rng.integers(len(word) + 1)
    ch = INSERT_CHARS[rng.integers(len(INSERT_CHARS))]
    return word[:pos] + ch + word[pos:]


def _delete(word, rng):
    pos = rng.integers(len(word))
    return word[:pos] + word[pos + 1:]


def _homoglyph(word, rng, table):
    spots = [i for i, c in enumerate(word) if c in table]
    if not spots:
        return None
    i = spots[rng.integers(len(spots))]
    return word[:i] + table[word[i]] + word[i + 1:]


def char_mutations(word: str, rng: np.random.Generator, count_per_kind: int = 25,
                   kinds: Sequence[str] = MUTATION_KINDS, table: dict[str, str] | None = None) -> list[str]:
    """Random one-edit variants of ``word``, deduplicated in generation order.

    Swap and deletion are skipped for single-character words.
    """
    if not word:
        raise DomainError("cannot mutate an empty word")
    table = HOMOGLYPHS if table is None else table
    out: dict[str, None] = {}
    for kind in kinds:
        if kind in ("swap", "delete") and len(word) < 2:
            continue
        for _ in range(count_per_kind):
            if kind == "swap":
                m = _swap(word, rng)
            elif kind == "insert":
                m = _insert(word, rng)
            elif kind == "delete":
                m = _delete(word, rng)
            elif kind == "homoglyph":
                m = _homoglyph(word, rng, table)
            else:
                raise ValueError(f"unknown mutation kind {kind!r}")
            if m is not None and m != word:
                out[m] = None
    return list(out)


def osa_distance(a: str, b: str) -> int:
    """Edit distance with adjacent transposition counted as one edit."""
    d = np.zeros((len(a) + 1, len(b) + 1), dtype=np.int64)
    d[:, 0] = np.arange(len(a) + 1)
    d[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + cost)
            if i > 1 and j > 1 and a[i - 1] == b[j - 2] and a[i - 2] == b[j - 1]:
                d[i, j] = min(d[i, j], d[i - 2, j - 2] + 1)
    return int(d[-1, -1])


# ---------------------------------------------------------------- datasets


@dataclass
class LoadResult:
    records: list[LabeledText]
    skipped: list[str] = field(default_factory=list)


def load_dataset(path: str | Path) -> LoadResult:
    """Read UTF-8 JSON lines with "text" (str), "label" (int), optional "text_b"."""
    records, skipped = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                text, label = d["text"], d["label"]
                if not isinstance(text, str) or not isinstance(label, int) or isinstance(label, bool):
                    raise TypeError("text must be str and label int")
                text_b = d.get("text_b")
                records.append(LabeledText(text, label, text_b))
            except (ValueError, KeyError, TypeError) as exc:
                skipped.append(f"line {lineno}: {exc}")
    if skipped:
        log.warning("%s: skipped %d malformed lines", path, len(skipped))
    return LoadResult(records, skipped)


def save_dataset(records: Iterable[LabeledText], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(r.to_json() + "\n")


# ---------------------------------------------------------------- synthetic tasks

POSITIVE = ("good", "great", "excellent", "wonderful", "superb", "delightful",
            "brilliant", "lovely", "fantastic", "charming", "enjoyable", "amazing")
NEGATIVE = ("bad", "awful", "terrible", "boring", "dreadful", "dull",
            "horrible", "poor", "weak", "tedious", "mediocre", "clumsy")
NEGATORS = ("not", "never")
CONTRAST = "but"
FUNCTION_WORDS = ("the", "a", "movie", "film", "was", "is", "and", "it", "this", "story",
                  "plot", "acting", "with", "of", "in", "to", "that", "for", "an", "as")
MARKERS = ("zip", "zap")
NLI_NOUNS = ("cat", "dog", "car", "house", "tree", "river", "city", "child", "song", "book",
             "garden", "ship", "bird", "road", "lamp", "table")
NLI_ADJ_PAIRS = (("big", "small"), ("hot", "cold"), ("fast", "slow"), ("old", "new"),
                 ("happy", "sad"), ("bright", "dark"), ("loud", "quiet"), ("clean", "dirty"))
NLI_SYNONYMS = {"big": "large", "small": "tiny", "hot": "warm", "cold": "chilly", "fast": "quick",
                "slow": "sluggish", "old": "ancient", "new": "fresh", "happy": "glad", "sad": "gloomy",
                "bright": "shiny", "dark": "dim", "loud": "noisy", "quiet": "silent",
                "clean": "tidy", "dirty": "filthy"}

_SYLLABLES = ("ba", "ko", "ri", "te", "mu", "sa", "lo", "ne", "vi", "da", "pe", "zu", "ga", "fi",
              "ro", "ta", "mi", "ke", "lu", "po", "se", "di", "na", "vo", "he", "ju", "wa", "qi")
_LEXICON_SEED = 20230613


def filler_lexicon(n: int = 300) -> tuple[str, ...]:
    """Deterministic pseudo-words used as neutral distractors."""
    rng = np.random.default_rng(_LEXICON_SEED)
    reserved = set(POSITIVE + NEGATIVE + NEGATORS + (CONTRAST,) + FUNCTION_WORDS + MARKERS + NLI_NOUNS
                   + tuple(NLI_SYNONYMS) + tuple(NLI_SYNONYMS.values()))
    out: dict[str, None] = {}
    while len(out) < n:
        k = int(rng.integers(2, 4))
        w = "".join(_SYLLABLES[int(i)] for i in rng.integers(len(_SYLLABLES), size=k))
        if w not in reserved:
            out[w] = None
    return tuple(out)


def keyword_sentiment_rule(words: Sequence[str]) -> int:
    """Sum keyword polarities and return 1 if positive.

    A keyword is flipped when the nearest sentiment-bearing word before it
    (keyword, negator or contrast word; other words are transparent) is a
    negator, so "not the film ... good" reads as negated. When a contrast
    word is followed by keywords, only the keywords after the last one count.
    """
    words = list(words)
    polarity = []
    prev = None
    for w in words:
        pol = 1 if w in POSITIVE else -1 if w in NEGATIVE else 0
        if pol and prev in NEGATORS:
            pol = -pol
        polarity.append(pol)
        if pol or w in NEGATORS or w == CONTRAST:
            prev = w
    if CONTRAST in words:
        cut = len(words) - 1 - words[::-1].index(CONTRAST)
        if any(polarity[cut + 1:]):
            polarity = polarity[cut + 1:]
    score = sum(polarity)
    if score == 0:
        raise DomainError("tied sentiment score")
    return int(score > 0)


def parity_rule(words: Sequence[str]) -> int:
    return sum(w in MARKERS for w in words) % 2


def nli_rule(premise: Sequence[str], hypothesis: Sequence[str]) -> int:
    """0 entailment, 1 contradiction, 2 neutral."""
    pn = next(w for w in premise if w in NLI_NOUNS)
    hn = next(w for w in hypothesis if w in NLI_NOUNS)
    if pn != hn:
        return 2
    pa = next(w for w in premise if w in NLI_SYNONYMS or w in NLI_SYNONYMS.values())
    ha = next(w for w in hypothesis if w in NLI_SYNONYMS or w in NLI_SYNONYMS.values())
    canon = {v: k for k, v in NLI_SYNONYMS.items()}
    pa, ha = canon.get(pa, pa), canon.get(ha, ha)
    return 0 if pa == ha else 1


def _fill(rng, n, fillers):
    # mostly pseudo-words, some function words
    out = []
    for _ in range(n):
        if rng.random() < 0.3:
            out.append(FUNCTION_WORDS[rng.integers(len(FUNCTION_WORDS))])
        else:
            out.append(fillers[rng.integers(len(fillers))])
    return out


def _place(rng, base: list[str], units: list[list[str]]) -> list[str]:
    # insert multi-word units at random non-overlapping slots
    slots = sorted(rng.choice(len(base) + 1, size=len(units), replace=True).tolist())
    out, prev = [], 0
    order = rng.permutation(len(units))
    for s, u in zip(slots, order):
        out.extend(base[prev:s])
        out.extend(units[u])
        prev = s
    out.extend(base[prev:])
    return out


def _keyword(rng, positive: bool) -> str:
    pool = POSITIVE if positive else NEGATIVE
    return pool[rng.integers(len(pool))]


# Generator knobs for keyword-sentiment: difficulty-level probabilities
# (easy / medium / contrast), share of medium items using mixed counts
# instead of negation, distribution of neutral words between a negator and
# its keyword, and the chance each contrast clause uses negation.
KEYWORD_MIX = {
    "levels": (0.3, 0.35, 0.35),
    "mixed": 0.25,
    "gap": (0.4, 0.35, 0.25),
    "first_neg": 0.0,
    "second_neg": 0.7,
}


def _keyword_units(rng, level: int, fillers) -> list[list[str]]:
    if level == 0:
        pol = bool(rng.integers(2))
        return [[_keyword(rng, pol)] for _ in range(int(rng.integers(1, 4)))]
    if rng.random() < KEYWORD_MIX["mixed"]:
        n_pos, n_neg = 0, 0
        while n_pos == n_neg:
            n_pos, n_neg = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        return [[_keyword(rng, True)] for _ in range(n_pos)] + [[_keyword(rng, False)] for _ in range(n_neg)]
    units = [[NEGATORS[rng.integers(len(NEGATORS))]] + _fill(rng, int(rng.choice(len(KEYWORD_MIX["gap"]), p=KEYWORD_MIX["gap"])), fillers)
             + [_keyword(rng, bool(rng.integers(2)))] for _ in range(int(rng.integers(1, 3)))]
    units += [[_keyword(rng, bool(rng.integers(2)))] for _ in range(int(rng.integers(0, 2)))]
    return units


def _keyword_sentence(rng, fillers) -> list[str]:
    # easy: one polarity; medium: mixed counts or negation; hard: contrast clause
    while True:
        level = int(rng.choice(3, p=KEYWORD_MIX["levels"]))
        n_words = int(rng.integers(8, 17))
        if level < 2:
            units = _keyword_units(rng, level, fillers)
            n_fill = max(n_words - sum(len(u) for u in units), 2)
            words = _place(rng, _fill(rng, n_fill, fillers), units)
        else:
            pol = bool(rng.integers(2))
            first = (_keyword_units(rng, 1, fillers) if rng.random() < KEYWORD_MIX["first_neg"]
                     else [[_keyword(rng, pol)] for _ in range(int(rng.integers(1, 3)))])
            second = _keyword_units(rng, int(rng.random() < KEYWORD_MIX["second_neg"]), fillers)
            n_fill = max(n_words - 1 - sum(len(u) for u in first + second), 2)
            split = int(rng.integers(1, n_fill))
            base = _fill(rng, n_fill, fillers)
            words = _place(rng, base[:split], first) + [CONTRAST] + _place(rng, base[split:], second)
        try:
            keyword_sentiment_rule(words)
        except DomainError:
            continue
        return words


def _parity_sentence(rng, fillers) -> list[str]:
    n_markers = int(rng.integers(1, 5))
    n_words = int(rng.integers(8, 17))
    units = [[MARKERS[rng.integers(2)]] for _ in range(n_markers)]
    return _place(rng, _fill(rng, max(n_words - n_markers, 2), fillers), units)


def _nli_pair(rng, fillers) -> tuple[list[str], list[str]]:
    noun = NLI_NOUNS[rng.integers(len(NLI_NOUNS))]
    a, b = NLI_ADJ_PAIRS[rng.integers(len(NLI_ADJ_PAIRS))]
    adj = a if rng.integers(2) else b
    premise = ["the", noun, "is", adj] + _fill(rng, int(rng.integers(0, 4)), fillers)
    kind = rng.integers(3)
    if kind == 0:
        h_noun, h_adj = noun, adj if rng.random() < 0.5 else NLI_SYNONYMS[adj]
    elif kind == 1:
        other = b if adj == a else a
        h_noun, h_adj = noun, other if rng.random() < 0.5 else NLI_SYNONYMS[other]
    else:
        h_noun = noun
        while h_noun == noun:
            h_noun = NLI_NOUNS[rng.integers(len(NLI_NOUNS))]
        h_adj = adj
    hyp = ["the", h_noun, "is", h_adj] + _fill(rng, int(rng.integers(0, 3)), fillers)
    return premise, hyp


TASKS = ("keyword-sentiment", "parity-of-markers", "templated-NLI")


def synth_task(task_kind: str, n_samples: int, seed: int) -> list[LabeledText]:
    """Deterministic labelled sentences whose label is a known function of the words."""
    if task_kind not in TASKS:
        raise ValueError(f"unknown task {task_kind!r}; expected one of {TASKS}")
    rng = np.random.default_rng(seed)
    fillers = filler_lexicon()
    out = []
    for _ in range(n_samples):
        if task_kind == "keyword-sentiment":
            words = _keyword_sentence(rng, fillers)
            out.append(LabeledText(" ".join(words), keyword_sentiment_rule(words)))
        elif task_kind == "parity-of-markers":
            words = _parity_sentence(rng, fillers)
            out.append(LabeledText(" ".join(words), parity_rule(words)))
        else:
            p, h = _nli_pair(rng, fillers)
            out.append(LabeledText(" ".join(p), nli_rule(p, h), " ".join(h)))
    return out


def task_rule(task_kind: str, record: LabeledText) -> int:
    if task_kind == "keyword-sentiment":
        return keyword_sentiment_rule(split_words(record.text))
    if task_kind == "parity-of-markers":
        return parity_rule(split_words(record.text))
    return nli_rule(split_words(record.text), split_words(record.text_b))


def rule_labeler(task_kind: str) -> Callable[[Sentence], int | None]:
    """Ground-truth label of an (edited) sentence under the task rule; None when undefined."""

    def label(sentence: Sentence) -> int | None:
        words = list(sentence.words)
        text_b = None
        if SEP in words:
            k = words.index(SEP)
            words, text_b = words[:k], " ".join(words[k + 1:])
        try:
            return task_rule(task_kind, LabeledText(" ".join(words), 0, text_b))
        except (DomainError, StopIteration):
            return None

    return label


def n_classes_for(task_kind: str) -> int:
    return 3 if task_kind == "templated-NLI" else 2


def task_vocabulary(task_kind: str) -> list[str]:
    """Complete word list a task can emit, so unseen-in-train words still get ids."""
    words = list(FUNCTION_WORDS) + list(filler_lexicon())
    if task_kind == "keyword-sentiment":
        words += list(POSITIVE + NEGATIVE + NEGATORS) + [CONTRAST]
    elif task_kind == "parity-of-markers":
        words += list(MARKERS)
    else:
        words += list(NLI_NOUNS) + list(NLI_SYNONYMS) + list(NLI_SYNONYMS.values())
    return words

