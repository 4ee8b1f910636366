"""Noun-phrase / prepositional-phrase extraction and span merging.

Instructions are tokenized on word characters; spans are word-index ranges
whose text is always an exact character slice of the original instruction.
The default backend is a self-contained rule chunker (closed-class lexicon
plus suffix heuristics, unknown words default to nouns), which keeps golden
files stable with zero external dependencies. Other backends can be plugged
in through the :class:`ChunkerBackend` protocol.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Protocol

from .errors import DataError

KIND_NP = "NP"
KIND_PP = "PP"
KIND_MERGED = "merged"

DEFAULT_N_P_MAX = 8

_TOKEN_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9'\-]*")
_SENT_BREAK_RE = re.compile(r"[.!?;]")


@dataclass(frozen=True)
class Token:
    text: str
    start: int  # word index
    char_start: int
    char_end: int
    sentence: int


@dataclass(frozen=True)
class PhraseSpan:
    """A phrase as a word-index range [start, end) into the instruction."""

    text: str
    start: int
    end: int
    kind: str
    char_start: int = -1
    char_end: int = -1
    sentence: int = 0

    def __post_init__(self):
        if self.start >= self.end:
            raise DataError(f"phrase span must satisfy start < end, got ({self.start}, {self.end})")


@dataclass(frozen=True)
class PhraseSet:
    """Ordered phrases of one instruction, with padding mask after pad_truncate."""

    phrases: tuple[PhraseSpan, ...]
    mask: tuple[bool, ...]  # True = real phrase, False = padding
    instruction: str
    sample_id: str = ""

    @property
    def n_p(self) -> int:
        return len(self.phrases)

    def texts(self) -> list[str]:
        return [p.text for p in self.phrases]


def tokenize(text: str) -> list[Token]:
    """Word tokens with character offsets and sentence indices."""
    tokens = []
    sentence = 0
    last_end = 0
    for i, m in enumerate(_TOKEN_RE.finditer(text)):
        if _SENT_BREAK_RE.search(text[last_end : m.start()]):
            sentence += 1
        tokens.append(Token(m.group(0), i, m.start(), m.end(), sentence))
        last_end = m.end()
    return tokens


# Closed-class word lists for the rule tagger. Unknown words fall back to
# NOUN, which is the safe default for referring-expression English.
_DETERMINERS = {
    "a", "an", "the", "this", "that", "these", "those",
    "my", "your", "his", "her", "its", "our", "their", "some", "any", "each", "every",
}
_PREPOSITIONS = {
    "aboard", "about", "above", "across", "after", "against", "along", "alongside",
    "amid", "among", "around", "at", "atop", "before", "behind", "below", "beneath",
    "beside", "besides", "between", "beyond", "by", "down", "from", "in", "inside",
    "into", "near", "nearest", "next", "of", "off", "on", "onto", "opposite", "out",
    "outside", "over", "past", "through", "to", "toward", "towards", "under",
    "underneath", "up", "upon", "with", "within", "without",
}
_PRONOUNS = {"it", "me", "him", "them", "us", "you", "one", "i", "we", "they", "she", "he"}
_VERBS = {
    "am", "are", "be", "been", "being", "bring", "can", "carry", "choose", "clean",
    "close", "collect", "could", "deliver", "do", "does", "drop", "fetch", "find",
    "get", "give", "go", "grab", "grasp", "had", "hand", "has", "have", "head",
    "is", "lift", "locate", "look", "make", "move", "open", "pick", "place",
    "please", "proceed", "pull", "push", "put", "retrieve", "return", "select",
    "set", "should", "show", "take", "turn", "walk", "was", "wash", "were", "will", "would",
}
_CONJUNCTIONS = {"and", "or", "but", "nor", "so", "yet", "then", "if", "because", "while", "when", "where"}
_WH_WORDS = {"which", "who", "whom", "whose", "what", "how", "why"}
_ADVERBS = {"directly", "there", "here", "not", "also", "just", "very", "too", "again", "back"}
_ADJECTIVES = {
    "big", "small", "large", "little", "tall", "short", "long", "round", "square",
    "high", "low", "left", "right", "first", "second", "third", "fourth", "fifth",
    "last", "other", "same", "new", "old", "open", "closed", "empty", "full",
    "red", "blue", "green", "yellow", "orange", "purple", "pink", "brown", "black",
    "white", "gray", "grey", "cyan", "magenta", "golden", "silver", "wooden", "metal",
    "plastic", "glass", "striped", "dotted", "dark", "light", "upper", "lower",
    "top", "bottom", "middle", "front", "rear", "near", "far", "closest", "nearest",
}

_TAG_DET = "DET"
_TAG_ADJ = "ADJ"
_TAG_NOUN = "NOUN"
_TAG_VERB = "VERB"
_TAG_PREP = "PREP"
_TAG_PRON = "PRON"
_TAG_NUM = "NUM"
_TAG_OTHER = "OTHER"

# Directly after a verb these act as phrasal-verb particles ("pick up",
# "pull out"), not as prepositions.
_PARTICLES = {"up", "down", "out", "off", "over", "back", "in"}


def _tag(word: str, prev_tag: str | None) -> str:
    w = word.lower()
    if w.replace("-", "").isdigit():
        return _TAG_NUM
    if w in _DETERMINERS:
        return _TAG_DET
    if prev_tag == _TAG_DET and w in _ADJECTIVES:
        # adjective reading wins right after a determiner ("the open book",
        # "the nearest table") even for verb/preposition homographs
        return _TAG_ADJ
    if w in _PREPOSITIONS:
        if prev_tag == _TAG_VERB and w in _PARTICLES:
            return _TAG_OTHER
        return _TAG_PREP
    if w in _PRONOUNS:
        return _TAG_PRON
    if w in _VERBS:
        return _TAG_VERB
    if w in _CONJUNCTIONS or w in _WH_WORDS:
        return _TAG_OTHER
    if w in _ADVERBS:
        return _TAG_OTHER
    if w in _ADJECTIVES:
        return _TAG_ADJ
    if w.endswith("ly"):
        return _TAG_OTHER
    if w.endswith("ed"):
        return _TAG_VERB
    return _TAG_NOUN


class ChunkerBackend(Protocol):
    """Pluggable phrase extractor; must be deterministic for a fixed version."""

    name: str

    def chunk(self, text: str) -> list[PhraseSpan]: ...


class RuleChunker:
    """Deterministic finite-state NP/PP chunker over the rule tagger.

    NP core: DET? (ADJ|NUM|VERB-participle)* NOUN+ NUM*
    PP:      PREP+ (NP core | PRON)
    """

    name = "rulechunker-1"

    def chunk(self, text: str) -> list[PhraseSpan]:
        tokens = tokenize(text)
        tags: list[str] = []
        for t in tokens:
            prev = tags[-1] if tags else None
            tags.append(_tag(t.text, prev))

        spans: list[PhraseSpan] = []
        i = 0
        n = len(tokens)
        while i < n:
            start = i
            kind = None
            if tags[i] == _TAG_PREP:
                j = i
                while j < n and tags[j] == _TAG_PREP and tokens[j].sentence == tokens[i].sentence:
                    j += 1
                core_end = self._np_core_end(tokens, tags, j, tokens[i].sentence)
                if core_end > j:
                    kind, i = KIND_PP, core_end
                elif j < n and tags[j] == _TAG_PRON and tokens[j].sentence == tokens[i].sentence:
                    kind, i = KIND_PP, j + 1
                else:
                    i += 1
                    continue
            else:
                core_end = self._np_core_end(tokens, tags, i, tokens[i].sentence)
                if core_end > i:
                    kind, i = KIND_NP, core_end
                else:
                    i += 1
                    continue
            spans.append(
                PhraseSpan(
                    text=text[tokens[start].char_start : tokens[i - 1].char_end],
                    start=start,
                    end=i,
                    kind=kind,
                    char_start=tokens[start].char_start,
                    char_end=tokens[i - 1].char_end,
                    sentence=tokens[start].sentence,
                )
            )
        return spans

    @staticmethod
    def _np_core_end(tokens: list[Token], tags: list[str], i: int, sentence: int) -> int:
        """End index of an NP core starting at i, or i when there is none."""
        n = len(tokens)
        j = i
        if j < n and tags[j] == _TAG_DET and tokens[j].sentence == sentence:
            j += 1
        det_end = j
        while j < n and tags[j] in (_TAG_ADJ, _TAG_NUM) and tokens[j].sentence == sentence:
            j += 1
        # participle modifiers right before the head ("the painted wall")
        while (
            j < n
            and tags[j] == _TAG_VERB
            and tokens[j].text.lower().endswith("ed")
            and j + 1 < n
            and tags[j + 1] == _TAG_NOUN
            and tokens[j].sentence == sentence
        ):
            j += 1
        noun_start = j
        while j < n and tags[j] == _TAG_NOUN and tokens[j].sentence == sentence:
            j += 1
        if j == noun_start:
            # no noun head: accept a trailing adjective as the nominal head
            # ("the blue square" where shape words tag as adjectives)
            if noun_start > det_end and tags[noun_start - 1] == _TAG_ADJ:
                return noun_start
            return i
        while j < n and tags[j] == _TAG_NUM and tokens[j].sentence == sentence:
            j += 1
        return j


_DEFAULT_BACKEND = RuleChunker()


def default_backend() -> RuleChunker:
    return _DEFAULT_BACKEND


def parse_phrases(instruction_text: str, backend: ChunkerBackend | None = None) -> list[PhraseSpan]:
    """Extract maximal NP and PP spans in sentence order."""
    if not instruction_text or not instruction_text.strip():
        raise DataError("parse_phrases: empty instruction")
    backend = backend or _DEFAULT_BACKEND
    spans = backend.chunk(instruction_text)
    _check_sorted(spans)
    return spans


def _check_sorted(spans: list[PhraseSpan]) -> None:
    for a, b in zip(spans, spans[1:]):
        if b.start < a.end:
            raise DataError(f"phrase spans must be sorted and non-overlapping: {a} then {b}")


def merge_adjacent(spans: list[PhraseSpan], instruction: str, sample_id: str = "") -> PhraseSet:
    """Collapse runs of strictly adjacent spans (zero-word gap) into merged spans.

    Merging never crosses a sentence boundary; merged text is the exact
    substring of the instruction covering the run.
    """
    _check_sorted(spans)
    merged: list[PhraseSpan] = []
    run: list[PhraseSpan] = []

    def flush():
        if not run:
            return
        if len(run) == 1:
            merged.append(run[0])
        else:
            first, last = run[0], run[-1]
            merged.append(
                PhraseSpan(
                    text=instruction[first.char_start : last.char_end],
                    start=first.start,
                    end=last.end,
                    kind=KIND_MERGED,
                    char_start=first.char_start,
                    char_end=last.char_end,
                    sentence=first.sentence,
                )
            )
        run.clear()

    for span in spans:
        if run and span.start == run[-1].end and span.sentence == run[-1].sentence:
            run.append(span)
        else:
            flush()
            run.append(span)
    flush()

    return PhraseSet(
        phrases=tuple(merged),
        mask=tuple(True for _ in merged),
        instruction=instruction,
        sample_id=sample_id,
    )


def pad_truncate(phrase_set: PhraseSet, n_p_max: int = DEFAULT_N_P_MAX) -> PhraseSet:
    """Fix the phrase count to exactly ``n_p_max`` with an explicit mask.

    With zero extracted phrases the whole instruction becomes the single
    unmasked phrase, so downstream encoders always see >= 1 real token.
    """
    if n_p_max < 1:
        raise DataError(f"pad_truncate: n_p_max must be >= 1, got {n_p_max}")
    phrases = list(phrase_set.phrases[:n_p_max])
    mask = [True] * len(phrases)
    if not phrases:
        text = phrase_set.instruction
        tokens = tokenize(text)
        if not tokens:
            raise DataError("pad_truncate: instruction has no tokens")
        phrases = [
            PhraseSpan(
                text=text[tokens[0].char_start : tokens[-1].char_end],
                start=0,
                end=len(tokens),
                kind=KIND_MERGED,
                char_start=tokens[0].char_start,
                char_end=tokens[-1].char_end,
                sentence=0,
            )
        ]
        mask = [True]
    pad_span = PhraseSpan(text="", start=0, end=1, kind=KIND_MERGED, char_start=0, char_end=0)
    while len(phrases) < n_p_max:
        phrases.append(pad_span)
        mask.append(False)
    return PhraseSet(
        phrases=tuple(phrases),
        mask=tuple(mask),
        instruction=phrase_set.instruction,
        sample_id=phrase_set.sample_id,
    )


def extract_phrase_set(
    instruction: str,
    n_p_max: int = DEFAULT_N_P_MAX,
    backend: ChunkerBackend | None = None,
    sample_id: str = "",
) -> PhraseSet:
    """parse -> merge -> pad/truncate in one call."""
    spans = parse_phrases(instruction, backend=backend)
    merged = merge_adjacent(spans, instruction, sample_id=sample_id)
    return pad_truncate(merged, n_p_max=n_p_max)
