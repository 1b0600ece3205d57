"""Caption assembly, toy tokenization and phrase-to-token positive maps."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data.samples import GroundingSample
from .errors import AnnotationError, CapacityError, FormatError, SamplingError

PAD, UNK, SEP = "[PAD]", "[UNK]", "."
SEPARATOR = ". "
DEFAULT_MAX_LEN = 64

_TOKEN_RE = re.compile(r"[^\s.]+|\.")


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.tokens[:3] != [PAD, UNK, SEP]:
            raise FormatError(f"vocabulary must start with {PAD}, {UNK}, {SEP!r}")
        if len(set(self.tokens)) != len(self.tokens):
            raise FormatError("vocabulary has duplicate tokens")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    pad_id = 0
    unk_id = 1
    sep_id = 2

    def __len__(self) -> int:
        return len(self.tokens)

    def lookup(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        """Vocabulary over every word in ``texts``, in first-seen order."""
        tokens = [PAD, UNK, SEP]
        seen = set(tokens)
        for text in texts:
            for m in _TOKEN_RE.finditer(text.lower()):
                if m.group() not in seen:
                    seen.add(m.group())
                    tokens.append(m.group())
        return cls(tokens)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class PhraseGroup:
    phrase_id: int
    token_indices: tuple[int, ...]
    start: int
    end: int


@dataclass
class TokenizedCaption:
    text: str
    tokens: list[str]
    token_ids: list[int]
    char_spans: list[tuple[int, int]]
    phrase_groups: list[PhraseGroup]
    max_len: int = DEFAULT_MAX_LEN

    def __len__(self) -> int:
        return len(self.token_ids)

    def group(self, phrase_id: int) -> PhraseGroup:
        for g in self.phrase_groups:
            if g.phrase_id == phrase_id:
                return g
        raise AnnotationError(f"caption has no phrase with id {phrase_id}")

    def token_range_text(self, phrase_id: int) -> str:
        """Text covered by the first through last token of a phrase."""
        idx = self.group(phrase_id).token_indices
        return self.text[self.char_spans[idx[0]][0]:self.char_spans[idx[-1]][1]]

    def phrase_token_groups(self) -> dict[int, tuple[int, ...]]:
        return {g.phrase_id: g.token_indices for g in self.phrase_groups}


def _segments(text: str, spans: list[tuple[int, int]], tokens: list[str]) -> list[tuple[int, int, int]]:
    """Default phrases: maximal runs of non-separator tokens."""
    out, run = [], []
    for i, tok in enumerate(tokens):
        if tok == SEP:
            if run:
                out.append(run)
            run = []
        else:
            run.append(i)
    if run:
        out.append(run)
    return [(pid, spans[r[0]][0], spans[r[-1]][1]) for pid, r in enumerate(out)]


def tokenize(text: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN,
             phrase_spans: Sequence[tuple[int, int, int]] | None = None) -> TokenizedCaption:
    """Lowercase word/period tokenization with phrase grouping.

    ``phrase_spans`` holds ``(phrase_id, start, end)`` character ranges; when
    omitted every period-delimited segment becomes a phrase numbered from 0.
    Tokens past ``max_len`` are dropped, which is an error if any phrase loses
    a token.
    """
    if not text:
        raise FormatError("cannot tokenize an empty caption")
    lowered = text.lower()
    matches = list(_TOKEN_RE.finditer(lowered))
    tokens = [m.group() for m in matches]
    spans = [(m.start(), m.end()) for m in matches]
    if phrase_spans is None:
        phrase_spans = _segments(text, spans, tokens)
    groups = []
    for pid, start, end in phrase_spans:
        members = tuple(i for i, (s, e) in enumerate(spans) if s >= start and e <= end)
        if not members:
            raise AnnotationError(f"phrase {pid} ({text[start:end]!r}) covers no tokens")
        if members[-1] >= max_len:
            raise CapacityError(f"phrase {text[start:end]!r} does not fit in max_len={max_len} tokens")
        groups.append(PhraseGroup(pid, members, start, end))
    tokens, spans = tokens[:max_len], spans[:max_len]
    return TokenizedCaption(text, tokens, [vocab.lookup(t) for t in tokens], spans, groups, max_len)


def assemble_ovd_caption(categories: Sequence[str]) -> tuple[str, list[tuple[int, int, int]]]:
    """Join category names into one detection prompt, e.g. ``"People. Ball."``.

    Returns the caption and ``(phrase_id, start, end)`` per category, where
    phrase_id is the position in ``categories``.
    """
    if not categories:
        raise FormatError("need at least one category")
    spans, pos = [], 0
    for i, name in enumerate(categories):
        if not name or name != name.strip():
            raise FormatError(f"category {name!r} is empty or has surrounding whitespace")
        if SEPARATOR in name or name.endswith("."):
            raise FormatError(f"category {name!r} contains the separator")
        spans.append((i, pos, pos + len(name)))
        pos += len(name) + len(SEPARATOR)
    return SEPARATOR.join(categories) + ".", spans


def append_phrases(caption: str, spans: list[tuple[int, int, int]], extra: Sequence[str],
                   first_id: int) -> tuple[str, list[tuple[int, int, int]]]:
    """Append ``extra`` strings as new period-separated phrases."""
    if not extra:
        return caption, list(spans)
    base = caption.rstrip()
    if not base.endswith("."):
        base += "."
    tail, tail_spans = assemble_ovd_caption(list(extra))
    offset = len(base) + 1
    new_spans = list(spans) + [(first_id + k, offset + s, offset + e) for k, s, e in tail_spans]
    return base + " " + tail, new_spans


def build_positive_map(caption: TokenizedCaption, phrase_ids: Sequence) -> np.ndarray:
    """Binary [n_instances x n_tokens] map; row i marks instance i's phrase tokens.

    ``phrase_ids`` may hold ints or objects with a ``phrase_id`` attribute.
    """
    groups = caption.phrase_token_groups()
    out = np.zeros((len(phrase_ids), len(caption)), dtype=np.float64)
    for row, item in enumerate(phrase_ids):
        pid = getattr(item, "phrase_id", item)
        if pid not in groups:
            raise AnnotationError(f"instance {row} refers to missing phrase {pid}")
        out[row, list(groups[pid])] = 1.0
    return out


def caption_for_sample(sample: GroundingSample, present_only: bool = False
                       ) -> tuple[str, list[tuple[int, int, int]], list[int]]:
    """Text prompt, phrase spans and per-instance phrase ids for a sample.

    OVD samples use their category list (only categories with instances when
    ``present_only``), keeping category ids as phrase ids.
    """
    if sample.task == "OVD":
        ids = sorted({i.category_id for i in sample.instances}) if present_only else range(len(sample.categories))
        ids = list(ids)
        if not ids:
            return "", [], []
        caption, spans = assemble_ovd_caption([sample.categories[i] for i in ids])
        spans = [(ids[k], s, e) for k, s, e in spans]
        return caption, spans, [i.category_id for i in sample.instances]
    spans = [(p.id, p.start, p.end) for p in sample.phrases]
    return sample.caption, spans, [i.phrase_id for i in sample.instances]


def sample_negatives(sample: GroundingSample, pool: Sequence[str], n_neg: int, rng_seed: int,
                     vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN
                     ) -> tuple[TokenizedCaption, np.ndarray]:
    """Append ``n_neg`` negative phrases drawn from ``pool`` to the sample's prompt.

    Pool entries equal (case-insensitively) to a positive phrase are removed
    first.  Negative tokens carry no positives in the returned map.
    """
    caption, spans, inst_phrases = caption_for_sample(sample, present_only=True)
    positives = {caption[s:e].lower() for _, s, e in spans}
    candidates, seen = [], set()
    for entry in pool:
        key = entry.lower()
        if key not in positives and key not in seen:
            seen.add(key)
            candidates.append(entry)
    if n_neg > len(candidates):
        raise SamplingError(f"need {n_neg} negatives but only {len(candidates)} usable pool entries")
    if n_neg > 0:
        rng = np.random.default_rng(rng_seed)
        chosen = [candidates[i] for i in rng.choice(len(candidates), size=n_neg, replace=False)]
        first_id = max([pid for pid, _, _ in spans], default=-1) + 1
        if caption:
            caption, spans = append_phrases(caption, spans, chosen, first_id)
        else:
            caption, raw = assemble_ovd_caption(chosen)
            spans = [(first_id + k, s, e) for k, s, e in raw]
    tokenized = tokenize(caption, vocab, max_len, spans)
    return tokenized, build_positive_map(tokenized, inst_phrases)
