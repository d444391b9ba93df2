"""Text normalization: tokenization, stop-word filtering, byte-pair encoding.

The pipeline turns raw text into fixed-length integer sequences for the
encoders.  One joint BPE vocabulary is shared across all languages so that
both towers speak the same sub-word alphabet.
"""

from __future__ import annotations

import re
import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ParseError

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3
RESERVED_TOKENS = ("<pad>", "<unk>", "<cls>", "<sep>")

# Word-boundary marker appended as its own symbol after each word's
# characters.  It must stay separate (not fused onto the last character) or
# merge statistics change.
END_MARK = "</w>"

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Case-fold and split on whitespace/punctuation, dropping punctuation."""
    return _TOKEN_RE.findall(text.casefold())


@dataclass(frozen=True)
class StopwordSet:
    """Per-language stop-word lists with case-folded lookup."""

    by_lang: dict[str, frozenset[str]] = field(default_factory=dict)

    @staticmethod
    def build(raw: dict[str, list[str] | set[str]]) -> "StopwordSet":
        return StopwordSet({lang: frozenset(w.casefold() for w in words)
                            for lang, words in raw.items()})

    def words(self, lang: str) -> frozenset[str]:
        return self.by_lang.get(lang, frozenset())


def remove_stopwords(tokens: list[str], lang: str,
                     stopwords: StopwordSet) -> list[str]:
    """Order-preserving filter; an unknown language filters nothing."""
    if lang not in stopwords.by_lang:
        warnings.warn(f"no stopword list for language {lang!r}; keeping all tokens",
                      stacklevel=2)
        return list(tokens)
    drop = stopwords.by_lang[lang]
    return [tok for tok in tokens if tok.casefold() not in drop]


@dataclass(frozen=True)
class BpeModel:
    """Ordered merge pairs; list position is the merge rank."""

    merges: tuple[tuple[str, str], ...]

    def rank_table(self) -> dict[tuple[str, str], int]:
        return {pair: rank for rank, pair in enumerate(self.merges)}


def _pair_counts(words: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for symbols, freq in words.items():
        for left, right in zip(symbols, symbols[1:]):
            counts[(left, right)] += freq
    return counts


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str],
                joined: str) -> tuple[str, ...]:
    out: list[str] = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
            out.append(joined)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def train_bpe(corpus: list[list[str]], num_merges: int) -> BpeModel:
    """Learn merges by repeatedly joining the most frequent adjacent pair.

    Counts are pooled over the whole corpus; ties go to the lexicographically
    smallest pair so training is order-independent and deterministic.  Stops
    early once no adjacent pair remains.
    """
    if num_merges < 0:
        raise DomainError(f"num_merges must be >= 0, got {num_merges}")
    freqs = Counter(tok for doc in corpus for tok in doc)
    if not freqs:
        raise DomainError("cannot train BPE on an empty corpus")

    words = {tuple(tok) + (END_MARK,): freq for tok, freq in freqs.items()}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        counts = _pair_counts(words)
        if not counts:
            break
        best_count = max(counts.values())
        pair = min(p for p, c in counts.items() if c == best_count)
        joined = pair[0] + pair[1]
        words = {_merge_word(sym, pair, joined): freq
                 for sym, freq in words.items()}
        merges.append(pair)
    return BpeModel(tuple(merges))


class Vocab:
    """Token/id bijection with fixed reserved ids PAD=0 UNK=1 CLS=2 SEP=3."""

    def __init__(self, tokens: list[str] = ()):  # type: ignore[assignment]
        self._token_of: list[str] = list(RESERVED_TOKENS)
        self._id_of: dict[str, int] = {t: i for i, t in enumerate(self._token_of)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token in self._id_of:
            return self._id_of[token]
        idx = len(self._token_of)
        self._token_of.append(token)
        self._id_of[token] = idx
        return idx

    def id_of(self, token: str) -> int:
        return self._id_of.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self._token_of[idx]

    def __contains__(self, token: str) -> bool:
        return token in self._id_of

    def __len__(self) -> int:
        return len(self._token_of)

    def stored_tokens(self) -> list[str]:
        """Tokens past the reserved block, in id order."""
        return self._token_of[len(RESERVED_TOKENS):]


def build_vocab(corpus: list[list[str]], model: BpeModel) -> Vocab:
    """Closure of symbols reachable by encoding in-alphabet text.

    Sorted single characters first, then merge results in rank order; any
    sequence bpe_encode can emit from known characters maps to real ids.
    """
    vocab = Vocab()
    chars = sorted({ch for doc in corpus for tok in doc for ch in tok})
    for ch in chars:
        vocab.add(ch)
    for left, right in model.merges:
        vocab.add(left + right)
    return vocab


def bpe_encode(token: str, model: BpeModel, vocab: Vocab) -> list[int]:
    """Split one token into sub-word ids, applying merges lowest rank first.

    A boundary marker left unmerged carries no content, so it is dropped
    rather than emitted as its own id.
    """
    symbols: tuple[str, ...] = tuple(token) + (END_MARK,)
    ranks = model.rank_table()
    while len(symbols) > 1:
        candidates = [(ranks[p], p) for p in zip(symbols, symbols[1:])
                      if p in ranks]
        if not candidates:
            break
        _, pair = min(candidates)
        symbols = _merge_word(symbols, pair, pair[0] + pair[1])
    if symbols and symbols[-1] == END_MARK:
        symbols = symbols[:-1]
    return [vocab.id_of(s) for s in symbols]


def decode_token(ids: list[int], vocab: Vocab) -> str:
    """Inverse of bpe_encode for in-vocab ids: concat and strip boundaries."""
    return "".join(vocab.token_of(i) for i in ids).replace(END_MARK, "")


@dataclass(frozen=True)
class TextPipeline:
    """Everything needed to turn raw text into encoder-ready id sequences."""

    vocab: Vocab
    bpe: BpeModel
    stopwords: StopwordSet
    max_len: int = 16


def fit_pipeline(texts_by_lang: dict[str, list[str]], stopwords: StopwordSet,
                 num_merges: int = 512, max_len: int = 16) -> TextPipeline:
    """Tokenize + filter every text, then train one joint BPE over all languages."""
    corpus: list[list[str]] = []
    for lang in sorted(texts_by_lang):
        for text in texts_by_lang[lang]:
            corpus.append(remove_stopwords(tokenize(text), lang, stopwords))
    model = train_bpe(corpus, num_merges)
    vocab = build_vocab(corpus, model)
    return TextPipeline(vocab=vocab, bpe=model, stopwords=stopwords,
                        max_len=max_len)


def encode_text(text: str, lang: str,
                pipeline: TextPipeline) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-length id sequence: CLS, sub-words, PAD fill; mask flags real slots."""
    max_len = pipeline.max_len
    if max_len < 2:
        raise DomainError(f"max_len must be >= 2, got {max_len}")
    tokens = remove_stopwords(tokenize(text), lang, pipeline.stopwords)
    ids = [CLS_ID]
    for tok in tokens:
        ids.extend(bpe_encode(tok, pipeline.bpe, pipeline.vocab))
        if len(ids) >= max_len:
            break
    ids = ids[:max_len]
    mask = [1] * len(ids) + [0] * (max_len - len(ids))
    ids = ids + [PAD_ID] * (max_len - len(ids))
    return np.array(ids, dtype=np.int64), np.array(mask, dtype=np.int64)


# ---------------------------------------------------------------------------
# asset files (all UTF-8, one entry per line)
# ---------------------------------------------------------------------------

def save_vocab(path, vocab: Vocab) -> None:
    """Reserved ids are implicit; line number = id - len(RESERVED_TOKENS)."""
    with open(path, "w", encoding="utf-8") as fh:
        for tok in vocab.stored_tokens():
            fh.write(tok + "\n")


def load_vocab(path) -> Vocab:
    with open(path, encoding="utf-8") as fh:
        return Vocab([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def save_merges(path, model: BpeModel) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for left, right in model.merges:
            fh.write(f"{left} {right}\n")


def load_merges(path) -> BpeModel:
    merges: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ParseError(f"expected 'left right' merge pair, got {line!r}",
                                 line=lineno)
            merges.append((parts[0], parts[1]))
    return BpeModel(tuple(merges))


def save_stopwords(path, words) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for word in sorted(set(words)):
            fh.write(word + "\n")


def load_stopwords(path) -> frozenset[str]:
    with open(path, encoding="utf-8") as fh:
        return frozenset(line.rstrip("\n").casefold() for line in fh
                         if line.rstrip("\n"))
