"""Closed-vocabulary word-level tokenizer.

Text is lower-cased and split on whitespace plus a small punctuation set
that the prompt templates rely on ({. , ? ! ' :}); punctuation marks are
tokens of their own. Five special markers occupy the first ids:
[CLS]=0  [SEP]=1  [MASK]=2  [PAD]=3  [UNK]=4
The literal strings "[CLS]" etc. pass through normalization untouched so
prompts can be written as plain text.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

CLS, SEP, MASK, PAD, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"]
_SPECIAL_SET = frozenset(SPECIAL_TOKENS)
PUNCT = frozenset(".,?!':")

BLANK = "____"


def _finish_word(chars: list) -> str:
    word = "".join(chars)
    upper = word.upper()
    return upper if upper in _SPECIAL_SET else word.lower()


def normalize(text: str) -> list[str]:
    """Lower-case word/punctuation tokens; special markers kept verbatim."""
    out = []
    for piece in text.split():
        word = []
        for ch in piece:
            if ch in PUNCT:
                if word:
                    out.append(_finish_word(word))
                    word = []
                out.append(ch)
            else:
                word.append(ch)
        if word:
            out.append(_finish_word(word))
    return out


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple
    token_to_id: dict

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id


def _from_tokens(tokens: list[str]) -> Vocabulary:
    if tokens[:5] != SPECIAL_TOKENS:
        raise ValueError("vocabulary must start with the five special tokens in order")
    if len(set(tokens)) != len(tokens):
        raise ValueError("vocabulary contains duplicate tokens")
    return Vocabulary(id_to_token=tuple(tokens),
                      token_to_id={t: i for i, t in enumerate(tokens)})


def build_vocab(corpus: list[str], min_count: int = 1) -> Vocabulary:
    """Specials + corpus words with count >= min_count, ordered by
    (count desc, lexicographic) so rebuilds are deterministic."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for line in corpus:
        for tok in normalize(line):
            if tok not in _SPECIAL_SET:
                counts[tok] += 1
    kept = sorted((t for t, c in counts.items() if c >= min_count),
                  key=lambda t: (-counts[t], t))
    return _from_tokens(SPECIAL_TOKENS + kept)


@dataclass
class TokenSequence:
    ids: list
    attention_mask: list

    def __len__(self):
        return len(self.ids)

    @property
    def n_real(self) -> int:
        return sum(self.attention_mask)


def encode(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    toks = normalize(text)[:max_len]
    ids = [vocab.id_of(t) for t in toks]
    mask = [1] * len(ids)
    pad = max_len - len(ids)
    return TokenSequence(ids=ids + [PAD] * pad, attention_mask=mask + [0] * pad)


def decode(ids, vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i < 0 or i >= vocab.size:
            raise ValueError(f"token id {i} outside vocabulary of size {vocab.size}")
        if i == PAD:
            continue
        words.append(vocab.id_to_token[i])
    return " ".join(words)


def save_vocab(vocab: Vocabulary, path: str):
    with open(path, "w", encoding="utf-8") as f:
        for tok in vocab.id_to_token:
            f.write(tok + "\n")


def load_vocab(path: str) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as f:
        tokens = [line.rstrip("\n") for line in f]
    tokens = [t for t in tokens if t != ""]
    if len(tokens) < 6:
        raise ValueError(f"vocabulary file {path!r} has fewer than 6 tokens")
    return _from_tokens(tokens)
