"""Vocabulary and the shared word-embedding matrix.

The embedding matrix is stored column-per-token, shape ``(d_emb, V)``, so
that a one-hot (or soft) word distribution ``p`` maps to ``E @ p``.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .data import CaptionRecord
from .errors import FormatError, VocabularyError

PAD, BOS, EOS, UNK, NOOBJ = "<pad>", "<bos>", "<eos>", "<unk>", "<noobj>"
RESERVED = (PAD, BOS, EOS, UNK, NOOBJ)
PAD_ID, BOS_ID, EOS_ID, UNK_ID, NOOBJ_ID = range(5)
D_EMB = 300
INIT_RANGE = 0.1


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        if tuple(self.id_to_token[: len(RESERVED)]) != RESERVED:
            raise VocabularyError(f"reserved tokens must occupy ids 0..{len(RESERVED) - 1}")
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise VocabularyError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id

    def id(self, token: str | None) -> int:
        if token is None:
            return NOOBJ_ID
        return self.token_to_id.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.id_to_token):
            raise VocabularyError(f"token id {idx} outside vocabulary of size {len(self)}")
        return self.id_to_token[idx]

    def encode(self, tokens: Sequence[str], wrap: bool = True) -> list[int]:
        ids = [self.id(t) for t in tokens]
        return [BOS_ID, *ids, EOS_ID] if wrap else ids

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Tokens up to the first EOS, with reserved markers dropped."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i >= len(RESERVED):
                out.append(self.token(i))
            elif i == UNK_ID:
                out.append(UNK)
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"tokens": self.id_to_token}, indent=0) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        try:
            obj = json.loads(Path(path).read_text())
            return cls(list(obj["tokens"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"vocab.json: malformed ({exc})") from None


def build_vocabulary(
    captions: Sequence[CaptionRecord], min_count: int = 1, extra_tokens: Iterable[str] = ()
) -> Vocabulary:
    """Keep caption tokens seen at least ``min_count`` times.

    ``extra_tokens`` (e.g. detector class names) are always kept. Order is
    by descending frequency, then alphabetical, so the mapping is stable.
    """
    counts = Counter(tok for rec in captions for tok in rec.tokens)
    kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    seen = set(kept)
    extras = sorted({t for t in extra_tokens if t and t not in seen and t not in RESERVED})
    return Vocabulary([*RESERVED, *kept, *extras])


def embed_token(vocab: Vocabulary, E: torch.Tensor, token: str | None) -> torch.Tensor:
    return E[:, vocab.id(token)]


def import_pretrained(
    vocab: Vocabulary, vectors: Mapping[str, Sequence[float]], d_emb: int = D_EMB, seed: int = 0
) -> torch.Tensor:
    """Embedding matrix with pretrained columns where available, U(-0.1, 0.1) elsewhere."""
    gen = torch.Generator().manual_seed(seed)
    E = torch.empty(d_emb, len(vocab), dtype=torch.float32).uniform_(-INIT_RANGE, INIT_RANGE, generator=gen)
    for token, vec in vectors.items():
        if len(vec) != d_emb:
            raise FormatError(f"pretrained vector for {token!r} has length {len(vec)}, expected {d_emb}")
        if token in vocab:
            E[:, vocab.id(token)] = torch.as_tensor(np.asarray(vec, dtype=np.float32))
    return E


def read_word_vectors(path: str | Path, d_emb: int = D_EMB, keep: set[str] | None = None) -> dict[str, np.ndarray]:
    """Parse ``token v1 ... vD`` lines; a word2vec ``count dim`` header is skipped."""
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if lineno == 1 and len(parts) == 2:
                continue
            if not parts or not parts[0]:
                continue
            token = parts[0]
            if keep is not None and token not in keep:
                continue
            if len(parts) - 1 != d_emb:
                raise FormatError(f"{path}: line {lineno}: {len(parts) - 1} values, expected {d_emb}")
            try:
                vectors[token] = np.array(parts[1:], dtype=np.float32)
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: non-numeric value") from None
    return vectors
