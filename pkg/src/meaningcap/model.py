"""The full captioner: shared embeddings, encoder, attention decoder, meaning head."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import FeaturePack, dominant_object, normalize_label
from .decoder import AttentionDecoder, Generation, generate_greedy, generate_soft, teacher_forced_loss
from .embeddings import EOS_ID, INIT_RANGE, PAD_ID, Vocabulary
from .encoder import EncoderOutput, ObjectAwareEncoder
from .meaning import SentenceEncoder


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int
    d_vis: int = 2048
    hidden: int = 1000
    d_emb: int = 300
    meaning_hidden: int = 1000
    meaning_dim: int = 1000


@dataclass
class BatchTensors:
    video_ids: list[str]
    frames: torch.Tensor  # (B, N, d_vis)
    frame_mask: torch.Tensor  # (B, N)
    object_ids: torch.Tensor  # (B, N)
    captions: torch.Tensor | None = None  # (B, L) BOS .. EOS, PAD-padded
    caption_lengths: torch.Tensor | None = None  # (B,) including BOS and EOS

    def __len__(self):
        return len(self.video_ids)


def collate(
    packs: list[FeaturePack],
    vocab: Vocabulary,
    captions: list[tuple[str, ...]] | None = None,
    dtype=torch.float32,
) -> BatchTensors:
    B = len(packs)
    N = max(p.n_frames for p in packs)
    frames = np.zeros((B, N, packs[0].d_vis), dtype=np.float64)
    mask = np.zeros((B, N), dtype=bool)
    objects = np.full((B, N), PAD_ID, dtype=np.int64)
    for b, p in enumerate(packs):
        n = p.n_frames
        frames[b, :n] = p.frame_features
        mask[b, :n] = True
        for t, dets in enumerate(p.detections):
            label = dominant_object(dets)
            objects[b, t] = vocab.id(None if label is None else normalize_label(label))
    bt = BatchTensors(
        [p.video_id for p in packs],
        torch.as_tensor(frames, dtype=dtype),
        torch.as_tensor(mask),
        torch.as_tensor(objects),
    )
    if captions is not None:
        ids = [vocab.encode(c) for c in captions]
        L = max(len(x) for x in ids)
        cap = np.full((B, L), PAD_ID, dtype=np.int64)
        for b, x in enumerate(ids):
            cap[b, : len(x)] = x
        bt.captions = torch.as_tensor(cap)
        bt.caption_lengths = torch.as_tensor([len(x) for x in ids])
    return bt


class Captioner(nn.Module):
    def __init__(self, dims: ModelDims, embedding: torch.Tensor | None = None, seed: int = 0):
        super().__init__()
        self.dims = dims
        self.embedding = nn.Parameter(torch.empty(dims.d_emb, dims.vocab_size))
        self.encoder = ObjectAwareEncoder(dims.d_vis, dims.hidden, dims.d_emb)
        self.decoder = AttentionDecoder(dims.vocab_size, dims.hidden, dims.d_emb)
        self.meaning = SentenceEncoder(dims.d_emb, dims.meaning_hidden, dims.meaning_dim)
        self.reset_parameters(seed, embedding)

    @property
    def E(self) -> torch.Tensor:
        return self.embedding

    def reset_parameters(self, seed: int = 0, embedding: torch.Tensor | None = None) -> None:
        """Uniform init from a private generator, in parameter-name order."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name == "embedding":
                    bound = INIT_RANGE
                elif name.startswith("meaning."):
                    bound = 1.0 / math.sqrt(self.dims.meaning_hidden)
                else:
                    bound = 1.0 / math.sqrt(self.dims.hidden)
                p.copy_(torch.empty(p.shape, dtype=torch.float64).uniform_(-bound, bound, generator=gen))
            if embedding is not None:
                if tuple(embedding.shape) != tuple(self.embedding.shape):
                    raise ValueError(f"embedding shape {tuple(embedding.shape)} != {tuple(self.embedding.shape)}")
                self.embedding.copy_(embedding)

    def meaning_parameters(self) -> list[nn.Parameter]:
        return list(self.meaning.parameters())

    def captioner_parameters(self) -> list[nn.Parameter]:
        """Everything outside the meaning head (encoder, decoder, embeddings)."""
        ids = {id(p) for p in self.meaning.parameters()}
        return [p for p in self.parameters() if id(p) not in ids]

    def encode(self, bt: BatchTensors) -> EncoderOutput:
        objects = self.embedding.T[bt.object_ids]
        return self.encoder(bt.frames, objects, bt.frame_mask)

    def word_loss(self, bt: BatchTensors, enc: EncoderOutput | None = None, reduction: str = "mean"):
        enc = self.encode(bt) if enc is None else enc
        return teacher_forced_loss(self.decoder, self.embedding, enc, bt.captions, reduction)

    def generate_soft(self, enc: EncoderOutput, max_len: int, stop_at_eos: bool = True) -> Generation:
        return generate_soft(self.decoder, self.embedding, enc, max_len, stop_at_eos)

    def generate_greedy(self, enc: EncoderOutput, max_len: int) -> list[list[int]]:
        return generate_greedy(self.decoder, self.embedding, enc, max_len)

    def embed_generated(self, gen: Generation) -> torch.Tensor:
        return self.meaning(gen.soft, gen.lengths)

    def embed_references(self, bt: BatchTensors, embedding: torch.Tensor | None = None) -> torch.Tensor:
        """Sentence vectors of ground-truth captions (words and EOS, BOS dropped)."""
        E = self.embedding if embedding is None else embedding
        ids = bt.captions[:, 1:]
        return self.meaning(E.T[ids], bt.caption_lengths - 1)


def ends_with_eos(ids: list[int]) -> bool:
    return bool(ids) and ids[-1] == EOS_ID
