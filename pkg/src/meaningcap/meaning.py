"""Metric-learning head: sentence encoder and Manhattan similarity losses.

Captions are compared as sentence vectors under the L1 distance ``d``:
similar pairs pay ``1 - exp(-d)``, dissimilar pairs pay ``exp(-d)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, InputError

PAIRINGS = ("both", "gt_gt", "gen_gt")


class SentenceEncoder(nn.Module):
    """Bidirectional GRU over 300-d word vectors, reduced to one sentence vector."""

    def __init__(self, d_emb: int = 300, hidden: int = 1000, out_dim: int = 1000):
        super().__init__()
        self.hidden_size = hidden
        self.fwd = nn.GRUCell(d_emb, hidden)
        self.bwd = nn.GRUCell(d_emb, hidden)
        self.reduce = nn.Linear(2 * hidden, out_dim)
        self.encoded = 0  # sequences embedded so far; read by the batching tests

    def forward(self, seq, lengths=None):
        """
        :param seq: (B, L, d_emb), right-padded
        :param lengths: (B,) valid lengths; all L when omitted
        :return: (B, out_dim)
        """
        B, L, _ = seq.shape
        if lengths is None:
            lengths = torch.full((B,), L, dtype=torch.long, device=seq.device)
        if L == 0 or bool((lengths < 1).any()):
            raise InputError("cannot embed an empty sentence")
        steps = torch.arange(L, device=seq.device)
        valid = steps[None, :] < lengths[:, None]  # (B, L)
        # reverse each sequence within its own length
        rev_idx = (lengths[:, None] - 1 - steps[None, :]).clamp(min=0)
        rev = seq.gather(1, rev_idx[:, :, None].expand_as(seq))

        hf = seq.new_zeros(B, self.hidden_size)
        hb = seq.new_zeros(B, self.hidden_size)
        for t in range(L):
            m = valid[:, t : t + 1]
            hf = torch.where(m, self.fwd(seq[:, t], hf), hf)
            hb = torch.where(m, self.bwd(rev[:, t], hb), hb)
        self.encoded += B
        return self.reduce(torch.cat([hf, hb], dim=1))


def embed_sentence(seq, encoder: SentenceEncoder) -> torch.Tensor:
    """Embed one sentence given as a list (or (L, d) tensor) of word vectors."""
    if len(seq) == 0:
        raise InputError("cannot embed an empty sentence")
    x = seq if torch.is_tensor(seq) else torch.stack(list(seq))
    return encoder(x.unsqueeze(0))[0]


def manhattan(v1, v2):
    return (v1 - v2).abs().sum(dim=-1)


def loss_sim(v1, v2):
    """``1 - exp(-|v1 - v2|_1)``: zero for identical vectors, tends to 1 with distance."""
    return -torch.expm1(-manhattan(v1, v2))


def loss_dis(v3, v4):
    """``exp(-|v3 - v4|_1)``: one for identical vectors, tends to 0 with distance."""
    return torch.exp(-manhattan(v3, v4))


def intra_batch_pairs(batch_size: int, pairing: str = "both"):
    """Dissimilar pairs built crosswise between the two batch halves.

    Each pair is ``((source, row), (source, row))`` with source ``"gen"`` or
    ``"gt"``. Row ``i`` of the first half is paired with row ``i`` of the
    second half, so no pair shares a video.
    """
    if batch_size < 2 or batch_size % 2:
        raise ConfigurationError(f"batch size must be even, got {batch_size}")
    if pairing not in PAIRINGS:
        raise ConfigurationError(f"pairing must be one of {PAIRINGS}, got {pairing!r}")
    half = batch_size // 2
    pairs = []
    for i in range(half):
        j = half + i
        if pairing in ("both", "gt_gt"):
            pairs.append((("gt", i), ("gt", j)))
        if pairing == "both":
            pairs.append((("gen", i), ("gt", j)))
        if pairing == "gen_gt":
            pairs.append((("gen", i), ("gt", j)))
            pairs.append((("gen", j), ("gt", i)))
    return pairs


@dataclass
class MeaningLoss:
    similar: torch.Tensor
    dissimilar: torch.Tensor
    similar_pairs: list
    dissimilar_pairs: list

    @property
    def total(self):
        return self.similar + self.dissimilar


def batch_meaning_loss(V_gen, V_gt, video_ids, pairing: str = "both") -> MeaningLoss:
    """Similar term over matched rows plus dissimilar term over crosswise rows.

    Both terms are batch means; the similar term is aggregated first and the
    dissimilar term added afterwards, from the same 2B sentence vectors.
    """
    B = V_gen.shape[0]
    if V_gt.shape[0] != B or len(video_ids) != B:
        raise ConfigurationError("V_gen, V_gt and video_ids must have matching batch size")
    if len(set(video_ids)) != B:
        raise ConfigurationError("video_ids within a batch must be distinct")
    pairs = intra_batch_pairs(B, pairing)
    similar = loss_sim(V_gen, V_gt).mean()

    rows = {"gen": V_gen, "gt": V_gt}
    left = torch.stack([rows[s][i] for (s, i), _ in pairs])
    right = torch.stack([rows[s][i] for _, (s, i) in pairs])
    dissimilar = loss_dis(left, right).mean()
    return MeaningLoss(similar, dissimilar, [(("gen", i), ("gt", i)) for i in range(B)], pairs)


def triplet_loss(anchor, positive, negatives, margin: float = 1.0):
    """Mean over negatives of ``max(0, d(a, p) - d(a, n) + margin)`` with L1 ``d``."""
    negatives = negatives if torch.is_tensor(negatives) else torch.stack(list(negatives))
    if negatives.shape[0] == 0:
        raise InputError("triplet loss needs at least one negative")
    d_ap = manhattan(anchor, positive)
    d_an = manhattan(anchor[None, :], negatives)
    return torch.clamp(d_ap - d_an + margin, min=0).mean()


def batch_triplet_loss(V_anchor, V_pos, margin: float = 1.0):
    """Every other row's positive serves as a negative for each anchor (B-1 each)."""
    B = V_anchor.shape[0]
    if B < 2:
        raise InputError("batch triplet loss needs at least two rows")
    d_ap = manhattan(V_anchor, V_pos)  # (B,)
    d_an = manhattan(V_anchor[:, None, :], V_pos[None, :, :])  # (B, B)
    hinge = torch.clamp(d_ap[:, None] - d_an + margin, min=0)
    off_diag = ~torch.eye(B, dtype=torch.bool, device=V_anchor.device)
    return hinge[off_diag].view(B, B - 1).mean()
