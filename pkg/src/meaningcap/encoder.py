"""Two-layer recurrent video encoder with dominant-object fusion.

The upper cell reads frame features; the lower cell reads the upper hidden
state concatenated with the frame's object embedding. Upper hidden states
feed attention, the lower cell's final state seeds the decoder.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ShapeError

HIDDEN = 1000


@dataclass
class EncoderOutput:
    states: torch.Tensor  # (B, N, hidden) upper hidden states
    mask: torch.Tensor  # (B, N) True on real frames
    hidden: torch.Tensor  # (B, hidden) final lower hidden state
    cell: torch.Tensor  # (B, hidden) final lower cell state

    def H(self, b: int = 0) -> torch.Tensor:
        """Upper states of video ``b`` stacked column-wise, shape (hidden, N_b)."""
        n = int(self.mask[b].sum())
        return self.states[b, :n].T


def encoder_input_dims(d_vis: int = 2048, hidden: int = HIDDEN, d_emb: int = 300) -> tuple[int, int, int]:
    """(upper input, lower input, hidden) sizes."""
    return d_vis, hidden + d_emb, hidden


class ObjectAwareEncoder(nn.Module):
    def __init__(self, d_vis: int, hidden: int = HIDDEN, d_emb: int = 300):
        super().__init__()
        upper_in, lower_in, hidden = encoder_input_dims(d_vis, hidden, d_emb)
        self.hidden_size = hidden
        self.upper = nn.LSTMCell(upper_in, hidden)
        self.lower = nn.LSTMCell(lower_in, hidden)

    def forward(self, frames, objects, mask=None) -> EncoderOutput:
        """
        :param frames: (B, N, d_vis) frame features, right-padded
        :param objects: (B, N, d_emb) dominant-object embeddings per frame
        :param mask: (B, N) bool, True on real frames; all-true when omitted
        """
        B, N, d = frames.shape
        if d != self.upper.input_size:
            raise ShapeError(f"encoder upper layer, step 0: expected {self.upper.input_size}-d frames, got {d}")
        if objects.shape[:2] != (B, N) or objects.shape[2] + self.hidden_size != self.lower.input_size:
            raise ShapeError(
                f"encoder lower layer, step 0: object embeddings {tuple(objects.shape)} do not give a "
                f"{self.lower.input_size}-d input"
            )
        if mask is None:
            mask = torch.ones(B, N, dtype=torch.bool, device=frames.device)

        zeros = frames.new_zeros(B, self.hidden_size)
        hu, cu, hl, cl = zeros, zeros, zeros, zeros
        states = []
        for t in range(N):
            m = mask[:, t : t + 1]
            nhu, ncu = self.upper(frames[:, t], (hu, cu))
            hu, cu = torch.where(m, nhu, hu), torch.where(m, ncu, cu)
            nhl, ncl = self.lower(torch.cat([hu, objects[:, t]], dim=1), (hl, cl))
            hl, cl = torch.where(m, nhl, hl), torch.where(m, ncl, cl)
            states.append(hu)
        return EncoderOutput(torch.stack(states, dim=1), mask, hl, cl)
