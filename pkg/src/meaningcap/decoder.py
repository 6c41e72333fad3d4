"""Attention decoder, word-by-word loss, and differentiable soft generation."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .embeddings import BOS_ID, EOS_ID, PAD_ID
from .encoder import EncoderOutput
from .errors import ShapeError, VocabularyError

MAX_LEN = 30


def attend(query, states, W, mask=None):
    """Bilinear attention over encoder states.

    ``lambda = softmax(query^T W H)`` and ``a = H lambda``, batched.

    :param query: (B, hidden)
    :param states: (B, N, hidden), the columns of H for each video
    :param W: (hidden, hidden)
    :param mask: (B, N) bool; padded frames get zero weight
    :return: (a (B, hidden), lambda (B, N))
    """
    scores = torch.einsum("bi,ij,bnj->bn", query, W, states)
    if mask is not None:
        scores = scores.masked_fill(~mask, float("-inf"))
    lam = torch.softmax(scores, dim=1)
    a = torch.einsum("bn,bnj->bj", lam, states)
    return a, lam


@dataclass
class DecoderStep:
    probs: torch.Tensor  # (B, V)
    log_probs: torch.Tensor  # (B, V)
    soft: torch.Tensor  # (B, d_emb) expected embedding E p
    hidden: torch.Tensor  # (B, hidden)
    cell: torch.Tensor
    attention: torch.Tensor  # (B, N)


class AttentionDecoder(nn.Module):
    def __init__(self, vocab_size: int, hidden: int = 1000, d_emb: int = 300):
        super().__init__()
        self.hidden_size = hidden
        self.d_emb = d_emb
        self.W = nn.Parameter(torch.empty(hidden, hidden))
        self.post = nn.Linear(hidden, hidden)
        self.cell = nn.LSTMCell(hidden + d_emb, hidden)
        self.proj = nn.Linear(hidden, vocab_size)

    def step(self, state, word, enc: EncoderOutput, E) -> DecoderStep:
        """One decoding step.

        The previous decoder hidden state queries attention; the attended
        vector, passed through ``post``, is concatenated with ``word`` (B, d_emb)
        to form the cell input.
        """
        h, c = state
        if word.shape[-1] != self.d_emb:
            raise ShapeError(f"decoder input word: expected {self.d_emb}-d, got {word.shape[-1]}")
        a, lam = attend(h, enc.states, self.W, enc.mask)
        h, c = self.cell(torch.cat([self.post(a), word], dim=1), (h, c))
        logits = self.proj(h)
        log_probs = F.log_softmax(logits, dim=1)
        probs = log_probs.exp()
        return DecoderStep(probs, log_probs, probs @ E.T, h, c, lam)


def teacher_forced_loss(decoder: AttentionDecoder, E, enc: EncoderOutput, captions, reduction: str = "mean"):
    """Summed per-step cross entropy with ground-truth inputs.

    :param captions: (B, L) ids, ``BOS w_1 .. w_k EOS`` right-padded with PAD
    :return: mean over the batch of per-caption sums, or the (B,) sums when
        ``reduction="none"``
    """
    V = E.shape[1]
    if captions.numel() and int(captions.max()) >= V:
        raise VocabularyError(f"token id {int(captions.max())} outside vocabulary of size {V}")
    if captions.shape[1] < 2:
        raise ShapeError("captions must hold at least BOS and one target")
    inputs = E.T[captions[:, :-1]]  # (B, L-1, d_emb)
    targets = captions[:, 1:]
    state = (enc.hidden, enc.cell)
    per_step = []
    for t in range(targets.shape[1]):
        out = decoder.step(state, inputs[:, t], enc, E)
        state = (out.hidden, out.cell)
        nll = -out.log_probs.gather(1, targets[:, t : t + 1]).squeeze(1)
        per_step.append(torch.where(targets[:, t] == PAD_ID, torch.zeros_like(nll), nll))
    total = torch.stack(per_step, dim=1).sum(dim=1)
    return total if reduction == "none" else total.mean()


@dataclass
class Generation:
    tokens: torch.Tensor  # (B, T) argmax ids, PAD after each caption ends
    lengths: torch.Tensor  # (B,) steps up to and including the first EOS
    soft: torch.Tensor | None = None  # (B, T, d_emb) when generated softly
    steps: list[DecoderStep] = field(default_factory=list)

    def token_lists(self) -> list[list[int]]:
        return [self.tokens[b, : int(n)].tolist() for b, n in enumerate(self.lengths)]

    def soft_sequence(self, b: int = 0) -> list[torch.Tensor]:
        return list(self.soft[b, : int(self.lengths[b])])


def _run(decoder, E, enc, max_len, soft, stop_at_eos):
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    B = enc.hidden.shape[0]
    word = E[:, BOS_ID].expand(B, -1)
    state = (enc.hidden, enc.cell)
    done = torch.zeros(B, dtype=torch.bool, device=E.device)
    lengths = torch.zeros(B, dtype=torch.long, device=E.device)
    tokens, softs, steps = [], [], []
    for _ in range(max_len):
        out = decoder.step(state, word, enc, E)
        state = (out.hidden, out.cell)
        tok = out.probs.argmax(dim=1)
        tokens.append(torch.where(done, torch.full_like(tok, PAD_ID), tok))
        lengths = lengths + (~done).long()
        steps.append(out)
        softs.append(out.soft)
        if stop_at_eos:
            done = done | (tok == EOS_ID)
            if bool(done.all()):
                break
        word = out.soft if soft else E.T[tok]
    return Generation(
        torch.stack(tokens, dim=1),
        lengths,
        torch.stack(softs, dim=1) if soft else None,
        steps,
    )


def generate_soft(decoder, E, enc, max_len: int = MAX_LEN, stop_at_eos: bool = True) -> Generation:
    """Differentiable generation: each step's input is the previous ``E p``.

    No sampling happens, so gradients flow from the soft sequence back to
    every decoder and encoder parameter. Argmax ids are returned alongside
    for readable output and for the stopping rule.
    """
    return _run(decoder, E, enc, max_len, soft=True, stop_at_eos=stop_at_eos)


def generate_greedy(decoder, E, enc, max_len: int = MAX_LEN) -> list[list[int]]:
    """Greedy hard decoding. Each list ends with EOS unless ``max_len`` was hit."""
    with torch.no_grad():
        return _run(decoder, E, enc, max_len, soft=False, stop_at_eos=True).token_lists()
