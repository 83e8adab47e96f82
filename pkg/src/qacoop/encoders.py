"""Caption, QA-pair and feature encoders."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .attention import ShapeError
from .datasets import NUM_ROUNDS, PAD_ID


def embed_tokens(ids, table):
    """Embedding lookup; equivalent to one-hot rows times ``table``.

    ``table`` is an ``nn.Embedding`` or a raw [V, d] weight. Row ``PAD_ID`` of
    the tables built here is zero and stays zero under training.
    """
    weight = table.weight if isinstance(table, nn.Embedding) else table
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.max()) >= weight.shape[0] or int(ids.min()) < 0):
        raise IndexError(f"token id out of range for vocabulary of size {weight.shape[0]}")
    return F.embedding(ids, weight, padding_idx=PAD_ID)


def lengths_to_mask(lengths, width):
    return torch.arange(width, device=lengths.device)[None, :] < lengths[:, None]


def last_valid(seq, lengths):
    """Row ``lengths-1`` of every sequence in ``seq`` [B, T, d]."""
    idx = (lengths - 1).clamp(min=0).view(-1, 1, 1).expand(-1, 1, seq.shape[-1])
    return seq.gather(1, idx).squeeze(1)


@dataclass
class HistoryState:
    pairs: torch.Tensor    # [B, n_T, d_H]
    null: torch.Tensor     # [d_H]

    @property
    def n_pairs(self):
        return self.pairs.shape[1]

    def entities(self):
        """Pair rows for attention, or the null-history vector when empty."""
        if self.n_pairs == 0:
            return self.null.expand(self.pairs.shape[0], 1, -1)
        return self.pairs

    def prefix(self, k):
        return HistoryState(self.pairs[:, :k], self.null)


class CaptionEncoder(nn.Module):
    """Embedding + single-layer LSTM; returns the whole hidden sequence."""

    def __init__(self, vocab_size, d_embed=256, d_hidden=256):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, d_embed, padding_idx=PAD_ID)
        self.lstm = nn.LSTM(d_embed, d_hidden, batch_first=True)

    def forward(self, ids, lengths):
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
            lengths = torch.as_tensor([ids.shape[1]]) if lengths is None else lengths.view(1)
        if ids.shape[1] == 0 or bool((lengths < 1).any()):
            raise ValueError("cannot encode an empty caption")
        hidden, _ = self.lstm(embed_tokens(ids, self.embed))
        return hidden, lengths_to_mask(lengths, ids.shape[1])


class HistoryEncoder(nn.Module):
    """Encodes each (question, answer) pair into one ``d_history`` vector.

    The pair is read as the question tokens followed by the answer tokens; the
    LSTM state at the last real token is the pair embedding. One instance is
    shared by both agents.
    """

    def __init__(self, vocab_size, d_word=128, d_history=256):
        super().__init__()
        self.embed = nn.Embedding(vocab_size, d_word, padding_idx=PAD_ID)
        self.lstm = nn.LSTM(d_word, d_history, batch_first=True)
        self.null = nn.Parameter(torch.randn(d_history) * 0.1)
        self.d_history = d_history

    def encode_pairs(self, q_ids, q_len, a_ids, a_len):
        """[N, Lq], [N], [N, La], [N] -> [N, d_history]."""
        if bool((q_len < 1).any()) or bool((a_len < 1).any()):
            raise ValueError("question and answer must both be non-empty")
        n = q_ids.shape[0]
        width = int((q_len + a_len).max())
        pos = torch.arange(width).expand(n, width)
        # answer token for position p sits at p - q_len
        a_pos = (pos - q_len[:, None]).clamp(min=0, max=a_ids.shape[1] - 1)
        q_pos = pos.clamp(max=q_ids.shape[1] - 1)
        ids = torch.where(pos < q_len[:, None], q_ids.gather(1, q_pos), a_ids.gather(1, a_pos))
        ids = ids.masked_fill(pos >= (q_len + a_len)[:, None], PAD_ID)
        hidden, _ = self.lstm(embed_tokens(ids, self.embed))
        return last_valid(hidden, q_len + a_len)

    def forward(self, questions, question_len, answers, answer_len) -> HistoryState:
        """Encode ``k`` rounds per example: [B, k, L] id tensors -> HistoryState [B, k, d]."""
        b, k = questions.shape[:2]
        if k > NUM_ROUNDS:
            raise ValueError(f"history holds at most {NUM_ROUNDS} pairs, got {k}")
        if k == 0:
            return self.empty(b)
        flat = self.encode_pairs(
            questions.reshape(b * k, -1), question_len.reshape(-1),
            answers.reshape(b * k, -1), answer_len.reshape(-1),
        )
        return HistoryState(flat.view(b, k, -1), self.null)

    def empty(self, batch_size):
        return HistoryState(self.null.new_zeros(batch_size, 0, self.d_history), self.null)


class FeatureProjection(nn.Module):
    """Shape-preserving ``tanh(W x + b)`` for visual regions or audio vectors."""

    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        self.linear = nn.Linear(dim, dim)

    def forward(self, x):
        if x.shape[-1] != self.dim:
            raise ShapeError(f"expected trailing width {self.dim}, got {list(x.shape)}")
        return torch.tanh(self.linear(x))


def project_visual(regions, layer: FeatureProjection):
    if regions.dim() < 2 or regions.shape[-1] != layer.dim:
        raise ShapeError(f"expected [..., regions, {layer.dim}], got {list(regions.shape)}")
    return layer(regions)


def project_audio(audio, layer: FeatureProjection):
    return layer(audio)
