"""Multi-modal (factor) attention and intra-modal softmax attention.

The multi-modal attention scores every entity of a modality with a unary term
plus one pairwise term per other modality, then softmax-normalises within the
modality::

    z_j      = tanh(P_m e_j + c_m)                     shared scoring space
    unary_j  = u_m . z_j
    pair_j   = sum_{m' != m} z_j^T W_{m,m'} zbar_{m'} / sqrt(d)
    w        = softmax_j(unary_j + pair_j)
    a_m      = sum_j w_j e_j

``zbar_{m'}`` is the masked mean of the other modality's projected entities.
Modalities declared with a single entity (audio) still feed pairwise terms of
the others but carry no scoring parameters of their own, since their weight is
always 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn


class ShapeError(ValueError):
    pass


class EmptyHistoryError(ValueError):
    pass


@dataclass
class AttendedBundle:
    vectors: dict      # name -> [B, d_m]
    weights: dict      # name -> [B, n_m]

    def __getitem__(self, name):
        return self.vectors[name]


def masked_softmax(scores, mask=None):
    if mask is not None:
        if not bool(mask.any(-1).all()):
            raise ValueError("every row needs at least one unmasked entity")
        scores = scores.masked_fill(~mask, float("-inf"))
    return torch.softmax(scores, dim=-1)


def masked_mean(x, mask=None):
    if mask is None:
        return x.mean(dim=-2)
    m = mask.unsqueeze(-1).to(x.dtype)
    return (x * m).sum(-2) / m.sum(-2)


class FactorAttention(nn.Module):
    """Parameters for :func:`mm_attend`.

    ``modalities`` is an ordered mapping ``name -> width``; names listed in
    ``single`` always hold exactly one entity. Names in ``context_only`` shape
    the pairwise scores of the others but are not attended themselves, so they
    carry no scoring parameters and get no attended vector.
    """

    def __init__(self, modalities, d_score=256, single=(), context_only=()):
        super().__init__()
        self.widths = dict(modalities)
        self.single = frozenset(single)
        self.context_only = frozenset(context_only)
        if not self.context_only <= set(self.widths):
            raise ValueError(f"context-only modalities {sorted(self.context_only)} are not declared")
        self.d_score = d_score
        self.proj = nn.ModuleDict({m: nn.Linear(d, d_score) for m, d in self.widths.items()})
        scored = [m for m in self.widths if m not in self.single | self.context_only]
        self.unary = nn.ParameterDict(
            {m: nn.Parameter(torch.randn(d_score) / math.sqrt(d_score)) for m in scored}
        )
        self.pairwise = nn.ParameterDict({
            f"{m}__{o}": nn.Parameter(torch.randn(d_score, d_score) / math.sqrt(d_score))
            for m in scored for o in self.widths if o != m
        })

    def project(self, name, x):
        """tanh(P_m x): the score-space entities of modality ``name``."""
        return torch.tanh(self.proj[name](x))

    def forward(self, bundle, masks=None, projected=None) -> AttendedBundle:
        return mm_attend(bundle, self, masks, projected)


def mm_attend(bundle, params: FactorAttention, masks=None, projected=None) -> AttendedBundle:
    """Attend within every modality of ``bundle`` (name -> [B, n_m, d_m]).

    ``masks`` optionally maps names to boolean [B, n_m] entity masks.
    ``projected`` may hold ``params.project(m, x)`` for modalities that do not
    change between calls, so a dialog projects its frames once.
    Unbatched [n_m, d_m] inputs are accepted and returned unbatched.
    """
    if not bundle:
        raise ShapeError("empty modality bundle")
    masks = dict(masks or {})
    unbatched = next(iter(bundle.values())).dim() == 2
    if unbatched:
        bundle = {m: x.unsqueeze(0) for m, x in bundle.items()}
        masks = {m: k.unsqueeze(0) for m, k in masks.items()}
        projected = {m: k.unsqueeze(0) for m, k in (projected or {}).items()}
    projected = projected or {}

    z, pooled = {}, {}
    for m, x in bundle.items():
        if m not in params.widths:
            raise ShapeError(f"no attention parameters for modality {m!r}")
        if x.dim() != 3 or x.shape[-1] != params.widths[m]:
            raise ShapeError(
                f"modality {m!r}: expected [B, n, {params.widths[m]}], got {list(x.shape)}"
            )
        if x.shape[1] < 1:
            raise ShapeError(f"modality {m!r} has no entities")
        if m in params.single and x.shape[1] != 1:
            raise ShapeError(f"modality {m!r} must have exactly one entity")
        z[m] = projected[m] if m in projected else params.project(m, x)
        pooled[m] = masked_mean(z[m], masks.get(m))

    scale = 1.0 / math.sqrt(params.d_score)
    vectors, weights = {}, {}
    for m, x in bundle.items():
        if m in params.context_only:
            continue
        if m in params.single:
            w = torch.ones(x.shape[:2], dtype=x.dtype, device=x.device)
        else:
            scores = z[m] @ params.unary[m]
            for o in bundle:
                if o == m:
                    continue
                # [B, d] -> [B, n] via the bilinear map of the (m, o) pair
                target = pooled[o] @ params.pairwise[f"{m}__{o}"].T
                scores = scores + scale * torch.einsum("bnd,bd->bn", z[m], target)
            w = masked_softmax(scores, masks.get(m))
        weights[m] = w
        vectors[m] = torch.einsum("bn,bnd->bd", w, x)

    if unbatched:
        vectors = {m: v.squeeze(0) for m, v in vectors.items()}
        weights = {m: v.squeeze(0) for m, v in weights.items()}
    return AttendedBundle(vectors, weights)


def im_attend(query, keys, mask=None, projection=None, scale=None):
    """Softmax attention of ``query`` [B, q] over ``keys`` [B, n, d].

    ``projection`` maps the query into key space: a module, a [d, q] matrix,
    or None for the identity;
    scores are scaled by ``scale`` (default 1/sqrt(d)).
    """
    unbatched = keys.dim() == 2
    if unbatched:
        query, keys = query.unsqueeze(0), keys.unsqueeze(0)
        mask = None if mask is None else mask.unsqueeze(0)
    if keys.shape[1] == 0:
        raise EmptyHistoryError("intra-modal attention over an empty history")
    if projection is None:
        q = query
    elif isinstance(projection, torch.Tensor):
        q = query @ projection.T
    else:
        q = projection(query)
    if q.shape[-1] != keys.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {keys.shape[-1]}")
    if scale is None:
        scale = 1.0 / math.sqrt(keys.shape[-1])
    scores = scale * torch.einsum("bnd,bd->bn", keys, q)
    w = masked_softmax(scores, mask)
    context = torch.einsum("bn,bnd->bd", w, keys)
    if unbatched:
        return context.squeeze(0), w.squeeze(0)
    return context, w


class IntraModalAttention(nn.Module):
    def __init__(self, d_query, d_key):
        super().__init__()
        self.proj = nn.Linear(d_query, d_key)

    def forward(self, query, keys, mask=None):
        return im_attend(query, keys, mask, projection=self.proj)
