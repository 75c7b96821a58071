"""InfoNCE and its multilayer patchwise forms.

Every loss here is a cross-entropy where the positive logit competes with a
set of negative logits, all dot products of unit vectors divided by a
temperature. Losses are evaluated in log space relative to the positive
logit, so small temperatures never overflow and near-zero losses keep
their precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from . import TEMPERATURE
from .errors import InvalidArgument, InvalidState

REDUCTIONS = ("mean", "sum", "none")


def normalize(v: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Project rows of ``v`` onto the unit sphere."""
    return F.normalize(v, dim=-1, eps=eps)


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise InvalidArgument(f"temperature must be positive, got {temperature}")


def nce_from_logits(positive: torch.Tensor, negatives: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the positive class given already-scaled logits.

    ``positive`` has shape (...,) and ``negatives`` (..., N). Negative logits
    may contain ``-inf`` to exclude entries.
    """
    # log(1 + sum exp(neg - pos)); stays accurate when the positive dominates
    rel = torch.logsumexp(negatives - positive.unsqueeze(-1), dim=-1)
    return torch.logaddexp(torch.zeros_like(rel), rel)


def info_nce_loss(
    query: torch.Tensor,
    positive: torch.Tensor,
    negatives: torch.Tensor,
    temperature: float = TEMPERATURE,
) -> torch.Tensor:
    """(N+1)-way contrastive loss for one query.

    Args:
        query: (..., K) unit vector.
        positive: (..., K) unit vector paired with ``query``.
        negatives: (..., N, K) unit vectors, N >= 1.
        temperature: logit scale divisor.

    Returns:
        Loss tensor with the leading batch shape of ``query`` (a scalar for
        unbatched input).
    """
    _check_temperature(temperature)
    if query.shape != positive.shape:
        raise InvalidArgument(f"query {tuple(query.shape)} and positive {tuple(positive.shape)} differ")
    if negatives.dim() != query.dim() + 1 or negatives.shape[-1] != query.shape[-1]:
        raise InvalidArgument(
            f"negatives must have shape (..., N, {query.shape[-1]}), got {tuple(negatives.shape)}"
        )
    if negatives.shape[-2] < 1:
        raise InvalidArgument("at least one negative is required")
    pos = (query * positive).sum(-1) / temperature
    neg = (negatives @ query.unsqueeze(-1)).squeeze(-1) / temperature
    return nce_from_logits(pos, neg)


@dataclass
class NCEBatch:
    """A single query with its positive and negatives."""

    query: torch.Tensor
    positive: torch.Tensor
    negatives: torch.Tensor
    temperature: float = TEMPERATURE

    def __post_init__(self):
        _check_temperature(self.temperature)
        if self.negatives.dim() != 2 or self.negatives.shape[0] < 1:
            raise InvalidArgument("negatives must be a non-empty (N, K) matrix")
        k = self.query.shape[-1]
        if self.positive.shape[-1] != k or self.negatives.shape[-1] != k:
            raise InvalidArgument("all vectors must share one dimension")

    def loss(self) -> torch.Tensor:
        return info_nce_loss(self.query, self.positive, self.negatives, self.temperature)


@dataclass
class PatchLayer:
    """Embeddings of sampled locations of one feature layer.

    ``embeddings`` has shape (..., S, K) where leading dimensions index images
    in a batch; ``indices`` is an (S, 2) integer tensor of (row, col) pairs
    into a feature map of spatial size ``shape``.
    """

    layer_id: str
    embeddings: torch.Tensor
    indices: torch.Tensor
    shape: tuple[int, int]

    def __post_init__(self):
        idx = self.indices
        if idx.dim() != 2 or idx.shape[1] != 2:
            raise InvalidArgument(f"{self.layer_id}: indices must be (S, 2)")
        if self.embeddings.shape[-2] != idx.shape[0]:
            raise InvalidArgument(
                f"{self.layer_id}: {self.embeddings.shape[-2]} embeddings for {idx.shape[0]} indices"
            )
        h, w = self.shape
        if idx.numel() and (idx.min() < 0 or (idx[:, 0] >= h).any() or (idx[:, 1] >= w).any()):
            raise InvalidArgument(f"{self.layer_id}: index outside {h}x{w}")
        if torch.unique(self.flat_indices).numel() != idx.shape[0]:
            raise InvalidArgument(f"{self.layer_id}: duplicate spatial indices")

    @property
    def flat_indices(self) -> torch.Tensor:
        return self.indices[:, 0] * self.shape[1] + self.indices[:, 1]


@dataclass
class PatchEmbeddingSet:
    layers: list[PatchLayer] = field(default_factory=list)

    @property
    def layer_ids(self) -> list[str]:
        return [layer.layer_id for layer in self.layers]

    def __getitem__(self, layer_id: str) -> PatchLayer:
        for layer in self.layers:
            if layer.layer_id == layer_id:
                return layer
        raise KeyError(layer_id)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)


def _check_pairing(query_set: PatchEmbeddingSet, key_set: PatchEmbeddingSet) -> None:
    if query_set.layer_ids != key_set.layer_ids:
        raise InvalidArgument(f"layer sets differ: {query_set.layer_ids} vs {key_set.layer_ids}")
    for q, k in zip(query_set, key_set):
        if q.shape != k.shape or not torch.equal(q.indices.cpu(), k.indices.cpu()):
            raise InvalidArgument(f"{q.layer_id}: query and key sampled at different locations")
        if q.embeddings.shape != k.embeddings.shape:
            raise InvalidArgument(f"{q.layer_id}: embedding shapes differ")


def _reduce(per_layer: Sequence[torch.Tensor], reduction: str):
    if reduction == "none":
        return list(per_layer)
    if reduction == "mean":
        return torch.stack([t.mean() for t in per_layer]).mean()
    if reduction == "sum":
        return torch.stack([t.sum() for t in per_layer]).sum()
    raise InvalidArgument(f"unknown reduction {reduction!r}; expected one of {REDUCTIONS}")


def _internal_negative_logits(q: torch.Tensor, k: torch.Tensor, temperature: float) -> torch.Tensor:
    # (..., S, S) similarities; the diagonal is the positive and is excluded.
    sim = q @ k.transpose(-1, -2) / temperature
    eye = torch.eye(sim.shape[-1], dtype=torch.bool, device=sim.device)
    return sim.masked_fill(eye, float("-inf"))


def patchnce_loss(
    query_set: PatchEmbeddingSet,
    key_set: PatchEmbeddingSet,
    temperature: float = TEMPERATURE,
    reduction: str = "mean",
):
    """Multilayer PatchNCE with negatives from other locations of the same image.

    Queries are output-image embeddings and keys input-image embeddings at the
    same locations. For each location the matching key is the positive and
    the S-1 other keys of that layer are the negatives.

    ``reduction="mean"`` averages over locations (and batch) and then layers;
    ``"sum"`` gives the plain double sum; ``"none"`` returns the per-layer
    per-location loss tensors.
    """
    _check_temperature(temperature)
    _check_pairing(query_set, key_set)
    per_layer = []
    for q, k in zip(query_set, key_set):
        if q.embeddings.shape[-2] < 2:
            raise InvalidArgument(f"{q.layer_id}: need at least 2 locations for internal negatives")
        pos = (q.embeddings * k.embeddings).sum(-1) / temperature
        neg = _internal_negative_logits(q.embeddings, k.embeddings, temperature)
        per_layer.append(nce_from_logits(pos, neg))
    return _reduce(per_layer, reduction)


def external_nce_loss(
    query_set: PatchEmbeddingSet,
    key_set: PatchEmbeddingSet,
    queue: Mapping[str, torch.Tensor],
    temperature: float = TEMPERATURE,
    include_internal: bool = False,
    reduction: str = "mean",
):
    """PatchNCE whose negatives come from a dictionary of other images' patches.

    ``queue`` maps layer id to an (M, K) matrix shared by every query of that
    layer. With ``include_internal`` the same-image negatives are appended,
    giving S-1+M negatives per query. Queue entries never receive gradient.
    """
    _check_temperature(temperature)
    _check_pairing(query_set, key_set)
    per_layer = []
    for q, k in zip(query_set, key_set):
        bank = queue.get(q.layer_id)
        if bank is None or bank.shape[0] == 0:
            raise InvalidState(f"negative queue for layer {q.layer_id} is empty")
        if bank.shape[-1] != q.embeddings.shape[-1]:
            raise InvalidArgument(f"{q.layer_id}: queue width {bank.shape[-1]} != {q.embeddings.shape[-1]}")
        bank = bank.detach().to(q.embeddings)
        pos = (q.embeddings * k.embeddings).sum(-1) / temperature
        neg = q.embeddings @ bank.t() / temperature
        if include_internal:
            neg = torch.cat([neg, _internal_negative_logits(q.embeddings, k.embeddings, temperature)], -1)
        per_layer.append(nce_from_logits(pos, neg))
    return _reduce(per_layer, reduction)
