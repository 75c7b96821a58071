"""Momentum-averaged encoder/heads and per-layer FIFO queues of negatives."""

from __future__ import annotations

import copy
from typing import Mapping

import torch
import torch.nn as nn

from . import EMBED_DIM
from .errors import InvalidArgument, InvalidState

MOMENTUM = 0.999
QUEUE_CAPACITY = 16384


class MomentumTwin(nn.Module):
    """Frozen shadow copies of an encoder and its projection heads.

    ``update`` applies ``shadow = m * shadow + (1 - m) * live`` to every
    parameter and copies buffers verbatim.
    """

    def __init__(self, encoder: nn.Module, heads: nn.Module, momentum: float = MOMENTUM):
        super().__init__()
        if not 0.0 <= momentum <= 1.0:
            raise InvalidArgument("momentum must lie in [0, 1]")
        self.momentum = momentum
        self.encoder = copy.deepcopy(encoder)
        self.heads = copy.deepcopy(heads)
        for p in self.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, encoder: nn.Module, heads: nn.Module) -> "MomentumTwin":
        m = self.momentum
        for shadow_mod, live_mod in ((self.encoder, encoder), (self.heads, heads)):
            shadow = dict(shadow_mod.named_parameters())
            live = dict(live_mod.named_parameters())
            if shadow.keys() != live.keys():
                raise InvalidState("live network does not match the momentum twin")
            for name, p in shadow.items():
                q = live[name]
                if p.shape != q.shape:
                    raise InvalidState(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(q.shape)}")
                p.mul_(m).add_(q.detach(), alpha=1.0 - m)
            for (_, b), (_, lb) in zip(shadow_mod.named_buffers(), live_mod.named_buffers()):
                b.copy_(lb)
        return self

    @torch.no_grad()
    def embed(self, x: torch.Tensor, indices: Mapping[str, torch.Tensor]):
        return self.heads(self.encoder(x), indices)


def momentum_update(live_encoder: nn.Module, live_heads: nn.Module, twin: MomentumTwin) -> MomentumTwin:
    return twin.update(live_encoder, live_heads)


class NegativeQueue:
    """Per-layer ring buffers of unit-norm embeddings.

    Rows leave in the order they arrived. ``contents`` returns them oldest
    first, as a copy, so later pushes never alter a returned matrix.
    """

    def __init__(self, layer_ids, capacity: int = QUEUE_CAPACITY, dim: int = EMBED_DIM,
                 dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise InvalidArgument("capacity must be positive")
        self.layer_ids = list(layer_ids)
        self.capacity = capacity
        self.dim = dim
        self.buffers = {lid: torch.zeros(capacity, dim, dtype=dtype) for lid in self.layer_ids}
        self.ptr = {lid: 0 for lid in self.layer_ids}
        self.size = {lid: 0 for lid in self.layer_ids}

    def enqueue(self, embeddings: Mapping[str, torch.Tensor], check_norm: bool = True) -> "NegativeQueue":
        for lid, rows in embeddings.items():
            if lid not in self.buffers:
                raise InvalidArgument(f"unknown layer {lid!r}")
            rows = rows.detach().reshape(-1, rows.shape[-1])
            if rows.shape[-1] != self.dim:
                raise InvalidArgument(f"{lid}: width {rows.shape[-1]} != {self.dim}")
            if check_norm and rows.numel() and not torch.allclose(
                    rows.norm(dim=1), torch.ones((), dtype=rows.dtype), atol=1e-5):
                raise InvalidArgument(f"{lid}: queue rows must be unit-norm")
            rows = rows[-self.capacity:]
            n = rows.shape[0]
            buf, p = self.buffers[lid], self.ptr[lid]
            first = min(n, self.capacity - p)
            buf[p:p + first] = rows[:first].to(buf)
            buf[: n - first] = rows[first:].to(buf)
            self.ptr[lid] = (p + n) % self.capacity
            self.size[lid] = min(self.capacity, self.size[lid] + n)
        return self

    def contents(self, layer_id: str) -> torch.Tensor:
        n = self.size[layer_id]
        if n == 0:
            raise InvalidState(f"negative queue for layer {layer_id} is empty")
        buf, p = self.buffers[layer_id], self.ptr[layer_id]
        if n < self.capacity:
            return buf[:n].clone()
        return torch.cat([buf[p:], buf[:p]]).clone()

    def as_dict(self) -> dict[str, torch.Tensor]:
        return {lid: self.contents(lid) for lid in self.layer_ids}

    def is_warm(self, minimum: int) -> bool:
        return all(self.size[lid] >= min(minimum, self.capacity) for lid in self.layer_ids)

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "dim": self.dim, "buffers": self.buffers,
                "ptr": dict(self.ptr), "size": dict(self.size)}

    def load_state_dict(self, state: dict) -> None:
        self.capacity, self.dim = state["capacity"], state["dim"]
        self.buffers = {k: v.clone() for k, v in state["buffers"].items()}
        self.layer_ids = list(self.buffers)
        self.ptr, self.size = dict(state["ptr"]), dict(state["size"])


def enqueue(queue: NegativeQueue, embeddings: Mapping[str, torch.Tensor]) -> NegativeQueue:
    return queue.enqueue(embeddings)


def sample_negatives(queue: NegativeQueue, layer_id: str) -> torch.Tensor:
    """All current entries of a layer serve as negatives."""
    return queue.contents(layer_id)
