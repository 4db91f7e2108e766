"""Retrieval-based visual memory for cross-image query refinement.

During the prompt pass the per-layer keys and values of every input image's
visual tokens are recorded into a bank keyed by (layer, image id). When an
entity crop is injected mid-generation, its query vectors at each active
layer cross-attend (no causal mask) to the stored keys/values of the image
the crop came from, and the refined heads are added residually before the
layer's output projection. With no active layers the decoder path is
untouched, bit for bit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import torch

from .decoder import attend

logger = logging.getLogger(__name__)

LAYER_GROUP_SIZES = {1: 2, 2: 4, 3: 8, 4: 16}  # group 5 = all layers


class MissingEntryError(LookupError):
    pass


class DuplicateEntryError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryConfig:
    """Which decoder layers refine crop queries against the bank."""

    active_layers: frozenset[int] = frozenset()
    enabled: bool = True
    attend_all_images: bool = False

    @property
    def layer_set(self) -> frozenset[int]:
        return self.active_layers if self.enabled else frozenset()

    @classmethod
    def disabled(cls) -> "MemoryConfig":
        return cls(frozenset(), enabled=False)

    @classmethod
    def for_group(cls, group: int, layers: int) -> "MemoryConfig":
        if group == 0:
            return cls.disabled()
        return cls(frozenset(select_layer_group(group, layers)))


def select_layer_group(group: int, layers: int) -> set[int]:
    """Evenly spaced layer sets for the placement ablation.

    Group 1 is the two extremes {0, L-1}; groups 2-4 take 4, 8 and 16 evenly
    distributed layers; group 5 is every layer. Requests larger than L clamp
    to all layers.
    """
    if group not in (1, 2, 3, 4, 5):
        raise ValueError(f"layer group {group} outside 1..5")
    if layers < 2:
        raise ValueError(f"need at least 2 layers, got {layers}")
    if group == 5:
        return set(range(layers))
    want = LAYER_GROUP_SIZES[group]
    if want >= layers:
        if want > layers:
            logger.warning("group %d wants %d layers, model has %d; using all",
                           group, want, layers)
        return set(range(layers))
    return {int((k * (layers - 1)) / (want - 1) + 0.5) for k in range(want)}


class MemoryBank:
    """Per-layer, per-image key/value store, write-once then read-only."""

    def __init__(self, layers: int):
        self.layers = layers
        self._store: dict[tuple[int, int], tuple[torch.Tensor, torch.Tensor]] = {}
        self._frozen = False
        self.retrieval_counts: dict[tuple[int, int], int] = {}

    def record(self, layer: int, image_id: int, k: torch.Tensor, v: torch.Tensor) -> None:
        if self._frozen:
            raise DuplicateEntryError("bank is frozen after the prompt pass")
        if not 0 <= layer < self.layers:
            raise ValueError(f"layer {layer} outside [0, {self.layers})")
        if (layer, image_id) in self._store:
            raise DuplicateEntryError(f"(layer {layer}, image {image_id}) already recorded")
        if k.shape != v.shape:
            raise ValueError(f"K shape {tuple(k.shape)} != V shape {tuple(v.shape)}")
        self._store[(layer, image_id)] = (k.detach().clone(), v.detach().clone())

    def freeze(self) -> None:
        self._frozen = True

    def retrieve(self, layer: int, image_id: int) -> tuple[torch.Tensor, torch.Tensor]:
        try:
            entry = self._store[(layer, image_id)]
        except KeyError:
            raise MissingEntryError(
                f"no entry for (layer {layer}, image {image_id})") from None
        self.retrieval_counts[(layer, image_id)] = (
            self.retrieval_counts.get((layer, image_id), 0) + 1)
        return entry

    @property
    def image_count(self) -> int:
        return len({i for (_, i) in self._store})

    @property
    def entry_count(self) -> int:
        return len(self._store)

    def image_ids(self) -> set[int]:
        return {i for (_, i) in self._store}

    def manifest(self) -> str:
        """JSON inspection dump: entries, shapes, byte sizes."""
        entries = [
            {
                "layer": layer,
                "image": image,
                "shape": list(k.shape),
                "bytes": k.numel() * k.element_size() + v.numel() * v.element_size(),
            }
            for (layer, image), (k, v) in sorted(self._store.items())
        ]
        return json.dumps(
            {"layers": self.layers, "images": self.image_count, "entries": entries},
            sort_keys=True,
        )

    def export_blob(self, path) -> None:
        """Tensors in the checkpoint blob layout: sorted (layer, image) order."""
        import struct

        with open(path, "wb") as f:
            f.write(b"MMBK")
            f.write(struct.pack("<I", len(self._store)))
            for (layer, image), (k, v) in sorted(self._store.items()):
                f.write(struct.pack("<IIII", layer, image, k.shape[-2], k.shape[-1]))
                for t in (k, v):
                    f.write(t.to(torch.float32).numpy().astype("<f4").tobytes())


@dataclass(frozen=True)
class RetrievalRequest:
    """Entity-crop queries aimed at one recorded image."""

    image_id: int
    queries: torch.Tensor  # (heads, crop_tokens, head_dim)


def refine_queries(req: RetrievalRequest, bank: MemoryBank, layer: int) -> torch.Tensor:
    """Cross-attend crop queries to the stored keys/values of their image."""
    k, v = bank.retrieve(layer, req.image_id)
    if req.queries.shape[-1] != k.shape[-1]:
        raise ValueError(
            f"query head dim {req.queries.shape[-1]} != stored {k.shape[-1]}")
    return attend(req.queries, k, v, causal=False)


def inject_refinement(
    heads: torch.Tensor, crop_slice: slice, refined: torch.Tensor, enabled: bool = True
) -> torch.Tensor:
    """Residually add refined crop heads in place; identity when disabled."""
    if not enabled:
        return heads
    if heads[..., crop_slice, :].shape != refined.shape:
        raise ValueError(
            f"refined shape {tuple(refined.shape)} does not match crop slice "
            f"{tuple(heads[..., crop_slice, :].shape)}")
    heads[..., crop_slice, :] += refined
    return heads


@dataclass
class BankRefiner:
    """Inference-side refinement hook for ToyDecoder.forward_block.

    ``crops`` maps the block-local token slice of each injected crop to the
    image id it came from. Every apply() at an active layer retrieves that
    image's bank entry exactly once and blends the refined heads in.
    """

    config: MemoryConfig
    bank: MemoryBank
    crops: list[tuple[int, slice]]  # (image_id, slice within the current block)
    refinement_calls: int = 0

    def apply(self, layer: int, q, k, v, heads) -> None:
        if layer not in self.config.layer_set:
            return
        for image_id, sl in self.crops:
            if self.config.attend_all_images:
                pairs = [self.bank.retrieve(layer, i) for i in sorted(self.bank.image_ids())]
                bk = torch.cat([p[0] for p in pairs], dim=-2)
                bv = torch.cat([p[1] for p in pairs], dim=-2)
                ref = attend(q[0, :, sl, :], bk, bv, causal=False)
            else:
                ref = refine_queries(
                    RetrievalRequest(image_id, q[0, :, sl, :]), self.bank, layer)
            inject_refinement(heads[0], sl, ref)
            self.refinement_calls += 1


@dataclass
class InlineRefiner:
    """Training-side refinement: crop queries attend to the same sequence's
    image-span keys/values, mirroring the inference-time bank lookup."""

    config: MemoryConfig
    image_spans: list[dict[int, slice]]   # per sample: image id -> token slice
    crops: list[list[tuple[int, slice]]]  # per sample: (image id, crop token slice)

    def apply(self, layer: int, q, k, v, heads) -> None:
        if layer not in self.config.layer_set:
            return
        for b, sample_crops in enumerate(self.crops):
            for image_id, sl in sample_crops:
                span = self.image_spans[b].get(image_id)
                if span is None:
                    continue
                ref = attend(
                    q[b, :, sl, :], k[b, :, span, :], v[b, :, span, :], causal=False)
                inject_refinement(heads[b], sl, ref)
