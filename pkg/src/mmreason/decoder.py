"""Small decoder-only transformer with per-layer KV caching.

Pre-norm residual blocks with GELU feed-forwards, a causal attention kernel
shared with the visual-memory refinement path, multimodal rotary positions
(text tokens advance a scalar counter; the tokens of one image share a base
position and carry 2-D grid offsets folded into two rotary channel groups),
and masked next-token cross-entropy where visual placeholder positions
contribute exactly zero.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .grammar import (
    Box,
    ImageIndex,
    InterleavedSequence,
    TextSpan,
    Vocabulary,
)

CHECKPOINT_MAGIC = b"MMRS"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    layers: int = 4
    heads: int = 4
    dim: int = 64
    max_positions: int = 4096
    patch: int = 8
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    memory_layers: tuple[int, ...] = ()

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        if (self.dim // self.heads) % 2 != 0:
            raise ValueError("per-head dim must be even for rotary rotation")
        bad = [l for l in self.memory_layers if not 0 <= l < self.layers]
        if bad:
            raise ValueError(f"memory layers {bad} outside [0, {self.layers})")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["memory_layers"] = tuple(d.get("memory_layers", ()))
        return cls(**d)


def attend(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    causal: bool = False,
    query_offset: int = 0,
) -> torch.Tensor:
    """Scaled dot-product attention: softmax(q kT / sqrt(d_k)) v.

    q is (..., Tq, d_k), k and v are (..., Tk, d_k). With ``causal`` the
    query at row i (global position query_offset + i) sees keys j <= that
    position. This one kernel backs both self-attention and memory-bank
    query refinement.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    d_k = q.shape[-1]
    if d_k <= 0:
        raise ValueError("empty key dimension")
    scores = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    # The mask is skipped when every key is visible to the earliest query
    # (single-step decoding over a full cache); it would be all-zero anyway.
    if causal and k.shape[-2] - 1 > query_offset:
        tq, tk = q.shape[-2], k.shape[-2]
        qpos = torch.arange(tq, device=q.device).unsqueeze(1) + query_offset
        kpos = torch.arange(tk, device=q.device).unsqueeze(0)
        neg = torch.zeros((tq, tk), dtype=scores.dtype, device=q.device)
        neg.masked_fill_(kpos > qpos, float("-inf"))
        scores = scores + neg
    return torch.softmax(scores, dim=-1) @ v


class MultimodalRotary(nn.Module):
    """Rotary rotation over three position channels (text step, grid row, grid col).

    The per-head pair budget splits into a scalar-position group and two
    smaller groups for the 2-D offsets of image tokens; text tokens carry
    zero offsets there, which leaves those channels unrotated.
    """

    def __init__(self, head_dim: int, base: float = 10000.0):
        super().__init__()
        pairs = head_dim // 2
        self.pairs_rc = pairs // 4
        self.pairs_t = pairs - 2 * self.pairs_rc
        for name, n in (("t", self.pairs_t), ("r", self.pairs_rc), ("c", self.pairs_rc)):
            if n > 0:
                inv = 1.0 / (base ** (torch.arange(0, n, dtype=torch.float32) * 2.0 / (2 * n)))
            else:
                inv = torch.zeros(0)
            self.register_buffer(f"inv_{name}", inv, persistent=False)

    def angles(self, positions: torch.Tensor) -> torch.Tensor:
        # positions: (..., 3) int -> (..., pairs) float
        p = positions.to(self.inv_t.dtype)
        parts = [p[..., 0:1] * self.inv_t]
        if self.pairs_rc > 0:
            parts.append(p[..., 1:2] * self.inv_r)
            parts.append(p[..., 2:3] * self.inv_c)
        return torch.cat(parts, dim=-1)

    def forward(self, x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        """x: (B, H, T, head_dim); positions: (B, T, 3)."""
        ang = self.angles(positions)                      # (B, T, pairs)
        emb = torch.cat((ang, ang), dim=-1).unsqueeze(1)  # (B, 1, T, head_dim)
        cos, sin = emb.cos(), emb.sin()
        half = x.shape[-1] // 2
        rotated = torch.cat((-x[..., half:], x[..., :half]), dim=-1)
        return x * cos + rotated * sin


def apply_positional(x: torch.Tensor, position: tuple[int, int, int] | int,
                     base: float = 10000.0) -> torch.Tensor:
    """Rotate a single (head_dim,) embedding by its position; norm-preserving."""
    if x.shape[-1] % 2 != 0:
        raise ValueError("odd per-head dim")
    if isinstance(position, int):
        position = (position, 0, 0)
    rot = MultimodalRotary(x.shape[-1], base).to(x.dtype)
    pos = torch.tensor([[list(position)]], dtype=torch.long)
    return rot(x.reshape(1, 1, 1, -1), pos).reshape(x.shape)


class SelfAttention(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.heads = config.heads
        self.head_dim = config.head_dim
        self.qkv = nn.Linear(config.dim, 3 * config.dim)
        self.proj = nn.Linear(config.dim, config.dim)

    def split_heads(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def merge_heads(self, x: torch.Tensor) -> torch.Tensor:
        b, h, t, d = x.shape
        return x.transpose(1, 2).contiguous().view(b, t, h * d)


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.dim)
        self.attn = SelfAttention(config)
        self.ln2 = nn.LayerNorm(config.dim)
        hidden = config.mlp_ratio * config.dim
        self.mlp = nn.Sequential(
            nn.Linear(config.dim, hidden), nn.GELU(), nn.Linear(hidden, config.dim)
        )


@dataclass
class DecoderState:
    """Per-layer KV cache plus the multimodal position trail of one session."""

    keys: list[torch.Tensor]
    values: list[torch.Tensor]
    positions: list[tuple[int, int, int]] = field(default_factory=list)
    next_text_pos: int = 0

    @property
    def length(self) -> int:
        return self.keys[0].shape[2] if self.keys and self.keys[0] is not None else 0


def position_triples(
    seq: InterleavedSequence,
    vocab: Vocabulary,
    grids: Sequence[tuple[int, int]],
    start: int = 0,
) -> list[tuple[int, int, int]]:
    """Position ids per serialized token.

    Text, coordinate and marker tokens advance a scalar counter; the tokens of
    one vision span all share the counter value at the span start and carry
    their (row, col) grid offsets, after which the counter advances once.
    ``grids`` supplies (rows, cols) per vision span in order.
    """
    out: list[tuple[int, int, int]] = []
    counter = start
    gi = 0
    for el in seq:
        if isinstance(el, TextSpan):
            n = len(el.token_ids)
        elif isinstance(el, ImageIndex):
            n = 2 + len(vocab.encode_int(el.index))
        elif isinstance(el, Box):
            n = 2 + _box_token_len(el, vocab)
        else:
            n = None
        if n is not None:
            for _ in range(n):
                out.append((counter, 0, 0))
                counter += 1
            continue
        if gi >= len(grids):
            raise ValueError("fewer grids than vision spans")
        rows, cols = grids[gi]
        gi += 1
        if rows * cols != el.token_count:
            raise ValueError(f"grid {rows}x{cols} != span of {el.token_count} tokens")
        out.append((counter, 0, 0))
        counter += 1
        base = counter
        for r in range(rows):
            for c in range(cols):
                out.append((base, r, c))
        counter += 1
        out.append((counter, 0, 0))
        counter += 1
    if gi != len(grids):
        raise ValueError("more grids than vision spans")
    return out


def _box_token_len(el: Box, vocab: Vocabulary) -> int:
    n_digits = sum(len(vocab.encode_int(v)) for v in el.box.as_tuple())
    return n_digits + 7  # 4 parens, 3 commas


class ToyDecoder(nn.Module):
    """Decoder-only transformer over the interleaved multimodal stream.

    Vision-span placeholder positions take their input embeddings from the
    patch projection (one shared projection for input images and entity
    crops) instead of the token table.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.dim)
        self.patch_proj = nn.Linear(config.patch * config.patch * 3, config.dim)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.layers))
        self.ln_f = nn.LayerNorm(config.dim)
        self.lm_head = nn.Linear(config.dim, config.vocab_size, bias=False)
        self.rotary = MultimodalRotary(config.head_dim, config.rope_base)

    def init_weights(self, seed: int = 0) -> "ToyDecoder":
        gen = torch.Generator().manual_seed(seed)
        for p in self.parameters():
            if p.dim() >= 2:
                with torch.no_grad():
                    p.normal_(0.0, 0.02, generator=gen)
            else:
                nn.init.zeros_(p)
        with torch.no_grad():
            for block in self.blocks:
                for ln in (block.ln1, block.ln2):
                    ln.weight.fill_(1.0)
            self.ln_f.weight.fill_(1.0)
        return self

    def new_state(self) -> DecoderState:
        return DecoderState(keys=[None] * self.config.layers,
                            values=[None] * self.config.layers)

    def embed(
        self,
        ids: torch.Tensor,
        vision_slots: Sequence[tuple[int, np.ndarray]] = (),
    ) -> torch.Tensor:
        """(T,) ids plus (start, patches) slots -> (T, dim) input embeddings."""
        emb = self.tok_emb(ids)
        for start, patches in vision_slots:
            pt = torch.as_tensor(np.asarray(patches), dtype=emb.dtype)
            emb = torch.cat([emb[:start], self.patch_proj(pt), emb[start + pt.shape[0]:]])
        return emb

    def forward_block(
        self,
        emb: torch.Tensor,
        positions: torch.Tensor,
        state: DecoderState | None = None,
        refine=None,
    ) -> torch.Tensor:
        """Run a block of S new tokens after whatever is cached in ``state``.

        emb: (B, S, dim); positions: (B, S, 3). Appends this block's K/V to
        every layer cache when a state is given. ``refine`` is an optional
        hook with apply(layer, q, k, v, heads) mutating attention heads.
        Returns logits (B, S, vocab).
        """
        if int(positions[..., 0].max()) >= self.config.max_positions:
            raise ValueError(
                f"position {int(positions[..., 0].max())} exceeds "
                f"max_positions {self.config.max_positions}")
        x = emb
        for li, block in enumerate(self.blocks):
            h = block.ln1(x)
            qkv = block.attn.qkv(h)
            q, k, v = qkv.chunk(3, dim=-1)
            q = self.rotary(block.attn.split_heads(q), positions)
            k = self.rotary(block.attn.split_heads(k), positions)
            v = block.attn.split_heads(v)
            offset = 0
            if state is not None:
                if state.keys[li] is not None:
                    k = torch.cat([state.keys[li], k], dim=2)
                    v = torch.cat([state.values[li], v], dim=2)
                    offset = state.keys[li].shape[2]
                state.keys[li] = k.detach()
                state.values[li] = v.detach()
            heads = attend(q, k, v, causal=True, query_offset=offset)
            if refine is not None:
                refine.apply(li, q, k, v, heads)
            x = x + block.attn.proj(block.attn.merge_heads(heads))
            x = x + block.mlp(block.ln2(x))
        return self.lm_head(self.ln_f(x))

    def forward(
        self,
        ids: torch.Tensor,
        positions: torch.Tensor,
        vision_slots: Sequence[Sequence[tuple[int, np.ndarray]]] | None = None,
        refine=None,
    ) -> torch.Tensor:
        """Full-sequence forward for training. ids: (B, T); positions: (B, T, 3)."""
        if vision_slots is None:
            vision_slots = [()] * ids.shape[0]
        emb = torch.stack(
            [self.embed(ids[b], vision_slots[b]) for b in range(ids.shape[0])]
        )
        return self.forward_block(emb, positions, state=None, refine=refine)


def forward_step(
    model: ToyDecoder,
    state: DecoderState,
    emb: torch.Tensor,
    positions: Sequence[tuple[int, int, int]],
    refine=None,
) -> torch.Tensor:
    """One causal decoding step over S new embeddings; returns (S, vocab) logits."""
    pos = torch.tensor([list(positions)], dtype=torch.long)
    logits = model.forward_block(emb.unsqueeze(0), pos, state=state, refine=refine)
    state.positions.extend(tuple(p) for p in positions)
    state.next_text_pos = state.positions[-1][0] + 1
    return logits[0]


def compute_loss(
    logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean cross-entropy over mask-true positions; masked positions never touch the graph."""
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: logits {tuple(logits.shape)}, targets "
            f"{tuple(targets.shape)}, mask {tuple(mask.shape)}")
    if not bool(mask.any()):
        raise ValueError("loss undefined: every target position is masked")
    flat_logits = logits.reshape(-1, logits.shape[-1])[mask.reshape(-1)]
    flat_targets = targets.reshape(-1)[mask.reshape(-1)]
    return F.cross_entropy(flat_logits, flat_targets)


def save_checkpoint(model: ToyDecoder, path, extra: dict | None = None) -> None:
    """Versioned header, JSON config block, then raw little-endian f32 blobs
    in parameter declaration order."""
    header = {"config": model.config.to_dict(), "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, p in model.named_parameters():
            f.write(p.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[ToyDecoder, dict]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (blob_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(blob_len).decode("utf-8"))
        model = ToyDecoder(ModelConfig.from_dict(header["config"]))
        with torch.no_grad():
            for name, p in model.named_parameters():
                raw = f.read(4 * p.numel())
                if len(raw) != 4 * p.numel():
                    raise ValueError(f"checkpoint truncated at parameter {name}")
                arr = np.frombuffer(raw, dtype="<f4").reshape(tuple(p.shape))
                p.copy_(torch.from_numpy(arr.copy()))
        trailing = f.read(1)
        if trailing:
            raise ValueError("trailing bytes after parameters")
    return model, header["extra"]
