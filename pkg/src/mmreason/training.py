"""Two-stage supervised training with loss masking and cosine decay.

Stage 1 trains on the multi-image chain corpus alone; stage 2 mixes the chain
corpus with a general text-only corpus at equal sampling probability to limit
forgetting. The optimizer is decoupled-weight-decay momentum with bias
correction, hand-rolled so the update rule is exactly the documented one.
"""

from __future__ import annotations

import csv
import math
import random
import time
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

from . import grammar
from .datagen import CorpusConfig, CorpusInstance
from .decoder import ToyDecoder, compute_loss, position_triples
from .generation import assemble_prompt
from .grammar import (
    Box,
    ImageIndex,
    InterleavedSequence,
    Role,
    TextSpan,
    VisionSpan,
    Vocabulary,
)
from .imaging import SceneSpec, extract_crop, image_patches, patch_grid, synth_scene
from .memory import InlineRefiner, MemoryConfig

FULL_SCALE_STAGE_LRS = {1: 1e-5, 2: 1e-6}   # 7B-class settings, kept expressible
FULL_SCALE_BATCH_SIZE = 256
TOY_STAGE_LRS = {1: 1e-3, 2: 1e-4}          # same 10x stage ratio at toy scale


class DivergenceError(RuntimeError):
    """Loss stayed above 10x its initial value for 100 consecutive steps."""


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = TOY_STAGE_LRS[1]
    lr_floor: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.95  # the stated momentum coefficient; beta1 is the usual default
    weight_decay: float = 0.1
    eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 16

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")


@dataclass(frozen=True)
class StagePlan:
    stage_id: int
    lr: float
    steps: int
    mix: tuple[float, float] = (1.0, 0.0)  # (chain corpus, general corpus) weights
    epochs: float | None = None

    def __post_init__(self):
        if self.stage_id not in (1, 2):
            raise ValueError("stage id must be 1 or 2")
        if self.stage_id == 2 and self.mix != (1.0, 1.0):
            raise ValueError("stage 2 mixes chain and general data 1:1")

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        return cls(stage_id=d["stage_id"], lr=d["lr"], steps=d["steps"],
                   mix=tuple(d.get("mix", (1.0, 0.0))), epochs=d.get("epochs"))


def cosine_lr(step: int, total: int, peak: float, floor: float = 0.0) -> float:
    """floor + (peak - floor) * (1 + cos(pi * step / total)) / 2."""
    if total <= 0:
        raise ValueError("total steps must be positive")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return floor + (peak - floor) * (1 + math.cos(math.pi * step / total)) / 2


def mixed_sampler(
    chain_corpus: Sequence,
    general_corpus: Sequence,
    weights: tuple[float, float],
    seed: int,
    batch_size: int,
) -> Iterator[list]:
    """Endless batch stream; each slot draws from the chain corpus with
    probability w_chain / (w_chain + w_general)."""
    w_a, w_b = weights
    if w_a < 0 or w_b < 0 or w_a + w_b == 0:
        raise ValueError(f"bad mixing weights {weights}")
    if w_a > 0 and not chain_corpus:
        raise ValueError("chain corpus required but empty")
    if w_b > 0 and not general_corpus:
        raise ValueError("general corpus required but empty")
    p = w_a / (w_a + w_b)
    rng = random.Random(seed)
    while True:
        batch = []
        for _ in range(batch_size):
            if rng.random() < p:
                batch.append(chain_corpus[rng.randrange(len(chain_corpus))])
            else:
                batch.append(general_corpus[rng.randrange(len(general_corpus))])
        yield batch


class AdamW:
    """Decoupled weight decay plus bias-corrected first/second momentum."""

    def __init__(self, params: Iterable[torch.nn.Parameter], config: OptimizerConfig):
        self.params = [p for p in params if p.requires_grad]
        self.cfg = config
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self, lr: float | None = None):
        lr = self.cfg.lr if lr is None else lr
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            update = (m / c1) / ((v / c2).sqrt() + self.cfg.eps)
            update = update + self.cfg.weight_decay * p
            p.sub_(lr * update)


# ---------------------------------------------------------------------------
# Instance tensorization


@dataclass
class TrainSample:
    ids: torch.Tensor                      # (T,) long
    positions: torch.Tensor                # (T, 3) long
    flags: torch.Tensor                    # (T,) bool, loss mask per token
    vision_slots: list[tuple[int, np.ndarray]]
    image_spans: dict[int, slice]          # input image id -> placeholder slice
    crop_slices: list[tuple[int, slice]]   # (source image id, placeholder slice)

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])


def tensorize_instance(
    instance: CorpusInstance, vocab: Vocabulary, cfg: CorpusConfig, patch: int
) -> TrainSample:
    """Corpus record -> token ids, positions, mask and visual bindings."""
    scenes = [SceneSpec.from_dict(d) for d in instance.images]
    images = [synth_scene(s)[0] for s in scenes]
    chain_seq = grammar.parse_text(instance.chain, vocab)
    if images:
        prompt_seq, grids = assemble_prompt(images, instance.question, vocab, patch)
    else:
        ids = vocab.encode_text(instance.question, strict=True)
        prompt_seq = InterleavedSequence((TextSpan(tuple(ids), Role.PROMPT),))
        grids = []
    full = InterleavedSequence(prompt_seq.elements + chain_seq.elements)

    crop_bindings = _chain_crops(chain_seq, images, cfg, patch)
    grids = list(grids) + [g for (_, g, _) in crop_bindings]

    ids = grammar.serialize_sequence(full, vocab)
    positions = position_triples(full, vocab, grids)
    flags = grammar.loss_flags(full, vocab)
    interiors = grammar.vision_interior_slices(full, vocab)

    vision_slots: list[tuple[int, np.ndarray]] = []
    image_spans: dict[int, slice] = {}
    crop_slices: list[tuple[int, slice]] = []
    n_prompt_spans = len(images)
    for k, (start, end) in enumerate(interiors):
        if k < n_prompt_spans:
            vision_slots.append((start, image_patches(images[k], patch)))
            image_spans[k] = slice(start, end)
        else:
            source, _, patches = crop_bindings[k - n_prompt_spans]
            vision_slots.append((start, patches))
            crop_slices.append((source, slice(start, end)))

    ids = ids + [vocab.eos_id]
    positions = positions + [(positions[-1][0] + 1, 0, 0)]
    flags = flags + [True]
    return TrainSample(
        ids=torch.tensor(ids, dtype=torch.long),
        positions=torch.tensor(positions, dtype=torch.long),
        flags=torch.tensor(flags, dtype=torch.bool),
        vision_slots=vision_slots,
        image_spans=image_spans,
        crop_slices=crop_slices,
    )


def _chain_crops(
    chain_seq: InterleavedSequence, images, cfg: CorpusConfig, patch: int
) -> list[tuple[int, tuple[int, int], np.ndarray]]:
    """(source image id, grid, patches) per grounded vision span, in order."""
    out = []
    els = chain_seq.elements
    for i, el in enumerate(els):
        if not isinstance(el, VisionSpan):
            continue
        if i < 2 or not isinstance(els[i - 1], Box) or not isinstance(els[i - 2], ImageIndex):
            raise ValueError("chain vision span without ImageIndex+Box anchor")
        source = els[i - 2].index
        if source >= len(images):
            raise ValueError(f"grounded image index {source} beyond {len(images)} images")
        crop = extract_crop(images[source], els[i - 1].box, cfg.min_crop_side, source)
        grid = patch_grid(crop.pixels.shape[0], crop.pixels.shape[1], patch)
        if grid[0] * grid[1] != el.token_count:
            raise ValueError(
                f"span of {el.token_count} tokens does not match crop grid {grid}")
        out.append((source, grid, image_patches(crop.pixels, patch)))
    return out


def collate(batch: list[TrainSample], pad_id: int) -> dict:
    """Right-pad to the longest sample; pads carry False loss flags."""
    width = max(s.length for s in batch)
    ids = torch.full((len(batch), width), pad_id, dtype=torch.long)
    positions = torch.zeros((len(batch), width, 3), dtype=torch.long)
    flags = torch.zeros((len(batch), width), dtype=torch.bool)
    for b, s in enumerate(batch):
        ids[b, : s.length] = s.ids
        positions[b, : s.length] = s.positions
        flags[b, : s.length] = s.flags
    return {
        "ids": ids,
        "positions": positions,
        "flags": flags,
        "vision_slots": [s.vision_slots for s in batch],
        "image_spans": [s.image_spans for s in batch],
        "crops": [s.crop_slices for s in batch],
    }


def batch_loss(model: ToyDecoder, batch: dict, memory: MemoryConfig) -> torch.Tensor:
    refine = None
    if memory.layer_set and any(batch["crops"]):
        refine = InlineRefiner(memory, batch["image_spans"], batch["crops"])
    logits = model(batch["ids"], batch["positions"], batch["vision_slots"], refine=refine)
    targets = batch["ids"][:, 1:]
    mask = batch["flags"][:, 1:]
    return compute_loss(logits[:, :-1], targets, mask)


@dataclass
class TrainResult:
    trace: list[tuple[int, int, float, float]]  # (step, stage, lr, loss)
    final_loss: float
    smoothed_loss: float
    reached_step: int | None   # first step where smoothed loss crossed the target
    wall_seconds: float


def train_stage(
    model: ToyDecoder,
    plan: StagePlan,
    opt_config: OptimizerConfig,
    chain_samples: Sequence[TrainSample],
    general_samples: Sequence[TrainSample] = (),
    memory: MemoryConfig | None = None,
    seed: int = 0,
    pad_id: int = 0,
    target_loss: float | None = None,
    stop_at_target: bool = False,
    optimizer: AdamW | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Run one stage; returns the loss trace. Divergence aborts with an error."""
    memory = memory or MemoryConfig.disabled()
    steps = plan.steps
    if plan.epochs is not None:
        corpus_size = len(chain_samples) + (len(general_samples) if plan.mix[1] else 0)
        steps = min(steps, math.ceil(plan.epochs * corpus_size / opt_config.batch_size))
    sampler = mixed_sampler(chain_samples, general_samples, plan.mix, seed,
                            opt_config.batch_size)
    opt = optimizer if optimizer is not None else AdamW(model.parameters(), opt_config)
    trace: list[tuple[int, int, float, float]] = []
    smoothed = None
    initial = None
    high_streak = 0
    reached = None
    t0 = time.perf_counter()
    for step in range(steps):
        batch = collate(next(sampler), pad_id)
        lr = cosine_lr(step, steps, plan.lr, opt_config.lr_floor)
        opt.zero_grad()
        loss = batch_loss(model, batch, memory)
        loss.backward()
        if opt_config.clip_norm:
            torch.nn.utils.clip_grad_norm_(model.parameters(), opt_config.clip_norm)
        opt.step(lr)
        value = float(loss.detach())
        trace.append((step, plan.stage_id, lr, value))
        initial = value if initial is None else initial
        smoothed = value if smoothed is None else 0.9 * smoothed + 0.1 * value
        if not math.isfinite(value) or value > 10 * initial:
            high_streak += 1
            if high_streak >= 100:
                raise DivergenceError(
                    f"loss {value:.3f} above 10x initial {initial:.3f} "
                    f"for 100 consecutive steps (step {step})")
        else:
            high_streak = 0
        if target_loss is not None and reached is None and smoothed < target_loss:
            reached = step
            if stop_at_target:
                break
        if log_every and step % log_every == 0:
            print(f"stage {plan.stage_id} step {step} lr {lr:.2e} "
                  f"loss {value:.4f} smoothed {smoothed:.4f}")
    return TrainResult(
        trace=trace,
        final_loss=trace[-1][3] if trace else float("nan"),
        smoothed_loss=smoothed if smoothed is not None else float("nan"),
        reached_step=reached,
        wall_seconds=time.perf_counter() - t0,
    )


def write_trace(trace: list[tuple[int, int, float, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "stage", "lr", "loss"])
        for row in trace:
            writer.writerow([row[0], row[1], f"{row[2]:.8g}", f"{row[3]:.8g}"])


def tensorize_corpus(
    instances: Sequence[CorpusInstance], vocab: Vocabulary, cfg: CorpusConfig, patch: int
) -> list[TrainSample]:
    return [tensorize_instance(inst, vocab, cfg, patch) for inst in instances]
