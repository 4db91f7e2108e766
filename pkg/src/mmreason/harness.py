"""Experiment runner: toy evaluation, layer-placement ablation, reports.

Evaluation tasks are synthetic families whose gold answers come straight from
the scene specs; the ablation replays a fixed generation workload per layer
group and reports steady-state per-token latency (median over repeats, warmup
excluded) next to task accuracy.
"""

from __future__ import annotations

import csv
import gc
import random
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import grammar
from .datagen import (
    ANSWER_PREFIX,
    CorpusConfig,
    build_vocabulary,
    draft_comparison,
    draft_reason,
    _make_shape,
    _pick_entity,
    _slot_positions,
)
from .decoder import forward_step, position_triples
from .generation import (
    GenerationResult,
    assemble_prompt,
    build_session,
    fork_session,
    generate,
)
from .grammar import Vocabulary
from .imaging import SceneSpec, synth_scene
from .memory import MemoryConfig

EVAL_FAMILIES = ("cross_image_match", "counting", "comparison")
DEFAULT_WARMUP_TOKENS = 32


@dataclass(frozen=True)
class EvalTask:
    family: str
    count: int
    seed: int

    def __post_init__(self):
        if self.family not in EVAL_FAMILIES:
            raise ValueError(f"unknown eval family {self.family!r}")
        if self.count < 1:
            raise ValueError("instance count must be >= 1")


@dataclass
class EvalInstance:
    scenes: list[SceneSpec]
    images: list[np.ndarray]
    question: str
    gold: str


def build_eval_instances(task: EvalTask, cfg: CorpusConfig | None = None) -> list[EvalInstance]:
    cfg = cfg or CorpusConfig()
    vocab = build_vocabulary()
    rng = random.Random(task.seed)
    out = []
    for _ in range(task.count):
        if task.family == "cross_image_match":
            draft = draft_reason(rng, cfg, vocab)
            scenes, question, gold = draft.scenes, draft.question, draft.gold_answer
        elif task.family == "comparison":
            draft = draft_comparison(rng, cfg, vocab)
            scenes, question, gold = draft.scenes, draft.question, draft.gold_answer
        else:  # counting
            n = rng.randint(1, 4)
            shapes = []
            used = set()
            for slot in rng.sample(_slot_positions(cfg.canvas, cfg.shape_size), n):
                while True:
                    color, kind = _pick_entity(rng)
                    if (color, kind) not in used:
                        used.add((color, kind))
                        break
                shapes.append(_make_shape(rng, cfg, color, kind, slot))
            scenes = [SceneSpec(cfg.canvas, cfg.canvas, tuple(shapes))]
            question = "how many shapes are in image 0?"
            gold = str(n)
        out.append(EvalInstance(
            scenes=scenes,
            images=[synth_scene(s)[0] for s in scenes],
            question=question,
            gold=gold,
        ))
    return out


class ScriptedDecoder:
    """Wraps a decoder so free decoding follows a fixed token script.

    Every forward still runs through the wrapped model (so latency and caches
    are real); only the final position's logits are overridden. One wrapper
    instance covers one generation; ``start`` skips slots already consumed by
    a reused prompt pass.
    """

    def __init__(self, inner, script: Sequence[int], eos_id: int, start: int = 0):
        self.inner = inner
        self._script = list(script)
        self._at = start
        self._eos = eos_id

    @property
    def config(self):
        return self.inner.config

    def new_state(self):
        return self.inner.new_state()

    def embed(self, ids, vision_slots=()):
        return self.inner.embed(ids, vision_slots)

    def forward_block(self, emb, positions, state=None, refine=None):
        logits = self.inner.forward_block(emb, positions, state=state, refine=refine)
        forced = self._script[self._at] if self._at < len(self._script) else self._eos
        self._at += 1
        out = logits.clone()
        out[..., -1, :] = -30.0
        out[..., -1, forced] = 30.0
        return out


def chain_script(
    vocab: Vocabulary, chain: grammar.InterleavedSequence, end: bool = True
) -> list[int]:
    """Free-token script for a chain, with one filler slot after each grounded
    pattern (the injected crop block consumes a script position whose logits
    are then replaced)."""
    script: list[int] = []
    els = chain.elements
    for i, el in enumerate(els):
        if isinstance(el, grammar.VisionSpan):
            continue  # injected by the engine, not decoded
        seq = grammar.InterleavedSequence((type(el)(*_el_args(el)),))
        script.extend(grammar.serialize_sequence(seq, vocab))
        fires = (
            isinstance(el, grammar.Box)
            and i > 0
            and isinstance(els[i - 1], grammar.ImageIndex)
        )
        if fires:
            script.append(vocab.pad_id)
    if end:
        script.append(vocab.eos_id)
    return script


def _el_args(el):
    if isinstance(el, grammar.TextSpan):
        return (el.token_ids,)
    if isinstance(el, grammar.ImageIndex):
        return (el.index,)
    if isinstance(el, grammar.Box):
        return (el.box,)
    raise TypeError(type(el))


def answer_script(vocab: Vocabulary, answer: str) -> list[int]:
    ids = vocab.encode_text(f"{ANSWER_PREFIX} {answer}.", strict=False)
    return list(ids) + [vocab.eos_id]


@dataclass
class EvalResult:
    accuracy: float
    correct: list[bool]
    results: list[GenerationResult]


def evaluate(
    model,
    vocab: Vocabulary,
    instances: Sequence[EvalInstance],
    memory: MemoryConfig,
    budget: int = 192,
    min_crop_side: int = 32,
    model_factory: Callable[[EvalInstance], object] | None = None,
) -> EvalResult:
    """Greedy decoding with exact-match answer scoring.

    An unparseable or answer-less chain counts as incorrect; nothing aborts.
    """
    correct = []
    results = []
    for inst in instances:
        m = model_factory(inst) if model_factory is not None else model
        session = build_session(
            m, vocab, inst.images, inst.question, memory=memory,
            budget=budget, min_crop_side=min_crop_side)
        result = generate(session)
        results.append(result)
        got = (result.answer or "").strip().lower()
        correct.append(got == inst.gold.strip().lower())
    return EvalResult(
        accuracy=sum(correct) / len(correct) if correct else 0.0,
        correct=correct,
        results=results,
    )


def plain_decode(model, vocab: Vocabulary, images, question: str, budget: int) -> list[int]:
    """Reference greedy loop: no triggers, no bank, no crop machinery."""
    prompt, grids = assemble_prompt(list(images), question, vocab, model.config.patch)
    ids = grammar.serialize_sequence(prompt, vocab)
    positions = position_triples(prompt, vocab, grids)
    interiors = grammar.vision_interior_slices(prompt, vocab)
    from .imaging import image_patches

    slots = [(start, image_patches(img, model.config.patch))
             for (start, _), img in zip(interiors, images)]
    state = model.new_state()
    out: list[int] = []
    with torch.no_grad():
        emb = model.embed(torch.tensor(ids, dtype=torch.long), slots)
        logits = forward_step(model, state, emb, positions)[-1]
        counter = positions[-1][0] + 1
        for _ in range(budget):
            token = int(torch.argmax(logits).item())
            out.append(token)
            if token == vocab.eos_id:
                break
            emb = model.embed(torch.tensor([token], dtype=torch.long))
            logits = forward_step(model, state, emb, [(counter, 0, 0)])[-1]
            counter += 1
    return out


@dataclass
class AblationRow:
    group: int
    active_layers: int
    latency_ms: float
    accuracy: float
    seed: int


def run_ablation(
    model,
    vocab: Vocabulary,
    instances: Sequence[EvalInstance],
    groups: Sequence[int] = (1, 2, 3, 4, 5),
    repeats: int = 5,
    warmup_tokens: int = DEFAULT_WARMUP_TOKENS,
    budget: int = 192,
    seed: int = 0,
    script: Sequence[int] | None = None,
    min_crop_side: int = 32,
    clock: str = "wall",
    attend_all_images: bool = False,
) -> list[AblationRow]:
    """Identical workloads per layer group; group 0 means memory disabled.

    The prompt pass runs once per (group, instance) and is forked per repeat;
    repeats are interleaved across groups so slow environment drift hits every
    group equally, and one untimed warmup run precedes timing. ``clock`` picks
    wall time or, for noisy shared machines, single-thread CPU time.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if not instances:
        raise ValueError("empty workload")
    if clock not in ("wall", "cpu"):
        raise ValueError(f"unknown clock {clock!r}")
    tick = time.perf_counter if clock == "wall" else time.process_time
    layers = model.config.layers

    def fresh_model(start: int = 0):
        if script is not None:
            return ScriptedDecoder(model, script, vocab.eos_id, start=start)
        return model

    memories: dict[int, MemoryConfig] = {}
    for group in groups:
        base = MemoryConfig.for_group(group, layers)
        memories[group] = MemoryConfig(base.active_layers, base.enabled,
                                       attend_all_images)
    # One group-agnostic template per instance: the prompt pass and bank do
    # not depend on the active layer set, and sharing them removes any
    # per-group memory-placement asymmetry from the timing comparison.
    templates = [
        build_session(fresh_model(), vocab, inst.images, inst.question,
                      memory=MemoryConfig.disabled(), budget=budget,
                      min_crop_side=min_crop_side)
        for inst in instances
    ]
    for t in templates:
        t.clock = tick

    def one_run(group, template, inst) -> tuple[list[float], bool]:
        session = fork_session(template, model=fresh_model(start=1),
                               memory=memories[group])
        result = generate(session)
        got = (result.answer or "").strip().lower()
        return result.step_times[warmup_tokens:], got == inst.gold.strip().lower()

    was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        for template, inst in zip(templates, instances):
            one_run(groups[0], template, inst)  # untimed warmup
        per_group: dict[int, list[float]] = {g: [] for g in groups}
        accuracy: dict[int, list[bool]] = {g: [] for g in groups}
        order = list(groups)
        for rep in range(repeats):
            # Within a repeat the groups run back to back per instance, with
            # the visit order rotated per round, so slow environment drift is
            # common mode in the group comparison.
            cut = rep % len(order)
            rotated = order[cut:] + order[:cut]
            times: dict[int, list[float]] = {g: [] for g in groups}
            for template, inst in zip(templates, instances):
                for group in rotated:
                    stamps, ok = one_run(group, template, inst)
                    times[group].extend(stamps)
                    if rep == 0:
                        accuracy[group].append(ok)
            for group in groups:
                if not times[group]:
                    raise ValueError(
                        "workload too short: no tokens past the warmup window")
                per_group[group].append(
                    1000.0 * sum(times[group]) / len(times[group]))
    finally:
        if was_enabled:
            gc.enable()
    return [
        AblationRow(
            group=group,
            active_layers=len(memories[group].layer_set),
            latency_ms=statistics.median(per_group[group]),
            accuracy=sum(accuracy[group]) / len(accuracy[group]),
            seed=seed,
        )
        for group in groups
    ]


ABLATION_COLUMNS = ("group", "active_layers", "latency_ms", "accuracy", "seed")


def emit_reports(rows: Sequence[AblationRow], out_dir, name: str = "ablation") -> Path:
    """One CSV per experiment, fixed column order."""
    if not rows:
        raise ValueError("empty report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.csv"
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(ABLATION_COLUMNS)
        for r in rows:
            writer.writerow([r.group, r.active_layers,
                             f"{r.latency_ms:.6g}", f"{r.accuracy:.6g}", r.seed])
    return path


def read_report(path) -> list[AblationRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            rows.append(AblationRow(
                group=int(rec["group"]),
                active_layers=int(rec["active_layers"]),
                latency_ms=float(rec["latency_ms"]),
                accuracy=float(rec["accuracy"]),
                seed=int(rec["seed"]),
            ))
    return rows
