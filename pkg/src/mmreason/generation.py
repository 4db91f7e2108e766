"""Autoregressive generation with grounded-entity crop injection.

The loop decodes tokens; whenever the emitted stream completes an
ImageIndex+Box pattern, the referenced region is cropped out of that input
image, patch-encoded, and force-fed as a vision span whose queries are
refined against the visual memory bank at the configured layers. Malformed
groundings never abort a generation: the crop step is skipped and the event
is logged to the session diagnostics.
"""

from __future__ import annotations

import re
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from . import grammar
from .decoder import DecoderState, forward_step, position_triples
from .grammar import (
    BoundingBox,
    Box,
    ImageIndex,
    InterleavedSequence,
    Role,
    TextSpan,
    VisionSpan,
    Vocabulary,
)
from .imaging import extract_crop, image_patches, patch_grid
from .memory import BankRefiner, MemoryBank, MemoryConfig

REASONING_PROMPT = "Please answer the question with reasoning and identify key objects."
DEFAULT_BUDGET = 512
_ANSWER_RE = re.compile(r"the answer is (.+?)(?:\.|$)", re.IGNORECASE)


def assemble_prompt(
    images: Sequence[np.ndarray],
    question: str,
    vocab: Vocabulary,
    patch: int = 8,
    strict_text: bool = False,
) -> tuple[InterleavedSequence, list[tuple[int, int]]]:
    """Prompt layout: indexed image spans, the question, then the fixed
    reasoning instruction. Returns the sequence and the span grids."""
    if len(images) == 0:
        raise ValueError("need at least one image")
    elements: list = []
    grids: list[tuple[int, int]] = []
    for i, img in enumerate(images):
        h, w = img.shape[:2]
        grid = patch_grid(h, w, patch)
        grids.append(grid)
        elements.append(ImageIndex(i, Role.PROMPT))
        elements.append(VisionSpan(grid[0] * grid[1], role=Role.PROMPT))
    text_ids = vocab.encode_text(question, strict=strict_text)
    text_ids += vocab.encode_text(REASONING_PROMPT, strict=strict_text)
    elements.append(TextSpan(tuple(text_ids), Role.PROMPT))
    return InterleavedSequence(tuple(elements)), grids


def detect_trigger(
    token_id: int,
    elements: Sequence,
    vocab: Vocabulary,
    num_images: int | None = None,
    diagnostics: list[str] | None = None,
) -> tuple[int, BoundingBox] | None:
    """On a pattern-closing marker, the most recent ImageIndex+Box pair.

    Total: returns None for non-marker tokens, incomplete patterns, or an
    image index beyond ``num_images`` (with a diagnostic note).
    """
    if token_id not in (vocab.img_end_id, vocab.box_end_id):
        return None
    found = _last_pair(elements)
    if found is None:
        return None
    _, index, box = found
    if num_images is not None and index >= num_images:
        if diagnostics is not None:
            diagnostics.append(f"grounded image index {index} >= image count {num_images}")
        return None
    return (index, box)


def _last_pair(elements: Sequence) -> tuple[int, int, BoundingBox] | None:
    """(element offset of the Box, image index, box) of the most recent pair."""
    for i in range(len(elements) - 1, 0, -1):
        if isinstance(elements[i], Box) and isinstance(elements[i - 1], ImageIndex):
            return (i, elements[i - 1].index, elements[i].box)
    return None


class ChainBuilder:
    """Lenient incremental token-to-element tracker for one generation.

    Well-formed fragments become elements; malformed ones are dropped with a
    diagnostic so the element view stays parseable while the raw token stream
    keeps feeding the decoder.
    """

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.elements: list = []
        self.diagnostics: list[str] = []
        self._mode = "text"
        self._buf: list[int] = []

    def push(self, token_id: int) -> None:
        v = self.vocab
        if self._mode == "text":
            if token_id == v.img_start_id:
                self._flush_text()
                self._mode, self._buf = "img", []
            elif token_id == v.box_start_id:
                self._flush_text()
                self._mode, self._buf = "box", []
            elif token_id == v.vision_start_id:
                self._flush_text()
                self._mode, self._buf = "vision", []
            elif v.is_text(token_id):
                self._buf.append(token_id)
            elif token_id in (v.eos_id, v.bos_id, v.pad_id):
                pass
            else:
                self.diagnostics.append(f"stray marker {v.token(token_id)!r} dropped")
            return
        if self._mode == "img":
            if v.is_digit(token_id):
                self._buf.append(token_id)
            elif token_id == v.img_end_id:
                self._finish_image_index()
            else:
                self._abort(f"malformed image index interrupted by {v.token(token_id)!r}",
                            token_id)
            return
        if self._mode == "box":
            if token_id == v.box_end_id:
                self._finish_box()
            elif v.is_text(token_id):
                self._buf.append(token_id)
            else:
                self._abort(f"malformed box interrupted by {v.token(token_id)!r}", token_id)
            return
        if self._mode == "vision":
            if token_id == v.vision_pad_id:
                self._buf.append(token_id)
            elif token_id == v.vision_end_id:
                if self._buf:
                    self.elements.append(VisionSpan(len(self._buf)))
                else:
                    self.diagnostics.append("empty vision span dropped")
                self._mode, self._buf = "text", []
            else:
                self._abort(f"vision span interrupted by {v.token(token_id)!r}", token_id)

    def finish(self) -> InterleavedSequence:
        if self._mode != "text":
            self.diagnostics.append(f"unterminated {self._mode} fragment dropped")
            self._mode, self._buf = "text", []
        self._flush_text()
        return InterleavedSequence(tuple(_merge_text(self.elements)))

    def _flush_text(self):
        if self._mode == "text" and self._buf:
            self.elements.append(TextSpan(tuple(self._buf)))
        self._buf = []

    def _finish_image_index(self):
        if not self._buf:
            self.diagnostics.append("empty image index dropped")
        else:
            value = int("".join(self.vocab.token(t) for t in self._buf))
            if value > grammar.MAX_IMAGE_INDEX:
                self.diagnostics.append(f"image index {value} out of range, dropped")
            else:
                self.elements.append(ImageIndex(value))
        self._mode, self._buf = "text", []

    def _finish_box(self):
        body = "".join(self.vocab.token(t) for t in self._buf)
        m = re.fullmatch(r"\((\d+),(\d+)\),\((\d+),(\d+)\)", body)
        if m is None:
            self.diagnostics.append(f"unparseable box body {body!r} dropped")
        else:
            x0, y0, x1, y1 = (int(g) for g in m.groups())
            if max(x0, y0, x1, y1) > grammar.COORD_MAX or x1 < x0 or y1 < y0:
                self.diagnostics.append(f"invalid box ({x0},{y0}),({x1},{y1}) dropped")
            else:
                self.elements.append(Box(BoundingBox(x0, y0, x1, y1)))
        self._mode, self._buf = "text", []

    def _abort(self, message: str, token_id: int):
        self.diagnostics.append(message)
        self._mode, self._buf = "text", []
        self.push(token_id)


def _merge_text(elements: list) -> list:
    merged: list = []
    for el in elements:
        if (merged and isinstance(el, TextSpan) and isinstance(merged[-1], TextSpan)
                and merged[-1].role == el.role):
            merged[-1] = TextSpan(merged[-1].token_ids + el.token_ids, el.role)
        else:
            merged.append(el)
    return merged


@dataclass
class TriggerEvent:
    step: int
    image_id: int
    box: tuple[int, int, int, int]
    crop_tokens: int = 0
    skipped: str | None = None


@dataclass
class GenerationResult:
    chain: InterleavedSequence
    generated: InterleavedSequence
    answer: str | None
    token_ids: list[int]
    truncated: bool
    diagnostics: list[str]
    trigger_events: list[TriggerEvent]
    step_times: list[float]
    crop_extractions: int
    refinement_calls: int


@dataclass
class GenerationSession:
    """One generation stream: decoder state, memory bank, parsed partial chain."""

    model: object
    vocab: Vocabulary
    images: list[np.ndarray]
    memory: MemoryConfig
    state: DecoderState
    bank: MemoryBank
    prompt: InterleavedSequence
    last_logits: torch.Tensor
    budget: int = DEFAULT_BUDGET
    min_crop_side: int = 32
    policy: str = "greedy"
    temperature: float = 1.0
    seed: int = 0
    clock: Callable[[], float] = time.perf_counter

    @property
    def patch(self) -> int:
        return self.model.config.patch


def build_session(
    model,
    vocab: Vocabulary,
    images: Sequence[np.ndarray],
    question: str,
    memory: MemoryConfig | None = None,
    budget: int = DEFAULT_BUDGET,
    min_crop_side: int = 32,
    policy: str = "greedy",
    temperature: float = 1.0,
    seed: int = 0,
    prefill_chunk: int = 1024,
) -> GenerationSession:
    """Assemble the prompt, run the prompt pass, and record the memory bank.

    Long prompts prefill in chunks so the causal score matrix stays bounded.
    """
    memory = memory if memory is not None else MemoryConfig.disabled()
    prompt, grids = assemble_prompt(list(images), question, vocab, model.config.patch)
    ids = grammar.serialize_sequence(prompt, vocab)
    positions = position_triples(prompt, vocab, grids)
    interiors = grammar.vision_interior_slices(prompt, vocab)
    slots = [
        (start, image_patches(img, model.config.patch))
        for (start, _), img in zip(interiors, images)
    ]
    state = model.new_state()
    with torch.no_grad():
        emb = model.embed(torch.tensor(ids, dtype=torch.long), slots)
        for at in range(0, emb.shape[0], prefill_chunk):
            chunk = slice(at, min(at + prefill_chunk, emb.shape[0]))
            logits = forward_step(model, state, emb[chunk], positions[chunk])
    bank = MemoryBank(model.config.layers)
    for layer in range(model.config.layers):
        for img_id, (start, end) in enumerate(interiors):
            bank.record(layer, img_id,
                        state.keys[layer][0, :, start:end, :],
                        state.values[layer][0, :, start:end, :])
    bank.freeze()
    return GenerationSession(
        model=model, vocab=vocab, images=list(images), memory=memory, state=state,
        bank=bank, prompt=prompt, last_logits=logits[-1], budget=budget,
        min_crop_side=min_crop_side, policy=policy, temperature=temperature, seed=seed,
    )


def fork_session(
    session: GenerationSession, model=None, memory: MemoryConfig | None = None
) -> GenerationSession:
    """Clone a post-prompt session so one prompt pass serves many generations.

    The bank is frozen and shared; decoder caches are deep-copied so the fork
    decodes independently. The prompt pass does not depend on the memory
    config (the bank always records every layer), so forks may switch it.
    Pass a fresh model wrapper for scripted replays.
    """
    state = DecoderState(
        keys=[k.clone() for k in session.state.keys],
        values=[v.clone() for v in session.state.values],
        positions=list(session.state.positions),
        next_text_pos=session.state.next_text_pos,
    )
    return GenerationSession(
        model=model if model is not None else session.model,
        vocab=session.vocab, images=session.images,
        memory=memory if memory is not None else session.memory,
        state=state, bank=session.bank, prompt=session.prompt,
        last_logits=session.last_logits, budget=session.budget,
        min_crop_side=session.min_crop_side, policy=session.policy,
        temperature=session.temperature, seed=session.seed, clock=session.clock,
    )


def generate(session: GenerationSession) -> GenerationResult:
    """Decode until end-of-sequence or budget, injecting crops on triggers."""
    model, vocab = session.model, session.vocab
    builder = ChainBuilder(vocab)
    pick = _make_policy(session)
    clock = session.clock
    next_counter = session.state.next_text_pos
    emitted: list[int] = []
    step_times: list[float] = []
    events: list[TriggerEvent] = []
    consumed: set[int] = set()
    crop_extractions = 0
    refinement_calls = 0
    truncated = True
    logits = session.last_logits

    # Single clock read per step: step times are consecutive differences, so
    # sums over a window telescope exactly even on coarse-grained clocks.
    prev_tick = clock()
    with torch.no_grad():
        for step in range(session.budget):
            token = pick(logits)
            emitted.append(token)
            if token == vocab.eos_id:
                now = clock()
                step_times.append(now - prev_tick)
                truncated = False
                break
            builder.push(token)
            trig = detect_trigger(token, builder.elements, vocab,
                                  num_images=len(session.images),
                                  diagnostics=builder.diagnostics)
            fire = (
                trig is not None
                and builder.elements
                and isinstance(builder.elements[-1], Box)
                and (len(builder.elements) - 1) not in consumed
            )
            try:
                emb = model.embed(torch.tensor([token], dtype=torch.long))
                logits = forward_step(model, session.state, emb,
                                      [(next_counter, 0, 0)])[-1]
                next_counter += 1
                if fire:
                    consumed.add(len(builder.elements) - 1)
                    index, box = trig
                    injected = _inject_crop(session, builder, index, box, step,
                                            events, next_counter)
                    if injected is not None:
                        logits, next_counter, n_ref = injected
                        crop_extractions += 1
                        refinement_calls += n_ref
            except ValueError as exc:
                builder.diagnostics.append(f"stopped: {exc}")
                now = clock()
                step_times.append(now - prev_tick)
                break
            now = clock()
            step_times.append(now - prev_tick)
            prev_tick = now

    generated = builder.finish()
    chain = InterleavedSequence(session.prompt.elements + generated.elements)
    return GenerationResult(
        chain=chain,
        generated=generated,
        answer=extract_answer(grammar.render_sequence(generated, vocab)),
        token_ids=emitted,
        truncated=truncated,
        diagnostics=builder.diagnostics,
        trigger_events=events,
        step_times=step_times,
        crop_extractions=crop_extractions,
        refinement_calls=refinement_calls,
    )


def _inject_crop(session, builder, index, box, step, events, next_counter):
    """Extract, encode and force-feed one entity crop; None when skipped."""
    vocab, model = session.vocab, session.model
    image = session.images[index]
    try:
        crop = extract_crop(image, box, session.min_crop_side, source_index=index)
    except ValueError as exc:
        builder.diagnostics.append(f"crop skipped: {exc}")
        events.append(TriggerEvent(step, index, box.as_tuple(), skipped=str(exc)))
        return None
    patches = image_patches(crop.pixels, session.patch)
    rows, cols = patch_grid(crop.pixels.shape[0], crop.pixels.shape[1], session.patch)
    n = patches.shape[0]
    span = VisionSpan(n)
    ids = [vocab.vision_start_id] + [vocab.vision_pad_id] * n + [vocab.vision_end_id]
    positions = [(next_counter, 0, 0)]
    base = next_counter + 1
    positions += [(base, r, c) for r in range(rows) for c in range(cols)]
    positions += [(base + 1, 0, 0)]
    refiner = BankRefiner(session.memory, session.bank, [(index, slice(1, 1 + n))])
    emb = model.embed(torch.tensor(ids, dtype=torch.long), [(1, patches)])
    logits = forward_step(model, session.state, emb, positions, refine=refiner)
    builder.elements.append(span)
    events.append(TriggerEvent(step, index, box.as_tuple(), crop_tokens=n))
    return logits[-1], base + 2, refiner.refinement_calls


def _make_policy(session: GenerationSession) -> Callable[[torch.Tensor], int]:
    if session.policy == "greedy":
        return lambda logits: int(torch.argmax(logits).item())
    if session.policy == "temperature":
        gen = torch.Generator().manual_seed(session.seed)

        def sample(logits: torch.Tensor) -> int:
            probs = torch.softmax(logits / session.temperature, dim=-1)
            return int(torch.multinomial(probs, 1, generator=gen).item())

        return sample
    raise ValueError(f"unknown decode policy {session.policy!r}")


def extract_answer(rendered: str) -> str | None:
    """Final answer span from a rendered chain, or None when absent."""
    matches = _ANSWER_RE.findall(rendered)
    return matches[-1].strip() if matches else None
