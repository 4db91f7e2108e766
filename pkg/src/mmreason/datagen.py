"""Synthetic corpus construction over four task families.

Caption and co-reference instances are assembled directly from scene ground
truth. Comparison and reason instances run the full pipeline: an annotator
client drafts a rationale and answer, answer correctness gates retention
(one retry with the gold answer fed back, then rejection), entities are
extracted and detected per image, detections are kept only at IoU >= 0.9
against the reference, surviving boxes are fused into one spanning box per
entity, and the groundings are woven into the chain.

Everything is deterministic under a fixed seed; rejected or unprocessed
samples go to a sidecar file, never silently dropped.
"""

from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

from .grammar import (
    BoundingBox,
    Box,
    ImageIndex,
    InterleavedSequence,
    TextSpan,
    VisionSpan,
    Vocabulary,
    normalize_box,
    parse_text,
    render_sequence,
)
from .imaging import (
    COLORS,
    SHAPES,
    SceneSpec,
    ShapeSpec,
    extract_crop,
    shape_pixel_box,
    synth_scene,
    token_count,
)

TASKS = ("caption", "coreference", "comparison", "reason")
# Full-scale corpus mix, per mille: caption 50, co-reference 90, comparison 18,
# reason 102 (sums to 260).
REFERENCE_MIX_PER_MILLE = {"caption": 50, "coreference": 90, "comparison": 18, "reason": 102}
IOU_THRESHOLD = 0.9
ANSWER_PREFIX = "the answer is"

_TEMPLATE_WORDS = [
    "describe", "image", "images", "shows", "a", "the", "and", "in", "there",
    "is", "are", "appears", "contains", "which", "contain", "from", "do",
    "same", "number", "of", "shapes", "shape", "yes", "no", "answer", "how",
    "many", "scene", "has", "squares", "circles", "triangles", "what", "color",
    "Please", "question", "with", "reasoning", "identify", "key", "objects",
]


def build_vocabulary() -> Vocabulary:
    """Closed-world vocabulary covering every template this module emits."""
    return Vocabulary(sorted(set(_TEMPLATE_WORDS) | set(COLORS) | set(SHAPES)))


@dataclass(frozen=True)
class CorpusConfig:
    canvas: int = 32
    shape_size: int = 12
    min_crop_side: int = 32
    patch: int = 8
    jitter: int = 2

    def to_dict(self) -> dict:
        return {"canvas": self.canvas, "shape_size": self.shape_size,
                "min_crop_side": self.min_crop_side, "patch": self.patch,
                "jitter": self.jitter}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        return cls(**d)


class AnnotatorError(RuntimeError):
    """A client call failed; the sample is recorded as unprocessed."""


class AnnotatorClient(Protocol):
    def generate_rationale(
        self, question: str, images: Sequence[SceneSpec], gold_answer: str | None = None
    ) -> tuple[str, str]: ...

    def extract_entities(self, dialogue: str) -> list[str]: ...

    def detect(self, entity: str, image: SceneSpec, image_id: int) -> list[BoundingBox]: ...

    def judge_answer(self, predicted: str, gold: str) -> bool: ...


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union on continuous normalized areas; 0 when both empty."""
    ix = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    area_a = (a.x1 - a.x0) * (a.y1 - a.y0)
    area_b = (b.x1 - b.x0) * (b.y1 - b.y0)
    union = area_a + area_b - inter
    if union == 0:
        return 0.0
    return inter / union


def fuse_boxes(boxes: Sequence[BoundingBox]) -> BoundingBox:
    """Smallest top-left and largest bottom-right over all boxes."""
    if not boxes:
        raise ValueError("cannot fuse an empty box list")
    return BoundingBox(
        min(b.x0 for b in boxes),
        min(b.y0 for b in boxes),
        max(b.x1 for b in boxes),
        max(b.y1 for b in boxes),
    )


@dataclass(frozen=True)
class DetectionCandidate:
    entity: str
    image_id: int
    box: BoundingBox
    validation_iou: float | None = None


def validate_detections(
    candidates: Sequence[DetectionCandidate],
    references: dict[tuple[str, int], BoundingBox],
    threshold: float = IOU_THRESHOLD,
) -> list[DetectionCandidate]:
    """Keep exactly the candidates whose IoU against their reference meets the
    threshold (inclusive)."""
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold {threshold} outside (0, 1]")
    retained = []
    for cand in candidates:
        ref = references.get((cand.entity, cand.image_id))
        if ref is None:
            continue
        score = iou(cand.box, ref)
        if score >= threshold:
            retained.append(DetectionCandidate(cand.entity, cand.image_id, cand.box, score))
    return retained


@dataclass
class RationaleOutcome:
    status: str  # retained | refined | rejected | unprocessed
    chain_text: str | None = None
    answer: str | None = None
    attempts: int = 0
    error: str | None = None


def build_rationale(
    question: str,
    images: Sequence[SceneSpec],
    gold_answer: str,
    client: AnnotatorClient,
) -> RationaleOutcome:
    """Draft-then-retry rationale filtering keyed on answer correctness.

    First pass drafts freely; if the judged answer is wrong, the gold answer
    is fed back for one refined attempt; a second miss rejects the sample.
    """
    try:
        text, answer = client.generate_rationale(question, images)
        if client.judge_answer(answer, gold_answer):
            return RationaleOutcome("retained", text, answer, attempts=1)
        text, answer = client.generate_rationale(question, images, gold_answer=gold_answer)
        if client.judge_answer(answer, gold_answer):
            return RationaleOutcome("refined", text, answer, attempts=2)
        return RationaleOutcome("rejected", attempts=2)
    except AnnotatorError as exc:
        return RationaleOutcome("unprocessed", error=str(exc))


class MockAnnotator:
    """Rule-based annotator over scene specs, deterministic under its seed.

    ``wrong_answer_rate`` corrupts an attempt's answer to exercise the retry
    and rejection paths; ``detect_miss_rate`` returns a far-off detection that
    the IoU gate drops; ``multi_detect_rate`` adds a second near-duplicate
    detection so fusion has work to do; ``failure_rate`` raises AnnotatorError.
    """

    def __init__(
        self,
        seed: int = 0,
        wrong_answer_rate: float = 0.0,
        detect_miss_rate: float = 0.0,
        multi_detect_rate: float = 0.0,
        failure_rate: float = 0.0,
    ):
        self.rng = random.Random(seed)
        self.wrong_answer_rate = wrong_answer_rate
        self.detect_miss_rate = detect_miss_rate
        self.multi_detect_rate = multi_detect_rate
        self.failure_rate = failure_rate
        self.calls = {"rationale": 0, "entities": 0, "detect": 0, "judge": 0}
        self._truth: dict[str, str] = {}

    def prime(self, question: str, gold_answer: str, rationale: str) -> None:
        """Corpus generation tells the mock the ground truth it would 'know'."""
        self._truth[question] = json.dumps({"answer": gold_answer, "rationale": rationale})

    def generate_rationale(self, question, images, gold_answer=None):
        self.calls["rationale"] += 1
        if self.failure_rate and self.rng.random() < self.failure_rate:
            raise AnnotatorError("annotator backend unavailable")
        truth = json.loads(self._truth[question])
        answer = truth["answer"]
        if self.wrong_answer_rate and self.rng.random() < self.wrong_answer_rate:
            answer = _corrupt_answer(answer, self.rng)
        return truth["rationale"].replace("{answer}", answer), answer

    def extract_entities(self, dialogue: str) -> list[str]:
        self.calls["entities"] += 1
        found = []
        for color in COLORS:
            for kind in SHAPES:
                probe = f"{color} {kind} in image "
                start = 0
                while (at := dialogue.find(probe, start)) != -1:
                    rest = dialogue[at + len(probe):]
                    digits = ""
                    for ch in rest:
                        if ch.isdigit():
                            digits += ch
                        else:
                            break
                    if digits:
                        name = f"{color} {kind} in image {digits}"
                        if name not in found:
                            found.append(name)
                    start = at + 1
        return found

    def detect(self, entity: str, image: SceneSpec, image_id: int) -> list[BoundingBox]:
        self.calls["detect"] += 1
        color, kind, target = _parse_entity(entity)
        if target != image_id:
            return []
        boxes = []
        for s in image.shapes:
            if s.color == color and s.kind == kind:
                gt = normalize_box(shape_pixel_box(s), image.width, image.height)
                if self.detect_miss_rate and self.rng.random() < self.detect_miss_rate:
                    boxes.append(_shift_box(gt, 200))
                else:
                    boxes.append(_shift_box(gt, self.rng.randint(0, 4)))
                    if self.multi_detect_rate and self.rng.random() < self.multi_detect_rate:
                        boxes.append(_shift_box(gt, self.rng.randint(1, 4)))
        return boxes

    def judge_answer(self, predicted: str, gold: str) -> bool:
        self.calls["judge"] += 1
        return predicted.strip() == gold.strip()


def _parse_entity(entity: str) -> tuple[str, str, int]:
    words = entity.split()
    # "<color> <kind> in image <k>"
    return words[0], words[1], int(words[-1])


def _shift_box(box: BoundingBox, amount: int) -> BoundingBox:
    dx = min(amount, 1000 - box.x1)
    dy = min(amount, 1000 - box.y1)
    return BoundingBox(box.x0 + dx, box.y0 + dy, box.x1 + dx, box.y1 + dy)


def _corrupt_answer(answer: str, rng: random.Random) -> str:
    if answer == "yes":
        return "no"
    if answer == "no":
        return "yes"
    if answer.startswith("image "):
        k = int(answer.split()[-1])
        return f"image {k + 1}"
    return answer + " maybe"


# ---------------------------------------------------------------------------
# Scene builders


@dataclass
class DraftInstance:
    task: str
    scenes: list[SceneSpec]
    question: str
    gold_answer: str
    rationale: str            # mention text with {answer} slot, no groundings
    entities: list[str]       # qualified mentions appearing in the rationale
    direct_chain: InterleavedSequence | None = None  # caption / co-reference


def _slot_positions(canvas: int, size: int) -> list[tuple[int, int]]:
    lo = 2
    hi = canvas - size - 2
    return [(lo, lo), (hi, lo), (lo, hi), (hi, hi)]


def _pick_entity(rng: random.Random) -> tuple[str, str]:
    return rng.choice(sorted(COLORS)), rng.choice(SHAPES)


def _make_shape(rng, cfg: CorpusConfig, color, kind, slot) -> ShapeSpec:
    jx = rng.randint(-cfg.jitter, cfg.jitter) if cfg.jitter else 0
    jy = rng.randint(-cfg.jitter, cfg.jitter) if cfg.jitter else 0
    x, y = slot
    x = min(max(x + jx, 0), cfg.canvas - cfg.shape_size)
    y = min(max(y + jy, 0), cfg.canvas - cfg.shape_size)
    return ShapeSpec(kind, color, x, y, cfg.shape_size)


def _entity_box(scene: SceneSpec, shape: ShapeSpec) -> BoundingBox:
    return normalize_box(shape_pixel_box(shape), scene.width, scene.height)


def _grounding(cfg: CorpusConfig, scene: SceneSpec, image_id: int,
               box: BoundingBox) -> list:
    image, _ = synth_scene(scene)
    crop = extract_crop(image, box, cfg.min_crop_side, source_index=image_id)
    n = token_count(crop.pixels.shape[0], crop.pixels.shape[1], cfg.patch)
    return [ImageIndex(image_id), Box(box), VisionSpan(n)]


def draft_caption(rng: random.Random, cfg: CorpusConfig, vocab: Vocabulary) -> DraftInstance:
    color, kind = _pick_entity(rng)
    slot = rng.choice(_slot_positions(cfg.canvas, cfg.shape_size))
    shape = _make_shape(rng, cfg, color, kind, slot)
    scene = SceneSpec(cfg.canvas, cfg.canvas, (shape,))
    answer = f"a {color} {kind}"
    question = "describe image 0."
    elements: list = [TextSpan(tuple(vocab.encode_text(
        f"image 0 shows a {color} {kind}", strict=True)))]
    elements += _grounding(cfg, scene, 0, _entity_box(scene, shape))
    elements.append(TextSpan(tuple(vocab.encode_text(
        f". {ANSWER_PREFIX} {answer}.", strict=True))))
    return DraftInstance(
        task="caption", scenes=[scene], question=question, gold_answer=answer,
        rationale="", entities=[], direct_chain=InterleavedSequence(tuple(elements)),
    )


def draft_coreference(rng: random.Random, cfg: CorpusConfig, vocab: Vocabulary) -> DraftInstance:
    color, kind = _pick_entity(rng)
    slot = rng.choice(_slot_positions(cfg.canvas, cfg.shape_size))
    shape_a = _make_shape(rng, cfg, color, kind, slot)
    shape_b = _make_shape(rng, cfg, color, kind, slot)
    scene_a = SceneSpec(cfg.canvas, cfg.canvas, (shape_a,))
    scene_b = SceneSpec(cfg.canvas, cfg.canvas, (shape_b,))
    # One entity, boxes in two images: the chain carries the spanning fusion,
    # anchored to the first image that contains the entity.
    fused = fuse_boxes([_entity_box(scene_a, shape_a), _entity_box(scene_b, shape_b)])
    question = f"which images contain the {color} {kind}?"
    answer = "images 0 and 1"
    elements: list = [TextSpan(tuple(vocab.encode_text(
        f"the {color} {kind} appears in image 0 and in image 1", strict=True)))]
    elements += _grounding(cfg, scene_a, 0, fused)
    elements.append(TextSpan(tuple(vocab.encode_text(
        f". {ANSWER_PREFIX} {answer}.", strict=True))))
    return DraftInstance(
        task="coreference", scenes=[scene_a, scene_b], question=question,
        gold_answer=answer, rationale="", entities=[],
        direct_chain=InterleavedSequence(tuple(elements)),
    )


def draft_comparison(rng: random.Random, cfg: CorpusConfig, vocab: Vocabulary) -> DraftInstance:
    slots = _slot_positions(cfg.canvas, cfg.shape_size)
    n0, n1 = rng.randint(1, 3), rng.randint(1, 3)
    scenes = []
    firsts = []
    for n in (n0, n1):
        chosen: list[ShapeSpec] = []
        kinds_used: set[tuple[str, str]] = set()
        for slot in rng.sample(slots, n):
            while True:
                color, kind = _pick_entity(rng)
                if (color, kind) not in kinds_used:
                    kinds_used.add((color, kind))
                    break
            chosen.append(_make_shape(rng, cfg, color, kind, slot))
        scenes.append(SceneSpec(cfg.canvas, cfg.canvas, tuple(chosen)))
        firsts.append(chosen[0])
    answer = "yes" if n0 == n1 else "no"
    question = "do image 0 and image 1 contain the same number of shapes?"
    e0 = f"{firsts[0].color} {firsts[0].kind} in image 0"
    e1 = f"{firsts[1].color} {firsts[1].kind} in image 1"
    rationale = (
        f"there is a {e0} . there is a {e1} . "
        f"image 0 contains {n0} shapes and image 1 contains {n1} shapes . "
        f"{ANSWER_PREFIX} {{answer}}."
    )
    return DraftInstance(
        task="comparison", scenes=scenes, question=question, gold_answer=answer,
        rationale=rationale, entities=[e0, e1],
    )


def draft_reason(rng: random.Random, cfg: CorpusConfig, vocab: Vocabulary) -> DraftInstance:
    slots = _slot_positions(cfg.canvas, cfg.shape_size)
    color, kind = _pick_entity(rng)
    match = rng.choice([1, 2])
    scenes = []
    for i in range(3):
        if i == 0 or i == match:
            c, k = color, kind
        else:
            while True:
                c, k = _pick_entity(rng)
                if (c, k) != (color, kind):
                    break
        shape = _make_shape(rng, cfg, c, k, rng.choice(slots))
        scenes.append(SceneSpec(cfg.canvas, cfg.canvas, (shape,)))
    answer = f"image {match}"
    question = f"which image contains the {color} {kind} from image 0?"
    e0 = f"{color} {kind} in image 0"
    em = f"{color} {kind} in image {match}"
    rationale = (
        f"there is a {e0} . there is a {em} . "
        f"{ANSWER_PREFIX} {{answer}}."
    )
    return DraftInstance(
        task="reason", scenes=scenes, question=question, gold_answer=answer,
        rationale=rationale, entities=[e0, em],
    )


_DRAFTERS = {
    "caption": draft_caption,
    "coreference": draft_coreference,
    "comparison": draft_comparison,
    "reason": draft_reason,
}


# ---------------------------------------------------------------------------
# Pipeline


@dataclass
class CorpusInstance:
    id: str
    task_type: str
    images: list[dict]
    question: str
    chain: str
    answer: str
    provenance: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "id": self.id, "task_type": self.task_type, "images": self.images,
                "question": self.question, "chain": self.chain, "answer": self.answer,
                "provenance": self.provenance,
            },
            sort_keys=True,
        )


def weave_groundings(
    chain_text: str,
    entity_boxes: dict[str, tuple[int, BoundingBox]],
    scenes: Sequence[SceneSpec],
    cfg: CorpusConfig,
    vocab: Vocabulary,
) -> InterleavedSequence:
    """Insert each entity's grounding right after its first mention."""
    cuts: list[tuple[int, str]] = []
    for entity in entity_boxes:
        at = chain_text.find(entity)
        if at != -1:
            cuts.append((at + len(entity), entity))
    cuts.sort()
    elements: list = []
    prev = 0
    for at, entity in cuts:
        before = chain_text[prev:at].strip()
        if before:
            elements.append(TextSpan(tuple(vocab.encode_text(before, strict=True))))
        image_id, box = entity_boxes[entity]
        elements += _grounding(cfg, scenes[image_id], image_id, box)
        prev = at
    tail = chain_text[prev:].strip()
    if tail:
        elements.append(TextSpan(tuple(vocab.encode_text(tail, strict=True))))
    return InterleavedSequence(tuple(_coalesce_text(elements)))


def _coalesce_text(elements: list) -> list:
    out: list = []
    for el in elements:
        if out and isinstance(el, TextSpan) and isinstance(out[-1], TextSpan):
            out[-1] = TextSpan(out[-1].token_ids + el.token_ids)
        else:
            out.append(el)
    return out


def process_draft(
    draft: DraftInstance,
    client: AnnotatorClient,
    cfg: CorpusConfig,
    vocab: Vocabulary,
) -> tuple[str, CorpusInstance | dict]:
    """Run one draft through the pipeline.

    Returns (status, instance) on success and (status, sidecar record) for
    rejected or unprocessed drafts.
    """
    base_prov = {"client": type(client).__name__, "task": draft.task}
    if draft.direct_chain is not None:
        chain = draft.direct_chain
        prov = dict(base_prov, route="direct", attempts=0)
        return "retained", _finish_instance(draft, chain, prov)
    if isinstance(client, MockAnnotator):
        client.prime(draft.question, draft.gold_answer, draft.rationale)
    outcome = build_rationale(draft.question, draft.scenes, draft.gold_answer, client)
    if outcome.status in ("rejected", "unprocessed"):
        record = {
            "task_type": draft.task, "question": draft.question,
            "status": outcome.status, "attempts": outcome.attempts,
            "error": outcome.error,
        }
        return outcome.status, record
    references = _reference_boxes(draft)
    entities = client.extract_entities(draft.question + " " + outcome.chain_text)
    candidates = []
    for entity in entities:
        _, _, image_id = _parse_entity(entity)
        if image_id >= len(draft.scenes):
            continue
        for box in client.detect(entity, draft.scenes[image_id], image_id):
            candidates.append(DetectionCandidate(entity, image_id, box))
    retained = validate_detections(candidates, references, IOU_THRESHOLD)
    entity_boxes: dict[str, tuple[int, BoundingBox]] = {}
    fused_count = 0
    for entity in entities:
        mine = [c for c in retained if c.entity == entity]
        if not mine:
            continue
        image_id = min(c.image_id for c in mine)
        boxes = [c.box for c in mine]
        if len(boxes) > 1:
            fused_count += 1
        entity_boxes[entity] = (image_id, fuse_boxes(boxes))
    chain_text = outcome.chain_text
    chain = weave_groundings(chain_text, entity_boxes, draft.scenes, cfg, vocab)
    prov = dict(
        base_prov, route=outcome.status, attempts=outcome.attempts,
        detections=len(candidates), retained=len(retained), fused=fused_count,
    )
    return outcome.status, _finish_instance(draft, chain, prov)


def _reference_boxes(draft: DraftInstance) -> dict[tuple[str, int], BoundingBox]:
    refs = {}
    for image_id, scene in enumerate(draft.scenes):
        for s in scene.shapes:
            name = f"{s.color} {s.kind} in image {image_id}"
            refs[(name, image_id)] = normalize_box(
                shape_pixel_box(s), scene.width, scene.height)
    return refs


def _finish_instance(
    draft, chain: InterleavedSequence, prov: dict
) -> tuple[CorpusInstance, InterleavedSequence]:
    instance = CorpusInstance(
        id="",
        task_type=draft.task,
        images=[s.to_dict() for s in draft.scenes],
        question=draft.question,
        chain="",
        answer=draft.gold_answer,
        provenance=prov,
    )
    return instance, chain


def scaled_mix(total: int) -> dict[str, int]:
    """Task counts proportional to the reference per-mille mix, summing to total."""
    if total < 0:
        raise ValueError("total must be >= 0")
    denom = sum(REFERENCE_MIX_PER_MILLE.values())
    raw = {t: total * REFERENCE_MIX_PER_MILLE[t] / denom for t in TASKS}
    counts = {t: int(raw[t]) for t in TASKS}
    leftover = total - sum(counts.values())
    by_remainder = sorted(TASKS, key=lambda t: (raw[t] - counts[t], t), reverse=True)
    for t in by_remainder[:leftover]:
        counts[t] += 1
    return counts


@dataclass
class CorpusReport:
    sizes: dict[str, int]
    rejected: int
    unprocessed: int
    routes: dict[str, int]


def assemble_corpus(
    sizes: dict[str, int],
    seed: int,
    client: AnnotatorClient,
    out_dir,
    cfg: CorpusConfig | None = None,
    max_attempt_factor: int = 20,
) -> CorpusReport:
    """Generate the requested per-task counts into ``out_dir``.

    Writes corpus.jsonl (sorted by id), rejected.jsonl, stats.csv, vocab.json
    and meta.json. Byte-identical output for identical arguments.
    """
    cfg = cfg or CorpusConfig()
    vocab = build_vocabulary()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    lines: list[tuple[str, str]] = []
    sidecar: list[str] = []
    routes = {"retained": 0, "refined": 0, "rejected": 0, "unprocessed": 0}
    for task in TASKS:
        want = int(sizes.get(task, 0))
        if want < 0:
            raise ValueError(f"negative size for task {task}")
        got = 0
        attempts = 0
        while got < want:
            attempts += 1
            if attempts > max_attempt_factor * max(want, 1):
                raise RuntimeError(
                    f"task {task}: exceeded {attempts - 1} attempts for {want} instances")
            draft = _DRAFTERS[task](rng, cfg, vocab)
            status, result = process_draft(draft, client, cfg, vocab)
            routes[status] += 1
            if status in ("rejected", "unprocessed"):
                record = dict(result, attempt_index=attempts)
                sidecar.append(json.dumps(record, sort_keys=True))
                continue
            instance, chain = result
            instance.id = f"{task}-{got:05d}"
            instance.chain = render_sequence(chain, vocab)
            # Round-trip guard: the stored rendering must parse back.
            parse_text(instance.chain, vocab)
            lines.append((instance.id, instance.to_json()))
            got += 1
    lines.sort(key=lambda pair: pair[0])
    (out_dir / "corpus.jsonl").write_text(
        "".join(line + "\n" for _, line in lines), encoding="utf-8")
    (out_dir / "rejected.jsonl").write_text(
        "".join(line + "\n" for line in sidecar), encoding="utf-8")
    (out_dir / "vocab.json").write_text(vocab.to_json(), encoding="utf-8")
    meta = {"seed": seed, "sizes": {t: int(sizes.get(t, 0)) for t in TASKS},
            "config": cfg.to_dict()}
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
    _write_stats(out_dir / "stats.csv", sizes)
    return CorpusReport(
        sizes={t: int(sizes.get(t, 0)) for t in TASKS},
        rejected=routes["rejected"], unprocessed=routes["unprocessed"], routes=routes)


def _write_stats(path, sizes: dict[str, int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["skill", "source", "dataset", "instances"])
        total = 0
        for task in TASKS:
            n = int(sizes.get(task, 0))
            total += n
            writer.writerow([task, "synthetic-scenes", f"{task}_{n}", n])
        writer.writerow(["total", "", "", total])


def load_corpus(corpus_dir) -> tuple[list[CorpusInstance], Vocabulary, CorpusConfig]:
    corpus_dir = Path(corpus_dir)
    vocab = Vocabulary.from_json((corpus_dir / "vocab.json").read_text(encoding="utf-8"))
    meta = json.loads((corpus_dir / "meta.json").read_text(encoding="utf-8"))
    cfg = CorpusConfig.from_dict(meta["config"])
    instances = []
    for line in (corpus_dir / "corpus.jsonl").read_text(encoding="utf-8").splitlines():
        d = json.loads(line)
        instances.append(CorpusInstance(
            id=d["id"], task_type=d["task_type"], images=d["images"],
            question=d["question"], chain=d["chain"], answer=d["answer"],
            provenance=d["provenance"]))
    return instances, vocab, cfg


# ---------------------------------------------------------------------------
# Text-only general corpus (stage-2 mixing partner)


def general_instance(rng: random.Random, vocab: Vocabulary) -> CorpusInstance:
    """Plain text QA with no images: count shapes in a described scene."""
    kinds = rng.sample(["squares", "circles", "triangles"], rng.randint(1, 3))
    counts = [rng.randint(1, 4) for _ in kinds]
    described = " and ".join(f"{n} {k}" for n, k in zip(counts, kinds))
    question = f"a scene has {described}. how many shapes are there?"
    answer = str(sum(counts))
    chain = f"{ANSWER_PREFIX} {answer}."
    vocab.encode_text(question, strict=True)
    vocab.encode_text(chain, strict=True)
    return CorpusInstance(
        id="", task_type="general", images=[], question=question,
        chain=chain, answer=answer, provenance={"route": "general"})


def assemble_general_corpus(count: int, seed: int, out_dir) -> None:
    vocab = build_vocabulary()
    rng = random.Random(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(count):
        inst = general_instance(rng, vocab)
        inst.id = f"general-{i:05d}"
        lines.append(inst.to_json())
    (out_dir / "corpus.jsonl").write_text(
        "".join(line + "\n" for line in lines), encoding="utf-8")
    (out_dir / "vocab.json").write_text(vocab.to_json(), encoding="utf-8")
    meta = {"seed": seed, "sizes": {"general": count}, "config": CorpusConfig().to_dict()}
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
