from __future__ import annotations

import json
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mmreason.datagen import (
    CorpusConfig,
    DetectionCandidate,
    MockAnnotator,
    REFERENCE_MIX_PER_MILLE,
    TASKS,
    assemble_corpus,
    assemble_general_corpus,
    build_rationale,
    build_vocabulary,
    draft_reason,
    fuse_boxes,
    iou,
    load_corpus,
    scaled_mix,
    validate_detections,
)
from mmreason.grammar import BoundingBox, parse_text

from conftest import random_box


def grid_iou(a: BoundingBox, b: BoundingBox, size: int = 64) -> float:
    """Unit-cell enumeration oracle on a small grid."""
    ga = np.zeros((size, size), dtype=bool)
    gb = np.zeros((size, size), dtype=bool)
    ga[a.y0:a.y1, a.x0:a.x1] = True
    gb[b.y0:b.y1, b.x0:b.x1] = True
    union = np.logical_or(ga, gb).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(ga, gb).sum()) / float(union)


def grid_fuse(a: BoundingBox, b: BoundingBox, size: int = 64) -> tuple[int, int, int, int]:
    g = np.zeros((size, size), dtype=bool)
    g[a.y0:a.y1, a.x0:a.x1] = True
    g[b.y0:b.y1, b.x0:b.x1] = True
    ys, xs = np.where(g)
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


class TestIou:
    def test_identical_boxes(self):
        b = BoundingBox(10, 10, 50, 80)
        assert iou(b, b) == 1.0

    def test_disjoint(self):
        assert iou(BoundingBox(0, 0, 10, 10), BoundingBox(20, 20, 30, 30)) == 0.0

    def test_arithmetic_case(self):
        # inter 5x5=25; union 100+100-25=175
        got = iou(BoundingBox(0, 0, 10, 10), BoundingBox(5, 5, 15, 15))
        assert abs(got - 25 / 175) < 1e-12

    def test_both_degenerate(self):
        assert iou(BoundingBox(5, 5, 5, 5), BoundingBox(5, 5, 5, 5)) == 0.0

    def test_grid_oracle_agreement(self):
        rng = random.Random(23)
        for _ in range(500):
            a, b = random_box(rng, 63), random_box(rng, 63)
            assert abs(iou(a, b) - grid_iou(a, b)) < 1e-9

    @given(st.data())
    def test_symmetry_and_bounds(self, data):
        rng = random.Random(data.draw(st.integers(0, 10**6)))
        a, b = random_box(rng), random_box(rng)
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0
        if (a.x1 - a.x0) * (a.y1 - a.y0) > 0:
            assert iou(a, a) == 1.0


class TestFuse:
    def test_single_box_identity(self):
        b = BoundingBox(1, 2, 3, 4)
        assert fuse_boxes([b]) == b

    def test_coordinate_minmax(self):
        got = fuse_boxes([BoundingBox(100, 200, 300, 400), BoundingBox(150, 100, 350, 300)])
        assert got.as_tuple() == (100, 100, 350, 400)

    def test_containment(self):
        rng = random.Random(31)
        boxes = [random_box(rng) for _ in range(5)]
        fused = fuse_boxes(boxes)
        for b in boxes:
            assert fused.x0 <= b.x0 and fused.y0 <= b.y0
            assert fused.x1 >= b.x1 and fused.y1 >= b.y1

    def test_grid_oracle_agreement(self):
        rng = random.Random(37)
        for _ in range(300):
            a, b = random_box(rng, 63), random_box(rng, 63)
            if (a.x1 - a.x0) * (a.y1 - a.y0) == 0 or (b.x1 - b.x0) * (b.y1 - b.y0) == 0:
                continue
            assert fuse_boxes([a, b]).as_tuple() == grid_fuse(a, b)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fuse_boxes([])

    @given(st.data())
    def test_idempotent_commutative_associative(self, data):
        rng = random.Random(data.draw(st.integers(0, 10**6)))
        boxes = [random_box(rng) for _ in range(4)]
        fused = fuse_boxes(boxes)
        assert fuse_boxes([fused]) == fused
        shuffled = list(boxes)
        rng.shuffle(shuffled)
        assert fuse_boxes(shuffled) == fused
        left = fuse_boxes([fuse_boxes(boxes[:2]), fuse_boxes(boxes[2:])])
        assert left == fused


class TestValidateDetections:
    def ref(self):
        return {("red square in image 0", 0): BoundingBox(100, 100, 400, 400)}

    def make(self, box):
        return [DetectionCandidate("red square in image 0", 0, box)]

    def test_exact_threshold_inclusive(self):
        # Shifted so IoU is exactly 0.9 is hard to hit on ints; use the threshold
        # exactly via identical boxes at threshold 1.0 instead, plus the 0.9 gate
        # checked against computed scores.
        ref_box = self.ref()[("red square in image 0", 0)]
        kept = validate_detections(self.make(ref_box), self.ref(), threshold=1.0)
        assert len(kept) == 1 and kept[0].validation_iou == 1.0

    def test_at_and_below_gate(self):
        ref_box = self.ref()[("red square in image 0", 0)]
        # Shrink one corner until the score crosses 0.9.
        passing = BoundingBox(100, 100, 400, 395)  # IoU = 295/300 per axis area ratio
        score = iou(passing, ref_box)
        assert score >= 0.9
        kept = validate_detections(self.make(passing), self.ref())
        assert len(kept) == 1 and abs(kept[0].validation_iou - score) < 1e-12
        failing = BoundingBox(100, 100, 400, 330)
        assert iou(failing, ref_box) < 0.9
        assert validate_detections(self.make(failing), self.ref()) == []

    def test_exactly_point_nine_retained(self):
        # Construct IoU == 0.9 exactly: areas 9 and 10 with the smaller inside.
        ref = {("e", 0): BoundingBox(0, 0, 10, 100)}
        cand = [DetectionCandidate("e", 0, BoundingBox(0, 0, 9, 100))]
        assert iou(cand[0].box, ref[("e", 0)]) == 0.9
        kept = validate_detections(cand, ref, threshold=0.9)
        assert len(kept) == 1

    def test_empty_candidates(self):
        assert validate_detections([], self.ref()) == []

    def test_unknown_entity_dropped(self):
        cand = [DetectionCandidate("ghost", 1, BoundingBox(0, 0, 5, 5))]
        assert validate_detections(cand, self.ref()) == []

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            validate_detections([], self.ref(), threshold=0.0)


class TestBuildRationale:
    def draft(self, client):
        cfg = CorpusConfig()
        vocab = build_vocabulary()
        rng = random.Random(5)
        draft = draft_reason(rng, cfg, vocab)
        client.prime(draft.question, draft.gold_answer, draft.rationale)
        return draft

    def test_correct_first_try(self):
        client = MockAnnotator(seed=1, wrong_answer_rate=0.0)
        draft = self.draft(client)
        outcome = build_rationale(draft.question, draft.scenes, draft.gold_answer, client)
        assert outcome.status == "retained"
        assert outcome.attempts == 1
        assert client.calls["rationale"] == 1

    def test_wrong_then_right(self):
        # Rate 1.0 then patched after the first call: deterministic wrong->right.
        client = MockAnnotator(seed=2, wrong_answer_rate=1.0)
        draft = self.draft(client)
        original = client.generate_rationale

        def flaky(question, images, gold_answer=None):
            client.wrong_answer_rate = 0.0 if gold_answer is not None else 1.0
            return original(question, images, gold_answer)

        client.generate_rationale = flaky
        outcome = build_rationale(draft.question, draft.scenes, draft.gold_answer, client)
        assert outcome.status == "refined"
        assert outcome.attempts == 2
        assert client.calls["rationale"] == 2
        assert outcome.answer == draft.gold_answer

    def test_wrong_twice_rejected(self):
        client = MockAnnotator(seed=3, wrong_answer_rate=1.0)
        draft = self.draft(client)
        outcome = build_rationale(draft.question, draft.scenes, draft.gold_answer, client)
        assert outcome.status == "rejected"
        assert outcome.attempts == 2

    def test_client_failure_marks_unprocessed(self):
        client = MockAnnotator(seed=4, failure_rate=1.0)
        draft = self.draft(client)
        outcome = build_rationale(draft.question, draft.scenes, draft.gold_answer, client)
        assert outcome.status == "unprocessed"
        assert outcome.error


class TestScaledMix:
    def test_reference_total(self):
        counts = scaled_mix(260)
        assert counts == {"caption": 50, "coreference": 90, "comparison": 18, "reason": 102}

    def test_proportional_within_rounding(self):
        for total in (0, 1, 13, 260, 1000, 2000, 260000):
            counts = scaled_mix(total)
            assert sum(counts.values()) == total
            for task in TASKS:
                ideal = total * REFERENCE_MIX_PER_MILLE[task] / 260
                assert abs(counts[task] - ideal) <= 1


class TestAssembleCorpus:
    def test_counts_and_parseability(self, tmp_path):
        client = MockAnnotator(seed=9)
        report = assemble_corpus({"reason": 10}, 9, client, tmp_path)
        assert report.sizes["reason"] == 10
        instances, vocab, cfg = load_corpus(tmp_path)
        assert len(instances) == 10
        for inst in instances:
            seq = parse_text(inst.chain, vocab)
            seq.validate(num_images=len(inst.images))

    def test_deterministic_bytes(self, tmp_path):
        sizes = {"caption": 4, "coreference": 4, "comparison": 4, "reason": 4}
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assemble_corpus(sizes, 7, MockAnnotator(seed=7), out_a)
        assemble_corpus(sizes, 7, MockAnnotator(seed=7), out_b)
        for name in ("corpus.jsonl", "rejected.jsonl", "stats.csv", "vocab.json",
                     "meta.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_retry_paths_observed(self, tmp_path):
        client = MockAnnotator(seed=11, wrong_answer_rate=0.4)
        report = assemble_corpus({"reason": 20}, 11, client, tmp_path)
        assert report.routes["retained"] > 0
        assert report.routes["refined"] > 0
        assert report.routes["rejected"] > 0
        rejected_lines = (tmp_path / "rejected.jsonl").read_text().splitlines()
        assert len(rejected_lines) == report.rejected
        instances, _, _ = load_corpus(tmp_path)
        assert len(instances) == 20

    def test_unprocessed_sidecar(self, tmp_path):
        client = MockAnnotator(seed=13, failure_rate=0.3)
        report = assemble_corpus({"comparison": 8}, 13, client, tmp_path)
        assert report.unprocessed > 0
        lines = [json.loads(l) for l in
                 (tmp_path / "rejected.jsonl").read_text().splitlines()]
        assert any(rec["status"] == "unprocessed" for rec in lines)

    def test_detection_gate_drops_misses(self, tmp_path):
        client = MockAnnotator(seed=17, detect_miss_rate=1.0)
        assemble_corpus({"reason": 3}, 17, client, tmp_path)
        instances, vocab, _ = load_corpus(tmp_path)
        for inst in instances:
            assert "<|box_start|>" not in inst.chain  # every detection dropped

    def test_multi_detection_fusion(self, tmp_path):
        client = MockAnnotator(seed=19, multi_detect_rate=1.0)
        assemble_corpus({"reason": 5}, 19, client, tmp_path)
        instances, _, _ = load_corpus(tmp_path)
        assert any(inst.provenance.get("fused", 0) > 0 for inst in instances)

    def test_stats_schema(self, tmp_path):
        sizes = scaled_mix(26)
        assemble_corpus(sizes, 3, MockAnnotator(seed=3), tmp_path)
        lines = (tmp_path / "stats.csv").read_text().splitlines()
        assert lines[0] == "skill,source,dataset,instances"
        assert lines[-1].startswith("total,")
        assert lines[-1].endswith(str(26))

    def test_negative_size_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            assemble_corpus({"reason": -1}, 0, MockAnnotator(), tmp_path)


class TestGeneralCorpus:
    def test_round_trips_and_answers(self, tmp_path):
        assemble_general_corpus(12, 5, tmp_path)
        instances, vocab, _ = load_corpus(tmp_path)
        assert len(instances) == 12
        for inst in instances:
            assert inst.images == []
            seq = parse_text(inst.chain, vocab)
            assert inst.answer in inst.chain
