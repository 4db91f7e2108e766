from __future__ import annotations

import random

import pytest
import torch
from hypothesis import settings

from mmreason.datagen import build_vocabulary
from mmreason.grammar import (
    BoundingBox,
    Box,
    ImageIndex,
    InterleavedSequence,
    Role,
    TextSpan,
    VisionSpan,
    Vocabulary,
)

torch.set_num_threads(1)

settings.register_profile("suite", max_examples=60, deadline=None)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def vocab() -> Vocabulary:
    return build_vocabulary()


def random_box(rng: random.Random, limit: int = 1000) -> BoundingBox:
    x0, x1 = sorted(rng.randint(0, limit) for _ in range(2))
    y0, y1 = sorted(rng.randint(0, limit) for _ in range(2))
    return BoundingBox(x0, y0, x1, y1)


def random_sequence(rng: random.Random, vocab: Vocabulary, max_elements: int = 8,
                    with_prompt: bool = False) -> InterleavedSequence:
    """A grammar-valid random sequence: no adjacent same-role text spans,
    grounded patterns in ImageIndex-Box-VisionSpan order."""
    elements = []
    n = rng.randint(0, max_elements)
    prompt_prefix = rng.randint(0, n) if with_prompt else 0
    text_ids = list(range(vocab.first_text_id, len(vocab)))
    for i in range(n):
        role = Role.PROMPT if i < prompt_prefix else Role.TARGET
        kind = rng.random()
        last = elements[-1] if elements else None
        if kind < 0.4 and not (isinstance(last, TextSpan) and last.role == role):
            ids = tuple(rng.choice(text_ids) for _ in range(rng.randint(1, 6)))
            elements.append(TextSpan(ids, role))
        elif kind < 0.6:
            elements.append(ImageIndex(rng.randint(0, 9), role))
        elif kind < 0.8:
            elements.append(ImageIndex(rng.randint(0, 9), role))
            elements.append(Box(random_box(rng), role))
            elements.append(VisionSpan(rng.randint(1, 8), role=role))
        else:
            elements.append(ImageIndex(rng.randint(0, 9), role))
            elements.append(VisionSpan(rng.randint(1, 8), role=role))
    # Re-assign roles so the prompt prefix property holds after pattern expansion.
    if with_prompt and elements:
        cut = rng.randint(0, len(elements))
        elements = [
            type(el)(**{**el.__dict__, "role": Role.PROMPT if j < cut else Role.TARGET})
            for j, el in enumerate(elements)
        ]
        merged = []
        for el in elements:
            if (merged and isinstance(el, TextSpan) and isinstance(merged[-1], TextSpan)
                    and merged[-1].role == el.role):
                merged[-1] = TextSpan(merged[-1].token_ids + el.token_ids, el.role)
            else:
                merged.append(el)
        elements = merged
    return InterleavedSequence(tuple(elements))
