"""Interleaved multimodal token grammar.

A reasoning chain is a single token stream mixing plain text, image-index
markers (``<IMG>k</IMG>``), bounding-box coordinates
(``<|box_start|>(x0,y0),(x1,y1)<|box_end|>``) and visual-token spans
(``<|vision_start|>...<|vision_end|>``). This module defines the element
types, the vocabulary with its reserved marker ids, serialization to and
from token ids, and coordinate normalization to the 0..1000 integer range.

All functions here are pure; everything is safe to share across threads.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence, Union

COORD_MAX = 1000
MAX_IMAGE_INDEX = (1 << 16) - 1

_DIGITS = tuple(str(d) for d in range(10))
# Punctuation that renders attached to the previous word ("image 0?" not "image 0 ?").
_ATTACH_LEFT = {".", ",", "?", "!", ":", ")"}
# Punctuation that renders attached to the following word.
_ATTACH_RIGHT = {"("}
_PUNCT = ("(", ")", ",", ".", "?", "!", ":")


class Role(str, Enum):
    """Whether an element belongs to the conditioning prompt or the training target."""

    PROMPT = "prompt"
    TARGET = "target"


class ParseError(ValueError):
    """Malformed token stream; ``position`` is the offending token offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at token {position})")
        self.position = position


def round_half_away(x: float) -> int:
    """Round with halves going away from zero (3.5 -> 4, -3.5 -> -4)."""
    if x >= 0:
        return int(math.floor(x + 0.5))
    return -int(math.floor(-x + 0.5))


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with integer coordinates normalized to [0, 1000]."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            v = getattr(self, name)
            if not isinstance(v, int):
                raise TypeError(f"{name} must be int, got {type(v).__name__}")
            if not 0 <= v <= COORD_MAX:
                raise ValueError(f"{name}={v} outside [0, {COORD_MAX}]")
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise ValueError(f"unordered box ({self.x0},{self.y0}),({self.x1},{self.y1})")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    def render(self) -> str:
        return f"({self.x0},{self.y0}),({self.x1},{self.y1})"


def normalize_box(
    pixel_box: tuple[float, float, float, float], width: int, height: int
) -> BoundingBox:
    """Map a pixel-space box on a width x height image into [0, 1000] coordinates."""
    if width <= 0 or height <= 0:
        raise ValueError(f"degenerate image extent {width}x{height}")
    px0, py0, px1, py1 = pixel_box
    if not (0 <= px0 <= px1 <= width and 0 <= py0 <= py1 <= height):
        raise ValueError(f"pixel box {pixel_box} outside {width}x{height} frame")
    return BoundingBox(
        round_half_away(px0 * COORD_MAX / width),
        round_half_away(py0 * COORD_MAX / height),
        round_half_away(px1 * COORD_MAX / width),
        round_half_away(py1 * COORD_MAX / height),
    )


def denormalize_box(box: BoundingBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Map a normalized box back to pixel coordinates on a width x height image."""
    if width <= 0 or height <= 0:
        raise ValueError(f"degenerate image extent {width}x{height}")
    return (
        round_half_away(box.x0 * width / COORD_MAX),
        round_half_away(box.y0 * height / COORD_MAX),
        round_half_away(box.x1 * width / COORD_MAX),
        round_half_away(box.y1 * height / COORD_MAX),
    )


@dataclass(frozen=True)
class TextSpan:
    """A run of base-vocabulary token ids."""

    token_ids: tuple[int, ...]
    role: Role = Role.TARGET

    def __post_init__(self):
        if len(self.token_ids) == 0:
            raise ValueError("empty TextSpan")


@dataclass(frozen=True)
class ImageIndex:
    """Reference to the index-th input image."""

    index: int
    role: Role = Role.TARGET

    def __post_init__(self):
        if not 0 <= self.index <= MAX_IMAGE_INDEX:
            raise ValueError(f"image index {self.index} outside [0, {MAX_IMAGE_INDEX}]")


@dataclass(frozen=True)
class Box:
    """A grounded bounding box inside the chain."""

    box: BoundingBox
    role: Role = Role.TARGET


@dataclass(frozen=True)
class VisionSpan:
    """Placeholder slots for visual tokens; the pixels live outside the stream.

    The grid shape that produced ``token_count`` is a runtime binding (it comes
    from the image or crop being encoded), so only the count is wire-encoded.
    Spans are always excluded from the training loss; ``loss_masked`` records
    that and must be True for a span to serialize.
    """

    token_count: int
    loss_masked: bool = True
    role: Role = Role.TARGET

    def __post_init__(self):
        if self.token_count < 1:
            raise ValueError("VisionSpan needs at least one token")


SequenceElement = Union[TextSpan, ImageIndex, Box, VisionSpan]


@dataclass(frozen=True)
class InterleavedSequence:
    """Ordered multimodal elements; prompt-role elements must form a prefix."""

    elements: tuple[SequenceElement, ...]

    def __post_init__(self):
        seen_target = False
        prev = None
        for i, el in enumerate(self.elements):
            if el.role == Role.TARGET:
                seen_target = True
            elif seen_target:
                raise ValueError(f"prompt element at position {i} after target elements")
            if (
                isinstance(el, TextSpan)
                and isinstance(prev, TextSpan)
                and prev.role == el.role
            ):
                raise ValueError(f"adjacent TextSpans with equal role at position {i}")
            prev = el

    def __iter__(self):
        return iter(self.elements)

    def __len__(self):
        return len(self.elements)

    def validate(self, num_images: int | None = None, partial: bool = False) -> None:
        """Check grounded-pattern ordering and image-index bounds.

        Every Box must directly follow an ImageIndex and every VisionSpan must
        directly follow an ImageIndex or a Box. With ``partial=True`` a
        trailing, not-yet-completed pattern is tolerated.
        """
        els = self.elements
        for i, el in enumerate(els):
            if isinstance(el, ImageIndex) and num_images is not None:
                if el.index >= num_images:
                    raise ValueError(f"image index {el.index} >= image count {num_images}")
            if isinstance(el, Box):
                if i == 0 or not isinstance(els[i - 1], ImageIndex):
                    raise ValueError(f"Box at position {i} not preceded by ImageIndex")
                last = i == len(els) - 1
                if not last and not isinstance(els[i + 1], VisionSpan):
                    raise ValueError(f"Box at position {i} not followed by VisionSpan")
                if last and not partial:
                    raise ValueError(f"Box at position {i} not followed by VisionSpan")
            if isinstance(el, VisionSpan):
                if i == 0 or not isinstance(els[i - 1], (ImageIndex, Box)):
                    raise ValueError(f"VisionSpan at position {i} lacks an anchor")

    def grounded_patterns(self) -> list[tuple[int, ImageIndex, Box]]:
        """(element offset of the Box, index, box) for each ImageIndex+Box pair."""
        out = []
        for i in range(1, len(self.elements)):
            el = self.elements[i]
            if isinstance(el, Box) and isinstance(self.elements[i - 1], ImageIndex):
                out.append((i, self.elements[i - 1], el))
        return out

    def vision_spans(self) -> list[VisionSpan]:
        return [el for el in self.elements if isinstance(el, VisionSpan)]


class Vocabulary:
    """Token table: reserved markers, then punctuation/digits, then words.

    Marker ids are disjoint from text ids by construction. Coordinate values
    and image indices are emitted as decimal digit tokens from the base text
    table, one token per digit.
    """

    PAD = "<pad>"
    BOS = "<bos>"
    EOS = "<eos>"
    UNK = "<unk>"
    IMG_START = "<IMG>"
    IMG_END = "</IMG>"
    BOX_START = "<|box_start|>"
    BOX_END = "<|box_end|>"
    VISION_START = "<|vision_start|>"
    VISION_END = "<|vision_end|>"
    VISION_PAD = "<|vision_pad|>"

    _SPECIALS = (
        PAD, BOS, EOS, UNK,
        IMG_START, IMG_END, BOX_START, BOX_END,
        VISION_START, VISION_END, VISION_PAD,
    )

    def __init__(self, words: Iterable[str] = ()):
        table = list(self._SPECIALS) + list(_PUNCT) + list(_DIGITS)
        base = set(table)
        extra = sorted(set(words) - base)
        for w in extra:
            # Words must survive encode_text's splitter as a single piece.
            if re.fullmatch(r"[^\s()\,.?!:\d]+", w) is None:
                raise ValueError(f"bad vocabulary word {w!r}")
        table.extend(extra)
        self._id_of = {tok: i for i, tok in enumerate(table)}
        self._tok_of = table
        self.pad_id = self._id_of[self.PAD]
        self.bos_id = self._id_of[self.BOS]
        self.eos_id = self._id_of[self.EOS]
        self.unk_id = self._id_of[self.UNK]
        self.img_start_id = self._id_of[self.IMG_START]
        self.img_end_id = self._id_of[self.IMG_END]
        self.box_start_id = self._id_of[self.BOX_START]
        self.box_end_id = self._id_of[self.BOX_END]
        self.vision_start_id = self._id_of[self.VISION_START]
        self.vision_end_id = self._id_of[self.VISION_END]
        self.vision_pad_id = self._id_of[self.VISION_PAD]
        self.first_text_id = len(self._SPECIALS)
        self._digit_ids = {d: self._id_of[d] for d in _DIGITS}

    def __len__(self) -> int:
        return len(self._tok_of)

    @property
    def size(self) -> int:
        return len(self._tok_of)

    def words(self) -> list[str]:
        return self._tok_of[self.first_text_id + len(_PUNCT) + len(_DIGITS):]

    def is_special(self, token_id: int) -> bool:
        return 0 <= token_id < self.first_text_id

    def is_text(self, token_id: int) -> bool:
        return self.first_text_id <= token_id < len(self._tok_of)

    def is_digit(self, token_id: int) -> bool:
        tok = self.token(token_id)
        return tok in _DIGITS

    def id_of(self, token: str) -> int:
        return self._id_of[token]

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._tok_of):
            raise KeyError(f"token id {token_id} outside vocabulary")
        return self._tok_of[token_id]

    def encode_int(self, value: int) -> list[int]:
        """Non-negative integer as decimal digit tokens."""
        if value < 0:
            raise ValueError("negative integer")
        return [self._digit_ids[d] for d in str(value)]

    def encode_text(self, text: str, strict: bool = False) -> list[int]:
        """Whitespace-split words; attached punctuation and digit runs split off.

        Unknown words map to ``<unk>`` unless ``strict`` is set.
        """
        ids: list[int] = []
        for chunk in text.split():
            for piece in re.findall(r"\d+|[()\,.?!:]|[^\s()\,.?!:\d]+", chunk):
                if piece.isdigit():
                    ids.extend(self._digit_ids[d] for d in piece)
                elif piece in self._id_of and piece not in self._SPECIALS:
                    ids.append(self._id_of[piece])
                elif strict:
                    raise KeyError(f"word {piece!r} not in vocabulary")
                else:
                    ids.append(self.unk_id)
        return ids

    def decode_text(self, ids: Sequence[int]) -> str:
        """Inverse of encode_text on canonical text (single spaces, attached punctuation)."""
        parts: list[str] = []
        prev: str | None = None
        for i in ids:
            tok = self._tok_of[i] if 0 <= i < len(self._tok_of) else self.UNK
            if prev is None:
                parts.append(tok)
            elif tok in _ATTACH_LEFT or prev in _ATTACH_RIGHT:
                parts.append(tok)
            elif tok in _DIGITS and prev in _DIGITS:
                parts.append(tok)
            else:
                parts.append(" " + tok)
            prev = tok
        return "".join(parts)

    def to_json(self) -> str:
        return json.dumps({"words": self.words()}, sort_keys=True)

    @classmethod
    def from_json(cls, payload: str) -> "Vocabulary":
        return cls(json.loads(payload)["words"])


def serialize_sequence(seq: InterleavedSequence, vocab: Vocabulary) -> list[int]:
    """Flatten a sequence into token ids following the marker grammar."""
    ids: list[int] = []
    for pos, el in enumerate(seq):
        if isinstance(el, TextSpan):
            for t in el.token_ids:
                if not vocab.is_text(t):
                    raise ValueError(f"non-text id {t} inside TextSpan at element {pos}")
            ids.extend(el.token_ids)
        elif isinstance(el, ImageIndex):
            ids.append(vocab.img_start_id)
            ids.extend(vocab.encode_int(el.index))
            ids.append(vocab.img_end_id)
        elif isinstance(el, Box):
            ids.append(vocab.box_start_id)
            ids.extend(_box_interior_ids(el.box, vocab))
            ids.append(vocab.box_end_id)
        elif isinstance(el, VisionSpan):
            if not el.loss_masked:
                raise ValueError(f"unmasked VisionSpan at element {pos} is not serializable")
            ids.append(vocab.vision_start_id)
            ids.extend([vocab.vision_pad_id] * el.token_count)
            ids.append(vocab.vision_end_id)
        else:
            raise ValueError(f"unknown element kind {type(el).__name__} at element {pos}")
    return ids


def _box_interior_ids(box: BoundingBox, vocab: Vocabulary) -> list[int]:
    lp, rp, comma = vocab.id_of("("), vocab.id_of(")"), vocab.id_of(",")
    out = [lp, *vocab.encode_int(box.x0), comma, *vocab.encode_int(box.y0), rp, comma,
           lp, *vocab.encode_int(box.x1), comma, *vocab.encode_int(box.y1), rp]
    return out


def prompt_token_count(seq: InterleavedSequence, vocab: Vocabulary) -> int:
    """Serialized length of the prompt-role prefix."""
    prompt_elements = [el for el in seq if el.role == Role.PROMPT]
    if not prompt_elements:
        return 0
    return len(serialize_sequence(InterleavedSequence(tuple(prompt_elements)), vocab))


class _Parser:
    def __init__(self, tokens: Sequence[int], vocab: Vocabulary, prompt_tokens: int):
        self.tokens = tokens
        self.vocab = vocab
        self.prompt_tokens = prompt_tokens
        self.pos = 0
        self.elements: list[SequenceElement] = []
        self.text_run: list[int] = []
        self.text_start = 0

    def fail(self, message: str, position: int | None = None):
        raise ParseError(message, self.pos if position is None else position)

    def role_for(self, start: int, end: int) -> Role:
        return Role.PROMPT if end <= self.prompt_tokens else Role.TARGET

    def flush_text(self):
        if not self.text_run:
            return
        start, end = self.text_start, self.pos
        # A run straddling the prompt/target boundary splits into two spans.
        if start < self.prompt_tokens < end:
            cut = self.prompt_tokens - start
            self.elements.append(TextSpan(tuple(self.text_run[:cut]), Role.PROMPT))
            self.elements.append(TextSpan(tuple(self.text_run[cut:]), Role.TARGET))
        else:
            self.elements.append(TextSpan(tuple(self.text_run), self.role_for(start, end)))
        self.text_run = []

    def peek(self) -> int | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self) -> int:
        t = self.tokens[self.pos]
        self.pos += 1
        return t

    def expect(self, token_id: int, what: str):
        got = self.peek()
        if got != token_id:
            self.fail(f"expected {what}, got "
                      f"{'end of stream' if got is None else self.vocab.token(got)!r}")
        self.take()

    def read_int(self, what: str, limit: int) -> int:
        digits = []
        while (t := self.peek()) is not None and self.vocab.is_digit(t):
            digits.append(self.vocab.token(self.take()))
        if not digits:
            self.fail(f"expected {what}")
        value = int("".join(digits))
        if value > limit:
            self.fail(f"{what} {value} exceeds {limit}", self.pos - 1)
        return value

    def parse(self) -> InterleavedSequence:
        v = self.vocab
        while (t := self.peek()) is not None:
            if t == v.img_start_id:
                self.flush_text()
                start = self.pos
                self.take()
                index = self.read_int("image index", MAX_IMAGE_INDEX)
                self.expect(v.img_end_id, v.IMG_END)
                self.elements.append(ImageIndex(index, self.role_for(start, self.pos)))
            elif t == v.box_start_id:
                self.flush_text()
                start = self.pos
                self.take()
                box = self.read_box()
                self.expect(v.box_end_id, v.BOX_END)
                self.elements.append(Box(box, self.role_for(start, self.pos)))
            elif t == v.vision_start_id:
                self.flush_text()
                start = self.pos
                self.take()
                count = 0
                while self.peek() == v.vision_pad_id:
                    self.take()
                    count += 1
                self.expect(v.vision_end_id, f"{v.VISION_PAD} or {v.VISION_END}")
                if count == 0:
                    self.fail("empty vision span", start)
                self.elements.append(
                    VisionSpan(count, role=self.role_for(start, self.pos)))
            elif v.is_text(t):
                if not self.text_run:
                    self.text_start = self.pos
                self.text_run.append(self.take())
            else:
                self.fail(f"unexpected {v.token(t)!r}")
        self.flush_text()
        return InterleavedSequence(tuple(self.elements))

    def read_box(self) -> BoundingBox:
        v = self.vocab
        lp, rp, comma = v.id_of("("), v.id_of(")"), v.id_of(",")
        anchor = self.pos - 1
        self.expect(lp, "'('")
        x0 = self.read_int("coordinate", COORD_MAX)
        self.expect(comma, "','")
        y0 = self.read_int("coordinate", COORD_MAX)
        self.expect(rp, "')'")
        self.expect(comma, "','")
        self.expect(lp, "'('")
        x1 = self.read_int("coordinate", COORD_MAX)
        self.expect(comma, "','")
        y1 = self.read_int("coordinate", COORD_MAX)
        self.expect(rp, "')'")
        if x1 < x0 or y1 < y0:
            self.fail(f"unordered box ({x0},{y0}),({x1},{y1})", anchor)
        return BoundingBox(x0, y0, x1, y1)


def parse_sequence(
    tokens: Sequence[int], vocab: Vocabulary, prompt_tokens: int = 0
) -> InterleavedSequence:
    """Inverse of serialize_sequence.

    ``prompt_tokens`` marks how many leading ids carry prompt role; the default
    0 parses everything as target (the case for generated chains). Malformed
    input raises ParseError carrying the offending token offset.
    """
    return _Parser(tokens, vocab, prompt_tokens).parse()


def render_sequence(seq: InterleavedSequence, vocab: Vocabulary) -> str:
    """Canonical textual form, used in JSONL corpora and transcripts."""
    parts: list[str] = []
    for el in seq:
        if isinstance(el, TextSpan):
            parts.append(vocab.decode_text(el.token_ids))
        elif isinstance(el, ImageIndex):
            parts.append(f"{Vocabulary.IMG_START}{el.index}{Vocabulary.IMG_END}")
        elif isinstance(el, Box):
            parts.append(f"{Vocabulary.BOX_START}{el.box.render()}{Vocabulary.BOX_END}")
        elif isinstance(el, VisionSpan):
            parts.append(Vocabulary.VISION_START
                         + Vocabulary.VISION_PAD * el.token_count
                         + Vocabulary.VISION_END)
    return " ".join(parts)


_MARKER_RE = re.compile(
    r"(<IMG>\d+</IMG>"
    r"|<\|box_start\|>\(\d+,\d+\),\(\d+,\d+\)<\|box_end\|>"
    r"|<\|vision_start\|>(?:<\|vision_pad\|>)*<\|vision_end\|>)"
)


def parse_text(rendered: str, vocab: Vocabulary, strict: bool = True) -> InterleavedSequence:
    """Parse the canonical textual form back into a sequence (all target role)."""
    ids: list[int] = []
    for part in _MARKER_RE.split(rendered):
        part = part.strip()
        if not part:
            continue
        if part.startswith(Vocabulary.IMG_START):
            inner = part[len(Vocabulary.IMG_START):-len(Vocabulary.IMG_END)]
            ids.append(vocab.img_start_id)
            ids.extend(vocab.encode_int(int(inner)))
            ids.append(vocab.img_end_id)
        elif part.startswith(Vocabulary.BOX_START):
            inner = part[len(Vocabulary.BOX_START):-len(Vocabulary.BOX_END)]
            m = re.fullmatch(r"\((\d+),(\d+)\),\((\d+),(\d+)\)", inner)
            if m is None:
                raise ParseError(f"bad box body {inner!r}", len(ids))
            box = BoundingBox(*(int(g) for g in m.groups()))
            ids.append(vocab.box_start_id)
            ids.extend(_box_interior_ids(box, vocab))
            ids.append(vocab.box_end_id)
        elif part.startswith(Vocabulary.VISION_START):
            count = part.count(Vocabulary.VISION_PAD)
            ids.append(vocab.vision_start_id)
            ids.extend([vocab.vision_pad_id] * count)
            ids.append(vocab.vision_end_id)
        else:
            ids.extend(vocab.encode_text(part, strict=strict))
    return parse_sequence(ids, vocab)


def element_token_lengths(seq: InterleavedSequence, vocab: Vocabulary) -> list[int]:
    """Serialized token count of each element, in order."""
    out = []
    for el in seq:
        if isinstance(el, TextSpan):
            out.append(len(el.token_ids))
        elif isinstance(el, ImageIndex):
            out.append(2 + len(vocab.encode_int(el.index)))
        elif isinstance(el, Box):
            out.append(2 + len(_box_interior_ids(el.box, vocab)))
        elif isinstance(el, VisionSpan):
            out.append(2 + el.token_count)
        else:
            raise ValueError(f"unknown element kind {type(el).__name__}")
    return out


def vision_interior_slices(seq: InterleavedSequence, vocab: Vocabulary) -> list[tuple[int, int]]:
    """(start, end) of each vision span's placeholder run in the serialized stream."""
    slices = []
    offset = 0
    for el, length in zip(seq, element_token_lengths(seq, vocab)):
        if isinstance(el, VisionSpan):
            slices.append((offset + 1, offset + 1 + el.token_count))
        offset += length
    return slices


def loss_flags(seq: InterleavedSequence, vocab: Vocabulary) -> list[bool]:
    """Per-token loss mask: True on target-role text, coordinates and markers,
    False on vision placeholders and everything prompt-role."""
    flags: list[bool] = []
    for el in seq:
        target = el.role == Role.TARGET
        if isinstance(el, TextSpan):
            flags.extend([target] * len(el.token_ids))
        elif isinstance(el, ImageIndex):
            flags.extend([target] * (2 + len(vocab.encode_int(el.index))))
        elif isinstance(el, Box):
            flags.extend([target] * (2 + len(_box_interior_ids(el.box, vocab))))
        elif isinstance(el, VisionSpan):
            flags.append(target)
            flags.extend([False] * el.token_count)
            flags.append(target)
    return flags
