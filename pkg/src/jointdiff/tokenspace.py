"""Partitioned token id space and unified sequence assembly.

The vocabulary packs three contiguous modality ranges plus six special ids:

    [text 0..v_text) [visual ..+v_v) [action ..+v_a) [BOI EOI BOA EOA MASK PAD]

One assembled sequence is laid out as

    [text ; BOI cur EOI ; BOI fut EOI ; BOA a_1..a_n EOA ; PAD...]

padded to a fixed context length (a multiple of 8). Text and the current
image are clean conditioning; the future image and the action slots are the
diffused segments. Exactly one MASK symbol is shared by both diffused
modalities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from jointdiff.errors import ContractError, FormatError, InputError

SPECIAL_NAMES = ("BOI", "EOI", "BOA", "EOA", "MASK", "PAD")
NUM_SPECIALS = len(SPECIAL_NAMES)


@dataclass(frozen=True)
class VocabLayout:
    """Disjoint contiguous id ranges for each modality plus special ids."""

    v_text: int
    v_v: int
    v_a: int

    @property
    def text_range(self) -> tuple[int, int]:
        return (0, self.v_text)

    @property
    def visual_range(self) -> tuple[int, int]:
        return (self.v_text, self.v_text + self.v_v)

    @property
    def action_range(self) -> tuple[int, int]:
        lo = self.v_text + self.v_v
        return (lo, lo + self.v_a)

    @property
    def specials_base(self) -> int:
        return self.v_text + self.v_v + self.v_a

    @property
    def boi(self) -> int:
        return self.specials_base

    @property
    def eoi(self) -> int:
        return self.specials_base + 1

    @property
    def boa(self) -> int:
        return self.specials_base + 2

    @property
    def eoa(self) -> int:
        return self.specials_base + 3

    @property
    def mask(self) -> int:
        return self.specials_base + 4

    @property
    def pad(self) -> int:
        return self.specials_base + 5

    @property
    def total(self) -> int:
        return self.specials_base + NUM_SPECIALS

    @property
    def specials(self) -> dict[str, int]:
        return {name: self.specials_base + i for i, name in enumerate(SPECIAL_NAMES)}

    def visual_ids(self) -> np.ndarray:
        return np.arange(*self.visual_range)

    def action_ids_with_eoa(self) -> np.ndarray:
        lo, hi = self.action_range
        return np.concatenate([np.arange(lo, hi), [self.eoa]])

    def to_json(self) -> dict:
        return {"v_text": self.v_text, "v_v": self.v_v, "v_a": self.v_a, "specials": self.specials}

    @classmethod
    def from_json(cls, obj: dict) -> "VocabLayout":
        layout = build_layout(obj["v_text"], obj["v_v"], obj["v_a"])
        if "specials" in obj and obj["specials"] != layout.specials:
            raise FormatError(f"special-token table mismatch: {obj['specials']} vs {layout.specials}")
        return layout


def build_layout(v_text: int, v_v: int, v_a: int) -> VocabLayout:
    for label, n in (("v_text", v_text), ("v_v", v_v), ("v_a", v_a)):
        if n < 1:
            raise InputError(f"{label} must be >= 1, got {n}")
    return VocabLayout(v_text, v_v, v_a)


FUTURE_SOURCES = ("future", "current", "none")


@dataclass(frozen=True)
class SequenceLayout:
    """Fixed position map for one sequence shape.

    All positions are precomputed so masks, caches and batching never have
    to re-derive boundaries. ``future_source`` selects what fills the
    generation block: the future image (default), a reconstruction of the
    current image, or no generation block at all.
    """

    text_len: int
    image_len: int
    max_actions: int
    future_source: str = "future"

    def __post_init__(self):
        if self.future_source not in FUTURE_SOURCES:
            raise InputError(f"future_source must be one of {FUTURE_SOURCES}")

    @property
    def has_future_block(self) -> bool:
        return self.future_source != "none"

    @property
    def cur_block(self) -> tuple[int, int]:
        return (self.text_len, self.text_len + self.image_len + 2)

    @property
    def fut_block(self) -> tuple[int, int]:
        lo = self.cur_block[1]
        return (lo, lo + (self.image_len + 2 if self.has_future_block else 0))

    @property
    def fut_tokens(self) -> tuple[int, int]:
        lo, hi = self.fut_block
        return (lo + 1, hi - 1) if self.has_future_block else (lo, lo)

    @property
    def prompt_len(self) -> int:
        """Clean prefix whose keys/values never change during decoding."""
        return self.cur_block[1]

    @property
    def boa_pos(self) -> int:
        return self.fut_block[1]

    @property
    def act_block(self) -> tuple[int, int]:
        return (self.boa_pos, self.boa_pos + 1 + self.act_slots)

    @property
    def act_slots(self) -> int:
        # one extra slot so a maximum-length action sequence still fits EOA
        return self.max_actions + 1

    @property
    def act_tokens(self) -> tuple[int, int]:
        return (self.boa_pos + 1, self.act_block[1])

    @property
    def assembled_len(self) -> int:
        return self.act_block[1]

    @property
    def context_len(self) -> int:
        return (self.assembled_len + 7) // 8 * 8

    @property
    def suffix_len(self) -> int:
        return self.context_len - self.prompt_len

    def diffused_positions(self) -> np.ndarray:
        fut = np.arange(*self.fut_tokens)
        act = np.arange(*self.act_tokens)
        return np.concatenate([fut, act])

    def segment_of(self, position: int) -> str:
        if 0 <= position < self.text_len:
            return "text"
        if self.cur_block[0] <= position < self.cur_block[1]:
            return "cur"
        if self.has_future_block and self.fut_block[0] <= position < self.fut_block[1]:
            return "fut"
        if self.act_block[0] <= position < self.act_block[1]:
            return "act"
        if position < self.context_len:
            return "pad"
        raise InputError(f"position {position} outside context of length {self.context_len}")

    def to_json(self) -> dict:
        return {
            "text_len": self.text_len,
            "image_len": self.image_len,
            "max_actions": self.max_actions,
            "future_source": self.future_source,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SequenceLayout":
        return cls(obj["text_len"], obj["image_len"], obj["max_actions"], obj.get("future_source", "future"))


@dataclass
class TokenSequence:
    """One assembled sequence with its layout handle and live action count."""

    ids: np.ndarray
    seq: SequenceLayout
    n_actions: int

    def __post_init__(self):
        if self.ids.shape != (self.seq.context_len,):
            raise ContractError(f"ids length {self.ids.shape} != context {self.seq.context_len}")


def _check_range(ids: Iterable[int], lo: int, hi: int, what: str) -> None:
    for i, t in enumerate(ids):
        if not (lo <= int(t) < hi):
            raise InputError(f"{what}[{i}] = {t} outside expected range [{lo},{hi})")


def assemble(
    text: Sequence[int],
    current_image: Sequence[int],
    future_image: Sequence[int] | None,
    actions: Sequence[int] | None,
    layout: VocabLayout,
    seq: SequenceLayout,
) -> TokenSequence:
    """Pack one episode into the fixed unified layout.

    ``actions=None`` produces the video-style shape (no action block at all,
    used by the first training stage); an empty list still emits BOA and EOA.
    """
    if len(text) != seq.text_len:
        raise InputError(f"text length {len(text)} != {seq.text_len}")
    if len(current_image) != seq.image_len:
        raise InputError(f"current image length {len(current_image)} != {seq.image_len}")
    _check_range(text, *layout.text_range, what="text")
    _check_range(current_image, *layout.visual_range, what="current_image")

    ids = np.full(seq.context_len, layout.pad, dtype=np.int64)
    ids[: seq.text_len] = np.asarray(text)
    c0, c1 = seq.cur_block
    ids[c0] = layout.boi
    ids[c0 + 1 : c1 - 1] = np.asarray(current_image)
    ids[c1 - 1] = layout.eoi

    if seq.has_future_block:
        if future_image is None or len(future_image) != seq.image_len:
            raise InputError(f"future image must have length {seq.image_len}")
        _check_range(future_image, *layout.visual_range, what="future_image")
        f0, f1 = seq.fut_block
        ids[f0] = layout.boi
        ids[f0 + 1 : f1 - 1] = np.asarray(future_image)
        ids[f1 - 1] = layout.eoi
    elif future_image is not None:
        raise InputError("future_image given but this sequence shape has no generation block")

    if actions is None:
        return TokenSequence(ids, seq, n_actions=-1)

    if len(actions) > seq.max_actions:
        raise InputError(f"{len(actions)} actions exceed max {seq.max_actions}")
    _check_range(actions, *layout.action_range, what="actions")
    ids[seq.boa_pos] = layout.boa
    a0, _ = seq.act_tokens
    ids[a0 : a0 + len(actions)] = np.asarray(actions, dtype=np.int64).reshape(-1)
    ids[a0 + len(actions)] = layout.eoa
    return TokenSequence(ids, seq, n_actions=len(actions))


def disassemble(ts: TokenSequence, layout: VocabLayout):
    """Inverse of assemble: (text, current, future, actions)."""
    seq = ts.seq
    ids = ts.ids
    text = ids[: seq.text_len].tolist()
    c0, c1 = seq.cur_block
    current = ids[c0 + 1 : c1 - 1].tolist()
    future = None
    if seq.has_future_block:
        f0, f1 = seq.fut_block
        future = ids[f0 + 1 : f1 - 1].tolist()
    if ts.n_actions < 0:
        return text, current, future, None
    a0, _ = seq.act_tokens
    acts = []
    for t in ids[a0:]:
        if t == layout.eoa:
            break
        acts.append(int(t))
    return text, current, future, acts


def admissible_set(position: int, seq: SequenceLayout, layout: VocabLayout) -> np.ndarray:
    """Candidate token ids for a diffused position (decoding-space mapping).

    Future-image positions admit exactly the visual range; action positions
    admit the action range plus EOA. Never MASK, PAD, or other specials.
    """
    segment = seq.segment_of(position)
    f0, f1 = seq.fut_tokens
    if segment == "fut" and f0 <= position < f1:
        return layout.visual_ids()
    a0, a1 = seq.act_tokens
    if segment == "act" and a0 <= position < a1:
        return layout.action_ids_with_eoa()
    raise ContractError(f"position {position} ({segment}) is not a diffused token position")


def layout_header_json(layout: VocabLayout, extra: dict | None = None) -> str:
    obj = {"layout": layout.to_json()}
    if extra:
        obj.update(extra)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
