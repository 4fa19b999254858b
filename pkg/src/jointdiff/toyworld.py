"""Synthetic grid-world episodes with exactly recoverable ground truth.

An agent sits on a W x H grid together with one goal per color. The
instruction names a goal color; the canonical plan moves all vertical steps
first, then all horizontal steps, so the action sequence is a deterministic
function of (current state, instruction). Applying the actions to the
current state yields the future state, which makes the learning task a
checkable inverse-kinematics problem: the decoder must emit exactly the
moves that explain the predicted future image.

Cell token kinds: empty, agent, one per goal color, agent-on-goal. The
covered goal's color is not stored in the cell token, but since every color
is present exactly once it is always deducible as the missing one.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from jointdiff.errors import ConfigError, FormatError, InputError
from jointdiff.tokenspace import SequenceLayout, VocabLayout, build_layout

DATASET_FORMAT_VERSION = 1

MOVES = ("U", "D", "L", "R")
MOVE_DELTAS = {"U": (-1, 0), "D": (1, 0), "L": (0, -1), "R": (0, 1)}

COLOR_NAMES = ("red", "green", "blue")
COLOR_GLYPHS = ("r", "g", "b")

# instruction template: "go to the <color>", one word per token
_WORDS = ("go", "to", "the") + COLOR_NAMES
WORD_IDS = {w: i for i, w in enumerate(_WORDS)}

KIND_EMPTY = 0
KIND_AGENT = 1
KIND_GOAL0 = 2  # goal kinds occupy KIND_GOAL0 .. KIND_GOAL0+n_colors-1
# agent-on-goal kind comes right after the last goal kind


@dataclass(frozen=True)
class WorldConfig:
    width: int = 6
    height: int = 6
    n_colors: int = 3
    v_text: int = 8
    v_v: int = 8
    v_a: int = 4
    max_actions: int = 10

    def __post_init__(self):
        if self.n_colors > len(COLOR_NAMES):
            raise InputError(f"at most {len(COLOR_NAMES)} colors supported")
        if self.width < 1 or self.height < 1:
            raise InputError("grid must be at least 1x1")
        kinds = 2 + self.n_colors + 1
        if self.v_v < kinds:
            raise ConfigError(f"visual codebook {self.v_v} too small for {kinds} cell kinds")
        if self.v_text < len(_WORDS):
            raise ConfigError(f"text vocabulary {self.v_text} too small for {len(_WORDS)} words")
        if self.v_a < len(MOVES):
            raise ConfigError(f"action codebook {self.v_a} too small for {len(MOVES)} moves")
        max_path = (self.width - 1) + (self.height - 1)
        if self.max_actions < max_path:
            raise ConfigError(f"max_actions {self.max_actions} < worst-case path {max_path}")

    @property
    def image_len(self) -> int:
        return self.width * self.height

    @property
    def text_len(self) -> int:
        return 4

    def layout(self) -> VocabLayout:
        return build_layout(self.v_text, self.v_v, self.v_a)

    def sequence_layout(self, future_source: str = "future") -> SequenceLayout:
        return SequenceLayout(self.text_len, self.image_len, self.max_actions, future_source)

    def agent_on_goal_kind(self) -> int:
        return KIND_GOAL0 + self.n_colors

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "n_colors": self.n_colors,
            "v_text": self.v_text,
            "v_v": self.v_v,
            "v_a": self.v_a,
            "max_actions": self.max_actions,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "WorldConfig":
        return cls(**obj)


@dataclass
class GridState:
    width: int
    height: int
    agent: tuple[int, int]
    goals: list[tuple[int, int, int]]  # (color, row, col)

    def __post_init__(self):
        cells = set()
        for color, r, c in self.goals:
            if not (0 <= r < self.height and 0 <= c < self.width):
                raise InputError(f"goal {(color, r, c)} out of bounds")
            if (r, c) in cells:
                raise InputError(f"two goals share cell {(r, c)}")
            cells.add((r, c))
        r, c = self.agent
        if not (0 <= r < self.height and 0 <= c < self.width):
            raise InputError(f"agent {self.agent} out of bounds")

    def goal_at(self, cell: tuple[int, int]):
        for color, r, c in self.goals:
            if (r, c) == cell:
                return color
        return None

    def goal_of_color(self, color: int) -> tuple[int, int]:
        for col, r, c in self.goals:
            if col == color:
                return (r, c)
        raise InputError(f"no goal of color {color}")


@dataclass
class Episode:
    instruction: list[int]  # text token ids
    target_color: int
    current: GridState
    actions: list[str]  # subset of MOVES
    future: GridState


def canonical_actions(start: tuple[int, int], goal: tuple[int, int]) -> list[str]:
    """Unique shortest path: all vertical moves first, then all horizontal."""
    dr = goal[0] - start[0]
    dc = goal[1] - start[1]
    moves = ["D" if dr > 0 else "U"] * abs(dr)
    moves += ["R" if dc > 0 else "L"] * abs(dc)
    return moves


def apply_actions(state: GridState, actions: Iterable[str]) -> GridState:
    r, c = state.agent
    for a in actions:
        dr, dc = MOVE_DELTAS[a]
        r, c = r + dr, c + dc
        if not (0 <= r < state.height and 0 <= c < state.width):
            raise InputError(f"action {a} leaves the grid at {(r, c)}")
    return GridState(state.width, state.height, (r, c), list(state.goals))


def instruction_tokens(color: int) -> list[int]:
    return [WORD_IDS["go"], WORD_IDS["to"], WORD_IDS["the"], WORD_IDS[COLOR_NAMES[color]]]


def generate_episode(rng: np.random.Generator, cfg: WorldConfig) -> Episode:
    """Uniform agent/goal placement; the instruction names the target color."""
    n_cells = cfg.width * cfg.height
    if n_cells < cfg.n_colors + 1:
        raise ConfigError(f"{cfg.width}x{cfg.height} grid cannot hold agent + {cfg.n_colors} goals")
    goal_cells = rng.choice(n_cells, size=cfg.n_colors, replace=False)
    goals = [(color, int(cell // cfg.width), int(cell % cfg.width)) for color, cell in enumerate(goal_cells)]
    agent_cell = int(rng.integers(n_cells))  # may coincide with a goal
    current = GridState(cfg.width, cfg.height, (agent_cell // cfg.width, agent_cell % cfg.width), goals)
    target = int(rng.integers(cfg.n_colors))
    actions = canonical_actions(current.agent, current.goal_of_color(target))
    future = apply_actions(current, actions)
    return Episode(instruction_tokens(target), target, current, actions, future)


def render_tokens(state: GridState, cfg: WorldConfig, layout: VocabLayout) -> list[int]:
    """Row-major cell scan into visual-range ids."""
    base = layout.visual_range[0]
    grid = [[KIND_EMPTY] * state.width for _ in range(state.height)]
    for color, r, c in state.goals:
        if color >= cfg.n_colors:
            raise ConfigError(f"color {color} exceeds configured {cfg.n_colors}")
        grid[r][c] = KIND_GOAL0 + color
    ar, ac = state.agent
    grid[ar][ac] = cfg.agent_on_goal_kind() if state.goal_at((ar, ac)) is not None else KIND_AGENT
    return [base + k for row in grid for k in row]


def parse_tokens(tokens: Iterable[int], cfg: WorldConfig, layout: VocabLayout) -> GridState:
    """Inverse of render_tokens for visible content.

    A cell rendered agent-on-goal recovers the agent position; the covered
    goal color is restored as the single color missing from the visible set
    (every episode carries exactly one goal per color).
    """
    base = layout.visual_range[0]
    agent = None
    goals = []
    covered_cell = None
    for pos, tok in enumerate(tokens):
        kind = int(tok) - base
        r, c = pos // cfg.width, pos % cfg.width
        if kind == KIND_EMPTY:
            continue
        if kind == KIND_AGENT:
            agent = (r, c)
        elif KIND_GOAL0 <= kind < KIND_GOAL0 + cfg.n_colors:
            goals.append((kind - KIND_GOAL0, r, c))
        elif kind == cfg.agent_on_goal_kind():
            agent = (r, c)
            covered_cell = (r, c)
        else:
            raise InputError(f"cell token {tok} (kind {kind}) is not a known cell kind")
    if agent is None:
        raise InputError("no agent cell in image tokens")
    if covered_cell is not None:
        missing = sorted(set(range(cfg.n_colors)) - {g[0] for g in goals})
        if len(missing) == 1:
            goals.append((missing[0], *covered_cell))
    goals.sort()
    return GridState(cfg.width, cfg.height, agent, goals)


def text_art(tokens: Iterable[int], cfg: WorldConfig, layout: VocabLayout) -> str:
    """Human-readable grid: '.' empty, 'A' agent, color glyphs, '@' agent-on-goal."""
    base = layout.visual_range[0]
    glyphs = {KIND_EMPTY: ".", KIND_AGENT: "A", cfg.agent_on_goal_kind(): "@"}
    for i in range(cfg.n_colors):
        glyphs[KIND_GOAL0 + i] = COLOR_GLYPHS[i]
    rows = []
    toks = list(tokens)
    for r in range(cfg.height):
        row = toks[r * cfg.width : (r + 1) * cfg.width]
        rows.append("".join(glyphs.get(int(t) - base, "?") for t in row))
    return "\n".join(rows)


def action_ids(actions: Iterable[str], layout: VocabLayout) -> list[int]:
    base = layout.action_range[0]
    return [base + MOVES.index(a) for a in actions]


def action_names(ids: Iterable[int], layout: VocabLayout) -> list[str]:
    base = layout.action_range[0]
    out = []
    for t in ids:
        k = int(t) - base
        if not (0 <= k < len(MOVES)):
            raise InputError(f"action id {t} outside move codebook")
        out.append(MOVES[k])
    return out


# ---------------------------------------------------------------------------
# Episode records and JSONL persistence


@dataclass
class Record:
    """One persisted training example in token form."""

    text: list[int]
    cur: list[int]
    fut: list[int]
    act: list[int] | None  # None for the video-style stage-1 corpus

    def to_json(self) -> dict:
        obj = {"text": self.text, "cur": self.cur, "fut": self.fut}
        if self.act is not None:
            obj["act"] = self.act
        return obj


def episode_record(ep: Episode, cfg: WorldConfig, layout: VocabLayout) -> Record:
    return Record(
        text=list(ep.instruction),
        cur=render_tokens(ep.current, cfg, layout),
        fut=render_tokens(ep.future, cfg, layout),
        act=action_ids(ep.actions, layout),
    )


def stage1_record(ep: Episode, k: int, cfg: WorldConfig, layout: VocabLayout) -> Record:
    """Truncate the episode to k applied actions; keep only the image pair."""
    inter = apply_actions(ep.current, ep.actions[:k])
    return Record(
        text=list(ep.instruction),
        cur=render_tokens(ep.current, cfg, layout),
        fut=render_tokens(inter, cfg, layout),
        act=None,
    )


def generate_records(
    cfg: WorldConfig, n_episodes: int, seed: int, stage1: bool = False
) -> list[Record]:
    layout = cfg.layout()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1 if stage1 else 2]))
    out = []
    for _ in range(n_episodes):
        ep = generate_episode(rng, cfg)
        if stage1:
            k = int(rng.integers(len(ep.actions) + 1))
            out.append(stage1_record(ep, k, cfg, layout))
        else:
            out.append(episode_record(ep, cfg, layout))
    return out


@dataclass
class Dataset:
    cfg: WorldConfig
    layout: VocabLayout
    kind: str  # "episodes" or "stage1"
    records: list[Record] = field(default_factory=list)


def dataset_write(path: str, ds: Dataset) -> None:
    header = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": ds.kind,
        "layout": ds.layout.to_json(),
        "world": ds.cfg.to_json(),
        "count": len(ds.records),
    }
    tmp = f"{path}.tmp.{os.getpid()}"
    with io.open(tmp, "w", encoding="utf-8") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for rec in ds.records:
            f.write(json.dumps(rec.to_json(), sort_keys=True, separators=(",", ":")) + "\n")
    os.replace(tmp, path)


def read_header(path: str) -> dict:
    with io.open(path, "r", encoding="utf-8") as f:
        first = f.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: line 1: not a valid dataset header ({e})")
    if not isinstance(header, dict) or "format_version" not in header:
        raise FormatError(f"{path}: line 1: missing format_version")
    if header["format_version"] != DATASET_FORMAT_VERSION:
        raise FormatError(
            f"{path}: format version {header['format_version']} unsupported "
            f"(expected {DATASET_FORMAT_VERSION})"
        )
    return header


def dataset_read(path: str, expect_layout: VocabLayout | None = None) -> Dataset:
    header = read_header(path)
    layout = VocabLayout.from_json(header["layout"])
    if expect_layout is not None and layout != expect_layout:
        raise FormatError(f"{path}: layout {layout.to_json()} does not match expected {expect_layout.to_json()}")
    cfg = WorldConfig.from_json(header["world"])
    ds = Dataset(cfg, layout, header.get("kind", "episodes"))
    with io.open(path, "r", encoding="utf-8") as f:
        f.readline()
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}: line {lineno}: malformed record ({e})")
            ds.records.append(Record(obj["text"], obj["cur"], obj["fut"], obj.get("act")))
    if "count" in header and header["count"] != len(ds.records):
        raise FormatError(f"{path}: header announces {header['count']} records, found {len(ds.records)}")
    return ds


def oracle_actions(rec: Record, cfg: WorldConfig, layout: VocabLayout) -> list[int]:
    """Reference decoder used in tests: recover actions from the image pair."""
    cur = parse_tokens(rec.cur, cfg, layout)
    fut = parse_tokens(rec.fut, cfg, layout)
    return action_ids(canonical_actions(cur.agent, fut.agent), layout)
