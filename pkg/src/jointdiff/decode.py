"""Inference engines over a trained denoiser.

``jd3p``         joint parallel decode: every diffused position starts as
                 MASK; for t = T..1 one forward pass scores all masked
                 positions, the top (1-rho_t)|M_t| most confident commit via
                 tempered Gumbel sampling, the rest stay MASK. rho follows
                 the cosine schedule; a final-step flush commits everything
                 left so exactly T passes suffice.
``independent``  the same machinery run as two separate full schedules:
                 first the image segment to completion, then the action
                 segment conditioned on the finished image (2T passes).
``ar``           greedy left-to-right next-token decoding (causal model).
``jacobi``       parallel fixed-point iteration of the causal model on the
                 whole suffix until token-stable or an iteration cap.

All decoders restrict candidate tokens to each position's admissible set
(visual range for image positions, action range plus EOA for action slots),
and all apply EOA truncation: once EOA is committed at slot i*, later slots
are fixed and excluded from further prediction (EOA end-fill for the
diffusion decoders, PAD for the causal ones, each matching its model's
training-time tail).
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from jointdiff.errors import ContractError, DecodeFailure, InputError
from jointdiff.nncore import softmax
from jointdiff.tokenspace import SequenceLayout, VocabLayout

DECODER_KINDS = ("jd3p", "ar", "jacobi", "independent")


class DecodeWarning(UserWarning):
    """Recoverable decode anomalies (e.g. two EOA commits in one step)."""


@dataclass(frozen=True)
class DecodeConfig:
    steps: int = 8
    temp_hi: float = 1.0  # kappa at t = T (first, most exploratory step)
    temp_lo: float = 0.1  # kappa at t = 1 (last step)
    seed: int = 0
    decoder: str = "jd3p"

    def __post_init__(self):
        if self.steps < 1:
            raise InputError(f"steps must be >= 1, got {self.steps}")
        if self.temp_hi <= 0 or self.temp_lo <= 0:
            raise InputError("temperatures must be > 0")
        if self.decoder not in DECODER_KINDS:
            raise InputError(f"decoder must be one of {DECODER_KINDS}")

    def to_json(self) -> dict:
        return {
            "steps": self.steps,
            "temp_hi": self.temp_hi,
            "temp_lo": self.temp_lo,
            "seed": self.seed,
            "decoder": self.decoder,
        }


def cosine_ratio(t: int, total: int) -> float:
    """Masked fraction kept at step t of a T..1 schedule (strictly less
    than 1, strictly positive, decreasing as t counts down)."""
    if not (1 <= t <= total):
        raise InputError(f"step t={t} outside 1..{total}")
    return math.cos(math.pi / 2 * (total + 1 - t) / (total + 1))


def kappa_for(t: int, total: int, hi: float, lo: float) -> float:
    """Linear temperature from hi at t=T down to lo at t=1."""
    if total == 1:
        return lo
    return lo + (hi - lo) * (t - 1) / (total - 1)


def commit_count(n_masked: int, rho: float, final_step: bool) -> int:
    """TopK size: ceil((1-rho) * |M|), floored at 1 so every step makes
    progress, and flushed to |M| on the final step so no MASK survives."""
    if n_masked <= 0:
        return 0
    if final_step:
        return n_masked
    return min(n_masked, max(1, math.ceil((1.0 - rho) * n_masked)))


def confidence(logits_row: np.ndarray, admissible_ids: np.ndarray) -> float:
    """Max probability of the softmax restricted to the admissible set."""
    if len(admissible_ids) == 0:
        raise ContractError("empty admissible set")
    return float(softmax(np.asarray(logits_row, dtype=np.float64)[admissible_ids]).max())


def select_commit_set(q: np.ndarray, positions: np.ndarray, k: int) -> np.ndarray:
    """The k highest-confidence positions; ties break toward lower position.

    ``positions`` must be ascending; a stable sort on -q then preserves
    ascending position order among equal confidences.
    """
    order = np.argsort(-q, kind="stable")
    return np.sort(positions[order[:k]])


def gumbel_commit(
    logits_row: np.ndarray,
    kappa: float,
    admissible_ids: np.ndarray,
    rng: np.random.Generator,
    gumbel: np.ndarray | None = None,
) -> int:
    """argmax over admissible ids of log p / kappa + Gumbel(0,1) noise.

    ``gumbel`` overrides the noise draw (tests force it to zero to recover
    the plain argmax).
    """
    logp = np.log(softmax(np.asarray(logits_row, dtype=np.float64)[admissible_ids]))
    eta = rng.gumbel(size=len(admissible_ids)) if gumbel is None else gumbel
    return int(admissible_ids[int(np.argmax(logp / kappa + eta))])


@dataclass
class StepTrace:
    t: int
    rho: float
    kappa: float
    masked_before: int
    committed_positions: list[int]
    committed_tokens: list[int]
    confidences: list[float]
    truncated_positions: list[int]
    eoa_slot: int | None

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "rho": self.rho,
            "kappa": self.kappa,
            "masked_before": self.masked_before,
            "committed_positions": self.committed_positions,
            "committed_tokens": self.committed_tokens,
            "confidences": [round(c, 9) for c in self.confidences],
            "truncated_positions": self.truncated_positions,
            "eoa_slot": self.eoa_slot,
        }


@dataclass
class DecodeResult:
    kind: str
    image_ids: list[int]
    action_ids: list[int]
    eoa_slot: int | None
    eoa_fallback: bool
    committed_total: int
    forward_passes: int
    iterations: int | None
    converged: bool
    trace: list[StepTrace]
    wall_s: float
    tokens_per_s: float
    seed: int

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "image_ids": self.image_ids,
            "action_ids": self.action_ids,
            "eoa_slot": self.eoa_slot,
            "eoa_fallback": self.eoa_fallback,
            "committed_total": self.committed_total,
            "forward_passes": self.forward_passes,
            "iterations": self.iterations,
            "converged": self.converged,
            "trace": [s.to_json() for s in self.trace],
            "seed": self.seed,
        }


def decode_template(
    text: list[int], current_image: list[int], seq: SequenceLayout, layout: VocabLayout
) -> np.ndarray:
    """Assembled context with prompt + prefilled specials; every diffused
    position holds MASK. The structural BOI/EOI/BOA are inserted clean and
    are never part of the masked set."""
    ids = np.full(seq.context_len, layout.pad, dtype=np.int64)
    ids[: seq.text_len] = np.asarray(text, dtype=np.int64)
    c0, c1 = seq.cur_block
    ids[c0] = layout.boi
    ids[c0 + 1 : c1 - 1] = np.asarray(current_image, dtype=np.int64)
    ids[c1 - 1] = layout.eoi
    if seq.has_future_block:
        f0, f1 = seq.fut_block
        ids[f0] = layout.boi
        ids[f1 - 1] = layout.eoi
        ids[f0 + 1 : f1 - 1] = layout.mask
    ids[seq.boa_pos] = layout.boa
    a0, a1 = seq.act_tokens
    ids[a0:a1] = layout.mask
    return ids


def _truncate_after_eoa(ids, masked: set, dead: set, seq: SequenceLayout, layout: VocabLayout):
    """Fix the action length at the first committed EOA.

    Slots after the first EOA are fixed to EOA (the end-fill convention the
    denoiser is trained with), removed from the masked set, and marked dead:
    they are never scored or committed again and extraction drops them. A
    second committed EOA is absorbed into the fill and reported with a
    warning. Returns (eoa_slot or None, list of truncated positions).
    """
    a0, a1 = seq.act_tokens
    eoa_positions = [p for p in range(a0, a1) if ids[p] == layout.eoa and p not in dead]
    if not eoa_positions:
        return None, []
    star = eoa_positions[0]
    if len(eoa_positions) > 1:
        warnings.warn(
            f"multiple EOA tokens committed at slots {[p - a0 for p in eoa_positions]}; keeping the first",
            DecodeWarning,
        )
    truncated = []
    for p in range(star + 1, a1):
        if p in dead:
            continue
        ids[p] = layout.eoa
        masked.discard(p)
        dead.add(p)
        truncated.append(p)
    return star - a0, truncated


def _extract(ids, seq: SequenceLayout, layout: VocabLayout):
    """(image_ids, action_ids, eoa_slot, fallback) from a finished decode."""
    f0, f1 = seq.fut_tokens
    image = ids[f0:f1].tolist()
    a0, a1 = seq.act_tokens
    actions = []
    eoa_slot = None
    for slot, p in enumerate(range(a0, a1)):
        tok = int(ids[p])
        if tok == layout.eoa:
            eoa_slot = slot
            break
        if tok == layout.mask or tok == layout.pad:
            break
        actions.append(tok)
    fallback = eoa_slot is None
    if fallback:
        actions = actions[: seq.max_actions]
    return image, actions, eoa_slot, fallback


class _AdmissibleTable:
    """Per-position admissible id arrays for the diffused segments."""

    def __init__(self, seq: SequenceLayout, layout: VocabLayout):
        self.seq = seq
        self.vis = layout.visual_ids()
        self.act = layout.action_ids_with_eoa()
        self.f0, self.f1 = seq.fut_tokens

    def for_position(self, p: int) -> np.ndarray:
        return self.vis if self.f0 <= p < self.f1 else self.act

    def split_by_modality(self, positions: np.ndarray):
        img = positions[(positions >= self.f0) & (positions < self.f1)]
        act = positions[(positions < self.f0) | (positions >= self.f1)]
        return img, act


def _diffusion_schedule(
    scorer,
    ids: np.ndarray,
    masked: set,
    dead: set,
    total_steps: int,
    cfg: DecodeConfig,
    rng: np.random.Generator,
    adm: _AdmissibleTable,
    seq: SequenceLayout,
    layout: VocabLayout,
    truncate: bool,
    trace: list[StepTrace],
) -> None:
    """Run one full T-step confidence-guided schedule over ``masked``.

    The schedule always performs its T forward passes (the pass budget is
    the defining property of the decoder and is what throughput accounting
    reports), even if truncation empties the masked set early.
    """
    P = scorer.prompt_len
    for t in range(total_steps, 0, -1):
        rho = cosine_ratio(t, total_steps)
        kappa = kappa_for(t, total_steps, cfg.temp_hi, cfg.temp_lo)
        logits = scorer.suffix_logits(ids)
        masked_before = len(masked)
        committed_positions: list[int] = []
        committed_tokens: list[int] = []
        confs: list[float] = []
        eoa_slot = None
        truncated: list[int] = []
        if masked_before:
            mlist = np.asarray(sorted(masked))
            q = np.empty(len(mlist))
            img_sel = (mlist >= adm.f0) & (mlist < adm.f1)
            for sel, cols in ((img_sel, adm.vis), (~img_sel, adm.act)):
                if sel.any():
                    rows = mlist[sel] - 1 - P
                    probs = softmax(logits[rows][:, cols].astype(np.float64), axis=-1)
                    q[sel] = probs.max(axis=-1)
            k = commit_count(masked_before, rho, final_step=(t == 1))
            omega = select_commit_set(q, mlist, k)
            pos_to_q = dict(zip(mlist.tolist(), q.tolist()))
            for p in omega.tolist():
                cols = adm.for_position(p)
                tok = gumbel_commit(logits[p - 1 - P], kappa, cols, rng)
                ids[p] = tok
                masked.discard(p)
                committed_positions.append(p)
                committed_tokens.append(tok)
                confs.append(pos_to_q[p])
            if truncate:
                eoa_slot, truncated = _truncate_after_eoa(ids, masked, dead, seq, layout)
        trace.append(
            StepTrace(
                t=t,
                rho=rho,
                kappa=kappa,
                masked_before=masked_before,
                committed_positions=committed_positions,
                committed_tokens=committed_tokens,
                confidences=confs,
                truncated_positions=truncated,
                eoa_slot=eoa_slot,
            )
        )
    if masked:
        raise DecodeFailure(f"{len(masked)} MASK positions remain after the final step")


def jd3p_decode(
    scorer, template: np.ndarray, seq: SequenceLayout, layout: VocabLayout, cfg: DecodeConfig
) -> DecodeResult:
    """Joint schedule over future-image and action positions together."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1D3]))
    ids = template.copy()
    adm = _AdmissibleTable(seq, layout)
    masked = set(int(p) for p in seq.diffused_positions())
    dead: set = set()
    trace: list[StepTrace] = []
    start = time.perf_counter()
    _diffusion_schedule(scorer, ids, masked, dead, cfg.steps, cfg, rng, adm, seq, layout, True, trace)
    wall = time.perf_counter() - start
    return _finish("jd3p", ids, seq, layout, trace, wall, cfg.steps, None, True, cfg.seed)


def independent_decode(
    scorer, template: np.ndarray, seq: SequenceLayout, layout: VocabLayout, cfg: DecodeConfig
) -> DecodeResult:
    """Image schedule to completion, then a separate action schedule."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x1D3]))
    ids = template.copy()
    adm = _AdmissibleTable(seq, layout)
    f0, f1 = seq.fut_tokens
    a0, a1 = seq.act_tokens
    dead: set = set()
    trace: list[StepTrace] = []
    start = time.perf_counter()
    masked_img = set(range(f0, f1))
    _diffusion_schedule(scorer, ids, masked_img, dead, cfg.steps, cfg, rng, adm, seq, layout, False, trace)
    masked_act = set(range(a0, a1))
    _diffusion_schedule(scorer, ids, masked_act, dead, cfg.steps, cfg, rng, adm, seq, layout, True, trace)
    wall = time.perf_counter() - start
    return _finish("independent", ids, seq, layout, trace, wall, 2 * cfg.steps, None, True, cfg.seed)


def ar_decode(
    scorer, template: np.ndarray, seq: SequenceLayout, layout: VocabLayout, cfg: DecodeConfig
) -> DecodeResult:
    """Greedy left-to-right decode with an incremental key/value cache.

    Structural tokens (BOI/EOI/BOA) are placed, not predicted; only
    positions whose logits drive a commit count as forward passes.
    """
    ids = template.copy()
    P = scorer.prompt_len
    a0, a1 = seq.act_tokens
    if seq.has_future_block:
        forced = {seq.fut_block[0], seq.fut_block[1] - 1, seq.boa_pos}
    else:
        forced = {seq.boa_pos}
    adm = _AdmissibleTable(seq, layout)
    start = time.perf_counter()
    sess = scorer.step_session()
    passes = 0
    prev_logits = None
    for p in range(P, a1):
        if p in forced:
            tok = int(template[p])
        else:
            cols = adm.for_position(p)
            tok = int(cols[int(np.argmax(prev_logits[cols]))])
            passes += 1
        ids[p] = tok
        if tok == layout.eoa:
            break
        prev_logits = sess.extend(np.asarray([tok]))[0]
    # action slots past EOA (or past exhaustion) stay untouched
    wall = time.perf_counter() - start
    return _finish("ar", ids, seq, layout, [], wall, passes, None, True, cfg.seed)


def jacobi_decode(
    scorer, template: np.ndarray, seq: SequenceLayout, layout: VocabLayout, cfg: DecodeConfig,
    init_ids: np.ndarray | None = None,
) -> DecodeResult:
    """Parallel fixed-point iteration of the causal model on the suffix.

    The iterate starts from random admissible tokens (or ``init_ids``); each
    sweep replaces every predicted position with its greedy restricted
    argmax given the previous iterate, then pads everything after the first
    EOA (the causal model's training-time tail). Token stability is the
    fixed point, which for greedy decoding equals the sequential output.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x7AC]))
    ids = template.copy()
    P = scorer.prompt_len
    adm = _AdmissibleTable(seq, layout)
    predicted = [int(p) for p in seq.diffused_positions()]
    if init_ids is not None:
        ids = init_ids.copy()
    else:
        for p in predicted:
            cols = adm.for_position(p)
            ids[p] = int(cols[int(rng.integers(len(cols)))])
        _pad_after_eoa(ids, seq, layout)
    cap = seq.suffix_len
    start = time.perf_counter()
    iterations = 0
    converged = False
    while iterations < cap:
        logits = scorer.suffix_logits(ids)
        iterations += 1
        new = ids.copy()
        for p in predicted:
            cols = adm.for_position(p)
            new[p] = int(cols[int(np.argmax(logits[p - 1 - P][cols]))])
        _pad_after_eoa(new, seq, layout)
        if np.array_equal(new, ids):
            converged = True
            break
        ids = new
    wall = time.perf_counter() - start
    return _finish("jacobi", ids, seq, layout, [], wall, iterations, iterations, converged, cfg.seed)


def _pad_after_eoa(ids, seq: SequenceLayout, layout: VocabLayout) -> None:
    a0, a1 = seq.act_tokens
    for p in range(a0, a1):
        if ids[p] == layout.eoa:
            ids[p + 1 : a1] = layout.pad
            return


def _finish(kind, ids, seq, layout, trace, wall, passes, iterations, converged, seed) -> DecodeResult:
    image, actions, eoa_slot, fallback = _extract(ids, seq, layout)
    committed = len(image) + len(actions) + 1  # +1 for EOA (appended on fallback)
    tps = committed / wall if wall > 0 else float("inf")
    return DecodeResult(
        kind=kind,
        image_ids=image,
        action_ids=actions,
        eoa_slot=eoa_slot,
        eoa_fallback=fallback,
        committed_total=committed,
        forward_passes=passes,
        iterations=iterations,
        converged=converged,
        trace=trace,
        wall_s=wall,
        tokens_per_s=tps,
        seed=seed,
    )


def run_decoder(
    scorer, template: np.ndarray, seq: SequenceLayout, layout: VocabLayout, cfg: DecodeConfig
) -> DecodeResult:
    if cfg.decoder == "jd3p":
        return jd3p_decode(scorer, template, seq, layout, cfg)
    if cfg.decoder == "independent":
        return independent_decode(scorer, template, seq, layout, cfg)
    if cfg.decoder == "ar":
        return ar_decode(scorer, template, seq, layout, cfg)
    if cfg.decoder == "jacobi":
        return jacobi_decode(scorer, template, seq, layout, cfg)
    raise InputError(f"unknown decoder {cfg.decoder}")
