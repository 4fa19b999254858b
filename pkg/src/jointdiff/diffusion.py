"""Absorbing-mask corruption and the masked denoising loss.

Forward noising maps every token independently to MASK with probability
beta_t and keeps it otherwise; MASK is absorbing, so after t steps the
per-position survival probability is the product of (1 - beta_s). Training
skips the explicit chain: one mask ratio rho is drawn per example and
applied by exact count to both diffused segments, and the model is scored
with cross-entropy at the masked positions only, restricted to each
position's admissible token set, with the visual term down-weighted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from jointdiff.errors import ContractError, InputError
from jointdiff.nncore import log_softmax, softmax
from jointdiff.tokenspace import SequenceLayout, VocabLayout


@dataclass
class NoiseSchedule:
    """Per-step mask probabilities and their composed retention products."""

    betas: list[float]

    def __post_init__(self):
        for b in self.betas:
            if not (0.0 <= b <= 1.0):
                raise InputError(f"beta {b} outside [0, 1]")

    def retention(self) -> np.ndarray:
        return compose_retention(self.betas)

    def mask_marginal(self, t: int) -> float:
        """P(position is MASK after t steps) = 1 - prod_{s<=t}(1 - beta_s)."""
        return 1.0 - float(self.retention()[t - 1])


def compose_retention(betas) -> np.ndarray:
    """Composed survival products: retention[t-1] = prod_{s<=t}(1 - beta_s).

    Because MASK is absorbing, the full t-step transition is characterized
    by this single scalar per step.
    """
    betas = np.asarray(betas, dtype=np.float64)
    if np.any((betas < 0) | (betas > 1)):
        raise InputError("betas must lie in [0, 1]")
    return np.cumprod(1.0 - betas)


def corrupt_step(tokens: np.ndarray, beta: float, mask_id: int, rng: np.random.Generator):
    """One forward step: each position independently becomes MASK w.p. beta.

    Already-masked positions stay MASK (absorbing). Returns (corrupted,
    newly-or-still-masked indicator).
    """
    if not (0.0 <= beta <= 1.0):
        raise InputError(f"beta {beta} outside [0, 1]")
    tokens = np.asarray(tokens)
    hit = rng.random(tokens.shape) < beta
    out = np.where(hit, mask_id, tokens)
    masked = out == mask_id
    return out, masked


@dataclass
class DiffusionState:
    """Corrupted diffused segments of one sequence.

    ``masked`` holds the positions still requiring a prediction; a position
    is in it exactly while its token reads MASK. Action slots after a
    committed EOA are fixed to EOA (end-fill) and recorded in ``dead``:
    they are excluded from loss, confidence, and commits.
    """

    ids: np.ndarray  # full context ids with MASK holes
    masked: set[int]
    dead: set[int] = field(default_factory=set)
    t: int = 0
    total_steps: int = 0


@dataclass
class CorruptionResult:
    ids: np.ndarray  # (B, L) corrupted sequences
    rows: np.ndarray  # flat batch indices of masked positions
    positions: np.ndarray  # flat positions of masked tokens
    targets: np.ndarray  # clean token at each masked position
    is_image: np.ndarray  # bool per masked position
    rho: np.ndarray  # (B,) mask ratio per sample


def _exact_count_choice(rng, length: int, count: int) -> np.ndarray:
    return rng.choice(length, size=count, replace=False)


def corrupt_for_training(
    batch_ids: np.ndarray,
    act_lens: np.ndarray,
    seq: SequenceLayout,
    layout: VocabLayout,
    rng: np.random.Generator,
    rho_min: float = 0.05,
    iid_masking: bool = False,
    rho_override: float | None = None,
) -> CorruptionResult:
    """Single-draw corruption of a batch of clean assembled sequences.

    Per sample: rho ~ Uniform(rho_min, 1]; ceil(rho * L_v) image positions
    and ceil(rho * L_a) action positions chosen uniformly without
    replacement are replaced by MASK, and the clean token is recorded as the
    target for every masked position.

    The action segment is treated at its full fixed width: slots after the
    terminating EOA carry repeated EOA (end-fill, replacing the stored
    padding), so every slot has a supervised target and the block looks
    exactly like a decode in progress. Without this, slots past the true
    length are never trained, and at decode time they commit garbage moves
    that drag the EOA prediction one slot late. Text, current image,
    prefilled specials, and outer padding are never masked. ``iid_masking``
    switches to independent Bernoulli(rho) draws. ``act_lens`` of -1 marks
    video-style records with no action block.
    """
    ids = np.array(batch_ids, dtype=np.int64)
    B, L = ids.shape
    mask_id = layout.mask
    f0, f1 = seq.fut_tokens
    a0, a1 = seq.act_tokens
    L_v = f1 - f0
    L_a = a1 - a0

    if rho_override is not None:
        rho = np.full(B, float(rho_override))
    else:
        rho = rng.uniform(rho_min, 1.0, size=B)
        rho[rho == rho_min] = 1.0  # open interval at rho_min, closed at 1

    rows, positions, targets, is_image = [], [], [], []
    for b in range(B):
        n_act = int(act_lens[b])
        sel_img = np.empty(0, dtype=np.int64)
        if L_v > 0:
            if iid_masking:
                sel_img = np.flatnonzero(rng.random(L_v) < rho[b])
            else:
                sel_img = _exact_count_choice(rng, L_v, int(np.ceil(rho[b] * L_v)))
        if n_act >= 0:
            ids[b, a0 + n_act + 1 : a1] = layout.eoa  # end-fill the tail
            if iid_masking:
                sel_act = np.flatnonzero(rng.random(L_a) < rho[b])
            else:
                sel_act = _exact_count_choice(rng, L_a, int(np.ceil(rho[b] * L_a)))
        else:
            sel_act = np.empty(0, dtype=np.int64)
        for p in np.sort(sel_img):
            pos = f0 + int(p)
            rows.append(b)
            positions.append(pos)
            targets.append(int(ids[b, pos]))
            is_image.append(True)
            ids[b, pos] = mask_id
        for p in np.sort(sel_act):
            pos = a0 + int(p)
            rows.append(b)
            positions.append(pos)
            targets.append(int(ids[b, pos]))
            is_image.append(False)
            ids[b, pos] = mask_id

    return CorruptionResult(
        ids=ids,
        rows=np.asarray(rows, dtype=np.int64),
        positions=np.asarray(positions, dtype=np.int64),
        targets=np.asarray(targets, dtype=np.int64),
        is_image=np.asarray(is_image, dtype=bool),
        rho=rho,
    )


def masked_loss(
    logits: np.ndarray,
    corr: CorruptionResult,
    seq: SequenceLayout,
    layout: VocabLayout,
    beta_weight: float,
    want_grad: bool = True,
):
    """Denoising cross-entropy at masked positions only.

    loss = beta_weight * mean_{masked image} CE + mean_{masked action} CE,
    each mean over its own masked count. Predictions are read shifted (row
    p-1 scores position p) and the softmax is restricted to the position's
    admissible set: the visual range for image positions, the action range
    plus EOA for action positions. Unmasked positions contribute exactly
    zero loss and gradient. Returns (loss, dlogits or None).
    """
    if corr.positions.size and np.any(corr.positions <= 0):
        raise ContractError("masked position 0 has no predictor row")
    B, L, V = logits.shape
    unmasked = corr.ids[corr.rows, corr.positions] if corr.positions.size else np.empty(0)
    if unmasked.size and np.any(unmasked != layout.mask):
        raise ContractError("target supplied for a position that is not masked")

    dlogits = np.zeros_like(logits) if want_grad else None
    total = 0.0
    vis_ids = layout.visual_ids()
    act_ids = layout.action_ids_with_eoa()
    for selector, cols, weight in (
        (corr.is_image, vis_ids, beta_weight),
        (~corr.is_image, act_ids, 1.0),
    ):
        n = int(selector.sum())
        if n == 0:
            continue
        rows = corr.rows[selector]
        pred_rows = corr.positions[selector] - 1
        sub = logits[rows, pred_rows][:, cols]
        t_local = np.searchsorted(cols, corr.targets[selector])
        if np.any(cols[t_local] != corr.targets[selector]):
            raise ContractError("masked target lies outside its admissible set")
        logp = log_softmax(sub, axis=-1)
        total += weight * float(-logp[np.arange(n), t_local].mean())
        if want_grad:
            g = softmax(sub, axis=-1)
            g[np.arange(n), t_local] -= 1.0
            g *= weight / n
            # (row, pred_row) pairs are unique, so direct assignment is safe
            dlogits[rows[:, None], pred_rows[:, None], cols[None, :]] = g
    return total, dlogits


def ntp_loss(
    logits: np.ndarray,
    batch_ids: np.ndarray,
    act_lens: np.ndarray,
    seq: SequenceLayout,
    layout: VocabLayout,
    beta_weight: float,
    want_grad: bool = True,
):
    """Next-token objective for the autoregressive baseline.

    Targets every output token (future image, actions, EOA) from the hidden
    state one position back, under the same restricted-softmax and
    modality-weighting conventions as the denoising loss so the two training
    modes are comparable.
    """
    B, L, V = logits.shape
    f0, f1 = seq.fut_tokens
    a0, _ = seq.act_tokens
    rows, positions, is_image = [], [], []
    for b in range(B):
        for p in range(f0, f1):
            rows.append(b)
            positions.append(p)
            is_image.append(True)
        live = int(act_lens[b]) + 1
        for p in range(a0, a0 + live):
            rows.append(b)
            positions.append(p)
            is_image.append(False)
    rows = np.asarray(rows)
    positions = np.asarray(positions)
    is_image = np.asarray(is_image, dtype=bool)
    targets = batch_ids[rows, positions]

    dlogits = np.zeros_like(logits) if want_grad else None
    total = 0.0
    for selector, cols, weight in (
        (is_image, layout.visual_ids(), beta_weight),
        (~is_image, layout.action_ids_with_eoa(), 1.0),
    ):
        n = int(selector.sum())
        if n == 0:
            continue
        r = rows[selector]
        pr = positions[selector] - 1
        sub = logits[r, pr][:, cols]
        t_local = np.searchsorted(cols, targets[selector])
        logp = log_softmax(sub, axis=-1)
        total += weight * float(-logp[np.arange(n), t_local].mean())
        if want_grad:
            g = softmax(sub, axis=-1)
            g[np.arange(n), t_local] -= 1.0
            g *= weight / n
            dlogits[r[:, None], pr[:, None], cols[None, :]] = g
    return total, dlogits
