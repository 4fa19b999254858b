"""Two-stage training pipeline with deterministic, resumable runs.

Stage 1 trains future-image denoising only, on the video-style corpus of
(current, intermediate-future) image pairs; stage 2 trains the joint
image+action objective on full episodes and normally initializes from a
stage-1 checkpoint. Every epoch writes metrics (loss, image-token accuracy
at a rho=0.5 probe, action exact-match on a validation subsample) and a
resumable checkpoint; all randomness derives from (seed, epoch), so an
interrupted run resumed from the latest checkpoint reproduces the
uninterrupted one bit for bit.
"""

from __future__ import annotations

import csv
import os
import shutil
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from jointdiff.decode import DecodeConfig, DecodeWarning, decode_template, run_decoder
from jointdiff.diffusion import corrupt_for_training, masked_loss, ntp_loss
from jointdiff.errors import FormatError, InputError
from jointdiff.model import (
    ModelConfig,
    SuffixScorer,
    TransformerModel,
    build_mask,
    load_model,
    save_model,
)
from jointdiff.nncore import Adam
from jointdiff.tokenspace import SequenceLayout, VocabLayout, assemble
from jointdiff.toyworld import Dataset, WorldConfig, dataset_read

OBJECTIVES = ("diffusion", "ntp")


@dataclass
class TrainConfig:
    stage: int = 2
    epochs: int = 6
    batch_size: int = 32
    lr: float = 1e-3
    lr_final_frac: float = 0.1  # linear decay to this fraction by the last step
    beta_weight: float = 4.0
    rho_min: float = 0.05
    iid_masking: bool = False
    seed: int = 0
    dataset: str = ""
    out_dir: str = ""
    init_from: str | None = None
    from_scratch: bool = False
    objective: str = "diffusion"
    model: ModelConfig = field(default_factory=ModelConfig)
    future_source: str = "future"
    val_fraction: float = 0.05
    val_em_episodes: int = 64
    decode_steps: int = 8

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise InputError(f"stage must be 1 or 2, got {self.stage}")
        if self.objective not in OBJECTIVES:
            raise InputError(f"objective must be one of {OBJECTIVES}")
        if self.stage == 2 and self.init_from is None and not self.from_scratch:
            raise InputError("stage-2 runs must load a stage-1 checkpoint (or pass from_scratch)")

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["model"] = self.model.to_json()
        return obj


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    img_token_acc: float | None
    act_exact_match: float | None
    wall_s: float


@dataclass
class TrainResult:
    out_dir: str
    epochs_run: int
    step_losses: list[list[float]]  # per epoch
    metrics: list[EpochMetrics]
    latest_path: str
    best_path: str


def prepare_arrays(ds: Dataset, seq: SequenceLayout, layout: VocabLayout):
    """Assemble every record once into (ids (N, L), act_lens (N,))."""
    if not ds.records:
        raise InputError("dataset holds no records")
    N = len(ds.records)
    ids = np.empty((N, seq.context_len), dtype=np.int64)
    act_lens = np.empty(N, dtype=np.int64)
    for i, rec in enumerate(ds.records):
        fut = None
        if seq.future_source == "future":
            fut = rec.fut
        elif seq.future_source == "current":
            fut = rec.cur
        ts = assemble(rec.text, rec.cur, fut, rec.act, layout, seq)
        ids[i] = ts.ids
        act_lens[i] = ts.n_actions
    return ids, act_lens


def _loss_and_grad(model, mask, batch_ids, act_lens, seq, layout, cfg: TrainConfig, rng):
    if cfg.objective == "ntp":
        # the causal baseline trains on clean sequences, next-token style
        logits = model.forward_train(batch_ids, mask)
        loss, dlogits = ntp_loss(logits, batch_ids, act_lens, seq, layout, cfg.beta_weight)
        return loss, dlogits
    corr = corrupt_for_training(
        batch_ids, act_lens, seq, layout, rng, rho_min=cfg.rho_min, iid_masking=cfg.iid_masking
    )
    logits = model.forward_train(corr.ids, mask)
    loss, dlogits = masked_loss(logits, corr, seq, layout, cfg.beta_weight)
    return loss, dlogits


def stage1_step(model, mask, batch_ids, act_lens, seq, layout, cfg: TrainConfig, rng, optimizer):
    """One optimizer step on video-style records (future image only)."""
    if np.any(act_lens >= 0):
        raise InputError("stage-1 batches must not contain action segments")
    return _train_step(model, mask, batch_ids, act_lens, seq, layout, cfg, rng, optimizer)


def stage2_step(model, mask, batch_ids, act_lens, seq, layout, cfg: TrainConfig, rng, optimizer):
    """One optimizer step on full episodes (joint corruption, shared rho)."""
    return _train_step(model, mask, batch_ids, act_lens, seq, layout, cfg, rng, optimizer)


def _train_step(model, mask, batch_ids, act_lens, seq, layout, cfg, rng, optimizer):
    model.store.zero_grads()
    loss, dlogits = _loss_and_grad(model, mask, batch_ids, act_lens, seq, layout, cfg, rng)
    model.backward(dlogits)
    optimizer.step()
    return loss


def _probe_image_accuracy(model, mask, ids, act_lens, seq, layout, cfg, probe_seed: int) -> float:
    """Fraction of masked image positions recovered at a rho=0.5 probe."""
    if not seq.has_future_block:
        return float("nan")
    rng = np.random.default_rng(np.random.SeedSequence([probe_seed, 0x9B0]))
    hits = 0
    total = 0
    vis = layout.visual_ids()
    for lo in range(0, len(ids), cfg.batch_size):
        chunk = ids[lo : lo + cfg.batch_size]
        corr = corrupt_for_training(
            chunk, act_lens[lo : lo + cfg.batch_size], seq, layout, rng, rho_override=0.5
        )
        logits = model.forward_train(corr.ids, mask)
        sel = corr.is_image
        if not sel.any():
            continue
        rows = corr.rows[sel]
        pred_rows = corr.positions[sel] - 1
        guess = vis[np.argmax(logits[rows, pred_rows][:, vis], axis=-1)]
        hits += int((guess == corr.targets[sel]).sum())
        total += int(sel.sum())
    return hits / total if total else float("nan")


def _val_exact_match(model, mask, ds: Dataset, val_idx, seq, layout, cfg: TrainConfig) -> float:
    if cfg.stage == 1:
        return float("nan")
    decoder = "ar" if cfg.objective == "ntp" else "jd3p"
    dcfg = DecodeConfig(steps=cfg.decode_steps, seed=cfg.seed, decoder=decoder)
    take = val_idx[: cfg.val_em_episodes]
    hits = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DecodeWarning)
        for i in take:
            rec = ds.records[int(i)]
            template = decode_template(rec.text, rec.cur, seq, layout)
            scorer = SuffixScorer(model, mask, template[: seq.prompt_len])
            res = run_decoder(scorer, template, seq, layout, dcfg)
            if not res.eoa_fallback and res.action_ids == list(rec.act):
                hits += 1
    return hits / len(take) if len(take) else float("nan")


def _eval_loss(model, mask, ids, act_lens, seq, layout, cfg, rng) -> float:
    total, batches = 0.0, 0
    for lo in range(0, len(ids), cfg.batch_size):
        chunk = ids[lo : lo + cfg.batch_size]
        loss, _ = _loss_and_grad(model, mask, chunk, act_lens[lo : lo + cfg.batch_size], seq, layout, cfg, rng)
        total += loss
        batches += 1
    return total / max(1, batches)


def _write_metrics(path: str, rows: list[EpochMetrics], append: bool) -> None:
    mode = "a" if append and os.path.exists(path) else "w"
    with open(path, mode, newline="") as f:
        w = csv.writer(f)
        if mode == "w":
            w.writerow(["epoch", "split", "loss", "img_token_acc", "act_exact_match", "wall_s"])
        for m in rows:
            w.writerow(
                [
                    m.epoch,
                    m.split,
                    f"{m.loss:.6f}",
                    "" if m.img_token_acc is None or np.isnan(m.img_token_acc) else f"{m.img_token_acc:.6f}",
                    "" if m.act_exact_match is None or np.isnan(m.act_exact_match) else f"{m.act_exact_match:.6f}",
                    f"{m.wall_s:.3f}",
                ]
            )


def run(cfg: TrainConfig, resume: bool = False) -> TrainResult:
    """Train per config; returns per-step losses and per-epoch metrics.

    Checkpoints latest.ckpt (with optimizer state) and best.ckpt every
    epoch. ``resume`` continues from latest.ckpt in out_dir.
    """
    ds = dataset_read(cfg.dataset)
    if not ds.records:
        raise InputError(f"{cfg.dataset}: dataset is empty")
    expect_kind = "stage1" if cfg.stage == 1 else "episodes"
    if ds.kind != expect_kind:
        raise InputError(f"stage {cfg.stage} expects a {expect_kind!r} dataset, got {ds.kind!r}")
    layout = ds.layout
    seq = ds.cfg.sequence_layout(cfg.future_source)
    os.makedirs(cfg.out_dir, exist_ok=True)

    scheme = cfg.model.scheme
    model = TransformerModel(cfg.model, layout.total, seq.context_len)
    start_epoch = 0
    optimizer = Adam(model.store, lr=cfg.lr)
    latest_path = os.path.join(cfg.out_dir, "latest.ckpt")
    best_path = os.path.join(cfg.out_dir, "best.ckpt")

    if resume:
        if not os.path.exists(latest_path):
            raise InputError(f"resume requested but {latest_path} does not exist")
        model, ck_layout, ck_seq, header, arrays = load_model(latest_path)
        if ck_layout != layout:
            raise FormatError("checkpoint layout does not match dataset layout")
        optimizer = Adam(model.store, lr=cfg.lr)
        optimizer.load_state(arrays, header["optimizer"]["t"])
        start_epoch = header["meta"]["epoch"] + 1
    elif cfg.init_from:
        init_model, init_layout, init_seq, _, _ = load_model(cfg.init_from)
        if init_layout != layout:
            raise FormatError(
                f"init checkpoint layout {init_layout.to_json()} does not match dataset layout {layout.to_json()}"
            )
        if init_model.cfg != cfg.model:
            raise InputError("init checkpoint model config differs from requested config")
        model.store.load_state(init_model.store.state_arrays())

    mask = build_mask(scheme, seq)
    ids, act_lens = prepare_arrays(ds, seq, layout)
    if cfg.stage == 1 and np.any(act_lens >= 0):
        raise InputError("stage-1 dataset records must not carry actions")

    # validation split: fixed fraction of the corpus, fixed by seed
    split_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5117]))
    perm = split_rng.permutation(len(ids))
    n_val = max(1, int(len(ids) * cfg.val_fraction)) if len(ids) > 1 else 0
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        raise InputError("dataset too small for the configured validation split")

    step_fn = stage1_step if cfg.stage == 1 else stage2_step
    all_step_losses: list[list[float]] = []
    metrics: list[EpochMetrics] = []
    best_key = -float("inf")
    steps_per_epoch = (len(train_idx) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = max(1, steps_per_epoch * cfg.epochs)

    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x0E, epoch]))
        corrupt_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xC0, epoch]))
        order = train_idx[order_rng.permutation(len(train_idx))]
        losses = []
        for i, lo in enumerate(range(0, len(order), cfg.batch_size)):
            frac = (epoch * steps_per_epoch + i) / total_steps
            optimizer.lr = cfg.lr * (1.0 - (1.0 - cfg.lr_final_frac) * frac)
            sel = order[lo : lo + cfg.batch_size]
            loss = step_fn(
                model, mask, ids[sel], act_lens[sel], seq, layout, cfg, corrupt_rng, optimizer
            )
            losses.append(loss)
        train_wall = time.perf_counter() - t0
        all_step_losses.append(losses)

        tv = time.perf_counter()
        val_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xFA, epoch]))
        val_loss = _eval_loss(model, mask, ids[val_idx], act_lens[val_idx], seq, layout, cfg, val_rng)
        img_acc = _probe_image_accuracy(model, mask, ids[val_idx], act_lens[val_idx], seq, layout, cfg, cfg.seed)
        em = _val_exact_match(model, mask, ds, val_idx, seq, layout, cfg)
        val_wall = time.perf_counter() - tv

        metrics.append(EpochMetrics(epoch, "train", float(np.mean(losses)), None, None, train_wall))
        metrics.append(EpochMetrics(epoch, "val", val_loss, img_acc, em, val_wall))
        _write_metrics(os.path.join(cfg.out_dir, "metrics.csv"), metrics[-2:], append=(epoch > 0 or resume))

        meta = {"stage": cfg.stage, "epoch": epoch, "train_config": cfg.to_json(),
                "val_loss": val_loss, "val_img_acc": img_acc, "val_em": None if np.isnan(em) else em}
        save_model(latest_path, model, layout, seq, meta=meta, optimizer=optimizer)
        key = em if not np.isnan(em) else -val_loss
        if key >= best_key:
            best_key = key
            shutil.copyfile(latest_path, best_path)

    return TrainResult(cfg.out_dir, cfg.epochs - start_epoch, all_step_losses, metrics, latest_path, best_path)
