"""Evaluation and benchmark harness: success metrics, decoder throughput
rows, and the attention-scheme / visual-target ablation tables.

Quality is action exact-match (full-sequence equality after EOA
truncation) plus future-image token accuracy; speed rows report committed
tokens per second of decode wall-clock with the prompt excluded, measured
single-threaded so decoder comparisons are not confounded by BLAS
parallelism. Every report carries an environment fingerprint.
"""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import statistics
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from jointdiff.decode import DecodeConfig, DecodeWarning, decode_template, run_decoder
from jointdiff.errors import InputError
from jointdiff.model import HybridMask, SuffixScorer, TransformerModel, build_mask
from jointdiff.tokenspace import SequenceLayout, VocabLayout
from jointdiff.toyworld import Record


def environment_fingerprint(seed, threads: int = 1) -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
        "pinned_threads": threads,
        "seed": seed,
    }


@dataclass
class BenchReport:
    title: str
    rows: list[dict]
    fingerprint: dict

    def to_json(self) -> str:
        return json.dumps(
            {"title": self.title, "rows": self.rows, "fingerprint": self.fingerprint},
            indent=2,
            sort_keys=True,
        )

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        cols = list(self.rows[0].keys())
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r.get(c, "") for c in cols])
        return buf.getvalue()

    def to_text(self) -> str:
        if not self.rows:
            return f"{self.title}\n(no rows)\n"
        cols = list(self.rows[0].keys())
        cells = [[_fmt(r.get(c, "")) for c in cols] for r in self.rows]
        widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
        lines = [self.title]
        lines.append("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
        lines.append("  ".join("-" * w for w in widths))
        for row in cells:
            lines.append("  ".join(v.ljust(w) for v, w in zip(row, widths)))
        lines.append("fingerprint: " + json.dumps(self.fingerprint, sort_keys=True))
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def model_scorer_factory(model: TransformerModel, mask: HybridMask, seq: SequenceLayout, use_cache=True):
    def factory(template: np.ndarray) -> SuffixScorer:
        return SuffixScorer(model, mask, template[: seq.prompt_len], use_cache=use_cache)

    return factory


@dataclass
class EvalOutcome:
    exact_match: float
    image_accuracy: float
    n_episodes: int
    fallbacks: int
    results: list = field(repr=False, default_factory=list)


def eval_success(
    scorer_factory,
    records: list[Record],
    seq: SequenceLayout,
    layout: VocabLayout,
    decode_cfg: DecodeConfig,
    keep_results: bool = False,
) -> EvalOutcome:
    """Exact-match rate of decoded actions and future-image token accuracy.

    A decode counts as a match only if its action tokens equal ground truth
    and EOA was genuinely committed (length-cap fallbacks never match).
    """
    if not records:
        raise InputError("no episodes to evaluate")
    hits = 0
    img_correct = 0
    img_total = 0
    fallbacks = 0
    kept = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DecodeWarning)
        for i, rec in enumerate(records):
            template = decode_template(rec.text, rec.cur, seq, layout)
            scorer = scorer_factory(template)
            cfg_i = DecodeConfig(
                steps=decode_cfg.steps,
                temp_hi=decode_cfg.temp_hi,
                temp_lo=decode_cfg.temp_lo,
                seed=decode_cfg.seed + i,
                decoder=decode_cfg.decoder,
            )
            res = run_decoder(scorer, template, seq, layout, cfg_i)
            if res.eoa_fallback:
                fallbacks += 1
            if not res.eoa_fallback and rec.act is not None and res.action_ids == list(rec.act):
                hits += 1
            if seq.has_future_block and seq.future_source == "future":
                truth = np.asarray(rec.fut)
                img_correct += int((np.asarray(res.image_ids) == truth).sum())
                img_total += len(truth)
            elif seq.has_future_block and seq.future_source == "current":
                truth = np.asarray(rec.cur)
                img_correct += int((np.asarray(res.image_ids) == truth).sum())
                img_total += len(truth)
            if keep_results:
                kept.append(res)
    return EvalOutcome(
        exact_match=hits / len(records),
        image_accuracy=img_correct / img_total if img_total else float("nan"),
        n_episodes=len(records),
        fallbacks=fallbacks,
        results=kept,
    )


@dataclass
class ThroughputRow:
    kind: str
    tokens_per_s: float
    committed_per_decode: float
    forward_passes: list[int]
    wall_s: float
    reps: int

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "tokens_per_s": self.tokens_per_s,
            "committed_per_decode": self.committed_per_decode,
            "forward_passes": self.forward_passes,
            "wall_s": self.wall_s,
            "reps": self.reps,
        }


def measure_throughput(
    decoder: str,
    scorer_factory,
    records: list[Record],
    seq: SequenceLayout,
    layout: VocabLayout,
    decode_cfg: DecodeConfig,
    repetitions: int = 3,
    warmup: int = 1,
) -> ThroughputRow:
    """Median committed-tokens/s over repetitions, single-threaded.

    Scorer construction (prompt prefill) is excluded from the timed span;
    forward-pass counts are recorded per episode from the final repetition.
    """
    cfg = DecodeConfig(
        steps=decode_cfg.steps,
        temp_hi=decode_cfg.temp_hi,
        temp_lo=decode_cfg.temp_lo,
        seed=decode_cfg.seed,
        decoder=decoder,
    )
    per_rep = []
    passes: list[int] = []
    committed_total = 0
    with threadpool_limits(limits=1):
        for rep in range(warmup + repetitions):
            templates = [decode_template(r.text, r.cur, seq, layout) for r in records]
            scorers = [scorer_factory(t) for t in templates]
            wall = 0.0
            committed = 0
            rep_passes = []
            for i, (scorer, template) in enumerate(zip(scorers, templates)):
                cfg_i = DecodeConfig(
                    steps=cfg.steps, temp_hi=cfg.temp_hi, temp_lo=cfg.temp_lo,
                    seed=cfg.seed + i, decoder=cfg.decoder,
                )
                t0 = time.perf_counter()
                res = run_decoder(scorer, template, seq, layout, cfg_i)
                wall += time.perf_counter() - t0
                committed += res.committed_total
                rep_passes.append(res.forward_passes)
            if rep >= warmup:
                per_rep.append(committed / wall)
                passes = rep_passes
                committed_total = committed
    return ThroughputRow(
        kind=decoder,
        tokens_per_s=statistics.median(per_rep),
        committed_per_decode=committed_total / len(records),
        forward_passes=passes,
        wall_s=committed_total / statistics.median(per_rep),
        reps=repetitions,
    )


def decoder_comparison(
    diffusion_model: TransformerModel,
    ar_model: TransformerModel,
    records: list[Record],
    seq: SequenceLayout,
    layout: VocabLayout,
    decode_cfg: DecodeConfig,
    repetitions: int = 3,
) -> BenchReport:
    """Four rows: jd3p and independent on the hybrid denoiser; ar and jacobi
    on the causal next-token model."""
    hyb_mask = build_mask(diffusion_model.cfg.scheme, seq)
    ar_mask = build_mask("causal", seq)
    rows = []
    for kind, model, mask in (
        ("jd3p", diffusion_model, hyb_mask),
        ("independent", diffusion_model, hyb_mask),
        ("jacobi", ar_model, ar_mask),
        ("ar", ar_model, ar_mask),
    ):
        factory = model_scorer_factory(model, mask, seq)
        quality = eval_success(factory, records, seq, layout,
                               DecodeConfig(steps=decode_cfg.steps, seed=decode_cfg.seed, decoder=kind))
        speed = measure_throughput(kind, factory, records, seq, layout, decode_cfg, repetitions)
        rows.append(
            {
                "decoder": kind,
                "exact_match": quality.exact_match,
                "image_acc": quality.image_accuracy,
                "tokens_per_s": speed.tokens_per_s,
                "steps": decode_cfg.steps,
                "mean_forward_passes": float(np.mean(speed.forward_passes)),
            }
        )
    order = {"jd3p": 0, "independent": 1, "jacobi": 2, "ar": 3}
    rows.sort(key=lambda r: order[r["decoder"]])
    return BenchReport("decoder comparison", rows, environment_fingerprint(decode_cfg.seed))


def ablation(
    axis: str,
    dataset_path: str,
    out_dir: str,
    seeds=(0, 1, 2),
    train_overrides: dict | None = None,
    eval_episodes: int = 100,
    decode_steps: int = 8,
) -> BenchReport:
    """Train one model per (variant, seed) cell and evaluate exact-match.

    axis='attention' varies the attention scheme {hybrid, causal,
    bidirectional}; axis='visual-target' varies what the generation block
    predicts {none, current, future}. Cells train stage 2 from scratch at
    equal budget so orderings are comparable.
    """
    from jointdiff.train import TrainConfig, run  # deferred: bench <-> train
    from jointdiff.model import ModelConfig
    from jointdiff.toyworld import dataset_read

    if axis == "attention":
        variants = [("hybrid", {}), ("causal", {}), ("bidirectional", {})]
        vary = "scheme"
    elif axis == "visual-target":
        variants = [("none", {}), ("current", {}), ("future", {})]
        vary = "future_source"
    else:
        raise InputError(f"unknown ablation axis {axis!r} (expected attention or visual-target)")

    overrides = dict(train_overrides or {})
    model_overrides = overrides.pop("model", {})
    rows = []
    for name, _ in variants:
        for seed in seeds:
            mc = dict(model_overrides)
            if vary == "scheme":
                mc["scheme"] = name
            mcfg = ModelConfig(init_seed=seed, **mc)
            tcfg = TrainConfig(
                stage=2,
                from_scratch=True,
                seed=seed,
                dataset=dataset_path,
                out_dir=os.path.join(out_dir, f"{axis}-{name}-s{seed}"),
                model=mcfg,
                future_source=name if vary == "future_source" else "future",
                decode_steps=decode_steps,
                **overrides,
            )
            run(tcfg)
            ds = dataset_read(dataset_path)
            seq = ds.cfg.sequence_layout(tcfg.future_source)
            from jointdiff.model import load_model

            model, layout, seq_ck, _, _ = load_model(os.path.join(tcfg.out_dir, "best.ckpt"))
            mask = build_mask(model.cfg.scheme, seq_ck)
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0xEBA1]))
            idx = rng.choice(len(ds.records), size=min(eval_episodes, len(ds.records)), replace=False)
            recs = [ds.records[int(i)] for i in idx]
            outcome = eval_success(
                model_scorer_factory(model, mask, seq_ck),
                recs,
                seq_ck,
                layout,
                DecodeConfig(steps=decode_steps, seed=seed, decoder="jd3p"),
            )
            rows.append(
                {
                    "axis": axis,
                    "variant": name,
                    "seed": seed,
                    "exact_match": outcome.exact_match,
                    "image_acc": outcome.image_accuracy,
                }
            )
    # append per-variant means
    for name, _ in variants:
        vals = [r["exact_match"] for r in rows if r["variant"] == name and "mean" not in str(r["seed"])]
        rows.append(
            {"axis": axis, "variant": name, "seed": "mean", "exact_match": float(np.mean(vals)), "image_acc": ""}
        )
    return BenchReport(f"{axis} ablation", rows, environment_fingerprint(list(seeds)))


def stage_init_comparison(
    stage1_dataset: str,
    stage2_dataset: str,
    out_dir: str,
    seeds=(0, 1, 2),
    train_overrides: dict | None = None,
    eval_episodes: int = 100,
) -> BenchReport:
    """Reported (non-gating) property: stage-2-from-stage-1 vs from-scratch
    at equal stage-2 step budget."""
    from jointdiff.train import TrainConfig, run
    from jointdiff.model import ModelConfig, load_model
    from jointdiff.toyworld import dataset_read

    overrides = dict(train_overrides or {})
    model_overrides = overrides.pop("model", {})
    stage1_epochs = overrides.pop("stage1_epochs", 2)
    rows = []
    for seed in seeds:
        mcfg = ModelConfig(init_seed=seed, **model_overrides)
        s1 = TrainConfig(
            stage=1, seed=seed, dataset=stage1_dataset,
            out_dir=os.path.join(out_dir, f"s1-s{seed}"), model=mcfg,
            epochs=stage1_epochs, **{k: v for k, v in overrides.items() if k != "epochs"},
        )
        run(s1)
        for variant, init in (("from_stage1", os.path.join(s1.out_dir, "latest.ckpt")), ("from_scratch", None)):
            tcfg = TrainConfig(
                stage=2, seed=seed, dataset=stage2_dataset,
                out_dir=os.path.join(out_dir, f"s2-{variant}-s{seed}"),
                model=mcfg, init_from=init, from_scratch=init is None,
                **overrides,
            )
            run(tcfg)
            model, layout, seq, _, _ = load_model(os.path.join(tcfg.out_dir, "best.ckpt"))
            mask = build_mask(model.cfg.scheme, seq)
            ds = dataset_read(stage2_dataset)
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51A6]))
            idx = rng.choice(len(ds.records), size=min(eval_episodes, len(ds.records)), replace=False)
            recs = [ds.records[int(i)] for i in idx]
            outcome = eval_success(
                model_scorer_factory(model, mask, seq), recs, seq, layout,
                DecodeConfig(steps=8, seed=seed, decoder="jd3p"),
            )
            rows.append({"variant": variant, "seed": seed, "exact_match": outcome.exact_match})
    return BenchReport("stage-initialization comparison", rows, environment_fingerprint(list(seeds)))
