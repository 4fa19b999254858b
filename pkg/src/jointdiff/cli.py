"""Command-line surface: data generation, training, decoding, evaluation,
benchmarking, and artifact inspection.

Every subcommand prints its fully resolved configuration as one
``config: {...}`` line before acting, so any run can be reproduced from its
output. Exit codes: 0 success, 1 usage error, 2 data/contract error.
Decode runs are pinned to one BLAS thread so transcripts are bit-stable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from jointdiff import bench as bench_mod
from jointdiff import train as train_mod
from jointdiff.decode import DECODER_KINDS, DecodeConfig, decode_template, run_decoder
from jointdiff.errors import ConfigError, ContractError, DecodeFailure, FormatError, InputError
from jointdiff.model import ModelConfig, SuffixScorer, build_mask, load_checkpoint, load_model
from jointdiff.toyworld import (
    Dataset,
    WorldConfig,
    action_names,
    dataset_read,
    dataset_write,
    generate_records,
    read_header,
    text_art,
)

DATA_ERRORS = (InputError, ConfigError, ContractError, FormatError, DecodeFailure)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _print_config(name: str, cfg: dict) -> None:
    print(f"config: {json.dumps({'command': name, **cfg}, sort_keys=True)}")


def _data_dir_default() -> str:
    return os.environ.get("JOINTDIFF_DATA_DIR", ".")


def _add_world_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--grid", type=int, default=6, help="grid side length")
    p.add_argument("--colors", type=int, default=3, help="number of goal colors")
    p.add_argument("--max-actions", type=int, default=10)


def _world_from_args(args) -> WorldConfig:
    return WorldConfig(width=args.grid, height=args.grid, n_colors=args.colors, max_actions=args.max_actions)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--scheme", choices=("hybrid", "causal", "bidirectional"), default="hybrid")


def build_parser() -> _Parser:
    p = _Parser(prog="jointdiff", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[], help="generate a JSONL episode corpus")
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None, help="output path (default <data-dir>/<kind>.jsonl)")
    g.add_argument("--stage1", action="store_true", help="emit video-style records (image pairs, no actions)")
    _add_world_flags(g)

    t = sub.add_parser("train", help="train stage 1 or stage 2")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory for checkpoints + metrics")
    t.add_argument("--epochs", type=int, default=6)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--beta-weight", type=float, default=4.0)
    t.add_argument("--rho-min", type=float, default=0.05)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--init-from", default=None, help="stage-1 checkpoint for stage-2 runs")
    t.add_argument("--from-scratch", action="store_true", help="allow stage 2 without a stage-1 checkpoint")
    t.add_argument("--objective", choices=("diffusion", "ntp"), default="diffusion")
    t.add_argument("--future-source", choices=("future", "current", "none"), default="future")
    t.add_argument("--resume", action="store_true")
    _add_model_flags(t)

    d = sub.add_parser("decode", help="decode one episode and print the result")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--index", type=int, default=0, help="episode index within the dataset")
    d.add_argument("--decoder", choices=DECODER_KINDS, default="jd3p")
    d.add_argument("--steps", type=int, default=8)
    d.add_argument("--temp-hi", type=float, default=1.0)
    d.add_argument("--temp-lo", type=float, default=0.1)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--no-cache", action="store_true", help="recompute the prompt every step")
    d.add_argument("--trace-json", default=None, help="dump the per-step trace to this path")

    e = sub.add_parser("eval", help="success metrics over held-out episodes")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--episodes", type=int, default=500)
    e.add_argument("--decoder", choices=DECODER_KINDS, default="jd3p")
    e.add_argument("--steps", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--json", action="store_true")

    b = sub.add_parser("bench", help="decoder throughput comparison or ablation tables")
    b.add_argument("--axis", choices=("decoders", "attention", "visual-target"), default="decoders")
    b.add_argument("--ckpt", default=None, help="hybrid denoiser checkpoint (decoders axis)")
    b.add_argument("--ar-ckpt", default=None, help="causal next-token checkpoint (decoders axis)")
    b.add_argument("--data", required=True)
    b.add_argument("--episodes", type=int, default=50)
    b.add_argument("--steps", type=int, default=8)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--out-dir", default=None, help="work directory for ablation training runs")
    b.add_argument("--train-epochs", type=int, default=3, help="per-cell epochs for ablation axes")
    b.add_argument("--json", action="store_true")
    b.add_argument("--csv", default=None, help="also write the table to this CSV path")

    i = sub.add_parser("inspect", help="dump a dataset or checkpoint header")
    i.add_argument("path")

    return p


def cmd_gen_data(args) -> int:
    cfg = _world_from_args(args)
    kind = "stage1" if args.stage1 else "episodes"
    out = args.out or os.path.join(_data_dir_default(), f"{kind}.jsonl")
    _print_config("gen-data", {"episodes": args.episodes, "seed": args.seed, "out": out,
                               "kind": kind, "world": cfg.to_json()})
    records = generate_records(cfg, args.episodes, args.seed, stage1=args.stage1)
    dataset_write(out, Dataset(cfg, cfg.layout(), kind, records))
    print(f"wrote {len(records)} records to {out}")
    return 0


def cmd_train(args) -> int:
    mcfg = ModelConfig(layers=args.layers, heads=args.heads, width=args.width,
                       scheme=args.scheme, init_seed=args.seed)
    tcfg = train_mod.TrainConfig(
        stage=args.stage, epochs=args.epochs, batch_size=args.batch, lr=args.lr,
        beta_weight=args.beta_weight, rho_min=args.rho_min, seed=args.seed,
        dataset=args.data, out_dir=args.out, init_from=args.init_from,
        from_scratch=args.from_scratch, objective=args.objective,
        model=mcfg, future_source=args.future_source,
    )
    _print_config("train", tcfg.to_json())
    result = train_mod.run(tcfg, resume=args.resume)
    last_val = [m for m in result.metrics if m.split == "val"][-1]
    em = "" if last_val.act_exact_match is None or np.isnan(last_val.act_exact_match) else f" em={last_val.act_exact_match:.3f}"
    print(f"done: {result.epochs_run} epochs, val loss {last_val.loss:.4f}{em}")
    print(f"checkpoints: {result.latest_path} (latest), {result.best_path} (best)")
    return 0


def cmd_decode(args) -> int:
    from threadpoolctl import threadpool_limits

    model, layout, seq, header, _ = load_model(args.ckpt)
    ds = dataset_read(args.data, expect_layout=layout)
    if not (0 <= args.index < len(ds.records)):
        raise InputError(f"index {args.index} outside dataset of {len(ds.records)} records")
    rec = ds.records[args.index]
    dcfg = DecodeConfig(steps=args.steps, temp_hi=args.temp_hi, temp_lo=args.temp_lo,
                        seed=args.seed, decoder=args.decoder)
    _print_config("decode", {"ckpt": args.ckpt, "data": args.data, "index": args.index,
                             "use_cache": not args.no_cache, **dcfg.to_json()})
    scheme = "causal" if args.decoder in ("ar", "jacobi") else model.cfg.scheme
    mask = build_mask(scheme, seq)
    template = decode_template(rec.text, rec.cur, seq, layout)
    with threadpool_limits(limits=1):
        scorer = SuffixScorer(model, mask, template[: seq.prompt_len], use_cache=not args.no_cache)
        res = run_decoder(scorer, template, seq, layout, dcfg)

    print("current grid:")
    print(text_art(rec.cur, ds.cfg, layout))
    print("decoded future grid:")
    print(text_art(res.image_ids, ds.cfg, layout))
    if rec.fut is not None:
        agree = int(np.sum(np.asarray(res.image_ids) == np.asarray(rec.fut)))
        print(f"future tokens matching ground truth: {agree}/{len(rec.fut)}")
    moves = action_names(res.action_ids, layout)
    print(f"actions: {' '.join(moves) if moves else '(none)'}"
          + (" [no EOA committed; capped at max length]" if res.eoa_fallback else ""))
    if rec.act is not None:
        print(f"ground-truth actions: {' '.join(action_names(rec.act, layout)) or '(none)'}")
        print(f"exact match: {'yes' if not res.eoa_fallback and res.action_ids == list(rec.act) else 'no'}")
    print(f"committed {res.committed_total} tokens in {res.forward_passes} forward passes")
    for step in res.trace:
        print(
            f"  t={step.t} rho={step.rho:.5f} kappa={step.kappa:.3f} "
            f"masked={step.masked_before} committed={len(step.committed_positions)}"
            + (f" eoa_slot={step.eoa_slot}" if step.eoa_slot is not None else "")
        )
    if args.trace_json:
        with open(args.trace_json, "w") as f:
            json.dump(res.to_json(), f, indent=2, sort_keys=True)
        print(f"trace written to {args.trace_json}")
    return 0


def cmd_eval(args) -> int:
    model, layout, seq, _, _ = load_model(args.ckpt)
    ds = dataset_read(args.data, expect_layout=layout)
    dcfg = DecodeConfig(steps=args.steps, seed=args.seed, decoder=args.decoder)
    _print_config("eval", {"ckpt": args.ckpt, "data": args.data, "episodes": args.episodes, **dcfg.to_json()})
    scheme = "causal" if args.decoder in ("ar", "jacobi") else model.cfg.scheme
    mask = build_mask(scheme, seq)
    recs = ds.records[: args.episodes]
    outcome = bench_mod.eval_success(
        bench_mod.model_scorer_factory(model, mask, seq), recs, seq, layout, dcfg
    )
    payload = {
        "decoder": args.decoder,
        "episodes": outcome.n_episodes,
        "exact_match": outcome.exact_match,
        "image_accuracy": outcome.image_accuracy,
        "fallbacks": outcome.fallbacks,
    }
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(f"exact-match {outcome.exact_match:.4f}  image-acc {outcome.image_accuracy:.4f} "
              f"over {outcome.n_episodes} episodes ({outcome.fallbacks} fallbacks)")
    return 0


def cmd_bench(args) -> int:
    _print_config("bench", {"axis": args.axis, "ckpt": args.ckpt, "ar_ckpt": args.ar_ckpt,
                            "data": args.data, "episodes": args.episodes, "steps": args.steps,
                            "seed": args.seed, "reps": args.reps})
    if args.axis == "decoders":
        if not args.ckpt or not args.ar_ckpt:
            raise InputError("decoders axis needs --ckpt (hybrid) and --ar-ckpt (causal)")
        model, layout, seq, _, _ = load_model(args.ckpt)
        ar_model, ar_layout, ar_seq, _, _ = load_model(args.ar_ckpt)
        if ar_layout != layout:
            raise FormatError("the two checkpoints disagree on the vocabulary layout")
        ds = dataset_read(args.data, expect_layout=layout)
        recs = ds.records[: args.episodes]
        report = bench_mod.decoder_comparison(
            model, ar_model, recs, seq, layout,
            DecodeConfig(steps=args.steps, seed=args.seed), repetitions=args.reps,
        )
    else:
        out_dir = args.out_dir or os.path.join(_data_dir_default(), f"ablation-{args.axis}")
        report = bench_mod.ablation(
            args.axis, args.data, out_dir,
            train_overrides={"epochs": args.train_epochs},
            decode_steps=args.steps,
        )
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(report.to_csv())
    print(report.to_json() if args.json else report.to_text())
    return 0


def cmd_inspect(args) -> int:
    _print_config("inspect", {"path": args.path})
    with open(args.path, "rb") as f:
        magic = f.read(4)
    if magic == b"JDCK":
        header, arrays = load_checkpoint(args.path)
        print(json.dumps(header, indent=2, sort_keys=True))
        print(f"tensors: {len(arrays)}")
        for name, arr in list(arrays.items())[:8]:
            print(f"  {name}: {list(arr.shape)} {arr.dtype}")
        if len(arrays) > 8:
            print(f"  ... {len(arrays) - 8} more")
    else:
        header = read_header(args.path)
        print(json.dumps(header, indent=2, sort_keys=True))
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return HANDLERS[args.command](args)
    except DATA_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
