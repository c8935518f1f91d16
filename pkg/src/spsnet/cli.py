"""Command line entry point: gen-data, train, eval, infer, ablate, track."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .body import make_default_body
from .data import Dataset, load_dataset, make_corpus, save_dataset
from .trainer import (SPSNet, TrainConfig, TrainState, ablation_cells, ablation_table, evaluate, heldout_corpus, infer,
                      load_checkpoint, load_config, run_ablation, save_checkpoint, train,
                      write_loss_log, write_prediction)
from .tracking import read_detections, track_detections, write_tracks

log = logging.getLogger("spsnet")


def cmd_gen_data(args) -> int:
    body = make_default_body(args.body_seed)
    seqs = make_corpus(body, args.seed, args.sequences, args.length, args.res, args.res)
    save_dataset(Dataset.from_body(body, seqs), args.out)
    log.info("wrote %d sequences of %d frames to %s", args.sequences, args.length, args.out)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    body = make_default_body(cfg.body_seed)
    corpus = load_dataset(args.data).sequences if args.data else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        state = load_checkpoint(args.resume, body)
        if state.model.cfg.hash() != cfg.replace(steps=state.model.cfg.steps).hash():
            log.warning("resuming with a config that differs from the checkpoint's")
    else:
        state = TrainState(SPSNet(cfg.validate(), body))
    t0 = time.perf_counter()
    flushed = 0

    def progress(step, values):
        nonlocal flushed
        if step % args.log_every == 0 or step == cfg.steps:
            log.info("step %d total %.4g (%.0fs)", step, values["total"], time.perf_counter() - t0)
            write_loss_log(state.log[flushed:], out / "losses.csv")
            flushed = len(state.log)

    train(cfg, corpus, body, state, progress=progress)
    write_loss_log(state.log[flushed:], out / "losses.csv")
    save_checkpoint(state, out / "model.ckpt")
    (out / "config.txt").write_text(cfg.to_text())
    log.info("saved %s", out / "model.ckpt")
    return 0


def _eval_sequences(args, cfg, body):
    if args.data:
        return load_dataset(args.data).sequences
    return heldout_corpus(cfg, body)


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    seqs = _eval_sequences(args, state.model.cfg, state.model.body)
    report = evaluate(state.model, seqs, args.occluded_seed)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_csv())
    return 0


def cmd_infer(args) -> int:
    state = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    seq = ds.sequences[args.index]
    pred = infer(state.model, seq.silhouettes, seq.joints2d, seq.visibility)
    write_prediction(pred, state.model.body, args.out, args.obj_every)
    print(f"{len(pred.joints)} frames written to {args.out}" + (" (padded window)" if pred.padded else ""))
    return 0


def cmd_ablate(args) -> int:
    base = load_config(args.config) if args.config else TrainConfig()
    if args.steps is not None:
        base = base.replace(steps=args.steps)
    cells = ablation_cells(base)
    if args.cells:
        wanted = args.cells.split(",")
        cells = {k: v for k, v in cells.items() if k in wanted}
    body = make_default_body(base.body_seed)
    corpus = make_corpus(body, base.data_seed, base.train_sequences, base.sequence_length, base.H, base.W)
    held = heldout_corpus(base, body)
    seeds = [int(s) for s in args.seeds.split(",")]
    results = run_ablation(cells, seeds, held, corpus=corpus, body=body,
                           progress=lambda n, s, c, o: log.info("%s seed %d: %.2f / %.2f", n, s, c, o))
    print(ablation_table(results))
    return 0


def cmd_track(args) -> int:
    rows = track_detections(read_detections(args.detections), args.min_iou, args.max_misses)
    write_tracks(args.out, rows)
    print(f"{len({r[1] for r in rows})} tracks over {len(rows)} boxes")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spsnet", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic motion corpus")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--sequences", type=int, required=True)
    g.add_argument("--length", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--body-seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a key=value config")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset file; generated from the config when omitted")
    t.add_argument("--out", default="run")
    t.add_argument("--steps", type=int)
    t.add_argument("--resume")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data")
    e.add_argument("--occluded-seed", type=int)
    e.add_argument("--out", help="CSV report path")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="per-frame meshes, joints and cameras for one sequence")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--out", required=True)
    i.add_argument("--obj-every", type=int, default=1)
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("ablate", help="train and compare ablation cells")
    a.add_argument("--config")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--steps", type=int)
    a.add_argument("--cells", help="comma-separated subset of cell names")
    a.set_defaults(func=cmd_ablate)

    k = sub.add_parser("track", help="associate detection boxes across frames")
    k.add_argument("--detections", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--min-iou", type=float, default=0.3)
    k.add_argument("--max-misses", type=int, default=5)
    k.set_defaults(func=cmd_track)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
