"""Command-line entry point: ``tgaloc {synth,train,eval,localize,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import dataio, embedding_loss, nn_core, retrieval_eval, tga, trainer

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _int_list(text):
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _float_list(text):
    try:
        out = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not out:
        raise argparse.ArgumentTypeError("empty list")
    return out


def _print_config(command, cfg: dict):
    print(json.dumps({"command": command, **cfg}, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise dataio.ConfigError(f"cannot read synthetic config {args.config}: {e}") from e
    if args.seed is not None:
        raw["seed"] = args.seed
    config = dataio.SyntheticConfig.from_dict(raw)
    _print_config("synth", {"config": config.to_dict(), "seed": config.seed, "out": args.out})
    manifest = dataio.generate_synthetic(config, args.out)
    n_videos = len(manifest.videos)
    planted = sum(1 for q in manifest.queries if q.gt_moment is not None)
    for split in dataio.SPLITS:
        print(f"split {split}: {sum(1 for v in manifest.videos if v.video_id.startswith(split + '_'))} videos, "
              f"{len(manifest.split(split))} queries")
    print(f"planted moments: {planted} ({config.moments_per_video} per video x {n_videos} videos)")
    return EXIT_OK


def cmd_train(args):
    config = trainer.TrainConfig(
        lr=args.lr, lr_decay_every=args.lr_decay_every, lr_decay_factor=args.lr_decay_factor,
        margin=args.margin, batch_size=args.batch, max_epochs=args.epochs, seed=args.seed,
        text_dim=args.text_dim, joint_dim=args.joint_dim, word_dim=args.word_dim, dropout=args.dropout,
        strict_batch_negatives=args.strict_batch_negatives, bidirectional_val=args.bidirectional_val,
    )
    try:
        config.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    _print_config("train", {"data": args.data, "out": args.out, **vars(config)})
    manifest = dataio.load_manifest(args.data)

    def report(rec):
        print(f"epoch {rec.epoch:3d} lr={rec.lr:.6g} loss={rec.mean_loss:.6f} "
              f"val_recall_sum={rec.val_recall_sum:.4f}", flush=True)

    result = trainer.train(manifest, config, report)
    trainer.write_run(result, args.out)
    print(f"best epoch: {result.log.best_epoch}")
    return EXIT_OK


def _load_params(path):
    try:
        tensors = dataio.load_checkpoint(path)
    except OSError as e:
        raise dataio.FormatError(f"cannot read checkpoint {path}: {e}") from e
    try:
        return nn_core.params_from_tensors(tensors)
    except (KeyError, ValueError) as e:
        raise dataio.FormatError(f"{path}: {e}") from e


def cmd_eval(args):
    _print_config("eval", {**vars(args), "func": None})
    manifest = dataio.load_manifest(args.data)
    params = _load_params(args.ckpt)
    rng = np.random.default_rng(args.seed) if args.shuffle_scores else None
    report = retrieval_eval.evaluate(
        params, manifest, split=args.split, protocol=args.protocol, iou_thresholds=tuple(args.iou),
        ks=tuple(args.k), windows=tuple(args.windows), stride=args.stride, use_sum=args.score_sum,
        shuffle_rng=rng,
    )
    if manifest.split("val"):
        val = trainer.validate_split(params, manifest, "val", bidirectional=args.bidirectional_val)
        report.extra["val_recall_sum"] = val.recall_sum
        report.extra["val_recalls"] = val.recalls
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    retrieval_eval.write_report_json(report, out / "report.json")
    retrieval_eval.write_report_csv(report, out / "report.csv")
    print(f"protocol={args.protocol} split={args.split} queries={len(report.queries)}")
    print(report.table())
    if "val_recall_sum" in report.extra:
        print(f"val_recall_sum={report.extra['val_recall_sum']!r}")
    return EXIT_OK


def cmd_localize(args):
    _print_config("localize", {**vars(args), "func": None})
    manifest = dataio.load_manifest(args.data)
    params = _load_params(args.ckpt)
    if args.query_id is not None:
        query = manifest.query(args.query_id)
    else:
        if args.text is None or args.video_id is None:
            raise UsageError("give --query-id, or --text together with --video-id")
        query = SimpleNamespace(query_id="text", video_id=args.video_id,
                                tokens=dataio.tokenize(args.text, manifest.vocabulary()))
    video = manifest.load_video(query.video_id)
    ranked, trace = retrieval_eval.localize(params, query, video, args.protocol, tuple(args.windows),
                                            args.stride, args.score_sum)
    sec = video.unit_duration_frames / args.fps
    print(f"query {query.query_id} on video {video.video_id} ({video.num_units} units, {len(ranked)} candidates)")
    print("rank start_unit end_unit score start_s end_s")
    for r, c in enumerate(ranked[:args.top], 1):
        print(f"{r} {c.start_unit} {c.end_unit} {c.score:.6f} {c.start_unit * sec:.2f} {c.end_unit * sec:.2f}")
    if args.dump_trace:
        if str(args.dump_trace).endswith(".csv"):
            tga.write_trace_csv(trace, args.dump_trace)
        else:
            tga.write_traces_jsonl([trace], args.dump_trace)
        print(f"trace written to {args.dump_trace}")
    return EXIT_OK


def gradcheck_setup(seed):
    """Small random model (T=8, D=8, V=12, vocab 20) and a 3-pair batch, 64-bit."""
    rng = np.random.default_rng(seed)
    params = nn_core.init_params(20, 12, rng, text_dim=8, joint_dim=8, word_dim=10, dtype=np.float64)
    # larger embeddings and nonzero biases keep every nonlinearity off its flat regions
    params["emb"] = rng.normal(0.0, 0.5, size=params["emb"].shape)
    for name in ("gru.bz", "gru.br", "gru.bh", "fc.b"):
        params[name] = rng.normal(0.0, 0.1, size=params[name].shape)
    batch = []
    for i in range(3):
        units = rng.normal(size=(int(rng.integers(4, 7)), 12))
        tokens = tuple(int(t) for t in rng.integers(0, 20, size=int(rng.integers(2, 6))))
        batch.append((units, trainer.TrainingPair(f"q{i}", f"v{i}", tokens)))
    return params, batch


def run_gradcheck(seed=0, tolerance=1e-4, margin=0.5):
    params, batch = gradcheck_setup(seed)

    def probe(p):
        return embedding_loss.batch_forward(batch, p, margin, train=False)

    return nn_core.grad_check(probe, params, step=1e-5, tolerance=tolerance, seed=seed)


def cmd_gradcheck(args):
    _print_config("gradcheck", {"seed": args.seed, "tolerance": args.tolerance})
    report = run_gradcheck(args.seed, args.tolerance)
    print(report)
    if not report.passed:
        print(f"gradcheck failed: worst tensor {report.worst} "
              f"(max relative error {report.max_rel_error[report.worst]:.3e})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="tgaloc", description="Weakly supervised moment retrieval with text-guided attention.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset with planted moments")
    s.add_argument("--config", required=True, help="synthetic config JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None, help="override the config seed")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on the train split, select by val recall sum")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lr-decay-every", type=int, default=15)
    t.add_argument("--lr-decay-factor", type=float, default=10.0)
    t.add_argument("--margin", type=float, default=0.1)
    t.add_argument("--batch", type=int, default=128)
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--text-dim", type=int, default=nn_core.DEFAULT_TEXT_DIM)
    t.add_argument("--joint-dim", type=int, default=nn_core.DEFAULT_JOINT_DIM)
    t.add_argument("--word-dim", type=int, default=nn_core.DEFAULT_WORD_DIM)
    t.add_argument("--dropout", type=float, default=nn_core.DEFAULT_DROPOUT)
    t.add_argument("--strict-batch-negatives", action="store_true",
                   help="treat same-video entries as negatives too")
    t.add_argument("--bidirectional-val", action="store_true", help="add video-to-text recalls")
    t.set_defaults(func=cmd_train)

    def add_candidate_flags(q):
        q.add_argument("--protocol", choices=retrieval_eval.PROTOCOLS, default="sliding_window")
        q.add_argument("--windows", type=_int_list, default=[128, 256], help="window lengths in frames")
        q.add_argument("--stride", type=float, default=0.5, help="stride as a fraction of the window")
        q.add_argument("--score-sum", action="store_true", help="rank by summed instead of mean attention")

    e = sub.add_parser("eval", help="R@K x IoU and mIoU on a split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    add_candidate_flags(e)
    e.add_argument("--iou", type=_float_list, default=[0.3, 0.5, 0.7])
    e.add_argument("--k", type=_int_list, default=[1, 5, 10])
    e.add_argument("--split", choices=dataio.SPLITS, default="test")
    e.add_argument("--out", default=".", help="directory for report.json and report.csv")
    e.add_argument("--shuffle-scores", action="store_true", help="random scores (baseline)")
    e.add_argument("--seed", type=int, default=0, help="seed for --shuffle-scores")
    e.add_argument("--bidirectional-val", action="store_true")
    e.set_defaults(func=cmd_eval)

    lz = sub.add_parser("localize", help="rank moments for one query")
    lz.add_argument("--data", required=True)
    lz.add_argument("--ckpt", required=True)
    lz.add_argument("--query-id")
    lz.add_argument("--text", help="whitespace-tokenized sentence (with --video-id)")
    lz.add_argument("--video-id")
    lz.add_argument("--top", type=int, default=5)
    lz.add_argument("--dump-trace", help="write the attention trace (JSON lines, or CSV if *.csv)")
    lz.add_argument("--fps", type=float, default=25.0, help="frame rate for the seconds display only")
    add_candidate_flags(lz)
    lz.set_defaults(func=cmd_localize)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ValueError) as e:
        print(f"tgaloc: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (dataio.DataError, OSError) as e:
        print(f"tgaloc: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except nn_core.NumericError as e:
        print(f"tgaloc: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
