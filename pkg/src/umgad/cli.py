"""Command-line entry point.

Subcommands: inject, train, score, detect, eval, curve. Exit codes: 0 on
success, 1 on usage/config errors, 2 on data errors, 3 on numerical errors.
Every run prints the fully resolved configuration first.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import config as cfgmod
from . import detect as dt
from .autodiff import RngStream
from .errors import (
    DATA_ERRORS,
    NUMERICAL_ERRORS,
    USAGE_ERRORS,
    LengthMismatch,
)
from .graph import load_multiplex, save_multiplex, zscore_attributes, _read_labels
from .train import checkpoint_meta, load_checkpoint, save_checkpoint
from .train import train as run_training


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_common(sub):
    sub.add_argument("--config", help="INI config file")
    sub.add_argument("--set", action="append", default=[], metavar="S.K=V",
                     help="override a config key (repeatable)")
    sub.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = _Parser(prog="umgad", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("inject", help="plant benchmark anomalies")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-struct", type=int, default=3)
    p.add_argument("--clique-size", type=int, default=5)
    p.add_argument("--n-attr", type=int, default=10)
    p.add_argument("--candidate-pool", type=int, default=50)
    p.set_defaults(func=_cmd_inject)

    p = subs.add_parser("train", help="train a model")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="write per-epoch loss CSV here")
    p.add_argument("--zscore", action="store_true",
                   help="z-score each attribute column first")
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap for branch fan-out")
    p.add_argument("--dump-plans", help="write first-epoch plans here")
    p.set_defaults(func=_cmd_train)

    p = subs.add_parser("score", help="write per-node anomaly scores")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--score-seed", type=int, default=None)
    p.add_argument("--top-k", type=int, default=None,
                   help="flag a fixed count instead of none")
    p.set_defaults(func=_cmd_score)

    p = subs.add_parser("detect", help="score plus knee-point flagging")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--curve", help="write the ranked-score curve here")
    p.add_argument("--score-seed", type=int, default=None)
    p.add_argument("--top-k", type=int, default=None,
                   help="flag a fixed count instead of the knee")
    p.set_defaults(func=_cmd_detect)

    p = subs.add_parser("eval", help="AUC / macro-F1 of a scores file")
    _add_common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", required=True)
    p.set_defaults(func=_cmd_eval)

    p = subs.add_parser("curve", help="ranked-score curve from a scores file")
    _add_common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_curve)

    return parser


def _resolved(args):
    cfg = cfgmod.resolve_config(args.config, args.set)
    sys.stdout.write(cfgmod.format_resolved(cfg))
    sys.stdout.flush()
    return cfg


def _cmd_inject(args):
    cfg = _resolved(args)
    del cfg
    g = load_multiplex(args.manifest)
    injected, labels = dt.inject_anomalies(
        g, args.n_struct, args.clique_size, args.n_attr,
        RngStream(args.seed, "inject"), candidate_pool=args.candidate_pool)
    manifest = save_multiplex(injected, args.out_dir, stem="injected")
    print(f"manifest={manifest}")
    print(f"anomalies={int(labels.sum())}")
    return 0


def _cmd_train(args):
    cfg = _resolved(args)
    if args.threads is not None:
        cfg["train"]["threads"] = max(1, args.threads)
    g = load_multiplex(args.manifest)
    if args.zscore:
        g = zscore_attributes(g)
    model_cfg, weights, mask_cfg, rwr_cfg = cfgmod.build_all(cfg)
    train_cfg = cfgmod.train_config(cfg, seed=args.seed)
    params, log, optimizer = run_training(
        g, model_cfg, train_cfg, weights, mask_cfg, rwr_cfg,
        dump_plans_path=args.dump_plans)
    meta = checkpoint_meta(params, train_cfg, mask_cfg, rwr_cfg, weights,
                              extra={"zscore": bool(args.zscore)})
    save_checkpoint(params, args.out, optimizer=optimizer, meta=meta)
    if args.log:
        log.to_csv(args.log)
    print(f"checkpoint={args.out}")
    print(f"final_loss={log.rows[-1]['total']!r}")
    return 0


def _load_for_scoring(args):
    params, meta, _ = load_checkpoint(args.ckpt)
    g = load_multiplex(args.manifest)
    if meta.get("zscore"):
        g = zscore_attributes(g)
    weights = cfgmod.loss_weights(
        {"loss": {**cfgmod.DEFAULTS["loss"], **_renamed(meta.get("loss"))}})
    mask_cfg = (cfgmod.mask_config({"mask": meta["mask"]})
                if "mask" in meta else None)
    rwr_cfg = (cfgmod.rwr_config({"rwr": meta["rwr"]})
               if "rwr" in meta else None)
    no_mask = bool(meta.get("train", {}).get("no_mask", False))
    seed = args.score_seed if args.score_seed is not None else args.seed
    scores = dt.score_nodes(g, params, weights, RngStream(seed, "score"),
                            mask_cfg=mask_cfg, rwr_cfg=rwr_cfg,
                            no_mask=no_mask)
    return g, scores


def _renamed(loss_meta):
    if not loss_meta:
        return {}
    out = dict(loss_meta)
    if "lam" in out:
        out["lambda"] = out.pop("lam")
    return out


def _cmd_score(args):
    _resolved(args)
    _, scores = _load_for_scoring(args)
    if args.top_k is not None:
        flags = dt.classify(scores.fused, top_k=args.top_k)
    else:
        flags = np.zeros(scores.fused.size, dtype=np.int64)
    dt.write_scores_csv(args.out, scores, flags)
    print(f"scores={args.out}")
    return 0


def _cmd_detect(args):
    cfg = _resolved(args)
    _, scores = _load_for_scoring(args)
    top_k = args.top_k
    if top_k is None and cfg["detect"]["top_k"] > 0:
        top_k = cfg["detect"]["top_k"]
    if top_k is not None:
        flags = dt.classify(scores.fused, top_k=top_k)
        print(f"method=top_k\nflagged={int(flags.sum())}")
    else:
        result = dt.select_threshold(scores.fused)
        flags = dt.classify(scores.fused, threshold_result=result)
        print(f"method={result.method}")
        print(f"knee_index={result.knee_index}")
        print(f"threshold={result.threshold!r}")
        print(f"flagged={result.flagged_count}")
    dt.write_scores_csv(args.out, scores, flags)
    if args.curve:
        dt.write_curve_csv(args.curve, dt.rank_curve(scores.fused))
    return 0


def _cmd_eval(args):
    _resolved(args)
    ids, fused, flags = dt.read_scores_csv(args.scores)
    n = ids.size
    if n == 0:
        raise LengthMismatch("empty scores file")
    labels = _read_labels(args.labels, int(ids.max()) + 1)[ids]
    print(f"auc={dt.auc(fused, labels):.4f}")
    print(f"macro_f1={dt.macro_f1(flags, labels):.4f}")
    return 0


def _cmd_curve(args):
    _resolved(args)
    _, fused, _ = dt.read_scores_csv(args.scores)
    curve = dt.rank_curve(fused)
    dt.write_curve_csv(args.out, curve)
    result = dt.select_threshold(fused)
    print(f"knee_index={result.knee_index}")
    print(f"flagged={result.flagged_count}")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except USAGE_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except DATA_ERRORS as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
