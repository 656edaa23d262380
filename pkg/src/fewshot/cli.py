"""Command-line front end.

Commands:

    fewshot train <config>                         train, write checkpoints + log
    fewshot eval <checkpoint> <config>             multi-seed evaluation report
    fewshot dump-embeddings <checkpoint> <config> <out.tsv>   export embeddings

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import model as M
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    build_dataset,
    build_model_config,
    build_train_config,
    load_run_config,
    render_config,
)
from .episodes import (
    TAG_DUMP,
    TAG_INIT,
    EpisodeSpec,
    meta_test,
    meta_train,
    sample_episode,
    substream,
)
from .errors import CapacityError, ConfigError, DataError, FewshotError, NumericError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse usage errors to exit code 1
        raise ConfigError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="fewshot", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out-dir", default=None, help="override the output directory")
        sp.add_argument("--quiet", action="store_true", help="suppress progress output")

    t = sub.add_parser("train", help="meta-train a model")
    t.add_argument("config")
    common(t)

    e = sub.add_parser("eval", help="meta-test a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("config")
    common(e)

    d = sub.add_parser("dump-embeddings", help="export one task's embeddings as TSV")
    d.add_argument("checkpoint")
    d.add_argument("config")
    d.add_argument("out")
    common(d)
    return p


def _load_cfg(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    return load_run_config(args.config, overrides=overrides)


def _echo_config(cfg, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_resolved.txt").write_text(render_config(cfg), encoding="utf-8")


def _fmt(v) -> str:
    return "" if v is None else repr(v)


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out_dir = Path(cfg.out_dir)
    model_config = build_model_config(cfg)
    train_config = build_train_config(cfg)
    dataset = build_dataset(cfg)
    params = M.init_params(model_config, substream(cfg.seed, TAG_INIT))

    _echo_config(cfg, out_dir)
    say = (lambda *a: None) if args.quiet else print
    say(f"training: {cfg.ways}-way {cfg.shots}-shot, {cfg.episodes} episodes")

    def progress(episode, lr, loss, val_acc):
        if episode % max(1, 50 * train_config.meta_batch) == 0 or val_acc is not None:
            extra = "" if val_acc is None else f"  val_acc={val_acc:.4f}"
            say(f"episode {episode}  lr={lr:g}  loss={loss:.4f}{extra}")

    result = meta_train(params, model_config, dataset, train_config, progress=progress)

    log_path = out_dir / "train_log.tsv"
    with open(log_path, "w", encoding="utf-8") as f:
        f.write("# episode\tlr\ttrain_loss\tval_accuracy\n")
        for episode, lr, loss, val in result.log_rows:
            f.write(f"{episode}\t{lr!r}\t{loss!r}\t{_fmt(val)}\n")
    save_checkpoint(out_dir / "final.ckpt", model_config, result.params, result.state)
    save_checkpoint(out_dir / "best.ckpt", model_config, result.best_params)
    say(f"wrote {log_path}, final.ckpt, best.ckpt (best val acc {result.best_val_acc:.4f})")
    return EXIT_OK


def _load_matching_checkpoint(path, cfg):
    ckpt_config, params, state = load_checkpoint(path)
    expected = build_model_config(cfg)
    if ckpt_config != expected:
        raise DataError(
            f"checkpoint architecture {ckpt_config.to_dict()} does not match "
            f"the configuration's {expected.to_dict()}"
        )
    return ckpt_config, params, state


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out_dir = Path(cfg.out_dir)
    model_config, params, _ = _load_matching_checkpoint(args.checkpoint, cfg)
    dataset = build_dataset(cfg)
    spec = EpisodeSpec(cfg.ways, cfg.shots, cfg.queries, split="test")
    seeds = [cfg.seed + i for i in range(cfg.eval_seeds)]

    report = meta_test(
        params, model_config, dataset, spec, cfg.eval_tasks, seeds,
        aggregation=cfg.aggregation,
    )
    _echo_config(cfg, out_dir)
    (out_dir / "eval_report.txt").write_text(report.to_text(), encoding="utf-8")
    (out_dir / "eval_seeds.tsv").write_text(report.seeds_tsv(), encoding="utf-8")
    if not args.quiet:
        print(report.to_text(), end="")
        print(f"wrote {out_dir / 'eval_report.txt'}")
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    cfg = _load_cfg(args)
    model_config, params, _ = _load_matching_checkpoint(args.checkpoint, cfg)
    dataset = build_dataset(cfg)
    spec = EpisodeSpec(cfg.ways, cfg.shots, cfg.queries, split="test")
    rng = substream(cfg.seed, TAG_DUMP)
    ep = sample_episode(dataset, spec, rng)

    sup = M.embed_batch(ep.support_x, params, model_config).data
    qry = M.embed_batch(ep.query_x, params, model_config).data
    sup_embs = [
        M.Embedding(maps=sup[i], class_id=int(ep.support_y[i]), example_id=i)
        for i in range(sup.shape[0])
    ]
    reps = []
    for c in range(ep.ways):
        class_embs = [sup_embs[i] for i in ep.support_rows(c)]
        if ep.shots == 1:
            one_per_class = [sup_embs[ep.support_rows(k)[0]] for k in range(ep.ways)]
            reps.append(M.aggregate_oneshot(one_per_class, c, params, model_config, rng))
        else:
            reps.append(M.aggregate_kshot(class_embs, params, model_config))
    means = [
        M.aggregate_mean([sup_embs[i] for i in ep.support_rows(c)]) for c in range(ep.ways)
    ]

    def rows():
        for e in sup_embs:
            yield "support", e.class_id, e.maps
        for i in range(qry.shape[0]):
            yield "query", int(ep.query_y[i]), qry[i]
        for r in reps:
            yield "aggregated", r.class_id, r.maps
        for r in means:
            yield "mean", r.class_id, r.maps

    dim = int(np.prod(sup.shape[1:]))
    out_path = Path(args.out)
    try:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write("kind\tclass\t" + "\t".join(f"v{i}" for i in range(dim)) + "\n")
            for kind, cls, maps in rows():
                flat = np.asarray(maps).reshape(-1)
                f.write(f"{kind}\t{cls}\t" + "\t".join(repr(float(v)) for v in flat) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {out_path}: {exc}") from exc
    if not args.quiet:
        print(f"wrote {out_path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "dump-embeddings":
            return cmd_dump_embeddings(args)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FewshotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
