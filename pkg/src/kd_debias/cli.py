"""Command-line entry point: ``kd-debias <subcommand> [flags]``.

Subcommands: synth, train-teacher, distill, train-mf, eval, stability, pipeline.
File-based subcommands treat ids in TSV files as 0-based indices; ``pipeline``
with ``--data``/``--unbiased`` builds a shared index over both files instead.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import (DataFormatError, InteractionTable, binarize, generate_synthetic, load_interactions,
                   load_pair, split_unbiased, write_interactions)
from .distiller import TeacherFusionScorer, distill, train_mf_baseline
from .metrics import MetricReport, count_parameters, evaluate, stability_report, write_metrics_csv
from .teacher import TeacherModel, fit_teacher, reassign_environments

SUBCOMMANDS = ("synth", "train-teacher", "distill", "train-mf", "eval", "stability", "pipeline")
SPLIT = (0.05, 0.05, 0.90)

# flag -> RunConfig field; None defaults so only explicit flags override the config file
_FLAGS = [
    ("--data", "data", str), ("--unbiased", "unbiased", str), ("--out", "out", str), ("--seed", "seed", int),
    ("--dim", "dim", int), ("--envs", "envs", int), ("--alpha", "alpha", float), ("--beta", "beta", float),
    ("--gamma", "gamma", float), ("--lr-teacher", "lr_teacher", float), ("--lr-distill", "lr_distill", float),
    ("--epochs", "epochs", int), ("--batch", "batch", int), ("--warmup", "warmup", int), ("--l2", "l2", float),
    ("--threshold", "threshold", float), ("--users", "users", int), ("--items", "items", int),
    ("--latent-dim", "latent_dim", int), ("--bias-strength", "bias_strength", float),
    ("--exposure-skew", "exposure_skew", float), ("--per-user", "per_user", int),
]


class CLIError(RuntimeError):
    pass


def _common_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key=value config file; flags override it")
    for flag, dest, typ in _FLAGS:
        p.add_argument(flag, dest=dest, type=typ, default=None)
    p.add_argument("--mode", dest="mode", choices=("full", "no-variant", "equal-weight", "no-kd"), default=None)
    p.add_argument("--k", dest="k", type=int, action="append", default=None, help="cutoff; repeatable")
    p.add_argument("--synthetic", dest="synthetic", action="store_true", default=None)
    p.add_argument("--detach-inv-in-var", dest="detach_inv_in_var", action="store_true", default=None)
    p.add_argument("--full-catalog", dest="full_catalog", action="store_true", default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="kd-debias", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    sub.add_parser("synth", parents=[common], help="write a synthetic biased/unbiased pair")
    sub.add_parser("train-teacher", parents=[common], help="train the disentangled teacher")
    p = sub.add_parser("distill", parents=[common], help="distill a teacher into an MF student")
    p.add_argument("--teacher", required=True)
    p.add_argument("--envs-file", help="final environment labels written by train-teacher")
    sub.add_parser("train-mf", parents=[common], help="train the plain MF baseline")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a test TSV")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p = sub.add_parser("stability", parents=[common], help="repeat the pipeline over seeds")
    p.add_argument("--runs", type=int, default=10)
    sub.add_parser("pipeline", parents=[common], help="synth/load, train teacher, distill, evaluate")
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    overrides = {f.name: getattr(args, f.name) for f in RunConfig.__dataclass_fields__.values()
                 if getattr(args, f.name, None) is not None}
    return load_config(args.config, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prepare_labels(table: InteractionTable, threshold: float) -> InteractionTable:
    # already-binary files (e.g. written by `synth`) are left as they are
    if np.all((table.labels == 0) | (table.labels == 1)):
        return table
    return binarize(table, threshold)


def _load_train(cfg: RunConfig, num_users=None, num_items=None) -> InteractionTable:
    if not cfg.data:
        raise CLIError("--data is required")
    table = load_interactions(cfg.data, cfg.envs, cfg.seed, reindex=False,
                              num_users=num_users, num_items=num_items)
    return _prepare_labels(table, cfg.threshold)


def _write_envs(table: InteractionTable, path: Path) -> None:
    path.write_text("".join(f"{e}\n" for e in table.envs.tolist()), encoding="utf-8")


def _read_envs(path, n: int) -> np.ndarray:
    vals = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    if len(vals) != n:
        raise CLIError(f"{path}: expected {n} environment labels, found {len(vals)}")
    try:
        return np.asarray([int(v) for v in vals], dtype=np.int64)
    except ValueError:
        raise CLIError(f"{path}: environment labels must be integers") from None


def _save_config(cfg: RunConfig, out: Path) -> None:
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")


# ------------------------------------------------------------------ pipeline

def _data_for(cfg: RunConfig) -> tuple[InteractionTable, InteractionTable]:
    if cfg.synthetic:
        return generate_synthetic(cfg.synthetic_config())
    if not (cfg.data and cfg.unbiased):
        raise CLIError("pipeline needs --synthetic or both --data and --unbiased")
    biased, unbiased = load_pair(cfg.data, cfg.unbiased, cfg.envs, cfg.seed)
    return _prepare_labels(biased, cfg.threshold), _prepare_labels(unbiased, cfg.threshold)


def run_pipeline(cfg: RunConfig, out: Path | None = None, with_baseline: bool = True) -> list[MetricReport]:
    """Teacher, distilled student (or teacher fusion for ``no-kd``) and MF baseline on one seed."""
    biased, unbiased = _data_for(cfg)
    split = split_unbiased(unbiased, SPLIT, cfg.seed)
    test = split.test_unbiased
    cfg_text = cfg.to_text()
    kw = dict(seed=cfg.seed, config_text=cfg_text, full_catalog=cfg.full_catalog,
              exclude=biased if cfg.full_catalog else None)

    teacher, envs_table = fit_teacher(cfg.teacher_config(), biased)
    dcfg = cfg.distill_config()
    student = distill(teacher, envs_table, dcfg)
    reports = []
    if student is None:
        scorer = TeacherFusionScorer(teacher, envs_table, dcfg.gamma)
        rep = evaluate(scorer, test, cfg.k, run_id="teacher-fusion", **kw)
        rep.num_parameters = count_parameters(teacher)
        reports.append(rep)
    else:
        reports.append(evaluate(student, test, cfg.k, run_id=f"kd-{dcfg.mode}", **kw))
    mf = None
    if with_baseline:
        mf = train_mf_baseline(biased, dcfg)
        reports.append(evaluate(mf, test, cfg.k, run_id="mf", **kw))

    if out is not None:
        _save_config(cfg, out)
        write_interactions(biased, out / "train_biased.tsv")
        write_interactions(test, out / "test_unbiased.tsv")
        checkpoint.save_checkpoint(teacher, out / "teacher.ckpt")
        _write_envs(envs_table, out / "teacher_envs.txt")
        if student is not None:
            checkpoint.save_checkpoint(student, out / "student.ckpt")
        if mf is not None:
            checkpoint.save_checkpoint(mf, out / "mf.ckpt")
        write_metrics_csv(reports, out / "metrics.csv")
    return reports


# ------------------------------------------------------------------ subcommands

def cmd_synth(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    biased, unbiased = generate_synthetic(cfg.synthetic_config())
    write_interactions(biased, out / "biased.tsv")
    write_interactions(unbiased, out / "unbiased.tsv")
    _save_config(cfg, out)
    print(f"wrote {len(biased)} biased and {len(unbiased)} unbiased records to {out}")


def cmd_train_teacher(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    teacher, table = fit_teacher(cfg.teacher_config(), _load_train(cfg))
    checkpoint.save_checkpoint(teacher, out / "teacher.ckpt")
    _write_envs(table, out / "teacher_envs.txt")
    _save_config(cfg, out)
    print(f"teacher saved to {out / 'teacher.ckpt'}")


def cmd_distill(cfg: RunConfig, args) -> None:
    teacher = checkpoint.load_checkpoint(args.teacher)
    if not isinstance(teacher, TeacherModel):
        raise CLIError(f"{args.teacher} is not a teacher checkpoint")
    data = _load_train(cfg, teacher.num_users, teacher.num_items)
    data = data.with_envs(data.envs % teacher.num_envs, teacher.num_envs)
    if args.envs_file:
        data = data.with_envs(_read_envs(args.envs_file, len(data)), teacher.num_envs)
    else:
        data = reassign_environments(teacher, data)
    student = distill(teacher, data, cfg.distill_config())
    if student is None:
        print("mode no-kd trains no student; evaluate the teacher checkpoint directly")
        return
    out = _out_dir(cfg)
    checkpoint.save_checkpoint(student, out / "student.ckpt")
    _save_config(cfg, out)
    print(f"student saved to {out / 'student.ckpt'}")


def cmd_train_mf(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    mf = train_mf_baseline(_load_train(cfg), cfg.distill_config())
    checkpoint.save_checkpoint(mf, out / "mf.ckpt")
    _save_config(cfg, out)
    print(f"MF baseline saved to {out / 'mf.ckpt'}")


def cmd_eval(cfg: RunConfig, args) -> None:
    model = checkpoint.load_checkpoint(args.model)
    test = load_interactions(args.test, 1, cfg.seed, reindex=False,
                             num_users=model.num_users, num_items=model.num_items)
    test = _prepare_labels(test, cfg.threshold)
    # a teacher checkpoint is scored by its invariant branch
    report = evaluate(model, test, cfg.k, seed=cfg.seed, config_text=cfg.to_text(),
                      run_id=Path(args.model).stem, full_catalog=cfg.full_catalog)
    for (metric, k), v in sorted(report.values.items()):
        print(f"{metric}@{k}\t{v:.6f}")
    print(f"users\t{report.num_users}")
    print(f"parameters\t{report.num_parameters}")
    if args.out is not None or args.config:
        write_metrics_csv([report], _out_dir(cfg) / "metrics.csv")


def cmd_stability(cfg: RunConfig, args) -> None:
    if args.runs < 2:
        raise CLIError("--runs must be at least 2")
    seeds = [cfg.seed + r for r in range(args.runs)]
    cache: dict[int, list[MetricReport]] = {}

    def reports(seed):
        if seed not in cache:
            cache[seed] = run_pipeline(cfg.replace(seed=seed))
        return cache[seed]

    k = cfg.k[0]
    kd = stability_report(lambda s: reports(s)[0], seeds, k)
    mf = stability_report(lambda s: reports(s)[1], seeds, k)
    out = _out_dir(cfg)
    lines = ["model,metric,mean,std"]
    for name, res in (("kd-debias", kd), ("mf", mf)):
        for metric, (mean, std) in res.items():
            lines.append(f"{name},{metric},{mean!r},{std!r}")
            print(f"{name}\t{metric}\tmean={mean:.4f}\tstd={std:.4f}")
    (out / "stability.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _save_config(cfg, out)


def cmd_pipeline(cfg: RunConfig, args) -> None:
    out = _out_dir(cfg)
    for rep in run_pipeline(cfg, out):
        vals = "  ".join(f"{m}@{k}={v:.4f}" for (m, k), v in sorted(rep.values.items()))
        print(f"{rep.run_id}: {vals}  params={rep.num_parameters}")


HANDLERS = {
    "synth": cmd_synth, "train-teacher": cmd_train_teacher, "distill": cmd_distill, "train-mf": cmd_train_mf,
    "eval": cmd_eval, "stability": cmd_stability, "pipeline": cmd_pipeline,
}


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        HANDLERS[args.command](cfg, args)
    except (CLIError, ConfigError, DataFormatError, checkpoint.CheckpointError, ValueError, OSError) as exc:
        print(f"kd-debias {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
