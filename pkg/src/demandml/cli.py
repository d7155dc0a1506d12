"""Command-line driver.

Subcommands mirror the pipeline stages so each is independently invocable:

    demandml simulate -c config.yaml -o DIR      panel + truth + embeddings CSVs
    demandml compress --embeddings E.csv ...     fit compression, save model/features
    demandml estimate -c config.yaml -o DIR      split/compress/partial-out/estimate
    demandml eval     -c config.yaml -o DIR      predictive R2 table
    demandml report   --estimate F.json ...      demand-elasticity conversion
    demandml run      -c config.yaml -o DIR      full workflow (same as estimate)

The default output root is $DEMANDML_OUTPUT_ROOT (falling back to
./demandml_runs); explicit -o wins. Exit codes: 0 ok, 2 config error,
3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import compression, dml
from .config import RunConfig, config_hash, load_run_config
from .errors import ConfigError, DataError, DemandMlError
from .evaluation import run_predictive_eval
from .pipeline import (
    format_elasticity_table,
    report_elasticity,
    run_pipeline,
    save_embeddings,
    save_ground_truth,
)
from .simulator import simulate

OUTPUT_ROOT_ENV = "DEMANDML_OUTPUT_ROOT"


def _output_dir(args, cfg: RunConfig | None, suffix: str) -> Path:
    if args.output is not None:
        return Path(args.output)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "demandml_runs"))
    tag = config_hash(cfg)[:12] if cfg is not None else "out"
    return root / f"{suffix}_{tag}"


def _prepare_dir(path: Path) -> Path:
    if path.exists() and any(path.iterdir()):
        raise DataError(f"output directory {path} already exists and is not "
                        "empty; refusing to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if getattr(args, "jobs", None):
        cfg = dataclasses.replace(cfg, jobs=args.jobs)
    return cfg


def _cmd_simulate(args) -> int:
    cfg = _load_config(args)
    if cfg.simulate is None:
        raise ConfigError("simulate subcommand needs an input.simulate block")
    out = _prepare_dir(_output_dir(args, cfg, "sim"))
    panel, truth = simulate(cfg.simulate)
    comments = (f"config: {config_hash(cfg)}",)
    panel.to_csv(out / "panel.csv", header_comments=comments)
    save_ground_truth(out / "truth.csv", panel.product_ids, truth,
                      header_comments=comments)
    save_embeddings(out / "embeddings.csv", panel.product_ids,
                    truth.true_embeddings, header_comments=comments)
    print(f"wrote panel ({panel.n_products} products x {panel.n_periods} "
          f"periods), truth and embeddings to {out}")
    return 0


def _cmd_compress(args) -> int:
    from .pipeline import load_embeddings as _load_emb
    ids, emb = _load_emb(args.embeddings)
    model, x_e, x_pc, x_sim = compression.fit_compression(
        emb, args.m, args.K, args.seed)
    out = _prepare_dir(_output_dir(args, None, "compress"))
    compression.save_compression_model(model, out / "compression_model.txt")
    feats = np.hstack([x_sim, x_pc, x_e])
    names = compression.feature_names(args.K, args.m)
    with open(out / "features.csv", "w", encoding="utf-8") as fh:
        fh.write("product_id," + ",".join(names) + "\n")
        for pid, row in zip(ids, feats):
            fh.write(pid + "," + ",".join(repr(float(v)) for v in row) + "\n")
    print(f"fit compression (m={args.m}, K={args.K}) on {len(ids)} embeddings; "
          f"model and features in {out}")
    return 0


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    out = run_pipeline(cfg, _output_dir(args, cfg, "run"))
    print(f"report bundle written to {out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    table = run_predictive_eval(cfg)
    out = _prepare_dir(_output_dir(args, cfg, "eval"))
    table.to_csv(out / "predictive_r2.csv",
                 header_comments=(f"config: {config_hash(cfg)}",))
    text = table.format()
    (out / "predictive_r2.txt").write_text(
        f"# config: {config_hash(cfg)}\n{text}\n", encoding="utf-8")
    print(text)
    print(f"tables written to {out}")
    return 0


def _cmd_report(args) -> int:
    with open(args.estimate, encoding="utf-8") as fh:
        payload = json.load(fh)
    est = dml.EffectEstimate(
        names=tuple(payload["names"]),
        coef=np.array(payload["coef"]),
        covariance=np.array(payload["covariance"]),
        n_obs=payload["n_obs"],
        n_clusters=payload["n_clusters"],
        level=payload["level"],
        dist=payload.get("dist", "normal"),
    )
    table = format_elasticity_table(report_elasticity(est, args.theta))
    print(table)
    if args.output is not None:
        Path(args.output).write_text(table + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="demandml",
        description="Panel demand analysis: simulation, compression, DML")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_cmd(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("-c", "--config", required=True,
                       help="YAML run config")
        p.add_argument("-o", "--output", default=None,
                       help="output directory (default under "
                            f"${OUTPUT_ROOT_ENV})")
        p.add_argument("--jobs", type=int, default=None,
                       help="worker cap for fold fits")
        p.set_defaults(fn=fn)
        return p

    add_config_cmd("simulate", _cmd_simulate,
                   "generate a synthetic panel with ground truth")
    add_config_cmd("estimate", _cmd_run,
                   "run split/compression/partial-out/estimation")
    add_config_cmd("run", _cmd_run, "run the full workflow")
    add_config_cmd("eval", _cmd_eval, "predictive R2 evaluation")

    p = sub.add_parser("compress", help="fit the compression model on an "
                                        "embeddings CSV")
    p.add_argument("--embeddings", required=True)
    p.add_argument("-m", type=int, default=256, help="projected dimension")
    p.add_argument("-K", type=int, default=5, help="components / centroids")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(fn=_cmd_compress)

    p = sub.add_parser("report", help="demand-elasticity conversion of a "
                                      "saved estimate")
    p.add_argument("--estimate", required=True, help="estimate_*.json file")
    p.add_argument("--theta", type=float, default=0.5,
                   help="power-law shape (default 0.5)")
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except DemandMlError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
