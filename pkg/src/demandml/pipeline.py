"""End-to-end workflow driver and report-bundle writer.

The seven pipeline stages: (1) product-level dataset split, (2) embedding
fine-tuning — substituted here, the pipeline takes simulator or file
embeddings as given, (3) embedding computation, (4) feature computation via
the compression model fit on the first split only, (5) partialling-out on
the second split, (6) homogeneous effect estimation, (7) heterogeneous
effect estimation with joint tests and the sorted-effects curve.

Report bundles are a pure function of the config: every table carries the
config hash in a comment header and rerunning with one config yields
byte-identical files. Wall-clock stage timings go to a separate
timings.json that is excluded from that determinism contract.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import compression, dml
from .config import RunConfig, canonical_yaml, config_hash
from .dml import EffectEstimate, ResidualPanel, SortedEffectsCurve
from .errors import ConfigError, DataError, DemandMlError
from .panel import PanelDataset, build_state, split_by_product
from .simulator import GroundTruth, simulate

STAGES = (
    "dataset_split",
    "embedding_fine_tuning",
    "embedding_computation",
    "feature_computation",
    "partialling_out",
    "homogeneous_effect",
    "heterogeneous_effect",
)


@dataclass(frozen=True)
class StageRecord:
    stage: str
    status: str           # completed | substituted | skipped
    detail: str = ""


@dataclass(frozen=True)
class WorkflowResult:
    panel: PanelDataset
    truth: GroundTruth | None
    i1: PanelDataset
    i2: PanelDataset
    model: compression.CompressionModel
    residuals: ResidualPanel
    homogeneous: EffectEstimate | None
    heterogeneous: EffectEstimate | None
    sorted_curve: SortedEffectsCurve | None
    wald: dict | None
    stages: tuple[StageRecord, ...]
    timings: dict[str, float]


# -- embeddings / truth CSV ---------------------------------------------------

def save_embeddings(path, product_ids, embeddings: np.ndarray,
                    header_comments=()) -> None:
    embeddings = np.asarray(embeddings, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["product_id"] +
                        [f"e_{j}" for j in range(embeddings.shape[1])])
        for pid, row in zip(product_ids, embeddings):
            writer.writerow([pid] + [repr(float(v)) for v in row])


def load_embeddings(path) -> tuple[tuple[str, ...], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows or rows[0][0] != "product_id":
        raise DataError(f"{path}: header must start with product_id")
    pairs = sorted((r[0], [float(v) for v in r[1:]]) for r in rows[1:])
    ids = tuple(p[0] for p in pairs)
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate product ids")
    return ids, np.array([p[1] for p in pairs])


def save_ground_truth(path, product_ids, truth: GroundTruth,
                      header_comments=()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for line in header_comments:
            fh.write(f"# {line}\n")
        fh.write(f"# ace: {truth.ace!r}\n")
        writer = csv.writer(fh)
        writer.writerow(["product_id", "period", "a", "cace", "cluster_label"])
        n, t_count = truth.a.shape
        for i, pid in enumerate(product_ids):
            for t in range(t_count):
                writer.writerow([pid, t + 1, repr(float(truth.a[i, t])),
                                 repr(float(truth.cace[i, t])),
                                 int(truth.cluster_label[i])])


def load_ground_truth(path):
    """Read the per-observation truth table.

    Returns (product_ids, a (N, T), cace (N, T), labels (N,), ace). The
    embeddings and centroids live in the separate embeddings file.
    """
    ace = None
    with open(path, newline="", encoding="utf-8") as fh:
        rows = []
        for r in csv.reader(fh):
            if not r:
                continue
            if r[0].startswith("#"):
                if r[0].startswith("# ace:"):
                    ace = float(r[0].split(":", 1)[1])
                continue
            rows.append(r)
    if not rows or rows[0][0] != "product_id":
        raise DataError(f"{path}: bad ground truth header")
    acc: dict[str, dict[int, tuple[float, float, int]]] = {}
    for r in rows[1:]:
        acc.setdefault(r[0], {})[int(r[1])] = (float(r[2]), float(r[3]), int(r[4]))
    ids = tuple(sorted(acc))
    periods = sorted(acc[ids[0]])
    a = np.array([[acc[pid][t][0] for t in periods] for pid in ids])
    cace = np.array([[acc[pid][t][1] for t in periods] for pid in ids])
    labels = np.array([acc[pid][periods[0]][2] for pid in ids])
    return ids, a, cace, labels, ace


# -- elasticity conversion ----------------------------------------------------

@dataclass(frozen=True)
class ElasticityTable:
    """Coefficient table with the demand-elasticity conversion appended."""

    names: tuple[str, ...]
    coef: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    elasticity: np.ndarray
    elasticity_lower: np.ndarray
    elasticity_upper: np.ndarray
    theta: float
    level: float


def report_elasticity(est: EffectEstimate, theta: float) -> ElasticityTable:
    """Append demand elasticities coef/theta with identically-converted CI
    endpoints (positive theta keeps interval orientation)."""
    if theta <= 0:
        raise ConfigError(f"theta must be positive, got {theta}")
    lo, hi = est.conf_int()
    return ElasticityTable(
        names=est.names,
        coef=est.coef.copy(),
        ci_lower=lo,
        ci_upper=hi,
        elasticity=est.coef / theta,
        elasticity_lower=lo / theta,
        elasticity_upper=hi / theta,
        theta=theta,
        level=est.level,
    )


def convert_sorted_curve(curve: SortedEffectsCurve,
                         theta: float) -> SortedEffectsCurve:
    if theta <= 0:
        raise ConfigError(f"theta must be positive, got {theta}")
    return SortedEffectsCurve(
        percentile=curve.percentile.copy(),
        alpha=curve.alpha / theta,
        ci_lower=curve.ci_lower / theta,
        ci_upper=curve.ci_upper / theta,
        level=curve.level,
    )


def format_elasticity_table(tbl: ElasticityTable) -> str:
    lo_pct = (1.0 - tbl.level) / 2.0 * 100.0
    hi_pct = 100.0 - lo_pct
    headers = ["coef", f"[{lo_pct:.1f}%", f"{hi_pct:.1f}%]",
               "elasticity", f"[{lo_pct:.1f}%", f"{hi_pct:.1f}%]"]
    name_w = max(len("Modifier"), *(len(n) for n in tbl.names))
    lines = [f"Demand-elasticity conversion (theta = {tbl.theta:g})",
             "Modifier".ljust(name_w) + "".join(h.rjust(12) for h in headers)]
    for i, name in enumerate(tbl.names):
        cells = [tbl.coef[i], tbl.ci_lower[i], tbl.ci_upper[i],
                 tbl.elasticity[i], tbl.elasticity_lower[i],
                 tbl.elasticity_upper[i]]
        lines.append(name.ljust(name_w) + "".join(f"{c:>12.3f}" for c in cells))
    return "\n".join(lines)


# -- workflow -----------------------------------------------------------------

def _materialize_input(cfg: RunConfig):
    """Resolve the input block into (panel, embeddings, truth-or-None)."""
    if cfg.simulate is not None:
        panel, truth = simulate(cfg.simulate)
        return panel, truth.true_embeddings, truth
    panel = PanelDataset.from_csv(cfg.load.panel)
    if cfg.load.embeddings is None:
        raise ConfigError("load-mode pipelines need an embeddings file for "
                          "the feature-computation stage")
    ids, emb = load_embeddings(cfg.load.embeddings)
    if ids != panel.product_ids:
        raise DataError("embeddings file covers different products than "
                        "the panel")
    return panel, emb, None


def run_workflow(cfg: RunConfig) -> WorkflowResult:
    """Execute the pipeline in memory and return every intermediate."""
    stages: list[StageRecord] = []
    timings: dict[str, float] = {}

    def run_stage(name: str, fn):
        t0 = time.perf_counter()
        try:
            out = fn()
        except DemandMlError as exc:
            raise type(exc)(f"[stage {name}] {exc}") from exc
        timings[name] = time.perf_counter() - t0
        return out

    panel, embeddings, truth = run_stage(
        "embedding_computation", lambda: _materialize_input(cfg))
    source = "simulator" if cfg.simulate is not None else "file"
    stages.append(StageRecord(
        "embedding_fine_tuning", "substituted",
        f"fine-tuning is out of scope; {source} embeddings substituted"))
    timings["embedding_fine_tuning"] = 0.0
    stages.append(StageRecord(
        "embedding_computation", "completed",
        f"{embeddings.shape[0]} embeddings of dimension {embeddings.shape[1]} "
        f"from {source}"))

    i1, i2 = run_stage("dataset_split", lambda: split_by_product(
        panel, cfg.split_fraction, cfg.split_seed))
    stages.insert(0, StageRecord(
        "dataset_split", "completed",
        f"I1 {i1.n_products} / I2 {i2.n_products} products"))

    id_to_row = {pid: i for i, pid in enumerate(panel.product_ids)}
    i1_rows = [id_to_row[pid] for pid in i1.product_ids]

    def compute_features():
        model, *_ = compression.fit_compression(
            embeddings[i1_rows], cfg.compression_m, cfg.compression_k,
            cfg.compression_seed)
        x_e, x_pc, x_sim = compression.transform(model, embeddings)
        feats = np.hstack([x_sim, x_pc, x_e])
        names = compression.feature_names(cfg.compression_k, cfg.compression_m)
        return model, panel.with_features(feats, names)

    model, featured = run_stage("feature_computation", compute_features)
    stages.append(StageRecord(
        "feature_computation", "completed",
        f"m={cfg.compression_m}, K={cfg.compression_k}, fit on I1 only"))

    i2_feat = featured.subset([id_to_row[pid] for pid in i2.product_ids])

    def partial():
        rows = build_state(i2_feat, cfg.control_set)
        plan = None
        if cfg.crossfit:
            plan = dml.make_folds(i2_feat.product_ids, cfg.folds, cfg.fold_seed)
        return dml.partial_out(rows, cfg.learner_q, plan,
                               spec_p=cfg.learner_p, n_jobs=cfg.jobs)

    residuals = run_stage("partialling_out", partial)
    stages.append(StageRecord(
        "partialling_out", "completed",
        f"{residuals.n_rows} rows, "
        + (f"{cfg.folds}-fold cross-fitting" if cfg.crossfit
           else "full-sample linear mode")))

    homogeneous = heterogeneous = sorted_curve = wald = None
    if cfg.effect in ("homogeneous", "both"):
        homogeneous = run_stage("homogeneous_effect", lambda: dml.
                                estimate_homogeneous(residuals, level=cfg.level))
        stages.append(StageRecord("homogeneous_effect", "completed",
                                  f"delta = {homogeneous.coef[0]:.4f}"))
    else:
        stages.append(StageRecord("homogeneous_effect", "skipped"))
        timings["homogeneous_effect"] = 0.0
    if cfg.effect in ("heterogeneous", "both"):
        def hetero():
            est = dml.estimate_heterogeneous(residuals, level=cfg.level)
            return est, dml.wald_report(est), dml.sorted_effects(
                est, residuals.modifiers)
        heterogeneous, wald, sorted_curve = run_stage("heterogeneous_effect",
                                                      hetero)
        stages.append(StageRecord(
            "heterogeneous_effect", "completed",
            f"centercept = {heterogeneous.coef[0]:.4f}"))
    else:
        stages.append(StageRecord("heterogeneous_effect", "skipped"))
        timings["heterogeneous_effect"] = 0.0

    order = {name: i for i, name in enumerate(STAGES)}
    stages.sort(key=lambda s: order[s.stage])
    return WorkflowResult(
        panel=panel, truth=truth, i1=i1, i2=i2, model=model,
        residuals=residuals, homogeneous=homogeneous,
        heterogeneous=heterogeneous, sorted_curve=sorted_curve, wald=wald,
        stages=tuple(stages), timings=timings)


# -- report bundle ------------------------------------------------------------

def _estimate_payload(est: EffectEstimate, hash_: str) -> dict:
    lo, hi = est.conf_int()
    return {
        "config_hash": hash_,
        "names": list(est.names),
        "coef": [float(v) for v in est.coef],
        "std_err": [float(v) for v in est.se],
        "t": [float(v) for v in est.t_stats],
        "p_value": [float(v) for v in est.p_values],
        "ci_lower": [float(v) for v in lo],
        "ci_upper": [float(v) for v in hi],
        "covariance": [[float(v) for v in row] for row in est.covariance],
        "n_obs": est.n_obs,
        "n_clusters": est.n_clusters,
        "level": est.level,
        "dist": est.dist,
        "dropped_modifiers": list(est.dropped_modifiers),
    }


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _write_text(path: Path, hash_: str, body: str) -> None:
    path.write_text(f"# config: {hash_}\n{body}\n", encoding="utf-8")


def run_pipeline(cfg: RunConfig, output_dir) -> Path:
    """Run the workflow and write the report bundle into output_dir.

    Refuses to write into an existing non-empty directory so reruns never
    mutate prior outputs.
    """
    out = Path(output_dir)
    if out.exists() and any(out.iterdir()):
        raise DataError(f"output directory {out} already exists and is not "
                        "empty; refusing to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    hash_ = config_hash(cfg)
    comments = (f"config: {hash_}",)

    result = run_workflow(cfg)
    (out / "config.yaml").write_text(canonical_yaml(cfg), encoding="utf-8")
    result.panel.to_csv(out / "panel.csv", header_comments=comments)
    if result.truth is not None:
        save_ground_truth(out / "truth.csv", result.panel.product_ids,
                          result.truth, header_comments=comments)
        save_embeddings(out / "embeddings.csv", result.panel.product_ids,
                        result.truth.true_embeddings, header_comments=comments)
    compression.save_compression_model(result.model,
                                       out / "compression_model.txt")

    with open(out / "residuals.csv", "w", encoding="utf-8") as fh:
        fh.write(f"# config: {hash_}\n")
        fh.write("product_id,period,q_perp,p_perp,fold\n")
        res = result.residuals
        for i in range(res.n_rows):
            fh.write(f"{res.product_ids[i]},{int(res.periods[i])},"
                     f"{res.q_perp[i]!r},{res.p_perp[i]!r},{int(res.folds[i])}\n")

    artifacts = ["config.yaml", "panel.csv", "compression_model.txt",
                 "residuals.csv"]
    if result.truth is not None:
        artifacts += ["truth.csv", "embeddings.csv"]

    for name, est in (("homogeneous", result.homogeneous),
                      ("heterogeneous", result.heterogeneous)):
        if est is None:
            continue
        _write_json(out / f"estimate_{name}.json", _estimate_payload(est, hash_))
        _write_text(out / f"estimate_{name}.txt", hash_,
                    dml.format_estimate_table(est))
        _write_text(out / f"elasticity_{name}.txt", hash_,
                    format_elasticity_table(report_elasticity(est, cfg.theta)))
        artifacts += [f"estimate_{name}.json", f"estimate_{name}.txt",
                      f"elasticity_{name}.txt"]
    if result.sorted_curve is not None:
        result.sorted_curve.to_csv(out / "sorted_effects.csv",
                                   header_comments=comments)
        convert_sorted_curve(result.sorted_curve, cfg.theta).to_csv(
            out / "sorted_effects_elasticity.csv", header_comments=comments)
        artifacts += ["sorted_effects.csv", "sorted_effects_elasticity.csv"]
    if result.wald is not None:
        _write_json(out / "wald_tests.json",
                    {"config_hash": hash_, "tests": result.wald})
        _write_text(out / "wald_tests.txt", hash_,
                    dml.format_wald_table(result.wald, "Heterogeneous"))
        artifacts += ["wald_tests.json", "wald_tests.txt"]

    manifest = {
        "config_hash": hash_,
        "package": "demandml",
        "seeds": {
            "input": (cfg.simulate.seed if cfg.simulate is not None else None),
            "split": cfg.split_seed,
            "compression": cfg.compression_seed,
            "folds": cfg.fold_seed,
            "learner_q": cfg.learner_q.seed,
            "learner_p": cfg.learner_p.seed,
        },
        "stages": [{"stage": s.stage, "status": s.status, "detail": s.detail}
                   for s in result.stages],
        "artifacts": sorted(artifacts),
    }
    _write_json(out / "manifest.json", manifest)
    # wall-clock timings are the one non-deterministic artifact; they live
    # outside the byte-reproducible bundle contract
    _write_json(out / "timings.json",
                {"seconds": {k: round(v, 6) for k, v in result.timings.items()}})
    return out
