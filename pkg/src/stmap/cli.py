"""Config-driven pipeline: ingest, diagnose, fit, compare, cluster, regions,
simulate.

Every subcommand takes a single JSON config file, writes its artifacts
atomically (temp file + rename) into the configured output directory, and is
deterministic given the config and seeds.  Exit codes: 0 success, 2 missing
or malformed input (message names the file), 3 numerical failure (message
carries the hyperparameter values).
"""

import argparse
import concurrent.futures
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from . import analysis, baselines, diagnostics, ingest
from .errors import NumericalError, StmapError
from .model import (Hyper, PriorSpec, latent_posterior, optimize_hyper,
                    assemble_dataset)
from .simulate import SynthScenario, make_synth_dataset
from .spde import build_mesh


def thread_count() -> int:
    """Worker cap: STMAP_THREADS if set, else the CPU count."""
    env = os.environ.get("STMAP_THREADS")
    cpus = os.cpu_count() or 1
    if env:
        try:
            return max(1, min(cpus, int(env)))
        except ValueError:
            pass
    return cpus


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_json(path: Path, doc) -> None:
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, df: pd.DataFrame) -> None:
    _atomic_write(path, df.to_csv(index=False))


def _load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path) as fh:
        return json.load(fh)


def _require_inputs(cfg: dict, *keys) -> dict:
    inputs = cfg.get("inputs", {})
    for key in keys:
        if key not in inputs:
            raise StmapError(f"config is missing inputs.{key}")
        if not Path(inputs[key]).exists():
            raise FileNotFoundError(inputs[key])
    return inputs


def _priors_from_config(cfg: dict) -> PriorSpec:
    p = cfg.get("priors", {})
    return PriorSpec(
        beta_variance=p.get("beta_variance", 1000.0),
        range_threshold=p.get("range_threshold", 1.5),
        range_prob=p.get("range_prob", 0.5),
        sigma_threshold=p.get("sigma_threshold", 1.0),
        sigma_prob=p.get("sigma_prob", 0.01),
        ar1_threshold=p.get("ar1_threshold", 0.0),
        ar1_prob=p.get("ar1_prob", 0.9),
        noise_shape=p.get("noise_shape", 1.0),
        noise_rate=p.get("noise_rate", 5e-5),
    )


def _load_tables(cfg: dict):
    inputs = _require_inputs(cfg, "areas", "cases", "covariates")
    polygons = inputs.get("polygons")
    if polygons and not Path(polygons).exists():
        raise FileNotFoundError(polygons)
    areas = ingest.load_area_table(inputs["areas"], polygons_path=polygons,
                                   unit=cfg.get("coordinate_unit", "km"))
    cases = ingest.load_case_table(inputs["cases"], T=int(cfg["T"]))
    covariates = ingest.load_covariate_table(inputs["covariates"])
    if inputs.get("grid"):
        if not Path(inputs["grid"]).exists():
            raise FileNotFoundError(inputs["grid"])
        grid = ingest.load_grid_field(inputs["grid"])
        column = ingest.grid_to_area_average(grid, areas)
        name = cfg.get("grid_column", "pm25")
        covariates = covariates.with_column(name, _reorder(
            column, areas.area_ids, covariates.area_ids))
    for name in cfg.get("log_transform", []):
        j = covariates.names.index(name)
        covariates = covariates.with_column(
            name, ingest.log_transform_density(covariates.values[:, j]))
    return areas, cases, covariates


def _reorder(column, from_ids, to_ids):
    pos = {a: i for i, a in enumerate(from_ids)}
    return np.asarray([column[pos[a]] for a in to_ids])


def _mesh_from_config(cfg: dict, areas, priors: PriorSpec):
    mcfg = cfg.get("mesh", {})
    coords = areas.centroids
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d2, np.inf)
    nn_median = float(np.median(np.sqrt(d2.min(axis=1))))
    rho0 = priors.range_threshold  # prior median when range_prob = 0.5
    max_edge = mcfg.get("max_edge", rho0 / 3.0)
    cutoff = mcfg.get("cutoff", 0.5 * nn_median)
    extension = mcfg.get("extension", 2.0 * rho0)
    return build_mesh(coords, max_edge=max_edge, cutoff=cutoff, extension=extension)


def _dataset_from_config(cfg: dict):
    priors = _priors_from_config(cfg)
    areas, cases, covariates = _load_tables(cfg)
    mesh = _mesh_from_config(cfg, areas, priors)
    dataset = assemble_dataset(cases, areas, covariates, mesh)
    return dataset, areas, cases, covariates, mesh, priors


def _fit(cfg, dataset, priors):
    ocfg = cfg.get("optimizer", {})
    init_cfg = ocfg.get("init", {})
    init = Hyper(
        rho=init_cfg.get("rho", priors.range_threshold),
        sigma_omega=init_cfg.get("sigma_omega", 0.5),
        alpha=init_cfg.get("alpha", 0.5),
        sigma_e=init_cfg.get("sigma_e", 0.1),
    )
    convention = cfg.get("sigma_convention", "innovation")
    hyper_fit = optimize_hyper(dataset, priors, init,
                               budget=int(ocfg.get("budget", 400)),
                               convention=convention)
    result = latent_posterior(dataset, hyper_fit.map,
                              n_samples=int(cfg.get("n_samples", 250)),
                              seed=int(cfg.get("seed", 0)),
                              priors=priors, hyper_fit=hyper_fit,
                              convention=convention)
    return hyper_fit, result


def _rates_frame(result, T: int) -> pd.DataFrame:
    rows = []
    for i, area_id in enumerate(result.area_ids):
        for t in range(T):
            rows.append((area_id, t + 1,
                         result.theta_mean[i, t],
                         float(np.exp(result.theta_mean[i, t])),
                         float(np.exp(result.theta_lo95[i, t])),
                         float(np.exp(result.theta_hi95[i, t])),
                         int(result.censored[i, t])))
    return pd.DataFrame(rows, columns=["area_id", "week", "theta_hat", "rate",
                                       "lo95", "hi95", "censored"])


def run_fit(config_path) -> int:
    """Fit the model and write fit.json, rates.csv and mesh.json."""
    cfg = _load_config(config_path)
    out_dir = Path(cfg.get("output_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset, areas, cases, covariates, mesh, priors = _dataset_from_config(cfg)
    hyper_fit, result = _fit(cfg, dataset, priors)

    fit_doc = {
        "hyper": {name: vars(s) for name, s in hyper_fit.summary.items()},
        "hyper_map": vars(hyper_fit.map),
        "beta": [vars(b) for b in result.beta],
        "log_posterior": hyper_fit.log_posterior,
        "converged": hyper_fit.converged,
        "message": hyper_fit.message,
        "n_evaluations": hyper_fit.n_evaluations,
        "n_obs": dataset.n_obs,
        "n_areas": dataset.n_areas,
        "mesh_nodes": dataset.m,
        "T": dataset.T,
    }
    _write_json(out_dir / "fit.json", fit_doc)
    _write_csv(out_dir / "rates.csv", _rates_frame(result, dataset.T))
    _write_json(out_dir / "mesh.json", mesh.to_json())
    print(f"fit: wrote {out_dir / 'fit.json'}, rates.csv, mesh.json")
    return 0


def _observed_maps(dataset):
    obs = {}
    for r in range(dataset.n_obs):
        key = (dataset.area_ids[dataset.area_index[r]], int(dataset.week[r]))
        obs[key] = float(dataset.y[r])
    return obs


def run_compare(config_path) -> int:
    """Score the three models in-sample and write comparison.csv."""
    cfg = _load_config(config_path)
    out_dir = Path(cfg.get("output_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    if "scenario" in cfg:
        dataset, _ = make_synth_dataset(_scenario_from_config(cfg))
        priors = _priors_from_config(cfg)
    else:
        dataset, _, _, _, _, priors = _dataset_from_config(cfg)

    obs = _observed_maps(dataset)
    keys = sorted(obs)

    _, result = _fit(cfg, dataset, priors)
    area_pos = {a: i for i, a in enumerate(dataset.area_ids)}
    bayes_pred = {k: float(result.theta_mean[area_pos[k[0]], k[1] - 1]) for k in keys}

    ols = baselines.ols_fit(dataset.X, dataset.y)
    ols_pred = {key: float(v) for key, v in zip(
        [(dataset.area_ids[i], int(t)) for i, t in zip(dataset.area_index, dataset.week)],
        ols.fitted)}

    gwr_pred = _gwr_weekly(cfg, dataset)

    rows = []
    for name, pred in (("bayesian", bayes_pred), ("ols", ols_pred), ("gwr", gwr_pred)):
        rmse, mae = analysis.rmse_mae(pred, obs)
        rows.append((name, rmse, mae))
    _write_csv(out_dir / "comparison.csv",
               pd.DataFrame(rows, columns=["model", "rmse", "mae"]))
    print(f"compare: wrote {out_dir / 'comparison.csv'}")
    return 0


def _gwr_weekly(cfg, dataset) -> dict:
    """Per-week locally weighted fits with one CV-chosen bandwidth."""
    kernel = cfg.get("kernel", "gaussian")
    centroids = _area_centroids(dataset)
    diameter = float(np.hypot(*(centroids.max(0) - centroids.min(0))))
    grid = cfg.get("gwr_bandwidths") or [diameter * f for f in
                                         (0.05, 0.1, 0.2, 0.4, 0.8)]

    weeks = sorted(set(int(t) for t in dataset.week))
    slices = {}
    for t in weeks:
        rows = np.nonzero(dataset.week == t)[0]
        if rows.size <= dataset.n_coef:
            continue  # too few reporters this week to fit locally
        idx = dataset.area_index[rows]
        slices[t] = (centroids[idx], dataset.X[rows], dataset.y[rows], idx)

    def press_total(b):
        total = 0.0
        for t, (loc, X, y, _) in slices.items():
            total += baselines.loo_press(loc, X, y, b, kernel)
        return total

    bandwidth = cfg.get("gwr_bandwidth")
    if bandwidth is None:
        scores = {b: press_total(b) for b in sorted(float(b) for b in grid)}
        bandwidth = min(scores, key=lambda b: (scores[b], b))

    pred = {}

    def fit_week(t):
        loc, X, y, idx = slices[t]
        fit = baselines.gwr_fit(loc, X, y, bandwidth, kernel=kernel)
        return t, idx, fit.fitted

    workers = thread_count()
    if workers > 1 and len(slices) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fit_week, slices))
    else:
        results = [fit_week(t) for t in slices]
    for t, idx, fitted in results:
        for i, v in zip(idx, fitted):
            pred[(dataset.area_ids[int(i)], t)] = float(v)
    return pred


def _area_centroids(dataset) -> np.ndarray:
    # centroids are recoverable from the projector acting on node coordinates
    return np.column_stack([dataset.A @ dataset.mesh.nodes[:, 0],
                            dataset.A @ dataset.mesh.nodes[:, 1]])


def run_diagnose(config_path) -> int:
    """Autocorrelation and collinearity report as diagnostics.json."""
    cfg = _load_config(config_path)
    out_dir = Path(cfg.get("output_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    areas, cases, covariates = _load_tables(cfg)
    theta = ingest.compute_log_rates(cases, areas)

    scheme = cfg.get("weights_scheme", "knn")
    weights = diagnostics.build_spatial_weights(areas, scheme=scheme,
                                                k=int(cfg.get("knn_k", 5)))

    slice_kind = cfg.get("moran_slice", "cumulative")
    if slice_kind == "cumulative":
        totals = np.zeros(areas.n)
        pos = {a: i for i, a in enumerate(areas.area_ids)}
        for a, c in zip(cases.area_id, cases.cases):
            totals[pos[a]] += c
        values = totals / areas.population
    elif slice_kind.startswith("week:"):
        t = int(slice_kind.split(":", 1)[1])
        sl = theta[theta["week"] == t]
        pos = {a: i for i, a in enumerate(areas.area_ids)}
        values = np.full(areas.n, np.nan)
        values[[pos[a] for a in sl["area_id"]]] = sl["theta"]
        values = np.where(np.isnan(values), np.nanmean(values), values)
    else:
        raise StmapError(f"unknown moran_slice {slice_kind!r}")
    moran = diagnostics.morans_i(values, weights,
                                 n_perm=int(cfg.get("moran_permutations", 999)),
                                 seed=int(cfg.get("seed", 0)))

    weekly = theta.groupby("week")["theta"].mean()
    series = weekly.reindex(range(1, cases.T + 1)).ffill().bfill().to_numpy()
    lb = diagnostics.ljung_box(series, lags=int(cfg.get("ljung_box_lags", 10)))

    report = diagnostics.screen_covariates(
        covariates.for_areas(areas.area_ids), covariates.names,
        r_threshold=float(cfg.get("r_threshold", 0.6)),
        keep_priority=cfg.get("keep_priority", []))

    doc = {
        "morans": {"I": moran.I, "p": moran.p_value},
        "ljung_box": {"Q": lb.Q, "p": lb.p_value},
        "correlations": {
            "names": report.names,
            "matrix": np.round(report.correlations, 6).tolist(),
        },
        "vif": report.vif,
        "dropped": [{"name": n, "reason": r} for n, r in report.dropped],
    }
    _write_json(out_dir / "diagnostics.json", doc)
    print(f"diagnose: wrote {out_dir / 'diagnostics.json'}")
    return 0


def run_ingest(config_path) -> int:
    """Validate inputs; write an ingest summary and aligned covariates."""
    cfg = _load_config(config_path)
    out_dir = Path(cfg.get("output_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    areas, cases, covariates = _load_tables(cfg)
    doc = {
        "n_areas": areas.n,
        "T": cases.T,
        "n_obs": cases.n_rows,
        "weekly_counts": cases.weekly_counts().tolist(),
        "n_censored_cells": areas.n * cases.T - cases.n_rows,
        "covariates": covariates.names,
    }
    _write_json(out_dir / "ingest_summary.json", doc)
    aligned = pd.DataFrame(covariates.for_areas(areas.area_ids),
                           columns=covariates.names)
    aligned.insert(0, "area_id", areas.area_ids)
    _write_csv(out_dir / "covariates_aligned.csv", aligned)
    print(f"ingest: wrote {out_dir / 'ingest_summary.json'}")
    return 0


def run_cluster(config_path) -> int:
    """Interval hotspot clustering from a completed fit's rates.csv."""
    cfg = _load_config(config_path)
    out_dir = Path(cfg.get("output_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    rates_path = Path(cfg.get("rates", out_dir / "rates.csv"))
    if not rates_path.exists():
        raise FileNotFoundError(rates_path)
    df = pd.read_csv(rates_path, dtype={"area_id": str})
    wide = df.pivot(index="area_id", columns="week", values="rate").sort_index()
    rates = wide.to_numpy()
    area_ids = wide.index.tolist()
    T = rates.shape[1]

    rows = []
    summaries = []
    for interval in analysis.week_intervals(T, int(cfg.get("interval_weeks", 18))):
        res = analysis.cluster_interval(
            rates, interval, area_ids,
            axis=cfg.get("standardize_axis", "week"),
            restarts=int(cfg.get("kmeans_restarts", 8)),
            seed=int(cfg.get("seed", 0)))
        tag = f"{interval[0]}-{interval[1]}"
        for area_id, level in zip(area_ids, res.levels):
            rows.append((tag, area_id, level))
        summaries.append({"interval": tag, "chosen_k": res.chosen_k,
                          "wss": res.wss_by_k.tolist()})
    _write_csv(out_dir / "clusters.csv",
               pd.DataFrame(rows, columns=["interval", "area_id", "level"]))
    _write_json(out_dir / "cluster_summary.json", {"intervals": summaries})
    print(f"cluster: wrote {out_dir / 'clusters.csv'}")
    return 0


def run_regions(config_path) -> int:
    """Population-weighted regional rate series from rates.csv."""
    cfg = _load_config(config_path)
    out_dir = Path(cfg.get("output_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = _require_inputs(cfg, "areas")
    areas = ingest.load_area_table(inputs["areas"])
    rates_path = Path(cfg.get("rates", out_dir / "rates.csv"))
    if not rates_path.exists():
        raise FileNotFoundError(rates_path)
    df = pd.read_csv(rates_path, dtype={"area_id": str})
    wide = df.pivot(index="area_id", columns="week", values="rate")
    wide = wide.loc[areas.area_ids]
    series = analysis.region_aggregate(wide.to_numpy(), areas)
    rows = [(s.region_id, t + 1, float(phi))
            for s in series for t, phi in enumerate(s.phi)]
    _write_csv(out_dir / "regions.csv",
               pd.DataFrame(rows, columns=["region_id", "week", "phi"]))
    print(f"regions: wrote {out_dir / 'regions.csv'}")
    return 0


def _scenario_from_config(cfg: dict) -> SynthScenario:
    s = cfg["scenario"]
    return SynthScenario(
        hyper=Hyper(**s["hyper"]),
        beta=tuple(s["beta"]),
        n_areas=int(s.get("n_areas", 100)),
        box=tuple(s.get("box", (0.0, 3.0, 0.0, 3.0))),
        T=int(s.get("T", 20)),
        population=tuple(s.get("population", (5000, 20000))),
        covariate_style=s.get("covariate_style", "normal"),
        mesh_max_edge=s.get("mesh_max_edge"),
        mesh_extension=s.get("mesh_extension"),
        seed=int(s.get("seed", cfg.get("seed", 0))),
        sigma_convention=cfg.get("sigma_convention", "innovation"),
    )


def run_simulate(config_path) -> int:
    """Generate a synthetic bundle in the ingest CSV formats plus truth.json."""
    cfg = _load_config(config_path)
    out_dir = Path(cfg.get("output_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    scenario = _scenario_from_config(cfg)
    _, truth = make_synth_dataset(scenario)

    areas = truth.areas
    _write_csv(out_dir / "areas.csv", pd.DataFrame({
        "area_id": areas.area_ids,
        "x": areas.centroids[:, 0],
        "y": areas.centroids[:, 1],
        "population": areas.population,
        "region_id": areas.region_ids,
    }))
    ct = truth.case_table
    _write_csv(out_dir / "cases.csv", pd.DataFrame({
        "area_id": ct.area_id, "week": ct.week, "cases": ct.cases}))
    cov = pd.DataFrame(truth.covariates.values, columns=truth.covariates.names)
    cov.insert(0, "area_id", truth.covariates.area_ids)
    _write_csv(out_dir / "covariates.csv", cov)
    _write_json(out_dir / "truth.json", {
        "hyper": vars(truth.hyper),
        "beta": truth.beta.tolist(),
        "n_censored_cells": int(truth.censored.sum()),
        "seed": scenario.seed,
    })
    print(f"simulate: wrote synthetic bundle to {out_dir}")
    return 0


_COMMANDS = {
    "ingest": run_ingest,
    "diagnose": run_diagnose,
    "fit": run_fit,
    "compare": run_compare,
    "cluster": run_cluster,
    "regions": run_regions,
    "simulate": run_simulate,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="stmap",
        description="Spatio-temporal Bayesian mapping of area-level infection rates")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__.splitlines()[0] if fn.__doc__ else None)
        p.add_argument("config", help="path to the JSON pipeline config")
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args.config)
    except FileNotFoundError as exc:
        print(f"error: missing input file: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return 3
    except StmapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
