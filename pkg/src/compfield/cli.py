"""Command-line pipeline: simulate, fit, cv, compare, render.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric error.
Options may come from a flat INI config file (``--config``); explicit flags
always win over config-file values.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import compositional as comp
from . import figures
from . import io as cfio
from . import validation
from .errors import CompfieldError, ConfigError, DataError, InsufficientSamplesError, NumericError
from .gmrf import GmrfSpec, LatticeGraph, sample_field
from .inference import (
    ChainConfig,
    decompose_predictor,
    predictive_region,
    reconstruct,
    run_chain,
    run_chains,
)
from .model import (
    COVARIATE_PRESETS,
    Model,
    PriorConfig,
    build_design,
    simulate_dataset,
)

DEFAULT_CATEGORIES = ("conif", "broadl", "unforest")


class _Parser(argparse.ArgumentParser):
    """Parser whose usage errors map to the config exit code."""

    def error(self, message):
        raise ConfigError(message)


def _add_chain_flags(p):
    p.add_argument("--samples", type=int, default=None, help="MCMC iterations (default 20000)")
    p.add_argument("--burn-in", type=int, default=None, help="burn-in iterations (default 4000)")
    p.add_argument("--thin", type=int, default=None, help="retain every thin-th sample (default 10)")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (default 0)")
    p.add_argument("--chains", type=int, default=None, help="number of chains (default 1)")
    p.add_argument(
        "--jobs", type=int, default=None,
        help="parallel workers for chains/folds (default: number of cores)",
    )


def _add_model_flags(p):
    p.add_argument("--preset", default=None,
                   help="model preset: " + ", ".join(COVARIATE_PRESETS))
    p.add_argument("--covariates", default=None,
                   help="comma-separated covariate names (custom model)")
    p.add_argument("--covariate-table", action="append", default=[],
                   metavar="NAME=PATH", help="covariate grid table (repeatable)")
    p.add_argument("--raw-aux", action="store_true",
                   help="encode auxiliary compositions as raw proportions instead of alr")
    p.add_argument("--epsilon", type=float, default=None,
                   help="zero-replacement threshold (default 1e-4)")


def build_parser():
    parser = _Parser(prog="compfield", description=__doc__)
    parser.add_argument("--version", action="version", version=f"compfield {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic benchmark dataset",
                       description="Write synthetic observations, truth, and covariate tables.")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rows", type=int, default=15)
    p.add_argument("--cols", type=int, default=15)
    p.add_argument("--frac-observed", type=float, default=0.6)
    p.add_argument("--alpha", type=float, default=50.0)
    p.add_argument("--kappa", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the model and write reconstruction artifacts",
                       description="Fit one covariate model to observed compositions.")
    p.add_argument("--obs", required=True, help="observations table")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="INI config file")
    _add_model_flags(p)
    _add_chain_flags(p)
    p.add_argument("--window", default=None, metavar="LONMIN,LONMAX,LATMIN,LATMAX",
                   help="reconstruction window (default: observation bounding box)")
    p.add_argument("--region-cells", default=None,
                   help="comma-separated cell indices for predictive regions")
    p.add_argument("--region-level", type=float, default=0.95)
    p.add_argument("--block", type=int, default=None, help="PPM pixels per cell (default 8)")
    p.add_argument("--checkpoint-every", type=int, default=None,
                   help="write a resumable checkpoint every N iterations")
    p.add_argument("--resume", default=None, help="resume from a checkpoint file")
    p.add_argument("--no-figures", action="store_true", help="skip matplotlib figures")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("cv", help="k-fold cross-validation over one or more models",
                       description="Score models by cross-validated compositional distance.")
    p.add_argument("--obs", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--presets", default=None,
                   help="comma-separated preset names (default: Constant)")
    _add_model_flags(p)
    _add_chain_flags(p)
    p.add_argument("--folds", type=int, default=None, help="number of folds (default 6)")
    p.add_argument("--chain-factor", type=float, default=None,
                   help="chain-length factor for fold refits (default 0.25)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("compare", help="pairwise distances between fitted maps",
                       description="Pairwise ACD matrix and per-cell distance maps.")
    p.add_argument("--map", action="append", default=[], metavar="NAME=PATH",
                   help="composition table to compare (repeatable, >= 2)")
    p.add_argument("--reference", default=None, help="reference composition table")
    p.add_argument("--out", required=True)
    p.add_argument("--block", type=int, default=8)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("render", help="render a composition table to PPM/PNG",
                       description="Rasterize a composition grid table.")
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--block", type=int, default=8)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_render)
    return parser


# --------------------------------------------------------------------- config


_CONFIG_SPEC = {
    # dest -> (section, key, parser, default)
    "samples": ("chain", "samples", int, 20_000),
    "burn_in": ("chain", "burn_in", int, 4_000),
    "thin": ("chain", "thin", int, 10),
    "seed": ("chain", "seed", int, 0),
    "chains": ("chain", "chains", int, 1),
    "jobs": ("chain", "jobs", int, None),
    "preset": ("model", "preset", str, None),
    "covariates": ("model", "covariates", str, None),
    "epsilon": ("model", "epsilon", float, 1e-4),
    "window": ("model", "window", str, None),
    "folds": ("cv", "folds", int, 6),
    "chain_factor": ("cv", "chain_factor", float, 0.25),
    "block": ("output", "block", int, 8),
    "checkpoint_every": ("output", "checkpoint_every", int, 0),
}


def _resolve_options(args):
    """Fill unset flags from the config file, then from hard defaults."""
    cp = configparser.ConfigParser()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"bad config file {path}: {exc}") from exc
    for dest, (section, key, typ, default) in _CONFIG_SPEC.items():
        if not hasattr(args, dest):
            continue
        if getattr(args, dest) is not None:
            continue
        if cp.has_option(section, key):
            try:
                setattr(args, dest, typ(cp.get(section, key)))
            except ValueError as exc:
                raise ConfigError(f"config [{section}] {key}: {exc}") from exc
        else:
            setattr(args, dest, default)
    if getattr(args, "jobs", None) is None:
        args.jobs = os.cpu_count() or 1
    return args


def _config_text(args, keys):
    """Deterministic text of the resolved settings (manifest digest input)."""
    parts = [f"{k}={getattr(args, k)}" for k in sorted(keys) if hasattr(args, k)]
    return "\n".join(parts)


def _chain_config(args, **overrides):
    kw = dict(
        n_samples=args.samples,
        burn_in=args.burn_in,
        thin=args.thin,
        seed=args.seed,
    )
    kw.update(overrides)
    try:
        return ChainConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- data loading


def _parse_named_paths(pairs, what):
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"{what} must look like NAME=PATH, got {item!r}")
        name, path = item.split("=", 1)
        out[name] = Path(path)
    return out


def _attach_covariates(grid, tables, eps):
    """Align covariate tables onto the lattice (upscaling finer tables)."""
    for name, path in tables.items():
        table = cfio.read_grid_table(path)
        res = table.resolution
        if res is None:
            res = min(
                cfio._infer_resolution(table.lon), cfio._infer_resolution(table.lat)
            )
        if res < grid.resolution - 1e-9:
            names = list(table.columns)
            groups = [names] if len(names) > 1 else []
            table = cfio.upscale(table, grid.resolution, composition_groups=groups)
        values_cols = list(table.columns)
        target = np.full(
            (grid.n_cells, len(values_cols)), np.nan
        )
        try:
            idx = grid.cell_index(table.lon, table.lat)
            target[idx] = np.column_stack([table.columns[c] for c in values_cols])
        except DataError:
            # table may extend beyond the grid: keep in-window rows only
            for i in range(table.lon.size):
                try:
                    j = grid.cell_index(table.lon[i], table.lat[i])
                except DataError:
                    continue
                target[j] = [table.columns[c][i] for c in values_cols]
        if len(values_cols) == 1:
            grid.covariates[name] = target[:, 0]
        else:
            z = np.clip(target, eps, None)
            grid.covariates[name] = z / z.sum(axis=1, keepdims=True)
    return grid


def _embed_window(obs, grid, window):
    """Re-home observations on a larger lattice covering the given window."""
    try:
        lonmin, lonmax, latmin, latmax = (float(v) for v in window.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad --window {window!r}: {exc}") from exc
    res = grid.resolution
    if lonmin > grid.lon0 or latmin > grid.lat0:
        raise ConfigError("window does not contain the observations")
    lon0 = grid.lon0 - np.ceil((grid.lon0 - lonmin) / res) * res
    lat0 = grid.lat0 - np.ceil((grid.lat0 - latmin) / res) * res
    n_cols = int(np.floor((lonmax - lon0) / res)) + 1
    n_rows = int(np.floor((latmax - lat0) / res)) + 1
    old_lons, old_lats = grid.lons(), grid.lats()
    if old_lons.max() > lon0 + (n_cols - 1) * res or old_lats.max() > lat0 + (n_rows - 1) * res:
        raise ConfigError("window does not contain the observations")
    big = cfio.LatticeGrid(
        n_rows=n_rows, n_cols=n_cols, lon0=lon0, lat0=lat0,
        resolution=res, category_names=grid.category_names,
    )
    new_cells = big.cell_index(old_lons[obs.cell_indices], old_lats[obs.cell_indices])
    big.observed_mask[new_cells] = True
    from .model import ObservationSet

    order = np.argsort(new_cells)
    return ObservationSet(new_cells[order], obs.y[order]), big


def _build_model(args, grid):
    if args.preset and args.covariates:
        raise ConfigError("give either --preset or --covariates, not both")
    if args.preset:
        if args.preset not in COVARIATE_PRESETS:
            raise ConfigError(
                f"unknown preset {args.preset!r}; choose from {', '.join(COVARIATE_PRESETS)}"
            )
        covset = COVARIATE_PRESETS[args.preset]
    elif args.covariates:
        covset = tuple(s.strip() for s in args.covariates.split(",") if s.strip())
    else:
        covset = ()
    try:
        design = build_design(
            grid, covset, n_categories=len(grid.category_names),
            alr_aux=not getattr(args, "raw_aux", False),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    graph = LatticeGraph(grid.n_rows, grid.n_cols)
    return Model(graph=graph, design=design, priors=PriorConfig(),
                 n_categories=len(grid.category_names))


# ----------------------------------------------------------------- subcommands


def cmd_simulate(args):
    rng = np.random.default_rng(args.seed)
    n_rows, n_cols = args.rows, args.cols
    grid = cfio.LatticeGrid(
        n_rows=n_rows, n_cols=n_cols, lon0=0.5, lat0=50.5, resolution=1.0,
        category_names=DEFAULT_CATEGORIES,
    )
    lon, lat = grid.lons(), grid.lats()
    graph = LatticeGraph(n_rows, n_cols)

    # deterministic two-bump elevation surface
    lon_c, lat_c = lon.mean(), lat.mean()
    elev = (
        1200.0 * np.exp(-(((lon - lon_c * 0.6) ** 2) + (lat - lat_c) ** 2) / 18.0)
        + 800.0 * np.exp(-(((lon - lon_c * 1.4) ** 2) + (lat - lat_c * 1.05) ** 2) / 40.0)
    )
    # auxiliary land-cover composition from an independent spatial draw
    aux_spec = GmrfSpec(0.8, 0.4 * np.eye(2), graph)
    aux_eta = sample_field(aux_spec, rng) + np.array([0.4, -0.3])
    aux = comp.alr_inverse(aux_eta)

    grid.covariates = {"elevation": elev, "aux": aux}
    mask = rng.random(grid.n_cells) < args.frac_observed
    if not mask.any():
        mask[0] = True
    grid.observed_mask = mask

    design = build_design(grid, ("elevation", "aux"))
    beta_true = np.array([
        [0.3, -0.2],   # intercept
        [0.8, -0.5],   # elevation
        [0.6, 0.1],    # aux alr1
        [-0.1, 0.5],   # aux alr2
    ])
    sigma_true = np.array([[0.4, 0.1], [0.1, 0.4]])
    spec = GmrfSpec(args.kappa, sigma_true, graph)
    obs, truth = simulate_dataset(spec, design, beta_true, args.alpha, mask, rng)

    with cfio.output_lock(args.out) as out:
        cells = obs.cell_indices
        obs_table = cfio.GridTable(
            cell_ids=[str(c) for c in cells],
            lon=lon[cells], lat=lat[cells],
            columns={n: obs.y[:, j] for j, n in enumerate(DEFAULT_CATEGORIES)},
            resolution=1.0,
        )
        cfio.write_grid_table(obs_table, out / "observations.tsv")
        cfio.write_grid_table(
            cfio.composition_table(grid, truth["z"]), out / "truth.tsv"
        )
        cfio.write_grid_table(
            cfio.GridTable([str(i) for i in range(grid.n_cells)], lon, lat,
                           {"elevation": elev}, 1.0),
            out / "covariate_elevation.tsv",
        )
        cfio.write_grid_table(
            cfio.GridTable([str(i) for i in range(grid.n_cells)], lon, lat,
                           {f"aux_{n}": aux[:, j] for j, n in enumerate(DEFAULT_CATEGORIES)},
                           1.0),
            out / "covariate_aux.tsv",
        )
        params = {
            "beta_true": beta_true.tolist(),
            "design_columns": design.column_names,
            "alpha": args.alpha,
            "kappa": args.kappa,
            "sigma": sigma_true.tolist(),
            "seed": args.seed,
            "rows": n_rows,
            "cols": n_cols,
            "frac_observed": args.frac_observed,
        }
        (out / "params.json").write_text(json.dumps(params, indent=2, sort_keys=True) + "\n")
        manifest = cfio.build_manifest(
            "simulate",
            _config_text(args, ("rows", "cols", "frac_observed", "alpha", "kappa", "seed")),
            {}, [args.seed],
        )
        cfio.write_manifest(out / "manifest.json", manifest)
    print(f"simulate: wrote {grid.n_cells}-cell benchmark ({obs.n_obs} observed) to {args.out}")
    return 0


def cmd_fit(args):
    _resolve_options(args)
    obs, grid = cfio.read_observations(args.obs, eps=args.epsilon)
    if args.window:
        obs, grid = _embed_window(obs, grid, args.window)
    tables = _parse_named_paths(args.covariate_table, "--covariate-table")
    _attach_covariates(grid, tables, args.epsilon)
    model = _build_model(args, grid)

    ckpt_every = args.checkpoint_every or 0
    out_dir = Path(args.out)
    config = _chain_config(
        args,
        checkpoint_every=ckpt_every,
        checkpoint_path=str(out_dir / "checkpoint.bin"),
    )
    with cfio.output_lock(out_dir) as out:
        if args.resume:
            from .inference import resume_chain

            summary = resume_chain(args.resume, model, obs, config)
        elif args.chains > 1:
            summary = run_chains(model, obs, config, n_chains=args.chains, jobs=args.jobs)
        else:
            summary = run_chain(model, obs, config)

        dic_parts = validation.dic_components(summary, model, obs)
        metrics = {
            "dic": dic_parts["dic"],
            "dic_dbar": dic_parts["dbar"],
            "dic_p_d": dic_parts["p_d"],
            "n_obs": obs.n_obs,
            "n_cells": grid.n_cells,
            "n_retained": summary.n_retained,
            "design_columns": ",".join(summary.column_names),
            "posterior_mean_alpha": float(np.mean(summary.alpha_samples)),
            "posterior_mean_kappa": float(np.mean(summary.kappa_samples)),
        }
        for k, v in summary.acceptance.items():
            metrics[f"accept_{k}"] = v
        for k, v in summary.ess.items():
            metrics[f"ess_{k}"] = v
        manifest = cfio.build_manifest(
            "fit",
            _config_text(args, ("samples", "burn_in", "thin", "seed", "chains",
                                "preset", "covariates", "epsilon", "window")),
            {"observations": args.obs, **{f"covariate_{k}": str(v) for k, v in tables.items()}},
            [args.seed],
            timings={"chain_seconds": summary.elapsed_seconds},
        )
        cfio.write_outputs(summary, grid, out, metrics=metrics, manifest=manifest)

        cfio.render_ternary_map(summary.z_mean, grid.n_rows, grid.n_cols,
                                out / "reconstruction.ppm", block=args.block)
        stages = decompose_predictor(summary, model)
        for label, zmap in stages:
            cfio.write_grid_table(cfio.composition_table(grid, zmap),
                                  out / f"decomposition_{label}.tsv")
            cfio.render_ternary_map(zmap, grid.n_rows, grid.n_cols,
                                    out / f"decomposition_{label}.ppm", block=args.block)

        regions = []
        if args.region_cells:
            for tok in args.region_cells.split(","):
                cell = int(tok)
                if not 0 <= cell < grid.n_cells:
                    raise ConfigError(f"region cell {cell} outside the lattice")
                regions.append(predictive_region(summary, cell, level=args.region_level))
            rows = ["cell\tlevel\tcoverage_fraction"]
            rows += [f"{r.cell}\t{r.level:.6g}\t{r.coverage_fraction:.10g}" for r in regions]
            (out / "regions.tsv").write_text("\n".join(rows) + "\n")
            region_json = [
                {"cell": r.cell, "level": r.level,
                 "coverage_fraction": r.coverage_fraction,
                 "polygon": r.polygon.tolist()}
                for r in regions
            ]
            (out / "regions.json").write_text(
                json.dumps(region_json, indent=2, sort_keys=True) + "\n"
            )

        if not args.no_figures:
            figures.save_composition_figure(
                summary.z_mean, grid.n_rows, grid.n_cols, out / "reconstruction.png",
                title="posterior mean reconstruction",
                category_names=grid.category_names,
            )
            figures.save_trace_figure(summary, out / "traces.png")
            figures.save_decomposition_figure(stages, grid.n_rows, grid.n_cols,
                                              out / "decomposition.png")
            if regions:
                figures.save_region_figure(regions, out / "regions.png",
                                           category_names=grid.category_names)
    print(f"fit: DIC {dic_parts['dic']:.2f}, artifacts in {args.out}")
    return 0


def cmd_cv(args):
    _resolve_options(args)
    obs, grid = cfio.read_observations(args.obs, eps=args.epsilon)
    tables = _parse_named_paths(args.covariate_table, "--covariate-table")
    _attach_covariates(grid, tables, args.epsilon)
    preset_names = (
        [s.strip() for s in args.presets.split(",") if s.strip()]
        if args.presets else None
    )
    if preset_names is None:
        preset_names = ["custom"] if args.covariates else ["Constant"]

    config = _chain_config(args)
    plan = validation.make_folds(obs.n_obs, args.folds, args.seed)
    results = {}
    with cfio.output_lock(args.out) as out:
        for name in preset_names:
            sub_args = args
            if name != "custom":
                if name not in COVARIATE_PRESETS:
                    raise ConfigError(f"unknown preset {name!r}")
                sub_args = argparse.Namespace(**vars(args))
                sub_args.preset, sub_args.covariates = name, None
            model = _build_model(sub_args, grid)
            results[name] = validation.cross_validate(
                model, obs, config, plan,
                chain_factor=args.chain_factor, jobs=args.jobs,
            )
        lines = ["model\tpooled_acd\t" + "\t".join(
            f"fold_{i + 1}" for i in range(plan.n_folds))]
        for name, res in results.items():
            lines.append("\t".join(
                [name, "%.10g" % res.pooled_acd] + ["%.10g" % a for a in res.fold_acds]
            ))
        (out / "cv_report.tsv").write_text("\n".join(lines) + "\n")
        text = [f"{plan.n_folds}-fold cross-validation ({obs.n_obs} observations)"]
        for name, res in results.items():
            text.append(f"  {name}: pooled ACD {res.pooled_acd:.4f} "
                        f"(folds {', '.join('%.4f' % a for a in res.fold_acds)})")
        (out / "cv_report.txt").write_text("\n".join(text) + "\n")
        manifest = cfio.build_manifest(
            "cv",
            _config_text(args, ("samples", "burn_in", "thin", "seed", "folds",
                                "chain_factor", "presets", "covariates", "epsilon")),
            {"observations": args.obs,
             **{f"covariate_{k}": str(v) for k, v in tables.items()}},
            [args.seed],
        )
        cfio.write_manifest(out / "manifest.json", manifest)
        if not args.no_figures:
            import matplotlib.pyplot as plt

            fig, ax = plt.subplots(figsize=(1.2 * len(results) + 2.5, 3.5))
            names = list(results)
            ax.bar(names, [results[n].pooled_acd for n in names])
            ax.set_ylabel("pooled CV ACD")
            ax.tick_params(axis="x", rotation=30)
            fig.tight_layout()
            fig.savefig(out / "cv_report.png", dpi=120,
                        metadata={"Software": "compfield"})
            plt.close(fig)
    for name, res in results.items():
        print(f"cv: {name} pooled ACD {res.pooled_acd:.4f}")
    return 0


def _load_composition_map(path):
    table = cfio.read_grid_table(path)
    names = list(table.columns)
    if len(names) < 2:
        raise DataError(f"{path}: composition table needs >= 2 value columns")
    res = table.resolution
    if res is None:
        res = min(cfio._infer_resolution(table.lon), cfio._infer_resolution(table.lat))
    lon0, lat0 = float(table.lon.min()), float(table.lat.min())
    cols = np.rint((table.lon - lon0) / res).astype(int)
    rows = np.rint((table.lat - lat0) / res).astype(int)
    n_cols, n_rows = cols.max() + 1, rows.max() + 1
    z = np.full((n_rows * n_cols, len(names)), np.nan)
    z[rows * n_cols + cols] = np.column_stack([table.columns[n] for n in names])
    key = (round(res, 9), round(lon0, 6), round(lat0, 6), n_rows, n_cols)
    return key, z, names


def cmd_compare(args):
    named = _parse_named_paths(args.map, "--map")
    if len(named) < 2:
        raise ConfigError("compare needs at least two --map NAME=PATH arguments")
    keys, maps = {}, {}
    for name, path in named.items():
        key, z, _ = _load_composition_map(path)
        keys[name] = key
        maps[name] = z
    first_key = next(iter(keys.values()))
    for name, key in keys.items():
        if key != first_key:
            raise DataError(
                f"grid mismatch: map {name!r} has lattice {key}, expected {first_key}"
            )
    reference = None
    if args.reference:
        ref_key, reference, _ = _load_composition_map(args.reference)
        if ref_key != first_key:
            raise DataError(f"grid mismatch: reference lattice {ref_key} != {first_key}")
    report = validation.compare_maps(maps, reference=reference)
    n_rows, n_cols = first_key[3], first_key[4]
    with cfio.output_lock(args.out) as out:
        names = report.names
        header = ["model"] + names + (["reference"] if reference is not None else [])
        lines = ["\t".join(header)]
        for i, a in enumerate(names):
            row = [a] + ["%.10g" % report.acd_matrix[i, j] for j in range(len(names))]
            if reference is not None:
                row.append("%.10g" % report.reference_acd[i])
            lines.append("\t".join(row))
        (out / "acd_matrix.tsv").write_text("\n".join(lines) + "\n")
        text = [f"pairwise ACD over {report.n_cells_used} shared cells"]
        for i, a in enumerate(names):
            for j in range(i + 1, len(names)):
                text.append(f"  {a} vs {names[j]}: {report.acd_matrix[i, j]:.4f}")
        if reference is not None:
            for i, a in enumerate(names):
                text.append(f"  {a} vs reference: {report.reference_acd[i]:.4f}")
        (out / "report.txt").write_text("\n".join(text) + "\n")
        vmax = max(
            (np.nanmax(d) for d in report.percell.values() if np.any(np.isfinite(d))),
            default=1.0,
        )
        for (a, b), d in report.percell.items():
            stem = f"dist_{a}_vs_{b}".replace("/", "_")
            cfio.render_grayscale_map(d, n_rows, n_cols, out / f"{stem}.ppm",
                                      vmax=float(vmax), block=args.block)
            if not args.no_figures:
                figures.save_distance_figure(d, n_rows, n_cols, out / f"{stem}.png",
                                             vmax=float(vmax), title=f"{a} vs {b}")
        if not args.no_figures:
            figures.save_acd_heatmap(report, out / "acd_heatmap.png",
                                     title="pairwise ACD")
        manifest = cfio.build_manifest(
            "compare", _config_text(args, ("block",)),
            {**{f"map_{k}": str(v) for k, v in named.items()},
             **({"reference": args.reference} if args.reference else {})},
            [],
        )
        cfio.write_manifest(out / "manifest.json", manifest)
    print(f"compare: wrote ACD matrix for {len(names)} maps to {args.out}")
    return 0


def cmd_render(args):
    key, z, names = _load_composition_map(args.table)
    n_rows, n_cols = key[3], key[4]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.table).stem
    cfio.render_ternary_map(z, n_rows, n_cols, out / f"{stem}.ppm", block=args.block)
    if not args.no_figures:
        figures.save_composition_figure(z, n_rows, n_cols, out / f"{stem}.png",
                                        title=stem, category_names=names)
    print(f"render: wrote {stem}.ppm to {args.out}")
    return 0


def main(argv=None):
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"compfield: configuration error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"compfield: data error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, InsufficientSamplesError) as exc:
        print(f"compfield: numeric error: {exc}", file=sys.stderr)
        return 3
    except CompfieldError as exc:  # pragma: no cover
        print(f"compfield: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
