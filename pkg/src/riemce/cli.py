"""Command-line orchestration.

Subcommands: train-classifier, train-vae, generate-ce, evaluate,
synth-demo, metric-map.  A flat YAML config file supplies defaults;
flags override file values.  Exit codes: 0 success, 2 configuration or
schema problems, 3 runtime failures.  Failures also leave a
machine-readable record at <out>/error.json.
"""

from __future__ import annotations

import argparse
import itertools
import json
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import models, pipeline, plotting
from .config import RunConfig, config_from_mapping, save_config
from .counterfactual import (
    read_trajectories,
    write_trajectories,
    write_trajectory_summary,
)
from .data import load_dataset_pair, save_dataset_pair
from .errors import ConfigError, RiemceError
from .evaluation import ctr_curve, report, score_trajectory, write_curve_csv
from .models import load_classifier, load_vae, save_classifier, save_vae

_CELL_RE = re.compile(r"^traj_(sgd|rsgd|rsgd_c)_it(\d+)_alpha([0-9.eE+-]+)\.jsonl$")


class RunPaths:
    def __init__(self, root):
        self.root = Path(root)
        self.classifier = self.root / "classifier.ckpt"
        self.vae = self.root / "vae.ckpt"
        self.dataset = self.root / "dataset.ckpt"
        self.effective_config = self.root / "config.yaml"
        self.trajectories = self.root / "trajectories"
        self.reports = self.root / "reports"
        self.figures = self.root / "figures"
        self.error = self.root / "error.json"
        self.generate_meta = self.trajectories / "meta.json"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="riemce",
        description="Counterfactual explanations via Riemannian latent descent",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat YAML config file")
        p.add_argument("--dataset", choices=("surface", "adult", "gmc"))
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--parallelism", type=int)
        p.add_argument("--raw-path", dest="raw_path", help="raw CSV for adult/gmc")
        p.set_defaults(func=func)
        return p

    add("train-classifier", cmd_train_classifier, "train and checkpoint the classifier")
    add("train-vae", cmd_train_vae, "two-stage VAE training (warm-up + variance fit)")
    p = add("generate-ce", cmd_generate, "generate counterfactual trajectories")
    p.add_argument("--force", action="store_true", help="regenerate existing cells")
    p = add("evaluate", cmd_evaluate, "aggregate trajectories into report files")
    p.add_argument(
        "--extra-run",
        action="append",
        default=[],
        help="additional run directory (other seeds) to pool into the report",
    )
    add("synth-demo", cmd_synth_demo, "self-contained synthetic-surface demonstration")
    p = add("metric-map", cmd_metric_map, "latent cost-map grid (2-D latents only)")
    p.add_argument("--metric", choices=("pullback", "enhanced"), default="pullback")
    return parser


def _resolve_config(args) -> RunConfig:
    mapping: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: config must be a flat mapping")
        mapping.update(loaded)
    if args.dataset:
        mapping["dataset"] = args.dataset
    cfg = config_from_mapping(mapping, validate=False)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out:
        overrides["out_dir"] = args.out
    if args.parallelism is not None:
        overrides["parallelism"] = args.parallelism
    if args.raw_path:
        overrides["raw_path"] = args.raw_path
    return replace(cfg, **overrides).validate()


def _write_error(paths: RunPaths | None, command: str, kind: str, message: str) -> None:
    if paths is None:
        return
    try:
        paths.root.mkdir(parents=True, exist_ok=True)
        with open(paths.error, "w", encoding="utf-8") as fh:
            json.dump(
                {"command": command, "kind": kind, "message": message},
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")
    except OSError:
        pass


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 2
        return code
    paths = None
    try:
        cfg = _resolve_config(args)
        paths = RunPaths(cfg.out_dir)
        if paths.error.exists():
            paths.error.unlink()
        args.func(cfg, paths, args)
        return 0
    except ConfigError as exc:
        if paths is None and args.out:
            paths = RunPaths(args.out)
        _write_error(paths, args.command, "config", str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RiemceError, OSError) as exc:
        _write_error(paths, args.command, "runtime", str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 3


def _ensure_dataset(cfg: RunConfig, paths: RunPaths):
    if paths.dataset.exists():
        train, test = load_dataset_pair(paths.dataset)
        if train.name != cfg.dataset:
            raise ConfigError(
                f"cached dataset {train.name!r} does not match configured "
                f"dataset {cfg.dataset!r}"
            )
        return train, test
    train, test = pipeline.build_dataset(cfg)
    save_dataset_pair(paths.dataset, train, test)
    return train, test


def _load_models(cfg: RunConfig, paths: RunPaths):
    if not paths.classifier.exists():
        raise ConfigError(f"missing classifier checkpoint {paths.classifier}")
    if not paths.vae.exists():
        raise ConfigError(f"missing vae checkpoint {paths.vae}")
    clf = load_classifier(paths.classifier)
    vae = load_vae(paths.vae)
    if vae.variance is None:
        raise ConfigError("vae checkpoint has no fitted decoder variance")
    return clf, vae


# --- commands ---------------------------------------------------------------


def cmd_train_classifier(cfg: RunConfig, paths: RunPaths, args) -> None:
    save_config(cfg, paths.effective_config)
    train, test = _ensure_dataset(cfg, paths)
    model, history = models.train_classifier(
        train.x, train.y, pipeline.classifier_config(cfg), test.x, test.y
    )
    save_classifier(paths.classifier, model)
    pipeline.write_history_csv(paths.root / "classifier_metrics.csv", history)
    print(
        f"classifier: balanced accuracy train={model.train_balanced_accuracy:.4f} "
        f"test={model.test_balanced_accuracy:.4f} -> {paths.classifier}"
    )


def cmd_train_vae(cfg: RunConfig, paths: RunPaths, args) -> None:
    save_config(cfg, paths.effective_config)
    train, _ = _ensure_dataset(cfg, paths)
    vae, warm_history = models.train_vae_warmup(train.x, pipeline.vae_config(cfg))
    vae, var_history = models.fit_decoder_variance(vae, train.x, pipeline.rbf_config(cfg))
    save_vae(paths.vae, vae)
    pipeline.write_history_csv(paths.root / "vae_warmup_metrics.csv", warm_history)
    pipeline.write_history_csv(paths.root / "vae_variance_metrics.csv", var_history)
    print(
        f"vae: warm-up recon {warm_history[0]['recon']:.5f} -> "
        f"{warm_history[-1]['recon']:.5f}, variance nll {var_history[-1]['nll']:.5f} "
        f"-> {paths.vae}"
    )


def cmd_generate(cfg: RunConfig, paths: RunPaths, args) -> None:
    save_config(cfg, paths.effective_config)
    train, test = _ensure_dataset(cfg, paths)
    clf, vae = _load_models(cfg, paths)
    factuals, indices, n_negatives = pipeline.select_factuals(
        clf, test, target=1, cap=cfg.ce_max_factuals
    )
    paths.trajectories.mkdir(parents=True, exist_ok=True)
    cells = []
    skipped = 0
    flagged = 0
    grid = itertools.product(cfg.ce_optimizers, cfg.ce_iterations, cfg.ce_alphas)
    for optimizer, iterations, alpha in grid:
        name = pipeline.cell_name(optimizer, iterations, alpha)
        out_file = paths.trajectories / f"{name}.jsonl"
        cells.append(
            {
                "file": out_file.name,
                "optimizer": optimizer,
                "iterations": iterations,
                "alpha": alpha,
            }
        )
        if out_file.exists() and not getattr(args, "force", False):
            skipped += 1
            continue
        trajectories = pipeline.run_cell(
            vae, clf, factuals, cfg, optimizer, iterations, alpha
        )
        flagged += sum(1 for t in trajectories if not t.valid)
        write_trajectories(out_file, trajectories)
    meta = {
        "dataset": cfg.dataset,
        "seed": cfg.seed,
        "n_negatives": n_negatives,
        "n_factuals": int(factuals.shape[0]),
        "factual_test_indices": indices.tolist(),
        "cells": cells,
    }
    with open(paths.generate_meta, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(
        f"generate-ce: {factuals.shape[0]} factuals from {n_negatives} negatives, "
        f"{len(cells) - skipped} cells written, {skipped} reused"
    )
    if flagged:
        # partial results stay on disk; the run itself is reported failed
        raise RiemceError(f"{flagged} trajectories flagged invalid during generation")


def _run_meta(run_dir: Path) -> dict:
    meta_path = run_dir / "meta.json"
    if meta_path.exists():
        with open(meta_path, encoding="utf-8") as fh:
            return json.load(fh)
    return {}


def cmd_evaluate(cfg: RunConfig, paths: RunPaths, args) -> None:
    save_config(cfg, paths.effective_config)
    train, test = _ensure_dataset(cfg, paths)
    if not paths.classifier.exists():
        raise ConfigError(f"missing classifier checkpoint {paths.classifier}")
    clf = load_classifier(paths.classifier)
    immutable = train.immutable_mask

    run_dirs = [paths.trajectories] + [
        RunPaths(extra).trajectories for extra in getattr(args, "extra_run", [])
    ]
    cells = []
    curves: dict[tuple, dict[str, list[dict]]] = {}
    step_trajs: dict[tuple, dict[str, list]] = {}
    for run_dir in run_dirs:
        if not run_dir.is_dir():
            raise ConfigError(f"no trajectory directory {run_dir}")
        meta = _run_meta(run_dir)
        run_dataset = meta.get("dataset", cfg.dataset)
        if run_dataset != cfg.dataset:
            raise ConfigError(
                f"{run_dir}: trajectories are for dataset {run_dataset!r}, "
                f"refusing to mix with {cfg.dataset!r}"
            )
        run_seed = meta.get("seed", cfg.seed)
        for traj_file in sorted(run_dir.glob("traj_*.jsonl")):
            match = _CELL_RE.match(traj_file.name)
            if not match:
                continue
            optimizer, iterations, alpha = (
                match.group(1),
                int(match.group(2)),
                float(match.group(3)),
            )
            trajectories = read_trajectories(traj_file)
            scores = [
                score_trajectory(t, clf, train.x, immutable) for t in trajectories
            ]
            cells.append(
                {
                    "n_iter": iterations,
                    "constraints": alpha > 0,
                    "optimizer": optimizer,
                    "seed": run_seed,
                    "scores": scores,
                }
            )
            rows = ctr_curve(trajectories, cfg.ce_thresholds, clf, train.x)
            write_curve_csv(
                rows,
                paths.reports
                / f"ctr_{optimizer}_it{iterations}_alpha{alpha:g}_seed{run_seed}.csv",
            )
            key = (iterations, alpha)
            curves.setdefault(key, {}).setdefault(optimizer, rows)
            step_trajs.setdefault(key, {}).setdefault(optimizer, trajectories)

    rows = report(cells, paths.reports / "report.csv", paths.reports / "report.json")
    if cfg.figures and curves:
        top_iter = max(k[0] for k in curves)
        for (iterations, alpha), per_opt in curves.items():
            if iterations != top_iter:
                continue
            plotting.plot_ctr_curves(
                per_opt, paths.figures / f"ctr_curves_it{iterations}_alpha{alpha:g}.png"
            )
            ld_curves = {
                opt: pipeline.mean_ld_per_step(
                    trajs, train.x, cap=cfg.fig_max_trajectories
                )
                for opt, trajs in step_trajs[(iterations, alpha)].items()
            }
            plotting.plot_ld_vs_steps(
                ld_curves, paths.figures / f"ld_vs_steps_it{iterations}_alpha{alpha:g}.png"
            )
    print(f"evaluate: {len(cells)} cells -> {paths.reports / 'report.csv'} ({len(rows)} rows)")


def _write_grid_csv(path, grid) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("z1,z2,sqrt_det\n")
        k = 0
        for b in grid["z2"]:
            for a in grid["z1"]:
                fh.write(f"{a:.8g},{b:.8g},{grid['sqrt_det'][k]:.8g}\n")
                k += 1


def cmd_metric_map(cfg: RunConfig, paths: RunPaths, args) -> None:
    train, _ = _ensure_dataset(cfg, paths)
    clf, vae = (None, None)
    if getattr(args, "metric", "pullback") == "enhanced":
        clf, vae = _load_models(cfg, paths)
    else:
        if not paths.vae.exists():
            raise ConfigError(f"missing vae checkpoint {paths.vae}")
        vae = load_vae(paths.vae)
        if vae.variance is None:
            raise ConfigError("vae checkpoint has no fitted decoder variance")
    kind = getattr(args, "metric", "pullback")
    codes = pipeline.train_codes(vae, train)
    grid = pipeline.metric_map_grid(
        vae, clf, codes, resolution=cfg.metric_map_resolution, metric_kind=kind
    )
    csv_path = paths.reports / f"metric_map_{kind}.csv"
    _write_grid_csv(csv_path, grid)
    if cfg.figures:
        plotting.plot_metric_map(
            grid["z1"],
            grid["z2"],
            grid["sqrt_det"],
            paths.figures / f"metric_map_{kind}.png",
            train_codes=codes,
            title=f"{kind} metric volume",
        )
    print(f"metric-map: {csv_path}")


def _demo_select_factuals(cfg, clf, vae, test) -> np.ndarray:
    """Correct negatives whose plane position is below the hole, so the
    straight route to the positive region crosses it."""
    factuals, indices, _ = pipeline.select_factuals(clf, test, target=1, cap=None)
    mins = np.array([f.norm_min for f in test.features[:2]])
    maxs = np.array([f.norm_max for f in test.features[:2]])
    plane = factuals[:, :2] * (maxs - mins) + mins
    below = plane[:, 1] < -max(cfg.surface_hole_radius, 1.0)
    centered = np.abs(plane[:, 0]) < 1.5
    chosen = factuals[below & centered]
    if chosen.shape[0] == 0:
        chosen = factuals
    return chosen[:6]


def cmd_synth_demo(cfg: RunConfig, paths: RunPaths, args) -> None:
    if cfg.dataset != "surface":
        raise ConfigError("synth-demo runs on the surface dataset")
    save_config(cfg, paths.effective_config)
    train, test = _ensure_dataset(cfg, paths)

    if paths.classifier.exists() and paths.vae.exists():
        clf, vae = _load_models(cfg, paths)
    else:
        clf, _ = models.train_classifier(
            train.x, train.y, pipeline.classifier_config(cfg), test.x, test.y
        )
        save_classifier(paths.classifier, clf)
        vae, _ = models.train_vae_warmup(train.x, pipeline.vae_config(cfg))
        vae, _ = models.fit_decoder_variance(vae, train.x, pipeline.rbf_config(cfg))
        save_vae(paths.vae, vae)

    codes = pipeline.train_codes(vae, train)
    summary: dict = {"dataset": "surface", "seed": cfg.seed}

    for kind in ("pullback", "enhanced"):
        grid = pipeline.metric_map_grid(
            vae,
            clf,
            codes,
            resolution=cfg.metric_map_resolution,
            metric_kind=kind,
        )
        _write_grid_csv(paths.reports / f"metric_map_{kind}.csv", grid)
        hole = pipeline.surface_hole_mask(
            grid["decoded"], train.features, (0.0, 0.0), cfg.surface_hole_radius
        )
        data_vols = pipeline.volume_at_codes(vae, clf, codes, metric_kind=kind)
        summary[f"{kind}_hole_mean_sqrt_det"] = (
            float(grid["sqrt_det"][hole].mean()) if hole.any() else float("nan")
        )
        summary[f"{kind}_data_mean_sqrt_det"] = float(data_vols.mean())

    factuals = _demo_select_factuals(cfg, clf, vae, test)
    iterations = max(cfg.ce_iterations)
    latent_paths: dict[str, list] = {}
    ambient_paths: dict[str, list] = {}
    for optimizer in cfg.ce_optimizers:
        trajectories = pipeline.run_cell(
            vae, clf, factuals, cfg, optimizer, iterations, 0.0
        )
        write_trajectories(
            paths.trajectories / f"demo_{optimizer}.jsonl", trajectories
        )
        write_trajectory_summary(
            paths.reports / f"trajectories_{optimizer}.csv", trajectories, train.x
        )
        latent_paths[optimizer] = [
            np.stack([s.z for s in t.steps]) for t in trajectories if t.steps
        ]
        ambient_paths[optimizer] = [
            np.stack([s.x_hat for s in t.steps]) for t in trajectories if t.steps
        ]
        summary[f"{optimizer}_in_cloud_fraction"] = pipeline.in_cloud_fraction(
            trajectories, train.x
        )

    if cfg.figures:
        grid = pipeline.metric_map_grid(
            vae, clf, codes, resolution=cfg.metric_map_resolution, metric_kind="pullback"
        )
        first_paths = {k: v[0] for k, v in latent_paths.items() if v}
        plotting.plot_metric_map(
            grid["z1"],
            grid["z2"],
            grid["sqrt_det"],
            paths.figures / "metric_map_pullback.png",
            train_codes=codes,
            trajectories=first_paths,
        )
        plotting.plot_latent_trajectories(
            codes, train.y, latent_paths, paths.figures / "latent_trajectories.png"
        )
        plotting.plot_ambient_trajectories(
            train.x, train.y, ambient_paths, paths.figures / "ambient_trajectories.png"
        )

    with open(paths.root / "demo_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"synth-demo: summary -> {paths.root / 'demo_summary.json'}")


if __name__ == "__main__":
    sys.exit(main())
