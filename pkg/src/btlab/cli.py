"""Command-line pipeline orchestration.

Every subcommand is runnable on its own from the previous stage's files; all
artifacts land under the output directory, one subdirectory per seed, and
every file embeds the digest of the resolved configuration so outputs from
different configurations are detectable. BTLAB_THREADS caps how many sweep
points run in parallel worker processes (default 1, sequential).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import nn
from .classifier import finetune_revision, save_training_log_csv, select_model, split_validation, train_classifier
from .config import ExperimentConfig, derive_seed
from .data import generate_mixture, inject_idn_noise, load_dataset_csv, save_dataset_csv
from .distill import collect_distilled, load_distilled_csv, save_distilled_csv, warmup_train
from .exceptions import BtlabError, ConfigError, ParseError, PipelineError
from .metrics import MetricsReport, aggregate_metrics, evaluate_seed, run_comparison, save_comparison_csv, save_report_json
from .transition import matrix_head_classes, train_transition

DEFAULT_RHOS = "0.2,0.25,0.3,0.35,0.4"

STAGES = ["generate", "inject-noise", "warmup", "distill", "train-transition",
          "train-classifier", "evaluate"]


def _seed_dir(out: Path, seed: int) -> Path:
    path = out / f"seed_{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _file_digest(path: Path) -> str | None:
    if path.suffix == ".json":
        with open(path) as fh:
            return json.load(fh).get("config_digest")
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            text = line[1:].strip()
            if text.startswith("config_digest="):
                return text.partition("=")[2]
    return None


def _check_digest(path: Path, expected: str) -> None:
    found = _file_digest(path)
    if found is not None and found != expected:
        warnings.warn(f"{path} was produced under config digest {found}, "
                      f"current config digest is {expected}", stacklevel=2)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing input {path}; run `{producer}` first", stage=producer)
    return path


def stage_generate(config: ExperimentConfig, seed: int, out: Path) -> None:
    sdir = _seed_dir(out, seed)
    digest = config.digest()
    train = generate_mixture(config.mixture, config.n_train, derive_seed(seed, "train-data"))
    test = generate_mixture(config.mixture, config.n_test, derive_seed(seed, "test-data"))
    save_dataset_csv(train, sdir / "train_clean.csv", digest=digest)
    save_dataset_csv(test, sdir / "test.csv", digest=digest)


def stage_inject(config: ExperimentConfig, seed: int, out: Path) -> None:
    sdir = _seed_dir(out, seed)
    digest = config.digest()
    path = _require(sdir / "train_clean.csv", "generate")
    _check_digest(path, digest)
    noisy = inject_idn_noise(load_dataset_csv(path), config.noise_config(seed))
    save_dataset_csv(noisy, sdir / "train_noisy.csv", digest=digest)


def stage_warmup(config: ExperimentConfig, seed: int, out: Path) -> None:
    sdir = _seed_dir(out, seed)
    digest = config.digest()
    path = _require(sdir / "train_noisy.csv", "inject-noise")
    _check_digest(path, digest)
    params = warmup_train(load_dataset_csv(path), config.distill_config(seed))
    nn.save_checkpoint(params, sdir / "warmup.json", extra={"config_digest": digest})


def stage_distill(config: ExperimentConfig, seed: int, out: Path) -> None:
    sdir = _seed_dir(out, seed)
    digest = config.digest()
    noisy_path = _require(sdir / "train_noisy.csv", "inject-noise")
    warm_path = _require(sdir / "warmup.json", "warmup")
    _check_digest(noisy_path, digest)
    _check_digest(warm_path, digest)
    noisy = load_dataset_csv(noisy_path)
    distilled = collect_distilled(noisy, nn.load_checkpoint(warm_path), config.distill_config(seed))
    save_distilled_csv(distilled, sdir / "distilled.csv", digest=digest)


def stage_train_transition(config: ExperimentConfig, seed: int, out: Path) -> None:
    sdir = _seed_dir(out, seed)
    digest = config.digest()
    path = _require(sdir / "distilled.csv", "distill")
    _check_digest(path, digest)
    theta = train_transition(load_distilled_csv(path), config.transition_config(seed))
    nn.save_checkpoint(theta, sdir / "transition.json", extra={
        "config_digest": digest,
        "head": {"kind": "row_softmax", "n_classes": matrix_head_classes(theta)},
    })


def stage_train_classifier(config: ExperimentConfig, seed: int, out: Path) -> None:
    sdir = _seed_dir(out, seed)
    digest = config.digest()
    noisy_path = _require(sdir / "train_noisy.csv", "inject-noise")
    theta_path = _require(sdir / "transition.json", "train-transition")
    _check_digest(noisy_path, digest)
    _check_digest(theta_path, digest)
    noisy = load_dataset_csv(noisy_path)
    theta = nn.load_checkpoint(theta_path)
    test_path = sdir / "test.csv"
    test = load_dataset_csv(test_path) if test_path.exists() else None
    cfg = config.classifier_config(seed)
    checkpoints = train_classifier(noisy, theta, cfg, test=test)
    save_training_log_csv(checkpoints, sdir / "training_log.csv", digest=digest)
    _, val_idx = split_validation(len(noisy), cfg.validation_fraction, cfg.seed)
    noisy_val = noisy.subset(val_idx)
    selected = select_model(checkpoints, noisy_val, theta)
    nn.save_checkpoint(selected, sdir / "classifier.json", extra={"config_digest": digest})
    if cfg.revision_epochs > 0:
        C = noisy.n_classes
        result = finetune_revision(selected, np.zeros((C, C)), theta, noisy_val, cfg)
        nn.save_checkpoint(result.params, sdir / "classifier_revised.json",
                           extra={"config_digest": digest})
        with open(sdir / "revision_slack.json", "w") as fh:
            json.dump({"config_digest": digest, "diverged": result.diverged,
                       "slack": result.slack.tolist()}, fh)
            fh.write("\n")


def stage_evaluate(config: ExperimentConfig, seeds: list[int], out: Path) -> None:
    digest = config.digest()
    per_seed = []
    failures = []
    for seed in seeds:
        sdir = _seed_dir(out, seed)
        try:
            paths = {name: _require(sdir / name, stage) for name, stage in [
                ("train_noisy.csv", "inject-noise"), ("test.csv", "generate"),
                ("distilled.csv", "distill"), ("transition.json", "train-transition"),
                ("classifier.json", "train-classifier")]}
            for path in paths.values():
                _check_digest(path, digest)
            revised = diverged = None
            revised_path = sdir / "classifier_revised.json"
            if revised_path.exists():
                revised = nn.load_checkpoint(revised_path)
                with open(sdir / "revision_slack.json") as fh:
                    diverged = json.load(fh)["diverged"]
            per_seed.append(evaluate_seed(
                config, seed,
                load_dataset_csv(paths["train_noisy.csv"]),
                load_dataset_csv(paths["test.csv"]),
                load_distilled_csv(paths["distilled.csv"]),
                nn.load_checkpoint(paths["transition.json"]),
                nn.load_checkpoint(paths["classifier.json"]),
                revised, diverged,
            ))
        except PipelineError as err:
            failures.append({"seed": seed, "stage": err.stage or "evaluate", "error": str(err)})
    report = MetricsReport(config_digest=digest, seeds=list(seeds), per_seed=per_seed,
                           aggregate=aggregate_metrics(per_seed), failures=failures)
    save_report_json(report, out / "metrics.json")
    save_comparison_csv(report, out / "comparison.csv")


_STAGE_RUNNERS = {
    "generate": stage_generate,
    "inject-noise": stage_inject,
    "warmup": stage_warmup,
    "distill": stage_distill,
    "train-transition": stage_train_transition,
    "train-classifier": stage_train_classifier,
}


def run_pipeline(config: ExperimentConfig, seeds: list[int], out: Path) -> None:
    """generate → inject → warmup → distill → transition → classifier → evaluate."""
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        fh.write(config.to_json())
    for seed in seeds:
        for stage in STAGES[:-1]:
            _run_stage(stage, config, seed, out)
    stage_evaluate(config, seeds, out)


def _run_stage(stage: str, config: ExperimentConfig, seed: int, out: Path) -> None:
    try:
        _STAGE_RUNNERS[stage](config, seed, out)
    except PipelineError:
        raise
    except (ConfigError, ParseError):
        raise
    except BtlabError as err:
        raise PipelineError(f"{stage} failed for seed {seed}: {err}", stage=stage) from err


def _sweep_point(raw_config: dict, rho: float, seeds: list[int]) -> dict:
    config = ExperimentConfig.from_dict(raw_config).with_rho_max(rho)
    config = config.with_overrides(seeds=list(seeds))
    report = run_comparison(config)
    agg = report.aggregate
    def stat(key, which):
        return agg[key][which] if key in agg else None
    return {
        "rho": rho,
        "acc_mean": stat("method.test_accuracy_vs_bayes", "mean"),
        "acc_sd": stat("method.test_accuracy_vs_bayes", "sd"),
        "precision_mean": stat("method.distill_precision", "mean"),
        "coverage_mean": stat("method.distill_coverage", "mean"),
        "flagged": bool(report.failures) or "method.test_accuracy_vs_bayes" not in agg,
    }


def _worker_threads() -> int:
    raw = os.environ.get("BTLAB_THREADS", "1").strip() or "1"
    try:
        threads = int(raw)
    except ValueError as err:
        raise ConfigError(f"BTLAB_THREADS must be an integer, got {raw!r}") from err
    if threads < 1:
        raise ConfigError("BTLAB_THREADS must be >= 1")
    return threads


def sweep_rho(config: ExperimentConfig, rho_values: list[float], seeds: list[int],
              out: Path) -> list[dict]:
    if len(rho_values) < 2:
        raise ConfigError("sweep needs at least two rho values")
    for rho in rho_values:
        if not (0.0 <= rho < 1.0):
            raise ConfigError(f"rho value {rho} outside [0, 1)")
    out.mkdir(parents=True, exist_ok=True)
    threads = _worker_threads()
    jobs = [(config.raw, rho, seeds) for rho in rho_values]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            rows = list(pool.map(_sweep_point, *zip(*jobs)))
    else:
        rows = [_sweep_point(*job) for job in jobs]
    rows.sort(key=lambda r: r["rho"])
    digest = config.digest()
    _write_sweep_csv(rows, out / "sweep.csv", digest)
    _write_sweep_svg(rows, out / "sweep.svg", digest)
    return rows


def _write_sweep_csv(rows: list[dict], path: Path, digest: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_digest={digest}\n")
        fh.write("rho,acc_mean,acc_sd,distill_precision_mean,distill_coverage_mean,flagged\n")
        for row in rows:
            cells = [("%.17g" % row["rho"])]
            for key in ("acc_mean", "acc_sd", "precision_mean", "coverage_mean"):
                cells.append("" if row[key] is None else "%.17g" % row[key])
            cells.append("true" if row["flagged"] else "false")
            fh.write(",".join(cells) + "\n")


def _write_sweep_svg(rows: list[dict], path: Path, digest: str) -> None:
    """Self-contained line plot of mean accuracy vs rho with a +/- sd band."""
    width, height = 640, 420
    ml, mr, mt, mb = 70, 20, 40, 50
    pts = [r for r in rows if not r["flagged"] and r["acc_mean"] is not None]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f"<!-- config_digest={digest} -->",
             f'<rect width="{width}" height="{height}" fill="white"/>']
    if pts:
        xs = [r["rho"] for r in pts]
        lows = [r["acc_mean"] - (r["acc_sd"] or 0.0) for r in pts]
        highs = [r["acc_mean"] + (r["acc_sd"] or 0.0) for r in pts]
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(lows), max(highs)
        if x1 == x0:
            x0, x1 = x0 - 0.05, x1 + 0.05
        pad = max((y1 - y0) * 0.15, 0.005)
        y0, y1 = y0 - pad, y1 + pad
        def X(v): return ml + (v - x0) / (x1 - x0) * (width - ml - mr)
        def Y(v): return height - mb - (v - y0) / (y1 - y0) * (height - mt - mb)
        band = " ".join(f"{X(r['rho']):.2f},{Y(h):.2f}" for r, h in zip(pts, highs))
        band += " " + " ".join(f"{X(r['rho']):.2f},{Y(l):.2f}"
                               for r, l in zip(reversed(pts), reversed(lows)))
        parts.append(f'<polygon points="{band}" fill="#9ecae1" fill-opacity="0.5"/>')
        line = " ".join(f"{X(r['rho']):.2f},{Y(r['acc_mean']):.2f}" for r in pts)
        parts.append(f'<polyline points="{line}" fill="none" stroke="#08519c" stroke-width="2"/>')
        for r in pts:
            parts.append(f'<circle cx="{X(r["rho"]):.2f}" cy="{Y(r["acc_mean"]):.2f}" '
                         f'r="3.5" fill="#08519c"/>')
        for i in range(5):
            xv = x0 + (x1 - x0) * i / 4
            yv = y0 + (y1 - y0) * i / 4
            parts.append(f'<line x1="{X(xv):.2f}" y1="{height-mb}" x2="{X(xv):.2f}" '
                         f'y2="{height-mb+5}" stroke="black"/>')
            parts.append(f'<text x="{X(xv):.2f}" y="{height-mb+20}" font-size="12" '
                         f'text-anchor="middle">{xv:.3g}</text>')
            parts.append(f'<line x1="{ml-5}" y1="{Y(yv):.2f}" x2="{ml}" y2="{Y(yv):.2f}" '
                         f'stroke="black"/>')
            parts.append(f'<text x="{ml-8}" y="{Y(yv)+4:.2f}" font-size="12" '
                         f'text-anchor="end">{yv:.3f}</text>')
    else:
        parts.append(f'<text x="{width/2}" y="{height/2}" font-size="14" '
                     f'text-anchor="middle">no unflagged sweep points</text>')
    parts.append(f'<line x1="{ml}" y1="{height-mb}" x2="{width-mr}" y2="{height-mb}" '
                 f'stroke="black"/>')
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height-mb}" stroke="black"/>')
    parts.append(f'<text x="{(ml+width-mr)/2}" y="{height-12}" font-size="13" '
                 f'text-anchor="middle">admission bound rho_max</text>')
    parts.append(f'<text x="18" y="{(mt+height-mb)/2}" font-size="13" text-anchor="middle" '
                 f'transform="rotate(-90 18 {(mt+height-mb)/2})">accuracy vs Bayes labels'
                 f' (mean, band = sd)</text>')
    parts.append(f'<text x="{(ml+width-mr)/2}" y="24" font-size="14" text-anchor="middle">'
                 f'admission-bound sweep</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="btlab",
        description="noisy-label transition-matrix pipeline on synthetic oracle benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = STAGES[:-1] + ["evaluate", "run-all", "sweep-rho"]
    for name in commands:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None,
                       help="JSON config path (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed list with a single seed")
        p.add_argument("--out", type=str, default=None,
                       help="output directory (overrides config output_dir)")
        if name == "sweep-rho":
            p.add_argument("--rhos", type=str, default=DEFAULT_RHOS,
                           help="comma-separated admission bounds to sweep")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = (ExperimentConfig.from_file(args.config) if args.config
                  else ExperimentConfig.from_dict({}))
        if args.seed is not None:
            config = config.with_overrides(seeds=[args.seed])
        out = Path(args.out if args.out is not None else config.output_dir)
        seeds = config.seeds
        if args.command == "run-all":
            run_pipeline(config, seeds, out)
        elif args.command == "evaluate":
            out.mkdir(parents=True, exist_ok=True)
            stage_evaluate(config, seeds, out)
        elif args.command == "sweep-rho":
            try:
                rhos = [float(tok) for tok in args.rhos.split(",") if tok.strip() != ""]
            except ValueError as err:
                raise ConfigError(f"--rhos must be comma-separated numbers: {err}") from err
            sweep_rho(config, rhos, seeds, out)
        else:
            out.mkdir(parents=True, exist_ok=True)
            for seed in seeds:
                _run_stage(args.command, config, seed, out)
    except (ConfigError, ParseError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except PipelineError as err:
        stage = f" [{err.stage}]" if err.stage else ""
        print(f"stage failure{stage}: {err}", file=sys.stderr)
        return 3
    except BtlabError as err:
        print(f"stage failure: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
