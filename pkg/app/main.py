"""
XferLab command-line surface
Staged transfer-attack experiments: train -> attack -> enhance -> eval, plus sweeps

    xferlab <train|attack|enhance|eval|sweep|report> --config PATH [--seed N] [--out DIR]

Every subcommand reads the same config file, writes into the output
directory and refreshes ``manifest.json`` there.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import scipy

# Add parent directory to path for config import
sys.path.insert(0, str(Path(__file__).parent.parent))
from config import SystemConfig

from app.modules import bench
from app.modules.attack import load_trajectory, save_trajectory
from app.modules.data import export_bitmaps, gen_dataset, load_dataset, save_dataset
from app.modules.enhance import save_guide
from app.modules.errors import (
    AttackFailureError,
    IOFailureError,
    PrerequisiteError,
    RejectedInputError,
    XferLabError,
)
from app.modules.nn import build_model, load_weights, save_weights, train_sgd
from app.modules.runconfig import RunConfig, emit_config, parse_config, sweep_values
from app.modules.workers import resolve_threads

logger = logging.getLogger("xferlab")

SUBCOMMANDS = ("train", "attack", "enhance", "eval", "sweep", "report")


# ==========================================
# Artifact layout
# ==========================================
class Layout:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def models(self) -> Path:
        return self.root / "models"

    @property
    def trajectories(self) -> Path:
        return self.root / "trajectories"

    @property
    def advs(self) -> Path:
        return self.root / "advs"

    @property
    def guides(self) -> Path:
        return self.root / "guides"

    def dataset(self, split: str) -> Path:
        return self.data / f"{split}.xfd"

    def weights(self, arch: str) -> Path:
        return self.models / f"{arch}.xfw"

    def adversarial(self, method: str) -> Path:
        return self.advs / f"{method}.xfa"

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise PrerequisiteError(f"{path} is missing; run `{SystemConfig.TOOL_NAME} {producer}` first")
        return path


def _architectures(cfg: RunConfig) -> List[str]:
    return [cfg.model.source] + cfg.victims


def load_suite(cfg: RunConfig, layout: Layout) -> Dict[str, object]:
    suite = {}
    for arch in _architectures(cfg):
        template = build_model(arch, cfg.data.shape, cfg.data.classes)
        suite[arch] = load_weights(layout.require(layout.weights(arch), "train"), template)
    return suite


def load_test(layout: Layout):
    return load_dataset(layout.require(layout.dataset("test"), "train"), split="test")


# ==========================================
# Subcommands
# ==========================================
def cmd_train(cfg: RunConfig, layout: Layout) -> None:
    d, m = cfg.data, cfg.model
    train = gen_dataset(d.seed, d.train_size, d.classes, d.shape, "train")
    test = gen_dataset(d.seed, d.test_size, d.classes, d.shape, "test")
    save_dataset(train, layout.dataset("train"))
    save_dataset(test, layout.dataset("test"))
    print(f"✓ Generated {len(train)} train / {len(test)} test images of shape {d.shape}")

    summary = {}
    for arch in _architectures(cfg):
        model = build_model(arch, d.shape, d.classes, seed=cfg.run.seed)
        model = train_sgd(model, train, m.epochs, m.lr, m.batch, seed=cfg.run.seed, momentum=m.momentum,
                          holdout=test, accuracy_floor=m.accuracy_floor, progress=SystemConfig.PROGRESS)
        save_weights(model, layout.weights(arch))
        summary[arch] = {"train_accuracy": model.train_accuracy, "holdout_accuracy": model.holdout_accuracy}
        print(f"✓ {arch}: held-out accuracy {model.holdout_accuracy:.4f}")
    (layout.models / "training.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_attack(cfg: RunConfig, layout: Layout) -> None:
    suite, test = load_suite(cfg, layout), load_test(layout)
    settings = bench.PipelineSettings.from_config(cfg)
    source = suite[cfg.model.source]
    indices = bench.select_population(source, [suite[v] for v in cfg.victims], test,
                                      cfg.bench.population, settings.seed)
    threads = resolve_threads(cfg.run.threads)
    trajectories = bench.attack_population(source, settings, test, indices, threads, SystemConfig.PROGRESS)

    for old in layout.trajectories.glob("*.xft"):
        old.unlink()
    for index, trajs in zip(indices, trajectories):
        for k, traj in enumerate(trajs):
            save_trajectory(traj, layout.trajectories / f"{int(index):06d}_{k}.xft")
    pd.DataFrame({"index": indices, "label": test.labels[indices]}).to_csv(
        layout.trajectories / "population.csv", index=False)
    finals = np.stack([trajs[0].final for trajs in trajectories])
    bench.save_adversarials(layout.adversarial(bench.BASELINE), finals, test.labels[indices], indices)
    print(f"✓ {settings.baseline} trajectories for {len(indices)} inputs on {cfg.model.source}")


def _load_population_trajectories(layout: Layout):
    population = layout.require(layout.trajectories / "population.csv", "attack")
    indices = pd.read_csv(population)["index"].to_numpy(dtype=np.int64)
    trajectories = []
    for index in indices:
        files = sorted(layout.trajectories.glob(f"{int(index):06d}_*.xft"))
        if not files:
            raise PrerequisiteError(f"no trajectory for test input {index}; run `{SystemConfig.TOOL_NAME} attack` first")
        trajectories.append([load_trajectory(f) for f in files])
    return indices, trajectories


def cmd_enhance(cfg: RunConfig, layout: Layout) -> None:
    suite = load_suite(cfg, layout)
    indices, trajectories = _load_population_trajectories(layout)
    settings = bench.PipelineSettings.from_config(cfg)
    threads = resolve_threads(cfg.run.threads)
    advs, guides = bench.enhance_population(suite[cfg.model.source], settings, trajectories,
                                            threads, SystemConfig.PROGRESS)
    labels = np.array([trajs[0].y for trajs in trajectories], dtype=np.int64)
    for method, examples in advs.items():
        bench.save_adversarials(layout.adversarial(method), examples, labels, indices)
        if cfg.bench.bitmaps:
            export_bitmaps(examples, layout.root / "bitmaps" / method, prefix=method)
    for method, per_example in guides.items():
        for index, guide in zip(indices, per_example):
            if guide is not None:
                save_guide(guide, layout.guides / f"{method}_{int(index):06d}.xfg")
    fallbacks = {m: sum(g is None for g in gs) for m, gs in guides.items()}
    print(f"✓ Enhanced {len(indices)} inputs with {', '.join(advs)} (baseline fallbacks: {fallbacks})")


def cmd_eval(cfg: RunConfig, layout: Layout) -> pd.DataFrame:
    suite, test = load_suite(cfg, layout), load_test(layout)
    settings = bench.PipelineSettings.from_config(cfg)
    advs, labels, indices = {}, None, None
    for method in settings.methods():
        path = layout.require(layout.adversarial(method), "enhance" if method != bench.BASELINE else "attack")
        advs[method], labels, indices = bench.load_adversarials(path)
    cleans = test.images[indices]
    for method, examples in advs.items():
        bad = bench.audit_constraints(examples, cleans, settings.constraint, settings.epsilon)
        if bad:
            raise AttackFailureError(f"{method}: {len(bad)} example(s) violate the constraint set")
    victims = {name: suite[name] for name in cfg.victims}
    report = bench.evaluate(suite[cfg.model.source], victims, settings, advs, cleans, labels,
                            cfg.bench.quantize, cfg.bench.include_source)
    bench.write_report(report, layout.root / "report.csv")
    print(report.to_string(index=False))
    return report


def cmd_sweep(cfg: RunConfig, layout: Layout) -> pd.DataFrame:
    suite, test = load_suite(cfg, layout), load_test(layout)
    kind = cfg.bench.sweep
    values = sweep_values(cfg)
    report = bench.run_sweep(cfg, suite, test, values, SystemConfig.PROGRESS)
    bench.write_report(report, layout.root / f"sweep_{kind}.csv")
    _, column = bench.SWEEP_RUNNERS[kind]
    bench.write_plot_data(report, column, layout.root / "plots", f"sweep_{kind}")
    print(bench.summarize(report).to_string(index=False))
    return report


def cmd_report(cfg: RunConfig, layout: Layout) -> pd.DataFrame:
    sources = sorted(set(layout.root.glob("report*.csv")) | set(layout.root.glob("sweep_*.csv")))
    if not sources:
        raise PrerequisiteError(f"no report under {layout.root}; run `{SystemConfig.TOOL_NAME} eval` or `sweep` first")
    frames = {path.stem: pd.read_csv(path, keep_default_na=False) for path in sources}
    summary = bench.summarize(pd.concat(frames.values(), ignore_index=True))
    summary.to_csv(layout.root / "summary.csv", index=False, float_format="%.17g")
    print(summary.to_string(index=False))

    trends = bench.check_trends(frames)
    trends.to_csv(layout.root / "trends.csv", index=False, float_format="%.17g")
    for row in trends.itertuples(index=False):
        mark = "✓" if row.passed else "✗"
        print(f"{mark} [{row.report}] {row.check}: {row.observed:.4f} (bound {row.bound:g})")
    return summary


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


# ==========================================
# Manifest
# ==========================================
def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(cfg: RunConfig, layout: Layout, subcommand: str) -> Path:
    path = layout.root / SystemConfig.MANIFEST_NAME
    history = []
    if path.exists():
        try:
            history = json.loads(path.read_text()).get("history", [])
        except (ValueError, AttributeError):
            logger.warning("replacing unreadable manifest %s", path)
    timestamp = datetime.now(timezone.utc).isoformat()
    history.append({"command": subcommand, "seed": cfg.run.seed, "timestamp": timestamp})
    files = {
        str(p.relative_to(layout.root)): _sha256(p)
        for p in sorted(layout.root.rglob("*")) if p.is_file() and p != path
    }
    manifest = {
        "tool": SystemConfig.TOOL_NAME,
        "tool_version": SystemConfig.VERSION,
        "command": subcommand,
        "seed": cfg.run.seed,
        "config": emit_config(cfg),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
        "files": files,
        "history": history,
        "updated": timestamp,
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# ==========================================
# Entry points
# ==========================================
def _report_failure(error: XferLabError) -> int:
    print(f"error[{error.category}]: {error}", file=sys.stderr)
    return error.exit_code


def run(subcommand: str, cfg: RunConfig) -> int:
    """Execute one subcommand; returns the process exit status."""
    if subcommand not in COMMANDS:
        print(f"error[rejected-input]: unknown subcommand {subcommand!r}; options: {SUBCOMMANDS}", file=sys.stderr)
        return 2
    layout = Layout(cfg.run.out)
    try:
        layout.root.mkdir(parents=True, exist_ok=True)
        COMMANDS[subcommand](cfg, layout)
        write_manifest(cfg, layout, subcommand)
    except OSError as exc:
        return _report_failure(IOFailureError(str(exc)))
    except XferLabError as exc:
        return _report_failure(exc)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=SystemConfig.TOOL_NAME,
        description="Transfer-based adversarial attacks with intermediate-level enhancement",
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="plain-text key = value run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override [run] seed")
    parser.add_argument("--out", default=None, help="override [run] out directory")
    parser.add_argument("--version", action="version", version=f"%(prog)s {SystemConfig.VERSION}")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, SystemConfig.LOG_LEVEL.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = parse_config(args.config)
        overrides = {}
        if args.seed is not None:
            if args.seed < 0:
                raise RejectedInputError("--seed must be >= 0")
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        if overrides:
            cfg = cfg.with_values(run=overrides)
    except OSError as exc:
        return _report_failure(IOFailureError(str(exc)))
    except XferLabError as exc:
        return _report_failure(exc)
    return run(args.subcommand, cfg)


if __name__ == "__main__":
    sys.exit(main())
