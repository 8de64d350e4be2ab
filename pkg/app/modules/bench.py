"""
Bench Module: Transfer Evaluation + Sweep Experiments
===============================================================
PIPELINE: population -> baseline -> enhancement -> victims
===============================================================

1. Population: test inputs classified correctly by the source model
   AND every victim, subsampled with the run seed.
2. Baseline: one trajectory per input on the source model
   (per-example seed = run seed ^ test index).
3. Enhancement: ILA and/or ILA++ guides fitted from the trajectory,
   then projected ascent along the guide starting from the clean input.
4. Evaluation: each adversarial set is optionally snapped to the 8-bit
   grid and scored on every victim (and the source, white-box).

Each report row carries the success rate, the mean cross-entropy on
the scoring model and the mean tap-level disturbance on the source.
Per-example work depends only on (model, example, seed), so reports
are identical for any worker count.
"""

from __future__ import annotations

import json
import logging
import math
import sys
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

# Add parent directory for config import
sys.path.insert(0, str(Path(__file__).parent.parent.parent))
from config import BenchConfig

from app.modules.attack import AttackConfig, Trajectory, contains, make_constraint, run_baseline
from app.modules.data import Dataset, quantize_8bit
from app.modules.enhance import GuideVector, enhance_run, fit_guide
from app.modules.errors import (
    DegenerateGuideError,
    DegenerateTrajectoryError,
    RejectedInputError,
    WeightFormatError,
)
from app.modules.nn import Model, cross_entropy, forward_batch, predict, tap_features
from app.modules.runconfig import RunConfig
from app.modules.tensor_io import read_tensor_file, write_tensor_file
from app.modules.workers import parallel_map, resolve_threads

logger = logging.getLogger(__name__)

BASELINE, ILA, ILAPP, ENSEMBLE = "baseline", "ila", "ilapp", "ensemble"


# ==========================================
# Settings
# ==========================================
@dataclass(frozen=True)
class PipelineSettings:
    """Everything per-example work needs, detached from the config file."""

    baseline: str
    constraint: str
    epsilon: float
    steps: int
    step_size: float
    momentum: float
    start_radius: float
    tap: str
    mode: str
    lam: float
    normalized: bool
    enhance_steps: int
    enhance_step_size: float
    ensemble: Tuple[str, ...] = ()
    seed: int = 0

    @classmethod
    def from_config(cls, cfg: RunConfig, seed: Optional[int] = None) -> "PipelineSettings":
        a, e = cfg.attack, cfg.enhance
        return cls(
            baseline=a.method, constraint=a.constraint, epsilon=a.epsilon, steps=a.steps,
            step_size=a.step_size, momentum=a.momentum, start_radius=cfg.start_radius,
            tap=e.tap, mode=e.mode, lam=e.lam, normalized=e.normalized,
            enhance_steps=e.steps, enhance_step_size=cfg.enhance_step_size,
            ensemble=tuple(a.ensemble), seed=cfg.run.seed if seed is None else int(seed),
        )

    @property
    def effective_steps(self) -> int:
        return 1 if self.baseline == "fgsm" else self.steps

    def attack_config(self, method: str, example_seed: int) -> AttackConfig:
        return AttackConfig(
            method=method, steps=self.steps, step_size=self.step_size, momentum=self.momentum,
            random_start_radius=self.start_radius, seed=example_seed, tap=self.tap,
        )

    def methods(self) -> List[str]:
        methods = [BASELINE]
        if self.mode in ("ila", "ilapp"):
            methods.append(ILA)
        if self.mode == "ilapp":
            methods.append(ILAPP)
            if self.ensemble:
                methods.append(ENSEMBLE)
        return methods


def example_seed(seed: int, index: int) -> int:
    return int(seed) ^ int(index)


# ==========================================
# Population
# ==========================================
def select_population(source: Model, victims: Sequence[Model], test: Dataset,
                      size: int = BenchConfig.POPULATION, seed: int = 0) -> np.ndarray:
    """Sorted test indices classified correctly by the source and all victims."""
    if size < 1:
        raise RejectedInputError(f"population size must be >= 1, got {size}")
    correct = predict(source, test.images) == test.labels
    for victim in victims:
        correct &= predict(victim, test.images) == test.labels
    candidates = np.flatnonzero(correct)
    if candidates.size == 0:
        raise RejectedInputError("no test input is classified correctly by every model")
    if candidates.size > size:
        rng = np.random.default_rng(seed)
        candidates = np.sort(rng.choice(candidates, size=size, replace=False))
    else:
        logger.warning("only %d correctly classified inputs available (requested %d)", candidates.size, size)
    return candidates.astype(np.int64)


# ==========================================
# Per-example work (runs in worker processes)
# ==========================================
def baseline_trajectories(source: Model, settings: PipelineSettings, item) -> List[Trajectory]:
    """Primary baseline trajectory first, then one per extra ensemble baseline."""
    index, x, y = item
    c = make_constraint(settings.constraint, settings.epsilon, x)
    seed = example_seed(settings.seed, index)
    methods = [settings.baseline] + [m for m in settings.ensemble if settings.mode == "ilapp"]
    return [run_baseline(source, x, y, c, settings.attack_config(m, seed)) for m in methods]


def enhance_example(source: Model, settings: PipelineSettings,
                    trajs: List[Trajectory]) -> Dict[str, Tuple[np.ndarray, Optional[GuideVector]]]:
    """Adversarial example and guide for every configured method.

    A degenerate trajectory or guide falls back to the baseline example and
    records no guide.
    """
    primary = trajs[0]
    c = make_constraint(settings.constraint, settings.epsilon, primary.x)
    out: Dict[str, Tuple[np.ndarray, Optional[GuideVector]]] = {BASELINE: (primary.final, None)}
    plan = {ILA: ("ila", trajs[:1]), ILAPP: ("ilapp", trajs[:1]), ENSEMBLE: ("ilapp", trajs)}
    for method in settings.methods()[1:]:
        mode, source_trajs = plan[method]
        try:
            guide = fit_guide(mode, source_trajs, settings.normalized, settings.lam)
            adv = enhance_run(source, guide, primary.x, c, settings.enhance_steps,
                              settings.enhance_step_size, seed=source_trajs[0].config.seed)
        except (DegenerateTrajectoryError, DegenerateGuideError) as exc:
            logger.debug("%s fell back to the baseline example: %s", method, exc)
            out[method] = (primary.final, None)
            continue
        out[method] = (adv, guide)
    return out


def attack_population(source: Model, settings: PipelineSettings, test: Dataset, indices: Sequence[int],
                      threads: int = 1, progress: bool = False) -> List[List[Trajectory]]:
    items = [(int(i), test.images[i], int(test.labels[i])) for i in indices]
    return parallel_map(partial(baseline_trajectories, source, settings), items, threads,
                        desc="baseline", progress=progress)


def enhance_population(source: Model, settings: PipelineSettings, trajectories: Sequence[List[Trajectory]],
                       threads: int = 1, progress: bool = False):
    """Stack per-example results into {method: (N, C, H, W)} plus {method: guides}."""
    results = parallel_map(partial(enhance_example, source, settings), trajectories, threads,
                           desc="enhance", progress=progress)
    advs = {m: np.stack([r[m][0] for r in results]) for m in settings.methods()}
    guides = {m: [r[m][1] for r in results] for m in settings.methods() if m != BASELINE}
    return advs, guides


# ==========================================
# Evaluation
# ==========================================
def eval_transfer(victim: Model, advs, ys, quantize: bool = BenchConfig.QUANTIZE) -> float:
    """Fraction of examples the victim misclassifies."""
    advs = np.asarray(advs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.int64)
    if len(advs) == 0:
        raise RejectedInputError("cannot evaluate an empty adversarial set")
    if len(advs) != len(ys):
        raise RejectedInputError(f"{len(advs)} examples but {len(ys)} labels")
    if quantize:
        advs = quantize_8bit(advs)
    return float(np.count_nonzero(predict(victim, advs) != ys)) / len(ys)


def mean_cross_entropy(model: Model, advs, ys, quantize: bool = False) -> float:
    advs = np.asarray(advs, dtype=np.float64)
    if quantize:
        advs = quantize_8bit(advs)
    logits = forward_batch(model, advs)
    return float(np.mean([cross_entropy(l, y) for l, y in zip(logits, ys)]))


def disturbance_stats(model: Model, tap: str, advs, cleans, ys) -> Tuple[float, float]:
    """(mean cross-entropy at advs, mean ||g(adv) - g(clean)||_2 at the tap)."""
    advs = np.asarray(advs, dtype=np.float64)
    cleans = np.asarray(cleans, dtype=np.float64)
    if len(advs) != len(cleans) or len(advs) != len(ys):
        raise RejectedInputError(f"paired lists differ in length: {len(advs)}, {len(cleans)}, {len(ys)}")
    if len(advs) == 0:
        raise RejectedInputError("disturbance of an empty set is undefined")
    shift = tap_features(model, advs, tap) - tap_features(model, cleans, tap)
    return mean_cross_entropy(model, advs, ys), float(np.mean(np.linalg.norm(shift, axis=1)))


def audit_constraints(advs, cleans, kind: str, epsilon: float) -> List[int]:
    """Positions of examples outside the epsilon-ball or the [0, 1] box."""
    return [i for i, (adv, x) in enumerate(zip(advs, cleans))
            if not contains(make_constraint(kind, epsilon, x), adv)]


def lambda_label(lam: float):
    return "inf" if math.isinf(lam) else float(lam)


@dataclass
class PipelineResult:
    report: pd.DataFrame
    indices: np.ndarray
    cleans: np.ndarray
    labels: np.ndarray
    advs: Dict[str, np.ndarray]
    trajectories: List[List[Trajectory]] = field(default_factory=list, repr=False)
    guides: Dict[str, list] = field(default_factory=dict, repr=False)


def evaluate(source: Model, victims: Dict[str, Model], settings: PipelineSettings,
             advs: Dict[str, np.ndarray], cleans: np.ndarray, ys: np.ndarray,
             quantize: bool = BenchConfig.QUANTIZE, include_source: bool = BenchConfig.INCLUDE_SOURCE) -> pd.DataFrame:
    """One TransferReport row per (method, scoring model)."""
    scorers = ([(source.arch, source)] if include_source else []) + list(victims.items())
    rows = []
    for method, adv in advs.items():
        # the source tap is where the guide lives; measure the shift there
        _, disturbance = disturbance_stats(source, settings.tap, adv, cleans, ys)
        for name, model in scorers:
            rows.append({
                "method": method,
                "baseline": settings.baseline,
                "source": source.arch,
                "victim": name,
                "constraint": settings.constraint,
                "epsilon": settings.epsilon,
                "p": settings.effective_steps,
                "lambda": lambda_label(settings.lam),
                "tap": settings.tap,
                "n": int(len(ys)),
                "success_rate": eval_transfer(model, adv, ys, quantize),
                "mean_ce_loss": mean_cross_entropy(model, adv, ys, quantize),
                "mean_disturbance": disturbance,
                "seed": settings.seed,
            })
    return pd.DataFrame(rows, columns=list(BenchConfig.REPORT_COLUMNS))


def run_pipeline(cfg: RunConfig, suite: Dict[str, Model], test: Dataset, seed: Optional[int] = None,
                 progress: bool = False) -> PipelineResult:
    """Population, baseline, enhancement and evaluation for one configuration."""
    settings = PipelineSettings.from_config(cfg, seed)
    source = suite[cfg.model.source]
    victims = {name: suite[name] for name in cfg.victims}
    threads = resolve_threads(cfg.run.threads)

    indices = select_population(source, list(victims.values()), test, cfg.bench.population, settings.seed)
    cleans, ys = test.images[indices], test.labels[indices]
    logger.info("population: %d inputs (seed %d), %d worker(s)", len(indices), settings.seed, threads)

    trajectories = attack_population(source, settings, test, indices, threads, progress)
    advs, guides = enhance_population(source, settings, trajectories, threads, progress)
    report = evaluate(source, victims, settings, advs, cleans, ys, cfg.bench.quantize, cfg.bench.include_source)
    return PipelineResult(report=report, indices=indices, cleans=cleans, labels=ys, advs=advs,
                          trajectories=trajectories, guides=guides)


# ==========================================
# Sweeps
# ==========================================
def _sweep(cfg: RunConfig, suite, test, values, apply, progress: bool) -> pd.DataFrame:
    if not values:
        raise RejectedInputError("a sweep needs at least one value")
    frames = []
    for value in values:
        logger.info("sweep value %s", value)
        frames.append(run_pipeline(apply(value), suite, test, progress=progress).report)
    return pd.concat(frames, ignore_index=True)


def sweep_p(cfg: RunConfig, suite, test, p_values, progress: bool = False) -> pd.DataFrame:
    return _sweep(cfg, suite, test, p_values, lambda p: cfg.with_values(attack={"steps": int(p)}), progress)


def sweep_lambda(cfg: RunConfig, suite, test, lam_values, progress: bool = False) -> pd.DataFrame:
    return _sweep(cfg, suite, test, lam_values, lambda lam: cfg.with_values(enhance={"lam": float(lam)}), progress)


def sweep_layer(cfg: RunConfig, suite, test, taps, progress: bool = False) -> pd.DataFrame:
    return _sweep(cfg, suite, test, taps, lambda tap: cfg.with_values(enhance={"tap": tap}), progress)


def sweep_seeds(cfg: RunConfig, suite, test, seeds, progress: bool = False) -> pd.DataFrame:
    return _sweep(cfg, suite, test, seeds, lambda s: cfg.with_values(run={"seed": int(s)}), progress)


def compare_baselines(cfg: RunConfig, suite, test, methods, progress: bool = False) -> pd.DataFrame:
    return _sweep(cfg, suite, test, methods, lambda m: cfg.with_values(attack={"method": m}), progress)


SWEEP_RUNNERS = {
    "p": (sweep_p, "p"),
    "lambda": (sweep_lambda, "lambda"),
    "layer": (sweep_layer, "tap"),
    "seeds": (sweep_seeds, "seed"),
    "baselines": (compare_baselines, "baseline"),
}


def run_sweep(cfg: RunConfig, suite, test, values, progress: bool = False) -> pd.DataFrame:
    runner, _ = SWEEP_RUNNERS[cfg.bench.sweep]
    return runner(cfg, suite, test, values, progress)


# ==========================================
# Reports
# ==========================================
def _black_box(report: pd.DataFrame) -> pd.DataFrame:
    black_box = report[report["victim"] != report["source"]]
    return report if black_box.empty else black_box


def summarize(report: pd.DataFrame) -> pd.DataFrame:
    """Mean success rate, loss and disturbance per method over victims and seeds."""
    black_box = _black_box(report)
    keys = ["method", "baseline", "source", "constraint", "epsilon", "p", "lambda", "tap"]
    summary = (
        black_box.astype({"lambda": str})
        .groupby(keys, sort=False)
        .agg(success_rate=("success_rate", "mean"), mean_ce_loss=("mean_ce_loss", "mean"),
             mean_disturbance=("mean_disturbance", "mean"), runs=("n", "size"))
        .reset_index()
    )
    return summary


def _mean(frame: pd.DataFrame, method: str, column: str = "success_rate", **where) -> Optional[float]:
    rows = frame[frame["method"] == method]
    for key, value in where.items():
        rows = rows[rows[key] == value]
    return float(rows[column].mean()) if len(rows) else None


def _transfer_checks(frame: pd.DataFrame) -> List[Tuple[str, float, float, bool]]:
    checks = []
    baseline, ila, ilapp = (_mean(frame, m) for m in (BASELINE, ILA, ILAPP))
    if baseline is not None and ila is not None:
        gain = ila - baseline
        checks.append(("ila - baseline >= bound", gain, BenchConfig.ILA_GAIN, gain >= BenchConfig.ILA_GAIN))
    if ila is not None and ilapp is not None:
        gap = ilapp - ila
        checks.append(("ilapp - ila >= bound", gap, -BenchConfig.TREND_SLACK, gap >= -BenchConfig.TREND_SLACK))
        d_ila, d_ilapp = _mean(frame, ILA, "mean_disturbance"), _mean(frame, ILAPP, "mean_disturbance")
        checks.append(("disturbance(ilapp) - disturbance(ila) >= bound", d_ilapp - d_ila, 0.0, d_ilapp >= d_ila))
    ensemble = _mean(frame, ENSEMBLE)
    if ensemble is not None and ilapp is not None:
        complete = set(frame.loc[frame["method"] == ENSEMBLE, "victim"]) == set(frame["victim"])
        checks.append(("ensemble - ilapp (recorded; complete report)", ensemble - ilapp, math.nan, complete))
    return checks


def _p_checks(frame: pd.DataFrame) -> List[Tuple[str, float, float, bool]]:
    near, far, slack = BenchConfig.P_NEAR, BenchConfig.P_FAR, BenchConfig.TREND_SLACK
    checks = []
    enhanced = ILAPP if (frame["method"] == ILAPP).any() else ILA
    rate_near, rate_far = _mean(frame, enhanced, p=near), _mean(frame, enhanced, p=far)
    if rate_near is not None and rate_far is not None:
        diff = rate_near - rate_far
        checks.append((f"{enhanced}(p={near}) - {enhanced}(p={far}) >= bound", diff, -slack, diff >= -slack))
    # the raw attack keeps improving with more iterations
    base_near, base_far = _mean(frame, BASELINE, p=near), _mean(frame, BASELINE, p=far)
    if base_near is not None and base_far is not None:
        diff = base_far - base_near
        checks.append((f"baseline(p={far}) - baseline(p={near}) >= bound", diff, -slack, diff >= -slack))
    return checks


def _lambda_checks(frame: pd.DataFrame) -> List[Tuple[str, float, float, bool]]:
    frame = frame.assign(lam=frame["lambda"].astype(str).astype(float))
    slack = BenchConfig.TREND_SLACK
    limit = _mean(frame, ILAPP, lam=math.inf)
    if limit is None:
        return []
    checks = []
    large = _mean(frame, ILAPP, lam=BenchConfig.LAMBDA_LARGE)
    if large is not None:
        diff = abs(large - limit)
        checks.append((f"|ilapp(lambda={BenchConfig.LAMBDA_LARGE:g}) - ilapp(inf)| <= bound", diff, slack, diff <= slack))
    small = _mean(frame, ILAPP, lam=BenchConfig.LAMBDA_SMALL)
    if small is not None:
        diff = small - limit
        checks.append((f"ilapp(lambda={BenchConfig.LAMBDA_SMALL:g}) - ilapp(inf) <= bound", diff, slack, diff <= slack))
    return checks


def check_trends(reports: Dict[str, pd.DataFrame]) -> pd.DataFrame:
    """Pass/fail table of the desk-scale transfer trends.

    ``reports`` maps a report stem (``report``, ``sweep_seeds``, ``sweep_p``,
    ``sweep_lambda``, ...) to its rows. Method comparisons run on eval and
    seed reports, the p and lambda checks on their sweeps; a check whose
    rows are absent is left out.
    """
    rows = []
    for stem, report in reports.items():
        frame = _black_box(report)
        checks = []
        if stem.startswith("report") or stem == "sweep_seeds":
            checks += _transfer_checks(frame)
        if stem == "sweep_p":
            checks += _p_checks(frame)
        if stem == "sweep_lambda":
            checks += _lambda_checks(frame)
        rows += [dict(zip(BenchConfig.TREND_COLUMNS, (stem,) + check)) for check in checks]
    return pd.DataFrame(rows, columns=list(BenchConfig.TREND_COLUMNS))


def write_report(report: pd.DataFrame, path) -> Tuple[Path, Path]:
    """CSV with the exact column order plus a JSON mirror alongside."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = report.loc[:, list(BenchConfig.REPORT_COLUMNS)]
    ordered.to_csv(path, index=False, float_format="%.17g")
    json_path = path.with_suffix(".json")
    # float repr round-trips exactly; to_json caps at 15 digits
    json_path.write_text(json.dumps(ordered.to_dict(orient="records"), indent=1) + "\n")
    return path, json_path


def write_plot_data(report: pd.DataFrame, column: str, directory, stem: str) -> List[Path]:
    """Two-column value/rate TSV series, one file per (method, victim)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for (method, victim), group in report.groupby(["method", "victim"], sort=False):
        series = group.groupby(column, sort=False)["success_rate"].mean().reset_index()
        series.columns = ["value", "rate"]
        path = directory / f"{stem}_{method}_{victim}.tsv"
        series.to_csv(path, sep="\t", index=False, float_format="%.17g")
        written.append(path)
    return written


# ==========================================
# Adversarial sets (XFA1)
# ==========================================
def save_adversarials(path, advs: np.ndarray, labels: np.ndarray, indices: np.ndarray) -> None:
    write_tensor_file(path, BenchConfig.ADVERSARIAL_MAGIC, [
        np.asarray(advs, dtype=np.float64),
        np.asarray(labels, dtype=np.float64),
        np.asarray(indices, dtype=np.float64),
    ])


def load_adversarials(path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    tensors = read_tensor_file(path, BenchConfig.ADVERSARIAL_MAGIC)
    if len(tensors) != 3 or len(tensors[0]) != len(tensors[1]) or len(tensors[1]) != len(tensors[2]):
        raise WeightFormatError(f"{path}: expected (examples, labels, indices) with matching lengths")
    return tensors[0], tensors[1].astype(np.int64), tensors[2].astype(np.int64)
