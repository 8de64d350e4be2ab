"""
Attack Module: Constraint Sets + Multi-step Baselines
===============================================================
ALGORITHM: Projected sign-gradient ascent on cross-entropy
===============================================================

    x_{t+1} = Proj_Psi( x_t + alpha * sgn(grad_x L(x_t, y)) )

Psi is an l-inf or l2 ball around the benign input intersected with
the [0, 1] pixel box. Under l2 the sign is replaced by the
l2-normalized gradient.

BASELINES:
- FGSM:    one step, alpha = epsilon
- I-FGSM:  p steps of the update above, starting at x
- PGD:     I-FGSM from a seeded uniform start within a radius
- MI-FGSM: accumulates g_t = mu * g_{t-1} + grad / ||grad||_1 and
           steps along sgn(g_t)

Every run records the trajectory (x_t, h_t, l_t) for t = 0..p where
h_t is the tap feature and l_t the loss at x_t before the update.
"""

from __future__ import annotations

import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

# Add parent directory for config import
sys.path.insert(0, str(Path(__file__).parent.parent.parent))
from config import BaselineConfig, EnhanceConfig

from app.modules.errors import AttackFailureError, RejectedInputError, WeightFormatError
from app.modules.nn import Model, forward_with_tap, grad_input_loss, loss_grad_feature
from app.modules.tensor_io import TensorReader, encode_f64, encode_tensor, encode_u32, encode_u64

logger = logging.getLogger(__name__)

METHODS = ("fgsm", "ifgsm", "pgd", "mifgsm")
CONSTRAINTS = ("linf", "l2")


# ==========================================
# Constraint sets
# ==========================================
@dataclass(frozen=True)
class ConstraintSet:
    kind: str
    epsilon: float
    anchor: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.kind not in CONSTRAINTS:
            raise RejectedInputError(f"unknown constraint {self.kind!r}; options: {CONSTRAINTS}")
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise RejectedInputError(f"epsilon must be a positive real, got {self.epsilon}")


def make_constraint(kind: str, epsilon: float, anchor: np.ndarray) -> ConstraintSet:
    return ConstraintSet(kind=kind, epsilon=float(epsilon), anchor=np.asarray(anchor, dtype=np.float64))


def project(c: ConstraintSet, z: np.ndarray) -> np.ndarray:
    """Project onto the epsilon-ball around the anchor, then onto the [0, 1] box."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != c.anchor.shape:
        raise RejectedInputError(f"shape {z.shape} does not match anchor {c.anchor.shape}")
    if c.kind == "linf":
        z = np.clip(z, c.anchor - c.epsilon, c.anchor + c.epsilon)
    else:
        d = z - c.anchor
        norm = float(np.linalg.norm(d))
        if norm > c.epsilon:
            z = c.anchor + d * (c.epsilon / norm)
    return np.clip(z, 0.0, 1.0)


def contains(c: ConstraintSet, z: np.ndarray, tol: float = BaselineConfig.MEMBERSHIP_TOL) -> bool:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != c.anchor.shape or z.min() < -tol or z.max() > 1.0 + tol:
        return False
    d = z - c.anchor
    size = float(np.max(np.abs(d))) if c.kind == "linf" else float(np.linalg.norm(d))
    return size <= c.epsilon + tol


def step_direction(kind: str, grad: np.ndarray) -> np.ndarray:
    """sgn(grad) under l-inf (sgn(0) = 0); grad / ||grad||_2 under l2."""
    if kind == "linf":
        return np.sign(grad)
    norm = float(np.linalg.norm(grad))
    return grad / norm if norm > 0 else np.zeros_like(grad)


def _require_finite_grad(grad: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(grad)):
        raise AttackFailureError(f"non-finite gradient {where}")


# ==========================================
# Attack configuration and trajectories
# ==========================================
@dataclass(frozen=True)
class AttackConfig:
    method: str = BaselineConfig.METHOD
    steps: int = BaselineConfig.STEPS
    step_size: float = BaselineConfig.STEP_SIZE
    momentum: float = BaselineConfig.MOMENTUM
    random_start_radius: Optional[float] = BaselineConfig.RANDOM_START
    seed: int = 0
    tap: str = EnhanceConfig.TAP

    def __post_init__(self):
        if self.method not in METHODS:
            raise RejectedInputError(f"unknown attack method {self.method!r}; options: {METHODS}")
        if self.steps < 1:
            raise RejectedInputError(f"steps must be >= 1, got {self.steps}")
        if not self.step_size > 0:
            raise RejectedInputError(f"step size must be > 0, got {self.step_size}")
        if self.random_start_radius is not None and self.random_start_radius < 0:
            raise RejectedInputError("random start radius must be >= 0")


@dataclass
class Trajectory:
    """Per-step record of a baseline run.

    ``h_clean`` is g(x) at the tap; it equals ``hs[0]`` unless PGD started
    from a random point.
    """

    x: np.ndarray
    y: int
    xs: List[np.ndarray]
    hs: List[np.ndarray]
    ls: List[float]
    config: AttackConfig
    constraint: str
    epsilon: float
    h_clean: np.ndarray

    @property
    def p(self) -> int:
        return len(self.xs) - 1

    @property
    def final(self) -> np.ndarray:
        return self.xs[-1]


# ==========================================
# Steps and baselines
# ==========================================
def ifgsm_step(model: Model, c: ConstraintSet, x_t: np.ndarray, y: int, alpha: float) -> np.ndarray:
    grad = grad_input_loss(model, x_t, y)
    _require_finite_grad(grad, "in I-FGSM step")
    return project(c, x_t + alpha * step_direction(c.kind, grad))


def run_baseline(model: Model, x: np.ndarray, y: int, c: ConstraintSet, config: AttackConfig) -> Trajectory:
    """Run a baseline attack and record (x_t, h_t, l_t) for t = 0..p."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != c.anchor.shape:
        raise RejectedInputError(f"input shape {x.shape} does not match constraint anchor {c.anchor.shape}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise RejectedInputError("attack inputs must lie in [0, 1]")

    steps, alpha = config.steps, config.step_size
    if config.method == "fgsm":
        steps, alpha = 1, c.epsilon

    x_t = x.copy()
    if config.method == "pgd":
        radius = c.epsilon if config.random_start_radius is None else config.random_start_radius
        if radius > 0:
            rng = np.random.default_rng(config.seed)
            x_t = project(c, x + rng.uniform(-radius, radius, size=x.shape))

    xs, hs, ls = [], [], []
    accumulated = np.zeros_like(x)
    for t in range(steps + 1):
        loss, grad, feature = loss_grad_feature(model, x_t, y, config.tap)
        xs.append(x_t)
        hs.append(feature)
        ls.append(loss)
        if t == steps:
            break
        _require_finite_grad(grad, f"at step {t} of {config.method}")
        if config.method == "mifgsm":
            l1 = float(np.sum(np.abs(grad)))
            accumulated = config.momentum * accumulated + (grad / l1 if l1 > 0 else 0.0)
            direction = step_direction(c.kind, accumulated)
        else:
            direction = step_direction(c.kind, grad)
        x_t = project(c, x_t + alpha * direction)

    h_clean = hs[0] if np.array_equal(xs[0], x) else forward_with_tap(model, x, config.tap)[1]
    return Trajectory(
        x=x, y=int(y), xs=xs, hs=hs, ls=ls, config=config,
        constraint=c.kind, epsilon=c.epsilon, h_clean=h_clean,
    )


# ==========================================
# Trajectory dump (XFT1)
# ==========================================
def _encode_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    return encode_u32(len(raw)) + raw


def save_trajectory(traj: Trajectory, path) -> None:
    cfg = traj.config
    radius = math.nan if cfg.random_start_radius is None else cfg.random_start_radius
    header = b"".join([
        encode_u32(METHODS.index(cfg.method)),
        encode_u32(CONSTRAINTS.index(traj.constraint)),
        encode_f64(traj.epsilon),
        encode_u32(cfg.steps),
        encode_f64(cfg.step_size),
        encode_f64(cfg.momentum),
        encode_f64(radius),
        encode_u64(cfg.seed),
        _encode_str(cfg.tap),
        encode_u32(traj.y),
        encode_u32(len(traj.xs)),
    ])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(BaselineConfig.TRAJECTORY_MAGIC)
        fh.write(header)
        fh.write(encode_tensor(traj.x))
        fh.write(encode_tensor(traj.h_clean))
        for x_t, h_t, l_t in zip(traj.xs, traj.hs, traj.ls):
            fh.write(encode_tensor(x_t))
            fh.write(encode_tensor(h_t))
            fh.write(encode_tensor(np.array(l_t)))


def load_trajectory(path) -> Trajectory:
    reader = TensorReader(Path(path).read_bytes(), source=str(path))
    reader.expect_magic(BaselineConfig.TRAJECTORY_MAGIC)
    try:
        method = METHODS[reader.read_u32("method")]
        constraint = CONSTRAINTS[reader.read_u32("constraint")]
    except IndexError:
        raise WeightFormatError(f"{path}: unknown method or constraint code", position=reader.position)
    epsilon = reader.read_f64("epsilon")
    steps = reader.read_u32("steps")
    step_size = reader.read_f64("step size")
    momentum = reader.read_f64("momentum")
    radius = reader.read_f64("random start")
    seed = reader.read_u64("seed")
    tap = reader.read_bytes(reader.read_u32("tap length"), "tap").decode("utf-8")
    y = reader.read_u32("label")
    count = reader.read_u32("step count")
    x = reader.read_tensor()
    h_clean = reader.read_tensor()
    xs, hs, ls = [], [], []
    for _ in range(count):
        xs.append(reader.read_tensor())
        hs.append(reader.read_tensor())
        ls.append(float(reader.read_tensor()))
    reader.expect_end()
    config = AttackConfig(
        method=method, steps=steps, step_size=step_size, momentum=momentum,
        random_start_radius=None if math.isnan(radius) else radius, seed=seed, tap=tap,
    )
    return Trajectory(x=x, y=y, xs=xs, hs=hs, ls=ls, config=config,
                      constraint=constraint, epsilon=epsilon, h_clean=h_clean)
