"""
Enhance Module: Intermediate-Level Guides + Enhancement Phase
===============================================================
ALGORITHM: Ridge regression of loss on feature discrepancies,
           then projected ascent along the fitted direction
===============================================================

PROBLEM: A baseline attack visits x_0..x_p. Each visit gives a
feature discrepancy d_t = g(x_t) - g(x) at the tap and a loss l_t.
Stack the d_t as rows of H and the l_t in r, then fit

    w* = argmin_w ||r - H w||^2 + lambda ||w||^2
       = (H^T H + lambda I_m)^{-1} H^T r

and re-optimize the input to maximize (g(x + delta) - g(x))^T w*.

SOLVERS:
- direct:    Cholesky of the m x m matrix H^T H + lambda I_m
- woodbury:  only a p x p Cholesky of H H^T + lambda I_p,
             w* = (H^T r - H^T (H H^T + lambda I_p)^{-1} H H^T r) / lambda
- lambda->inf: the 1/lambda factor only rescales the objective, the
             direction left is H^T r (no solve at all)

GUIDES:
- ILA:   h_p - h_0, the final discrepancy alone
- ILA++: w* (or H^T r), optionally from row-normalized H
- Ensemble: rows pooled from several baselines on the same input

For a one-step baseline H^T r = l_1 (h_1 - h_0), a positive multiple of
the ILA guide, and the sign-gradient enhancement cannot tell them apart.
"""

from __future__ import annotations

import logging
import math
import sys
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

# Add parent directory for config import
sys.path.insert(0, str(Path(__file__).parent.parent.parent))
from config import EnhanceConfig

from app.modules.attack import ConstraintSet, Trajectory, project, step_direction
from app.modules.errors import (
    AttackFailureError,
    DegenerateGuideError,
    DegenerateTrajectoryError,
    RegressionError,
    RejectedInputError,
    WeightFormatError,
)
from app.modules.nn import Model, grad_input_projection
from app.modules.tensor_io import TensorReader, encode_tensor, encode_u32

logger = logging.getLogger(__name__)

INFINITY = math.inf


class Provenance(str, Enum):
    ILA = "ila"
    ILAPP_DIRECT = "ilapp_direct"
    ILAPP_WOODBURY = "ilapp_woodbury"
    ILAPP_INF = "ilapp_inf"
    ENSEMBLE = "ensemble"


@dataclass
class RegressionProblem:
    H: np.ndarray          # (k, m), rows are discrepancies
    r: np.ndarray          # (k,), matching losses
    lam: float             # > 0, or INFINITY
    normalized: bool
    tap: str
    h0: np.ndarray         # clean feature anchor, (m,)
    sources: int = 1       # trajectories pooled into H

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=np.float64))
        self.r = np.asarray(self.r, dtype=np.float64).reshape(-1)
        if self.H.shape[0] != self.r.shape[0]:
            raise RejectedInputError(f"H has {self.H.shape[0]} rows but r has {self.r.shape[0]} entries")
        if not self.lam > 0:
            raise RejectedInputError(f"lambda must be positive or inf, got {self.lam}")
        if self.H.shape[0] and not np.all(np.any(self.H != 0, axis=1)):
            raise RejectedInputError("regression rows must be non-zero discrepancies")

    @property
    def rows(self) -> int:
        return int(self.H.shape[0])

    @property
    def dim(self) -> int:
        return int(self.H.shape[1])


@dataclass
class GuideVector:
    w: np.ndarray
    provenance: Provenance
    tap: str
    h0: np.ndarray
    degenerate: bool = False


# ==========================================
# Building problems
# ==========================================
def _discrepancies(traj: Trajectory, normalized: bool):
    rows, losses = [], []
    for t in range(1, traj.p + 1):
        d = traj.hs[t] - traj.h_clean
        norm = float(np.linalg.norm(d))
        if norm == 0.0:
            continue  # x_t did not move the feature; the row carries nothing
        rows.append(d / norm if normalized else d)
        losses.append(traj.ls[t])
    return rows, losses


def build_problem(traj: Trajectory, normalized: bool = EnhanceConfig.NORMALIZED,
                  lam: float = EnhanceConfig.LAMBDA) -> RegressionProblem:
    """Discrepancy matrix for t = 1..p against the clean feature, zero rows dropped."""
    if traj.p < 1:
        raise DegenerateTrajectoryError("trajectory needs at least one step")
    rows, losses = _discrepancies(traj, normalized)
    if not rows:
        raise DegenerateTrajectoryError("every discrepancy of the trajectory is zero")
    return RegressionProblem(H=np.stack(rows), r=np.array(losses), lam=lam, normalized=normalized,
                             tap=traj.config.tap, h0=traj.h_clean)


def ensemble_problem(trajs: Sequence[Trajectory], normalized: bool = EnhanceConfig.NORMALIZED,
                     lam: float = EnhanceConfig.LAMBDA) -> RegressionProblem:
    """Pool the rows of several baselines run on the same input, in input order."""
    if not trajs:
        raise RejectedInputError("ensemble needs at least one trajectory")
    first = trajs[0]
    for other in trajs[1:]:
        if not np.array_equal(other.x, first.x) or other.y != first.y:
            raise RejectedInputError("ensembled trajectories must share the anchor input and label")
        if other.config.tap != first.config.tap or other.h_clean.shape != first.h_clean.shape:
            raise RejectedInputError("ensembled trajectories must share the tap")
    rows, losses = [], []
    for traj in trajs:
        if traj.p < 1:
            raise DegenerateTrajectoryError("trajectory needs at least one step")
        r, l = _discrepancies(traj, normalized)
        rows.extend(r)
        losses.extend(l)
    if not rows:
        raise DegenerateTrajectoryError("every pooled discrepancy is zero")
    return RegressionProblem(H=np.stack(rows), r=np.array(losses), lam=lam, normalized=normalized,
                             tap=first.config.tap, h0=first.h_clean, sources=len(trajs))


# ==========================================
# Solvers
# ==========================================
def _check_solvable(prob: RegressionProblem) -> None:
    if not math.isfinite(prob.lam):
        raise RegressionError("finite-lambda solver called with lambda = inf")
    if not (np.all(np.isfinite(prob.H)) and np.all(np.isfinite(prob.r))):
        raise RegressionError("regression inputs contain non-finite values")


def _spd_factor(A: np.ndarray):
    try:
        factor = cho_factor(A, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise RegressionError(f"SPD factorization failed: {exc}") from exc
    pivot = float(np.min(np.abs(np.diag(factor[0]))))
    if pivot < EnhanceConfig.SPD_DIAGONAL_FLOOR:
        raise RegressionError(f"Cholesky pivot {pivot:.3e} below {EnhanceConfig.SPD_DIAGONAL_FLOOR}")
    return factor


def _provenance(prob: RegressionProblem, solver: Provenance) -> Provenance:
    return Provenance.ENSEMBLE if prob.sources > 1 else solver


def _guide(prob: RegressionProblem, w: np.ndarray, solver: Provenance) -> GuideVector:
    if not np.all(np.isfinite(w)):
        raise RegressionError("solver produced a non-finite guide")
    return GuideVector(w=w, provenance=_provenance(prob, solver), tap=prob.tap, h0=prob.h0,
                       degenerate=not np.any(w))


def ridge_direct(prob: RegressionProblem) -> GuideVector:
    """w* from the m x m regularized normal equations."""
    _check_solvable(prob)
    H = prob.H
    A = H.T @ H + prob.lam * np.eye(prob.dim)
    w = cho_solve(_spd_factor(A), H.T @ prob.r)
    return _guide(prob, w, Provenance.ILAPP_DIRECT)


def ridge_woodbury(prob: RegressionProblem) -> GuideVector:
    """w* through the p x p system; the m x m matrix is never formed."""
    _check_solvable(prob)
    H = prob.H
    Htr = H.T @ prob.r
    K = H @ H.T + prob.lam * np.eye(prob.rows)
    correction = H.T @ cho_solve(_spd_factor(K), H @ Htr)
    w = (Htr - correction) / prob.lam
    return _guide(prob, w, Provenance.ILAPP_WOODBURY)


def guide_lambda_inf(prob: RegressionProblem) -> GuideVector:
    """The lambda -> inf direction H^T r."""
    w = prob.H.T @ prob.r
    guide = _guide(prob, w, Provenance.ILAPP_INF)
    if guide.degenerate:
        logger.debug("H^T r vanished; guide flagged degenerate")
    return guide


def solve_guide(prob: RegressionProblem, solver: str = "auto") -> GuideVector:
    """Dispatch on lambda and shape: inf -> H^T r, rows < m -> Woodbury, else direct."""
    if math.isinf(prob.lam):
        return guide_lambda_inf(prob)
    if solver == "direct" or (solver == "auto" and prob.rows >= prob.dim):
        return ridge_direct(prob)
    if solver in ("woodbury", "auto"):
        return ridge_woodbury(prob)
    raise RejectedInputError(f"unknown solver {solver!r}")


def ila_direction(traj: Trajectory) -> GuideVector:
    """The final discrepancy h_p - h_0."""
    if traj.p < 1:
        raise DegenerateTrajectoryError("trajectory needs at least one step")
    w = traj.hs[-1] - traj.h_clean
    return GuideVector(w=w, provenance=Provenance.ILA, tap=traj.config.tap, h0=traj.h_clean,
                       degenerate=not np.any(w))


def fit_guide(mode: str, trajs: Sequence[Trajectory], normalized: bool = EnhanceConfig.NORMALIZED,
              lam: float = EnhanceConfig.LAMBDA) -> GuideVector:
    """Guide for an enhancement mode.

    'ila' takes exactly one trajectory; 'ilapp' pools several into one
    ensemble problem.
    """
    if mode == "ila":
        if len(trajs) != 1:
            raise RejectedInputError(f"ILA guides come from one trajectory, got {len(trajs)}")
        return ila_direction(trajs[0])
    if mode == "ilapp":
        prob = build_problem(trajs[0], normalized, lam) if len(trajs) == 1 else ensemble_problem(trajs, normalized, lam)
        return solve_guide(prob)
    raise RejectedInputError(f"unknown enhancement mode {mode!r}")


def predict_loss(prob: RegressionProblem, guide: GuideVector) -> np.ndarray:
    """Losses predicted by the fitted linear map for the problem's rows."""
    return prob.H @ guide.w


def optimality_residual(prob: RegressionProblem, guide: GuideVector) -> float:
    """||H^T (H w - r) + lambda w||_inf, zero at the ridge optimum."""
    w = guide.w
    return float(np.max(np.abs(prob.H.T @ (prob.H @ w - prob.r) + prob.lam * w)))


# ==========================================
# Enhancement phase
# ==========================================
def enhance_run(model: Model, guide: GuideVector, x: np.ndarray, c: ConstraintSet,
                steps: int = EnhanceConfig.STEPS, alpha: float = 1.0 / 255, seed: int = 0) -> np.ndarray:
    """Maximize (g(x + delta) - h0)^T w by projected sign ascent from x.

    Deterministic: ``seed`` does not influence the result.
    """
    if guide.degenerate or not np.any(guide.w):
        raise DegenerateGuideError("guide vector is zero; fall back to the baseline example")
    if steps < 0:
        raise RejectedInputError(f"steps must be >= 0, got {steps}")
    x_t = np.asarray(x, dtype=np.float64).copy()
    for t in range(steps):
        grad = grad_input_projection(model, x_t, guide.tap, guide.w, guide.h0)
        if not np.all(np.isfinite(grad)):
            raise AttackFailureError(f"non-finite projection gradient at enhancement step {t}")
        x_t = project(c, x_t + alpha * step_direction(c.kind, grad))
    return x_t


# ==========================================
# Guide files
# ==========================================
_PROVENANCES: List[Provenance] = list(Provenance)


def save_guide(guide: GuideVector, path) -> None:
    tap = guide.tap.encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(EnhanceConfig.GUIDE_MAGIC)
        fh.write(encode_u32(_PROVENANCES.index(guide.provenance)))
        fh.write(encode_u32(int(guide.degenerate)))
        fh.write(encode_u32(len(tap)) + tap)
        fh.write(encode_tensor(guide.w))
        fh.write(encode_tensor(guide.h0))


def load_guide(path) -> GuideVector:
    reader = TensorReader(Path(path).read_bytes(), source=str(path))
    reader.expect_magic(EnhanceConfig.GUIDE_MAGIC)
    code = reader.read_u32("provenance")
    if code >= len(_PROVENANCES):
        raise WeightFormatError(f"{path}: unknown provenance code {code}", position=reader.position - 4)
    degenerate = bool(reader.read_u32("degenerate flag"))
    tap = reader.read_bytes(reader.read_u32("tap length"), "tap").decode("utf-8")
    w = reader.read_tensor()
    h0 = reader.read_tensor()
    reader.expect_end()
    return GuideVector(w=w, provenance=_PROVENANCES[code], tap=tap, h0=h0, degenerate=degenerate)
