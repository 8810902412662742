"""Robust nonlinear least squares: residual blocks, Levenberg-Marquardt, and
trimmed optimization.

A problem is a set of parameter blocks (euclidean vectors or poses, updated
through a local parametrization) plus residual sets. A residual set holds one
or many residual blocks of the same kind sharing a robust loss; per-block
weights and ids are kept so that trimming can remove individual blocks.

Cost convention: total = sum over blocks of 0.5 * weight * rho(||r||^2).
"""

from __future__ import annotations

import abc
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse

from .geometry import Pose


class SolverError(Exception):
    pass


class NumericalFailure(SolverError):
    """Normal equations unsolvable even after damping escalation."""


class EmptyProblem(SolverError):
    """No residual blocks left to optimize."""


# --------------------------------------------------------------------- losses


def cauchy(x: float, a: float) -> tuple[float, float]:
    """Cauchy loss value and first derivative at squared residual x.

    rho(x) = a^2 * log(1 + x / a^2); rho'(x) = 1 / (1 + x / a^2).
    Behaves like the identity for x << a^2 and grows logarithmically beyond.
    """
    a2 = a * a
    return a2 * np.log1p(x / a2), 1.0 / (1.0 + x / a2)


@dataclass(frozen=True)
class RobustLoss:
    """Per-residual-class loss; kind is "trivial" or "cauchy"."""

    kind: str = "trivial"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("trivial", "cauchy"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.scale <= 0:
            raise ValueError("loss scale must be positive")

    def evaluate(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized (rho(s), rho'(s)) over squared residual norms."""
        s = np.asarray(s, dtype=float)
        if self.kind == "trivial":
            return s, np.ones_like(s)
        a2 = self.scale * self.scale
        return a2 * np.log1p(s / a2), 1.0 / (1.0 + s / a2)


TRIVIAL_LOSS = RobustLoss()


# ----------------------------------------------------------------- parameters


class _EuclideanManifold:
    @staticmethod
    def local_dim(value) -> int:
        return int(np.asarray(value).size)

    @staticmethod
    def plus(value, delta):
        value = np.asarray(value, dtype=float)
        return value + delta.reshape(value.shape)


class _PoseManifold:
    @staticmethod
    def local_dim(value) -> int:
        return 6

    @staticmethod
    def plus(value: Pose, delta) -> Pose:
        return value.plus(delta)


class _FixedScalePoseManifold:
    """Pose update that preserves the translation norm (scale unobservable)."""

    @staticmethod
    def local_dim(value) -> int:
        return 6

    @staticmethod
    def plus(value: Pose, delta) -> Pose:
        updated = value.plus(delta)
        norm_before = np.linalg.norm(value.translation)
        norm_after = np.linalg.norm(updated.translation)
        if norm_before < 1e-15:
            return Pose(updated.rotation, value.translation)
        if norm_after < 1e-15:
            return Pose(updated.rotation, value.translation)
        return Pose(updated.rotation, updated.translation * (norm_before / norm_after))


_MANIFOLDS = {
    "euclidean": _EuclideanManifold,
    "pose": _PoseManifold,
    "pose_fixed_scale": _FixedScalePoseManifold,
}


@dataclass
class _Param:
    value: Any
    manifold: Any
    constant: bool = False
    removed: bool = False


# -------------------------------------------------------------- residual sets


class ResidualSet(abc.ABC):
    """A batch of homogeneous residual blocks sharing one robust loss.

    Subclasses store per-block data as arrays so residuals and Jacobians are
    evaluated vectorized. block_ids are global, assigned by the Problem.
    """

    tag: str
    loss: RobustLoss
    dim: int  # residual dimension per block
    weights: np.ndarray  # (n,)
    block_ids: np.ndarray  # (n,) int

    @property
    def n_blocks(self) -> int:
        return len(self.block_ids)

    @abc.abstractmethod
    def residuals(self, values: Mapping[Hashable, Any]) -> np.ndarray:
        """(n_blocks, dim) raw residuals at the given parameter values."""

    @abc.abstractmethod
    def jacobian_slots(
        self, values: Mapping[Hashable, Any]
    ) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per parameter slot: (keys (n,), jacobian (n, dim, local_dim)).

        Jacobians are w.r.t. the local increments of each block's parameter
        in that slot, evaluated at the current values.
        """

    @abc.abstractmethod
    def subset(self, keep: np.ndarray) -> "ResidualSet":
        """New set containing only the blocks where keep is True."""

    @abc.abstractmethod
    def slot_keys(self) -> list[np.ndarray]:
        """Per slot, the (n,) array of parameter keys (no evaluation)."""

    def referenced_keys(self) -> set:
        keys: set = set()
        for arr in self.slot_keys():
            keys.update(arr.tolist())
        return keys


def _as_key_array(keys: Sequence) -> np.ndarray:
    arr = np.empty(len(keys), dtype=object)
    for i, k in enumerate(keys):
        arr[i] = k
    return arr


class CallableBlock(ResidualSet):
    """Single residual block defined by plain callables (generic problems)."""

    def __init__(self, fn, jac, params, loss, weight, tag, block_id, dim):
        self.fn = fn
        self.jac = jac
        self.params = tuple(params)
        self.loss = loss
        self.tag = tag
        self.dim = dim
        self.weights = np.array([weight], dtype=float)
        self.block_ids = np.array([block_id], dtype=int)

    def residuals(self, values):
        r = np.atleast_1d(np.asarray(self.fn(*(values[k] for k in self.params)), dtype=float))
        return r.reshape(1, self.dim)

    def jacobian_slots(self, values):
        jacs = self.jac(*(values[k] for k in self.params))
        slots = []
        for key, j in zip(self.params, jacs):
            j = np.asarray(j, dtype=float).reshape(1, self.dim, -1)
            slots.append((_as_key_array([key]), j))
        return slots

    def slot_keys(self):
        return [_as_key_array([k]) for k in self.params]

    def subset(self, keep):
        if not keep[0]:
            raise ValueError("cannot subset a single block away; drop the set")
        return self


# ------------------------------------------------------------------- problem


class Problem:
    """Parameter blocks plus residual sets, ready for LM optimization."""

    def __init__(self):
        self._params: dict[Hashable, _Param] = {}
        self._sets: list[ResidualSet] = []
        self._next_block_id = 0

    # -- parameters

    def add_parameter(self, key, value, manifold: str = "euclidean", constant: bool = False):
        if key in self._params:
            raise ValueError(f"duplicate parameter {key!r}")
        if manifold == "euclidean":
            value = np.asarray(value, dtype=float).copy()
        self._params[key] = _Param(value, _MANIFOLDS[manifold], constant)

    def value(self, key):
        return self._params[key].value

    def set_value(self, key, value):
        p = self._params[key]
        if isinstance(p.manifold, type) and p.manifold is _EuclideanManifold:
            value = np.asarray(value, dtype=float).copy()
        p.value = value

    def values(self) -> dict:
        return {k: p.value for k, p in self._params.items()}

    def parameter_keys(self) -> list:
        return list(self._params.keys())

    def is_removed(self, key) -> bool:
        return self._params[key].removed

    # -- residuals

    def claim_block_ids(self, n: int) -> np.ndarray:
        ids = np.arange(self._next_block_id, self._next_block_id + n)
        self._next_block_id += n
        return ids

    def add_residual_set(self, rs: ResidualSet):
        for key in rs.referenced_keys():
            if key not in self._params:
                raise ValueError(f"residual set references unknown parameter {key!r}")
        self._sets.append(rs)

    def add_residual(
        self,
        fn,
        params: Sequence,
        *,
        jac=None,
        loss: RobustLoss = TRIVIAL_LOSS,
        weight: float = 1.0,
        tag: str = "generic",
        dim: int | None = None,
    ):
        """Add a single residual block from a callable.

        When jac is omitted a central-difference Jacobian over the parameters'
        local increments is used.
        """
        if weight <= 0:
            raise ValueError("block weight must be positive")
        if dim is None:
            dim = int(
                np.atleast_1d(
                    np.asarray(fn(*(self._params[k].value for k in params)), dtype=float)
                ).size
            )
        if jac is None:
            jac = self._numeric_jacobian(fn, params, dim)
        block_id = int(self.claim_block_ids(1)[0])
        self.add_residual_set(
            CallableBlock(fn, jac, params, loss, weight, tag, block_id, dim)
        )

    def _numeric_jacobian(self, fn, params, dim, step: float = 1e-7):
        manifolds = [self._params[k].manifold for k in params]

        def jac(*values):
            values = list(values)
            out = []
            for slot, (m, v) in enumerate(zip(manifolds, values)):
                ldim = m.local_dim(v)
                j = np.zeros((dim, ldim))
                for k in range(ldim):
                    delta = np.zeros(ldim)
                    delta[k] = step
                    hi = list(values)
                    lo = list(values)
                    hi[slot] = m.plus(v, delta)
                    lo[slot] = m.plus(v, -delta)
                    j[:, k] = (
                        np.atleast_1d(fn(*hi)) - np.atleast_1d(fn(*lo))
                    ) / (2 * step)
                out.append(j)
            return out

        return jac

    @property
    def residual_sets(self) -> list[ResidualSet]:
        return self._sets

    def n_blocks(self) -> int:
        return sum(rs.n_blocks for rs in self._sets)


# ------------------------------------------------------------- configuration


@dataclass
class Tolerances:
    gradient: float = 1e-10
    step: float = 1e-12
    cost: float = 1e-12


@dataclass
class TrimConfig:
    """Schedule for trimmed least squares.

    steps: LM iterations to run before each trimming pass.
    rejection_fraction: percent of highest-norm residual blocks removed per
    trimmed class per pass. time_bound limits the final optimization phase
    (None disables the wall-clock check, keeping runs deterministic).
    """

    steps: Sequence[int] = (5, 5)
    rejection_fraction: float = 10.0
    time_bound: float | None = None
    max_final_iterations: int = 100
    tolerances: Tolerances = field(default_factory=Tolerances)

    def __post_init__(self):
        if not (0 <= self.rejection_fraction < 50):
            raise ValueError("rejection_fraction must be in [0, 50)")
        if len(self.steps) == 0:
            raise ValueError("steps must be nonempty")


TRIMMED_TAGS = ("depth", "reprojection")


@dataclass
class Summary:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    termination: str = "max_iterations"
    n_blocks: int = 0


@dataclass
class TrimSummary(Summary):
    removed_block_ids: list = field(default_factory=list)
    removed_parameters: list = field(default_factory=list)


# ------------------------------------------------------------------ LM state


class _Layout:
    """Column layout and sparse scatter plan for the current problem shape."""

    def __init__(self, problem: Problem):
        referenced: set = set()
        for rs in problem.residual_sets:
            referenced.update(rs.referenced_keys())
        self.active_keys = [
            k
            for k, p in problem._params.items()
            if not p.constant and not p.removed and k in referenced
        ]
        offsets = {}
        col = 0
        for k in self.active_keys:
            p = problem._params[k]
            offsets[k] = (col, p.manifold.local_dim(p.value))
            col += offsets[k][1]
        self.offsets = offsets
        self.n_cols = col
        self.plans = []  # per set: (row_offset, [(mask, rows, cols) per slot])
        row = 0
        for rs in problem.residual_sets:
            slot_plans = []
            for keys in rs.slot_keys():
                n = len(keys)
                active = np.array([k in offsets for k in keys], dtype=bool)
                ldims = np.array(
                    [offsets[k][1] if k in offsets else 0 for k in keys], dtype=int
                )
                if active.any():
                    ldim = int(ldims[active][0])  # homogeneous within a slot
                    idx = np.nonzero(active)[0]
                    base_rows = row + idx * rs.dim
                    rows = (
                        base_rows[:, None, None]
                        + np.arange(rs.dim)[None, :, None]
                        + np.zeros((1, 1, ldim), dtype=int)
                    )
                    col0 = np.array([offsets[keys[i]][0] for i in idx], dtype=int)
                    cols = (
                        col0[:, None, None]
                        + np.zeros((1, rs.dim, 1), dtype=int)
                        + np.arange(ldim)[None, None, :]
                    )
                    slot_plans.append((idx, rows.ravel(), cols.ravel()))
                else:
                    slot_plans.append((np.zeros(0, dtype=int), None, None))
            self.plans.append((row, slot_plans))
            row += rs.n_blocks * rs.dim
        self.n_rows = row


class _LmState:
    """Mutable state of an LM run; persists across trimming stages."""

    def __init__(self, problem: Problem, tolerances: Tolerances, lam: float = 1e-4, log=None):
        if problem.n_blocks() == 0:
            raise EmptyProblem("problem has no residual blocks")
        self.problem = problem
        self.tol = tolerances
        self.lam = lam
        self.log = log
        self.iterations = 0
        self.converged = False
        self.termination = "max_iterations"
        self.layout = _Layout(problem)
        self.cost, self.block_norms = self._cost_and_norms()
        self.initial_cost = self.cost

    # -- evaluation helpers

    def _cost_and_norms(self) -> tuple[float, dict[int, float]]:
        values = self.problem.values()
        cost = 0.0
        norms: dict[int, float] = {}
        for rs in self.problem.residual_sets:
            r = rs.residuals(values)
            s = np.einsum("nd,nd->n", r, r)
            rho, _ = rs.loss.evaluate(s)
            cost += 0.5 * float(np.dot(rs.weights, rho))
            block_norm = np.sqrt(s)
            for bid, bn in zip(rs.block_ids, block_norm):
                norms[int(bid)] = float(bn)
        return cost, norms

    def _cost_at(self, values) -> float:
        cost = 0.0
        for rs in self.problem.residual_sets:
            r = rs.residuals(values)
            s = np.einsum("nd,nd->n", r, r)
            rho, _ = rs.loss.evaluate(s)
            cost += 0.5 * float(np.dot(rs.weights, rho))
        return cost

    def _linearize(self):
        """Robust-weighted residual vector, sparse Jacobian, and raw norms."""
        values = self.problem.values()
        layout = self.layout
        r_full = np.zeros(layout.n_rows)
        data, rows_all, cols_all = [], [], []
        cost = 0.0
        norms: dict[int, float] = {}
        for rs, (row0, slot_plans) in zip(self.problem.residual_sets, layout.plans):
            r = rs.residuals(values)
            s = np.einsum("nd,nd->n", r, r)
            rho, drho = rs.loss.evaluate(s)
            cost += 0.5 * float(np.dot(rs.weights, rho))
            for bid, bn in zip(rs.block_ids, np.sqrt(s)):
                norms[int(bid)] = float(bn)
            factor = np.sqrt(rs.weights * drho)
            r_scaled = r * factor[:, None]
            r_full[row0 : row0 + rs.n_blocks * rs.dim] = r_scaled.ravel()
            slots = rs.jacobian_slots(values)
            for (idx, rows, cols), (_, jac) in zip(slot_plans, slots):
                if rows is None:
                    continue
                j_scaled = jac[idx] * factor[idx, None, None]
                data.append(j_scaled.ravel())
                rows_all.append(rows)
                cols_all.append(cols)
        if layout.n_cols == 0:
            jac_matrix = None
        else:
            jac_matrix = scipy.sparse.csr_matrix(
                (
                    np.concatenate(data) if data else np.zeros(0),
                    (
                        np.concatenate(rows_all) if rows_all else np.zeros(0, dtype=int),
                        np.concatenate(cols_all) if cols_all else np.zeros(0, dtype=int),
                    ),
                ),
                shape=(layout.n_rows, layout.n_cols),
            )
        return cost, norms, r_full, jac_matrix

    def _apply_step(self, delta: np.ndarray) -> dict:
        values = dict(self.problem.values())
        for key in self.layout.active_keys:
            off, ldim = self.layout.offsets[key]
            p = self.problem._params[key]
            values[key] = p.manifold.plus(p.value, delta[off : off + ldim])
        return values

    def _commit(self, values):
        for key in self.layout.active_keys:
            self.problem._params[key].value = values[key]

    # -- iterations

    def run(self, max_steps: int, deadline: float | None = None) -> None:
        """Run up to max_steps accepted LM iterations (or until converged)."""
        steps = 0
        while steps < max_steps and not self.converged:
            if deadline is not None and time.monotonic() >= deadline:
                self.termination = "time_bound"
                return
            cost, norms, r, jac_matrix = self._linearize()
            self.cost, self.block_norms = cost, norms
            if jac_matrix is None:
                self.converged = True
                self.termination = "no_free_parameters"
                return
            gradient = jac_matrix.T @ r
            if np.max(np.abs(gradient)) < self.tol.gradient:
                self.converged = True
                self.termination = "gradient_tolerance"
                return
            hessian = (jac_matrix.T @ jac_matrix).toarray()
            diag = np.diag(hessian).copy()
            diag_floor = 1e-8 * max(diag.max(), 1.0)
            np.maximum(diag, diag_floor, out=diag)
            accepted = False
            while not accepted:
                try:
                    delta = np.linalg.solve(
                        hessian + self.lam * np.diag(diag), -gradient
                    )
                    solve_ok = np.all(np.isfinite(delta))
                except np.linalg.LinAlgError:
                    solve_ok = False
                if not solve_ok:
                    self.lam *= 10.0
                    if self.lam > 1e10:
                        raise NumericalFailure(
                            "normal equations unsolvable after damping escalation"
                        )
                    continue
                candidate = self._apply_step(delta)
                new_cost = self._cost_at(candidate)
                if np.isfinite(new_cost) and new_cost < cost:
                    self._commit(candidate)
                    self.lam = max(self.lam / 2.0, 1e-14)
                    accepted = True
                else:
                    self.lam *= 10.0
                    if self.lam > 1e10:
                        # no downhill step found; treat as converged
                        self.converged = True
                        self.termination = "stalled"
                        return
            self.iterations += 1
            steps += 1
            if self.log is not None:
                self.log(
                    f"iter={self.iterations} cost={new_cost:.6e} "
                    f"lambda={self.lam:.3e} blocks={self.problem.n_blocks()}"
                )
            if np.max(np.abs(delta)) < self.tol.step:
                self.cost = new_cost
                self.converged = True
                self.termination = "step_tolerance"
                return
            if cost - new_cost <= self.tol.cost * max(cost, 1e-300):
                self.cost = new_cost
                self.converged = True
                self.termination = "cost_tolerance"
                return
            self.cost = new_cost

    def refresh_layout(self):
        self.layout = _Layout(self.problem)


# ------------------------------------------------------------------- solving


def solve_lm(
    problem: Problem,
    *,
    tolerances: Tolerances | None = None,
    max_iters: int = 100,
    log: Callable[[str], None] | None = None,
) -> Summary:
    """Levenberg-Marquardt with robust-loss reweighting (in-place update)."""
    state = _LmState(problem, tolerances or Tolerances(), log=log)
    state.run(max_iters)
    return Summary(
        iterations=state.iterations,
        initial_cost=state.initial_cost,
        final_cost=state.cost,
        termination=state.termination,
        n_blocks=problem.n_blocks(),
    )


def _trim_pass(
    problem: Problem, state: _LmState, fraction: float
) -> tuple[list[int], list]:
    """Remove the highest-norm blocks per trimmed class, then orphan params."""
    removed_blocks: list[int] = []
    for tag in TRIMMED_TAGS:
        ids, norms = [], []
        for rs in problem.residual_sets:
            if rs.tag != tag:
                continue
            for bid in rs.block_ids:
                ids.append(int(bid))
                norms.append(state.block_norms[int(bid)])
        count = len(ids)
        k = int(np.floor(fraction / 100.0 * count))
        if k == 0:
            continue
        ids_arr = np.array(ids)
        norms_arr = np.array(norms)
        order = np.lexsort((ids_arr, -norms_arr))
        doomed = set(ids_arr[order[:k]].tolist())
        removed_blocks.extend(sorted(doomed))
        new_sets = []
        for rs in problem.residual_sets:
            if rs.tag != tag:
                new_sets.append(rs)
                continue
            keep = np.array([int(b) not in doomed for b in rs.block_ids], dtype=bool)
            if keep.all():
                new_sets.append(rs)
            elif keep.any():
                new_sets.append(rs.subset(keep))
        problem._sets = new_sets
    removed_params: list = []
    if removed_blocks:
        referenced: set = set()
        for rs in problem.residual_sets:
            referenced.update(rs.referenced_keys())
        for key, p in problem._params.items():
            if not p.constant and not p.removed and key not in referenced:
                p.removed = True
                removed_params.append(key)
    return removed_blocks, removed_params


def solve_trimmed(
    problem: Problem,
    trim: TrimConfig,
    *,
    log: Callable[[str], None] | None = None,
) -> TrimSummary:
    """Alternate LM iterations with removal of the worst residual blocks.

    After each stage the configured fraction of largest-norm blocks is removed
    from the depth and reprojection classes, then parameters left without any
    residual are dropped from the problem. A final optimization runs to
    convergence, bounded by max_final_iterations and the optional time bound.
    With rejection_fraction == 0 this reproduces solve_lm exactly.
    """
    state = _LmState(problem, trim.tolerances, log=log)
    removed_blocks: list[int] = []
    removed_params: list = []
    for s in trim.steps:
        state.run(int(s))
        blocks, params = _trim_pass(problem, state, trim.rejection_fraction)
        removed_blocks.extend(blocks)
        removed_params.extend(params)
        if problem.n_blocks() == 0:
            raise EmptyProblem("trimming removed every residual block")
        if blocks:
            state.refresh_layout()
            # allow further progress on the reduced problem
            state.converged = False
            state.cost, state.block_norms = state._cost_and_norms()
    deadline = None
    if trim.time_bound is not None:
        deadline = time.monotonic() + trim.time_bound
    state.run(trim.max_final_iterations, deadline=deadline)
    return TrimSummary(
        iterations=state.iterations,
        initial_cost=state.initial_cost,
        final_cost=state.cost,
        termination=state.termination,
        n_blocks=problem.n_blocks(),
        removed_block_ids=removed_blocks,
        removed_parameters=removed_params,
    )
