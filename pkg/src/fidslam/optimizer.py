"""
Levenberg-Marquardt on the pose manifold.

The normal equations are assembled block-wise (6x6 blocks keyed by variable
pairs) and solved with a sparse LU in symmetric mode; systems with fewer than ``DENSE_LIMIT``
free variables use a dense Cholesky instead. Damping is Marquardt style,
``(H + lam * diag(H)) dx = -g``.

Variables are ordered by ``VariableKey`` so runs are reproducible bit for bit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import EvaluationFailure, PointBehindCamera, SingularSystem
from .factors import LinearizationPlan, stack_values
from .se3 import Pose, exp_so3, mat_to_quat

log = logging.getLogger(__name__)

DENSE_LIMIT = 50


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 100
    initial_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 10.0
    relative_tolerance: float = 1e-9
    absolute_tolerance: float = 1e-12
    max_lambda: float = 1e10

    def __post_init__(self):
        if self.lambda_up <= 1.0 or self.lambda_down <= 1.0:
            raise ValueError("lambda factors must exceed 1")
        if min(self.max_iterations, self.initial_lambda, self.relative_tolerance,
               self.absolute_tolerance, self.max_lambda) <= 0:
            raise ValueError("optimizer settings must be positive")


@dataclass
class OptimizeResult:
    initial_error: float
    final_error: float
    iterations: int
    status: str  # converged | max_iter | stalled
    errors: list


def _check_gauge(factors, free_index: dict):
    """Every connected component of free variables needs an anchor.

    An anchor is an absolute prior or a factor touching a held variable.
    """
    parent = list(range(len(free_index)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    anchored = set()
    for f in factors:
        ids = [free_index[k] for k in f.keys if k in free_index]
        if not ids:
            continue
        root = find(ids[0])
        for i in ids[1:]:
            r = find(i)
            if r != root:
                parent[r] = root
        if f.kind == "absolute" or len(ids) < len(f.keys):
            anchored.add(ids[0])
    anchored_roots = {find(i) for i in anchored}
    for key, i in free_index.items():
        if find(i) not in anchored_roots:
            raise SingularSystem(f"variable {key} belongs to an unanchored component (gauge freedom)")


class LinearSystem:
    """Fixed sparsity pattern plus the assembly / solve routines."""

    def __init__(self, plan: LinearizationPlan, n_free: int):
        self.plan = plan
        self.n_free = n_free
        self.dim = 6 * n_free
        codes, selectors = [], []
        for gi, g in enumerate(plan.groups):
            s = g["slots"]
            for a in range(s.shape[1]):
                for b in range(s.shape[1]):
                    m = (s[:, a] < n_free) & (s[:, b] < n_free)
                    if np.any(m):
                        codes.append(s[m, a] * n_free + s[m, b])
                        selectors.append((gi, a, b, m))
        self.selectors = selectors
        codes = np.concatenate(codes) if codes else np.zeros(0, dtype=int)
        blocks, inverse = np.unique(codes, return_inverse=True)
        self.n_blocks = len(blocks)
        self.aggregate = scipy.sparse.csr_matrix(
            (np.ones(len(codes)), (inverse, np.arange(len(codes)))),
            shape=(len(blocks), len(codes)))
        bi, bj = np.divmod(blocks, max(n_free, 1))
        ii, jj = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
        self.rows = (bi[:, None, None] * 6 + ii).ravel()
        self.cols = (bj[:, None, None] * 6 + jj).ravel()

    def assemble(self, linearized):
        local = []
        for gi, a, b, m in self.selectors:
            J = linearized[gi][2]
            Ja = J[a][m]
            local.append(np.matmul(Ja.transpose(0, 2, 1), J[b][m]).reshape(-1, 36))
        local = np.concatenate(local) if local else np.zeros((0, 36))
        Hb = self.aggregate @ local
        H = scipy.sparse.csc_matrix((Hb.ravel(), (self.rows, self.cols)), shape=(self.dim, self.dim))
        g = np.zeros(self.dim)
        for g_info, r, J in linearized:
            s = g_info["slots"]
            for a in range(s.shape[1]):
                m = s[:, a] < self.n_free
                if not np.any(m):
                    continue
                contrib = np.matmul(J[a][m].transpose(0, 2, 1), r[m][:, :, None])[:, :, 0]
                idx = (s[m, a][:, None] * 6 + np.arange(6)).ravel()
                g += np.bincount(idx, weights=contrib.ravel(), minlength=self.dim)
        return H, g


def solve_normal_equations(H, g: np.ndarray, lam: float) -> np.ndarray:
    """Solve ``(H + lam * diag(H)) dx = -g``.

    ``H`` may be dense or scipy-sparse. Raises SingularSystem when the damped
    system has no unique solution.
    """
    dim = g.shape[0]
    diag = H.diagonal() if scipy.sparse.issparse(H) else np.diag(H)
    if dim == 0:
        return np.zeros(0)
    scale = float(np.max(diag)) if diag.size else 0.0
    if scale <= 0.0 or np.any(diag <= 1e-14 * scale):
        raise SingularSystem("normal equations have an unconstrained direction")
    if dim < 6 * DENSE_LIMIT:
        A = H.toarray() if scipy.sparse.issparse(H) else np.array(H, dtype=float)
        A[np.diag_indices(dim)] += lam * diag
        try:
            c = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise SingularSystem("damped normal equations are not positive definite") from None
        dx = scipy.linalg.cho_solve(c, -g, check_finite=False)
    else:
        A = (scipy.sparse.csc_matrix(H) + scipy.sparse.diags(lam * diag)).tocsc()
        try:
            # SPD system: symmetric ordering and no pivoting keep the fill low
            dx = scipy.sparse.linalg.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                          options={"SymmetricMode": True}).solve(-g)
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from None
    if not np.all(np.isfinite(dx)):
        raise SingularSystem("non-finite solution")
    return dx


def _retract_all(Rs, ts, dx, n_free):
    d = dx.reshape(n_free, 6)
    Rn = Rs.copy()
    tn = ts.copy()
    Rn[:n_free] = Rs[:n_free] @ exp_so3(d[:, :3])
    tn[:n_free] = ts[:n_free] + np.einsum("nij,nj->ni", Rs[:n_free], d[:, 3:])
    return Rn, tn


def optimize(graph, cfg: OptimizerConfig | None = None, free=None, factors=None,
             record: bool = False) -> OptimizeResult:
    """Minimize the graph error in place.

    ``free`` restricts which variables move (default: every variable touched
    by a factor); other variables are held at their current values.
    ``factors`` defaults to every graph factor touching a free variable.
    """
    cfg = cfg or OptimizerConfig()
    if factors is None:
        if free is None:
            factors = list(graph.factors.values())
        else:
            free_set = dict.fromkeys(free)
            factors = [f for f in graph.factors.values() if any(k in free_set for k in f.keys)]
    factors = list(factors)
    touched = sorted(dict.fromkeys(k for f in factors for k in f.keys))
    if free is None:
        free_keys = touched
    else:
        free_set = dict.fromkeys(free)
        free_keys = [k for k in touched if k in free_set]
        touched_set = set(touched)
        orphans = [k for k in free_set if k not in touched_set]
        if orphans:
            raise SingularSystem(f"variable {orphans[0]} is not touched by any factor")
    free_lookup = set(free_keys)
    held = [k for k in touched if k not in free_lookup]
    n_free = len(free_keys)
    if n_free == 0 or not factors:
        return OptimizeResult(0.0, 0.0, 0, "converged", [0.0])
    free_index = {k: i for i, k in enumerate(free_keys)}
    _check_gauge(factors, free_index)

    index, Rs, ts = stack_values(graph.values, free_keys + held)
    plan = LinearizationPlan(factors, index)
    system = LinearSystem(plan, n_free)

    try:
        err = plan.error(Rs, ts)
    except PointBehindCamera as exc:
        raise EvaluationFailure(exc.factor, f"initial values not evaluable: {exc}") from None
    errors = [err]
    initial = err
    lam = cfg.initial_lambda
    status = "max_iter"
    it = 0
    while it < cfg.max_iterations:
        if err <= cfg.absolute_tolerance:
            status = "converged"
            break
        it += 1
        H, g = system.assemble(plan.evaluate(Rs, ts, jacobian=True))
        accepted = False
        failed_factor = None
        while lam <= cfg.max_lambda:
            dx = solve_normal_equations(H, g, lam)
            Rn, tn = _retract_all(Rs, ts, dx, n_free)
            try:
                new_err = plan.error(Rn, tn)
                failed_factor = None
            except PointBehindCamera as exc:
                new_err = np.inf
                failed_factor = exc.factor
            if new_err < err:
                accepted = True
                break
            lam *= cfg.lambda_up
        if not accepted:
            if failed_factor is not None:
                raise EvaluationFailure(failed_factor, "no evaluable step even at maximum damping")
            status = "stalled"
            it -= 1
            break
        decrease = err - new_err
        Rs, ts, err = Rn, tn, new_err
        errors.append(err)
        lam = max(lam / cfg.lambda_down, 1e-15)
        if decrease <= cfg.relative_tolerance * errors[-2] or err <= cfg.absolute_tolerance:
            status = "converged"
            break
        if np.max(np.abs(dx)) < 1e-14:
            status = "converged"
            break

    if len(errors) > 1:
        qs = mat_to_quat(Rs[:n_free])
        for k, i in free_index.items():
            graph.values[k] = Pose(qs[i], ts[i])
    if record:
        graph.last_error.update(plan.factor_norms(Rs, ts))
    log.debug("optimize: %d vars, %d factors, %d iters, %.3g -> %.3g (%s)",
              n_free, len(factors), it, initial, err, status)
    return OptimizeResult(initial, err, it, status, errors)
