"""Stochastic forward-backward-forward solvers with inertia and relaxation.

One iteration of the full method, with per-agent step sizes collected in
the diagonal preconditioner Psi and mini-batch operator estimates
V_hat(., xi) and V_hat(., eta):

    Z_k = X_k + alpha_k (X_k - X_{k-1})
    Y_k = J_{Psi^-1 T}(Z_k - Psi^-1 V_hat(Z_k, xi_k))
    X_{k+1} = (1 - rho_k) Z_k + rho_k [ Y_k - Psi^-1 (V_hat(Y_k, eta_k) - V_hat(Z_k, xi_k)) ]

with X_{-1} = X_0. Setting alpha_k = 0 and rho_k = 1 recovers the plain
stochastic forward-backward-forward method; the forward-backward variant
drops the correction step entirely and uses a single sample point.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .blockvec import AgentPartition, Preconditioner, PrimalDualState
from .errors import ConfigurationError, NumericError
from .graph import CommGraph
from .operators import ExtendedOperator, GameProblem, residual_res
from .stochastic import (
    PHASE_ETA,
    PHASE_XI,
    AgentStreams,
    BatchSchedule,
    SamplingOracle,
    sample_V_hat,
)

__all__ = [
    "SolverParams",
    "SolverTrace",
    "DiagnosticsReport",
    "VARIANTS",
    "alpha_schedule",
    "rho_schedule",
    "admissible_step_bound",
    "build_preconditioner",
    "risfbf_step",
    "sfb_step",
    "run",
    "solve_ground_truth",
    "diagnostics_check",
    "consensus_gap",
    "feasibility_gap",
]

logger = logging.getLogger("gnes.solver")

VARIANTS = ("risfbf", "sfbf", "sfb")


@dataclass
class SolverParams:
    """Configuration of one solver run.

    steps is either "auto" (every step size set to the admissible bound
    (1 - nu) / (2 ell_V)), a single float shared by all agents and
    blocks, or a (gamma, sigma, tau) triple of per-agent arrays.

    rho_fixed replaces the relaxation schedule by a constant;
    rho_scale multiplies whatever the schedule yields. Both exist for
    controlled experiments; leaving them at the defaults gives the
    admissible schedule. enforce_admissibility=False downgrades the
    step size and schedule checks from errors to warnings, which is
    only meant for negative controls.
    """

    variant: str = "risfbf"
    alpha_bar: float = 0.1
    nu: float = 0.01
    steps: object = "auto"
    max_iters: int = 1000
    tol: float = 1e-6
    tol_res: float | None = None
    batch: BatchSchedule = field(default_factory=BatchSchedule)
    diagnostics: bool = False
    trace_every: int = 1
    rho_fixed: float | None = None
    rho_scale: float = 1.0
    enforce_admissibility: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(
                f"unknown variant {self.variant!r}, expected one of {VARIANTS}",
                field="variant",
            )
        if not (np.isfinite(self.alpha_bar) and 0.0 <= self.alpha_bar < 1.0):
            raise ConfigurationError(
                f"inertia bound must lie in [0, 1), got {self.alpha_bar}",
                field="alpha_bar",
            )
        if not (np.isfinite(self.nu) and 0.0 < self.nu < 1.0):
            raise ConfigurationError(
                f"margin nu must lie in (0, 1), got {self.nu}", field="nu"
            )
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be >= 1", field="max_iters")
        if not (np.isfinite(self.tol) and self.tol >= 0.0):
            raise ConfigurationError("tol must be finite and >= 0", field="tol")
        if self.tol_res is not None and not (np.isfinite(self.tol_res) and self.tol_res >= 0.0):
            raise ConfigurationError("tol_res must be finite and >= 0", field="tol_res")
        if self.trace_every < 1:
            raise ConfigurationError("trace_every must be >= 1", field="trace_every")
        if self.rho_fixed is not None and not 0.0 < self.rho_fixed <= 1.0:
            raise ConfigurationError("rho_fixed must lie in (0, 1]", field="rho_fixed")
        if not (np.isfinite(self.rho_scale) and self.rho_scale > 0.0):
            raise ConfigurationError("rho_scale must be finite and > 0", field="rho_scale")


def alpha_schedule(params: SolverParams, k: int) -> float:
    """Inertia weight at iteration k: alpha_bar (1 - 1/(k+1)), zero for non-inertial variants."""
    if params.variant != "risfbf":
        return 0.0
    return params.alpha_bar * (1.0 - 1.0 / (k + 1))


def rho_schedule(params: SolverParams, alpha_k: float, ell_v_psi: float) -> float:
    """Relaxation weight for inertia value alpha_k.

    The schedule is
        rho = (3 - nu)(1 - alpha_bar)^2 / (2 (2 a^2 - a + 1)(1 + ell_V_Psi)),
    a = alpha_k, which keeps the inertia-relaxation coupling inequality
    satisfied for every k. Values above 1 are clamped to 1 with a
    warning; rho_fixed and rho_scale override and rescale the rule.
    """
    if params.variant == "sfbf":
        return 1.0
    if params.variant == "sfb":
        raise ConfigurationError("the forward-backward variant has no relaxation step", field="variant")
    if params.rho_fixed is not None:
        rho = params.rho_fixed
    else:
        a = alpha_k
        denom = 2.0 * (2.0 * a * a - a + 1.0) * (1.0 + ell_v_psi)
        rho = (3.0 - params.nu) * (1.0 - params.alpha_bar) ** 2 / denom
    rho *= params.rho_scale
    if rho > 1.0:
        rho = 1.0
    if rho <= 0.0:
        raise ConfigurationError(f"relaxation weight must be positive, got {rho}", field="rho")
    return rho


def admissible_step_bound(op: ExtendedOperator, nu: float) -> float:
    """Largest admissible step size (1 - nu) / (2 ell_V)."""
    if op.lipschitz_ell_V <= 0.0:
        return np.inf
    return (1.0 - nu) / (2.0 * op.lipschitz_ell_V)


def build_preconditioner(params: SolverParams, op: ExtendedOperator) -> Preconditioner:
    """Resolve the steps field of the parameters into a Preconditioner."""
    part = op.problem.partition
    if isinstance(params.steps, str):
        if params.steps != "auto":
            raise ConfigurationError(f"unknown steps rule {params.steps!r}", field="steps")
        bound = admissible_step_bound(op, params.nu)
        if not np.isfinite(bound):
            raise ConfigurationError(
                "automatic steps need a positive operator constant", field="steps"
            )
        return Preconditioner.uniform(part, bound)
    if isinstance(params.steps, (int, float)):
        return Preconditioner.uniform(part, float(params.steps))
    # a scalar entry is one step size shared by all agents
    gamma, sigma, tau = (
        np.full(part.num_agents, float(v)) if np.ndim(v) == 0 else v
        for v in params.steps
    )
    return Preconditioner(part, gamma, sigma, tau)


def _coupling_value(alpha: float, rho: float, nu: float, ell_v_psi: float) -> float:
    """2 a^2 + (1 - a)(1 - (3 - nu)(1 - a) / (2 rho (1 + ell))), <= 0 when admissible."""
    return 2.0 * alpha * alpha + (1.0 - alpha) * (
        1.0 - (3.0 - nu) * (1.0 - alpha) / (2.0 * rho * (1.0 + ell_v_psi))
    )


def _validate_run(params: SolverParams, op: ExtendedOperator, psi: Preconditioner):
    """Step size and schedule admissibility, downgraded to warnings on request."""
    bound = admissible_step_bound(op, params.nu)
    ok_steps = psi.max_step <= bound * (1.0 + 1e-12)
    if not ok_steps:
        msg = (
            f"largest step size {psi.max_step:.6g} exceeds the admissible bound "
            f"(1 - nu) / (2 ell_V) = {bound:.6g}"
        )
        if params.enforce_admissibility:
            raise ConfigurationError(msg, field="steps")
        logger.warning("%s (running anyway, admissibility enforcement is off)", msg)
    if params.variant == "sfb":
        return
    ell = op.lipschitz_ell_V * psi.max_step
    if params.rho_fixed is None and params.variant == "risfbf":
        a_star = min(0.25, params.alpha_bar)  # schedule denominator minimizer
        denom = 2.0 * (2.0 * a_star * a_star - a_star + 1.0) * (1.0 + ell)
        raw = (3.0 - params.nu) * (1.0 - params.alpha_bar) ** 2 * params.rho_scale / denom
        if raw > 1.0:
            logger.warning(
                "the relaxation schedule exceeds 1 and will be clamped; "
                "step sizes are small relative to the operator constant"
            )
    ks = list(range(min(params.max_iters, 1024)))
    if params.max_iters > 1024:
        tail = np.unique(
            np.geomspace(1024, params.max_iters, 64).astype(np.int64)
        )
        ks.extend(int(t) for t in tail if t < params.max_iters)
    worst_k, worst = -1, -np.inf
    for k in ks:
        a = alpha_schedule(params, k)
        c = _coupling_value(a, rho_schedule(params, a, ell), params.nu, ell)
        if c > worst:
            worst_k, worst = k, c
    if worst > 1e-12:
        msg = (
            f"inertia-relaxation coupling fails at k={worst_k} "
            f"(value {worst:.6g} > 0); reduce alpha_bar or the relaxation override"
        )
        if params.enforce_admissibility:
            raise ConfigurationError(msg, field="rho")
        logger.warning("%s (running anyway, admissibility enforcement is off)", msg)


def consensus_gap(partition: AgentPartition, lam: np.ndarray) -> float:
    """Largest pairwise distance between agent multiplier copies."""
    n = partition.num_agents
    if n == 1:
        return 0.0
    lammat = lam.reshape(n, partition.constraint_dim)
    diffs = lammat[:, None, :] - lammat[None, :, :]
    return float(np.sqrt((diffs * diffs).sum(axis=2)).max())


def feasibility_gap(problem: GameProblem, u: np.ndarray) -> float:
    """Norm of the positive part of D u - b."""
    return float(np.linalg.norm(np.maximum(problem.D_stack @ u - problem.b_total, 0.0)))


class SolverTrace:
    """Per-iteration scalars of one run plus optional recursion payloads.

    One row is appended for every iteration that executes a step, at
    the decimation set by trace_every (row k describes the iterate X_k
    before the step). The trajectory hash covers X_0 and every computed
    iterate, with negative zeros canonicalized, and is therefore equal
    between any two runs that produce the same float trajectory.
    """

    def __init__(self, partition: AgentPartition):
        self.partition = partition
        self.ks: list[int] = []
        self.r_psi: list[float] = []
        self.res: list[float] = []
        self.consensus_gap: list[float] = []
        self.feas_gap: list[float] = []
        self.step_norm: list[float] = []
        self.alphas: list[float] = []
        self.rhos: list[float] = []
        self.batches: list[int] = []
        self.iterations = 0
        self.state_hash = ""
        self.final_r_psi = math.nan
        self.final_res = math.nan
        self.final_consensus_gap = math.nan
        self.final_feas_gap = math.nan
        self.diag: _DiagnosticsData | None = None
        self._hasher = hashlib.sha256()

    def _hash_state(self, x: np.ndarray):
        # adding 0.0 maps -0.0 to +0.0 and leaves every other value bit-identical
        self._hasher.update((x + 0.0).tobytes())

    def _finalize(self):
        self.state_hash = self._hasher.hexdigest()

    def __len__(self) -> int:
        return len(self.ks)


class _DiagnosticsData:
    """Raw per-iteration material for the recursion checks."""

    def __init__(self, psi: Preconditioner, nu: float, ell_v_psi: float):
        self.weights = psi.weights.copy()
        self.inv_weights = psi.inv_weights.copy()
        self.nu = nu
        self.ell_v_psi = ell_v_psi
        self.states: list[np.ndarray] = []
        self.Z: list[np.ndarray] = []
        self.Y: list[np.ndarray] = []
        self.U: list[np.ndarray] = []
        self.W: list[np.ndarray] = []
        self.r_psi_z: list[float] = []
        self.alphas: list[float] = []
        self.rhos: list[float] = []


class _RunRecorder:
    """Per-iteration bookkeeping shared by both executors.

    Recording, stopping tests, trajectory hashing, and finalization all
    live here so the single-process runner and the networked runner
    cannot drift apart in how they produce traces.
    """

    def __init__(
        self,
        problem: GameProblem,
        op: ExtendedOperator,
        psi: Preconditioner,
        params: SolverParams,
        trace: SolverTrace,
    ):
        self.problem = problem
        self.op = op
        self.psi = psi
        self.params = params
        self.trace = trace
        self._record = False

    def start(self, x0: np.ndarray):
        self.trace._hash_state(x0)
        if self.trace.diag is not None:
            self.trace.diag.states.append(x0.copy())

    def pre_step(self, k: int, x: np.ndarray, x_prev: np.ndarray) -> bool:
        """Record the row for iteration k; True means a stopping test fired."""
        params = self.params
        self._record = (k % params.trace_every) == 0
        if not self._record:
            return False
        part = self.problem.partition
        d = part.total_dim
        nm = part.dual_dim
        t = self.trace
        r_psi_k = self.op.r_psi_flat(x, self.psi)
        res_k = residual_res(self.problem, x[:d])
        if (params.tol > 0.0 and r_psi_k < params.tol) or (
            params.tol_res is not None and res_k < params.tol_res
        ):
            return True
        dx = x - x_prev
        t.ks.append(k)
        t.r_psi.append(r_psi_k)
        t.res.append(res_k)
        t.consensus_gap.append(consensus_gap(part, x[d + nm :]))
        t.feas_gap.append(feasibility_gap(self.problem, x[:d]))
        t.step_norm.append(float(np.sqrt(np.dot(self.psi.weights * dx, dx))))
        return False

    def post_step(self, k: int, x_next: np.ndarray, alpha: float, rho: float, size: int):
        # a non-finite entry propagates through the sum
        if not math.isfinite(float(x_next.sum())):
            raise NumericError(f"iterate became non-finite at iteration {k}")
        if self._record:
            self.trace.alphas.append(alpha)
            self.trace.rhos.append(rho)
            self.trace.batches.append(size)
        self.trace._hash_state(x_next)
        if self.trace.diag is not None:
            self.trace.diag.states.append(x_next.copy())
        self.trace.iterations = k + 1

    def finish(self, x: np.ndarray, k: int, stopped: bool):
        part = self.problem.partition
        d = part.total_dim
        nm = part.dual_dim
        t = self.trace
        if stopped:
            t.iterations = k
        t.final_r_psi = self.op.r_psi_flat(x, self.psi)
        t.final_res = residual_res(self.problem, x[:d])
        t.final_consensus_gap = consensus_gap(part, x[d + nm :])
        t.final_feas_gap = feasibility_gap(self.problem, x[:d])
        t._finalize()


def risfbf_step(
    op: ExtendedOperator,
    oracle: SamplingOracle,
    psi: Preconditioner,
    x: np.ndarray,
    x_prev: np.ndarray,
    alpha: float,
    rho: float,
    size: int,
    streams: AgentStreams,
    k: int,
    diag: _DiagnosticsData | None = None,
) -> np.ndarray:
    """One extrapolation/forward-backward/correction/relaxation cycle on flat arrays."""
    invw = psi.inv_weights
    z = x + alpha * (x - x_prev)
    a = sample_V_hat(op, oracle, z, size, streams, k, PHASE_XI)
    y = op.resolvent_flat(z - invw * a, psi)
    b = sample_V_hat(op, oracle, y, size, streams, k, PHASE_ETA)
    r = y + invw * (a - b)
    # same affine form (1 - rho) z + rho r as the per-block relaxation on agent nodes
    x_next = (1.0 - rho) * z + rho * r
    if diag is not None:
        vz = op.v_flat(z)
        vy = op.v_flat(y)
        jz = op.resolvent_flat(z - invw * vz, psi)
        diag.Z.append(z.copy())
        diag.Y.append(y.copy())
        diag.U.append(a - vz)
        diag.W.append(b - vy)
        diag.r_psi_z.append(float(np.linalg.norm(z - jz)))
        diag.alphas.append(alpha)
        diag.rhos.append(rho)
    return x_next


def sfb_step(
    op: ExtendedOperator,
    oracle: SamplingOracle,
    psi: Preconditioner,
    x: np.ndarray,
    size: int,
    streams: AgentStreams,
    k: int,
) -> np.ndarray:
    """Plain projected stochastic forward-backward step."""
    a = sample_V_hat(op, oracle, x, size, streams, k, PHASE_XI)
    return op.resolvent_flat(x - psi.inv_weights * a, psi)


def run(
    problem: GameProblem,
    graph: CommGraph,
    oracle: SamplingOracle,
    params: SolverParams,
    x0: PrimalDualState | None = None,
    seed: int = 0,
) -> tuple[PrimalDualState, SolverTrace]:
    """Iterate the selected variant until the residual target or the budget.

    The stopping tests (fixed-point residual below tol, or natural
    residual below tol_res when set) are evaluated at recorded
    iterations, i.e. every trace_every-th step. The returned trace has
    one row per executed iteration at that decimation, and the final
    iterate's metrics are stored on the trace separately.
    """
    part = problem.partition
    op = ExtendedOperator(problem, graph)
    psi = build_preconditioner(params, op)
    _validate_run(params, op, psi)
    if x0 is None:
        x0 = PrimalDualState.zeros(part)
    if x0.partition != part:
        raise ConfigurationError("initial state has a different partition", field="x0")
    d = part.total_dim
    nm = part.dual_dim
    if np.any(x0.data[d + nm :] < 0.0):
        raise ConfigurationError("initial multiplier copies must be nonnegative", field="x0")
    ell = op.lipschitz_ell_V * psi.max_step
    trace = SolverTrace(part)
    if params.diagnostics:
        trace.diag = _DiagnosticsData(psi, params.nu, ell)
    rec = _RunRecorder(problem, op, psi, params, trace)
    streams = AgentStreams(seed)
    x_prev = x0.data.copy()
    x = x0.data.copy()
    rec.start(x)
    stopped = False
    k = 0
    try:
        for k in range(params.max_iters):
            if rec.pre_step(k, x, x_prev):
                stopped = True
                break
            size = params.batch.size(k)
            if params.variant == "sfb":
                alpha = 0.0
                rho = 1.0
                x_next = sfb_step(op, oracle, psi, x, size, streams, k)
            else:
                alpha = alpha_schedule(params, k)
                rho = rho_schedule(params, alpha, ell)
                x_next = risfbf_step(
                    op, oracle, psi, x, x_prev, alpha, rho, size, streams, k,
                    diag=trace.diag,
                )
            rec.post_step(k, x_next, alpha, rho, size)
            x_prev = x
            x = x_next
    except NumericError as err:
        # abort, attaching the trace of the finite prefix
        rec.finish(x, k, False)
        err.trace = trace
        raise
    rec.finish(x, k, stopped)
    return PrimalDualState(part, x), trace


def solve_ground_truth(
    problem: GameProblem,
    graph: CommGraph,
    x0: PrimalDualState | None = None,
    tol: float = 1e-12,
    max_iters: int = 500_000,
    check_every: int = 10,
) -> tuple[PrimalDualState, SolverTrace]:
    """Noise-free forward-backward-forward run to high accuracy.

    Used to obtain reference equilibria for the residual and recursion
    tests. Raises if the budget is exhausted before reaching tol.
    """
    from .stochastic import ZeroNoiseOracle

    params = SolverParams(
        variant="sfbf",
        alpha_bar=0.0,
        nu=0.01,
        steps="auto",
        max_iters=max_iters,
        tol=tol,
        trace_every=check_every,
        batch=BatchSchedule(1.0, 1.2),
    )
    state, trace = run(problem, graph, ZeroNoiseOracle(problem), params, x0=x0, seed=0)
    if trace.final_r_psi >= tol:
        raise NumericError(
            f"reference solve stalled at residual {trace.final_r_psi:.3e} "
            f"after {trace.iterations} iterations"
        )
    return state, trace


@dataclass
class DiagnosticsReport:
    """Evaluated recursion quantities and their violation sets.

    For each executed iteration k the report carries Delta M_k, the
    reference-dependent inner-product term Delta N_k(p), the energy
    H_k(p), and the drift delta_k(p), together with slack values of the
    per-iteration recursion inequality, the residual-versus-step bound,
    and the coupling inequality. A violation is any slack below the
    negative tolerance.
    """

    dm: np.ndarray
    dn: np.ndarray
    h: np.ndarray
    delta: np.ndarray
    fr_slack: np.ndarray
    yzg_slack: np.ndarray
    coupling: np.ndarray
    tol: float

    @property
    def fr_violations(self) -> np.ndarray:
        return np.flatnonzero(self.fr_slack < -self.tol)

    @property
    def yzg_violations(self) -> np.ndarray:
        return np.flatnonzero(self.yzg_slack < -self.tol)

    @property
    def h_violations(self) -> np.ndarray:
        return np.flatnonzero(self.h < -self.tol)

    @property
    def coupling_violations(self) -> np.ndarray:
        return np.flatnonzero(self.coupling > self.tol)

    @property
    def ok(self) -> bool:
        return (
            self.fr_violations.size == 0
            and self.yzg_violations.size == 0
            and self.h_violations.size == 0
            and self.coupling_violations.size == 0
        )


def diagnostics_check(trace: SolverTrace, p: PrimalDualState, tol: float = 1e-9) -> DiagnosticsReport:
    """Evaluate the per-iteration recursion inequalities along a recorded run.

    p should be a zero of the extended inclusion (obtained from a
    high-accuracy reference solve). The run must have been executed
    with diagnostics enabled so the mid-iteration quantities are
    available.
    """
    diag = trace.diag
    if diag is None:
        raise ConfigurationError("run was executed without diagnostics", field="diagnostics")
    pw = diag.weights
    iw = diag.inv_weights
    nu = diag.nu
    ell = diag.ell_v_psi
    pa = p.data
    kk = len(diag.Z)
    dm = np.empty(kk)
    dn = np.empty(kk)
    h = np.empty(kk)
    delta = np.empty(kk)
    fr_slack = np.empty(kk)
    yzg_slack = np.empty(kk)
    coupling = np.empty(kk)

    def nsq(v: np.ndarray) -> float:
        return float(np.dot(pw * v, v))

    def nsq_inv(v: np.ndarray) -> float:
        return float(np.dot(iw * v, v))

    for k in range(kk):
        a = diag.alphas[k]
        rho = diag.rhos[k]
        xk = diag.states[k]
        xk1 = diag.states[k + 1]
        xkm1 = diag.states[k - 1] if k > 0 else diag.states[0]
        z = diag.Z[k]
        y = diag.Y[k]
        u = diag.U[k]
        w = diag.W[k]
        e = w - u
        rsq = diag.r_psi_z[k] ** 2
        gain = (3.0 - nu) / (2.0 * rho * (1.0 + ell))
        dm[k] = (3.0 - nu) * rho / (1.0 + ell) * nsq_inv(e) + nu * rho * nsq_inv(u)
        dn[k] = 2.0 * rho * float(np.dot(w, pa - y))
        prev_coeff = a * (2.0 * a + gain * (1.0 - a))
        next_coeff = (1.0 - a) * (gain - 1.0)
        dprev = nsq(xk - xkm1)
        dnext = nsq(xk1 - xk)
        lhs = nsq(xk1 - pa)
        rhs = (
            (1.0 + a) * nsq(xk - pa)
            - a * nsq(xkm1 - pa)
            + dm[k]
            + dn[k]
            - 0.5 * nu * rho * rsq
            + prev_coeff * dprev
            - next_coeff * dnext
        )
        fr_slack[k] = rhs - lhs
        yzg_slack[k] = (nsq_inv(u) - 0.5 * rsq) + nsq(z - y)
        h[k] = nsq(xk - pa) - a * nsq(xkm1 - pa) + next_coeff * dprev
        c = _coupling_value(a, rho, nu, ell)
        coupling[k] = c
        delta[k] = 0.5 * nu * rho * rsq - c * dprev
    return DiagnosticsReport(
        dm=dm, dn=dn, h=h, delta=delta,
        fr_slack=fr_slack, yzg_slack=yzg_slack, coupling=coupling, tol=tol,
    )
