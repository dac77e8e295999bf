"""Game data, the extended primal-dual operator, and residual machinery.

A game instance holds per-agent cost gradients, local box constraints,
and the agent slices D_i, b_i of the shared affine constraint D u <= b.
The extended operator V acts on states x = (u, mu, lambda) and couples
agents through the constraint blocks and the communication Laplacian:

    V(x) = ( F(u) + D^T lambda ; L lambda ; b + L (lambda - mu) - D u )

with all dual products taken blockwise per agent. Zeros of V + T, where
T collects the local subdifferentials and the nonnegativity cone on
lambda, are variational equilibria of the game.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blockvec import AgentPartition, BlockVector, Preconditioner, PrimalDualState
from .errors import ConfigurationError, DimensionMismatchError, NumericError, ToleranceError
from .graph import CommGraph, laplacian_block, largest_eigenvalue_psd

__all__ = [
    "GameProblem",
    "ExtendedOperator",
    "KKTReport",
    "apply_F",
    "apply_V",
    "resolvent_T",
    "residual_r_psi",
    "proj_shared_set",
    "residual_res",
    "kkt_check",
]


@dataclass
class GameProblem:
    """Static data of one game instance.

    Parameters
    ----------
    partition : AgentPartition
        Block structure of the decision vector.
    grad_f : sequence of callables
        grad_f[i](u) maps the full decision vector to agent i's partial
        gradient, shape (dims[i],). It may only read the blocks of
        agent i and of the agents listed in interaction[i].
    D : sequence of arrays
        Agent slices of the constraint matrix, D[i] has shape (m, dims[i]).
    b : sequence of arrays
        Agent shares b_i of the constraint offset, each shape (m,).
        The shared constraint is D u <= sum_i b_i.
    box_lo, box_hi : sequences of arrays
        Local box bounds per agent, shape (dims[i],).
    lipschitz_ell : float
        Lipschitz constant of the stacked gradient map F.
    prox_g : sequence of callables or None
        Optional custom prox oracles prox_g[i](v, gamma). The default
        is the projection onto the local box, which any custom oracle
        must also map into.
    interaction : tuple of arrays or None
        interaction[i] lists the agents (not i) whose blocks grad_f[i]
        reads. None means everyone interacts with everyone.
    """

    partition: AgentPartition
    grad_f: tuple
    D: tuple
    b: tuple
    box_lo: tuple
    box_hi: tuple
    lipschitz_ell: float
    prox_g: tuple | None = None
    interaction: tuple | None = None
    d_norm: float = field(init=False)

    def __post_init__(self):
        part = self.partition
        n = part.num_agents
        m = part.constraint_dim
        if len(self.grad_f) != n:
            raise DimensionMismatchError("need one gradient oracle per agent", block="grad_f")
        self.D = tuple(np.ascontiguousarray(Di, dtype=np.float64) for Di in self.D)
        self.b = tuple(np.asarray(bi, dtype=np.float64).ravel() for bi in self.b)
        if len(self.D) != n or len(self.b) != n:
            raise DimensionMismatchError("need D_i and b_i for every agent", block="D/b")
        for i, (Di, bi) in enumerate(zip(self.D, self.b)):
            if Di.shape != (m, part.dims[i]):
                raise DimensionMismatchError(
                    f"D[{i}] has shape {Di.shape}, expected ({m}, {part.dims[i]})",
                    block=f"agent {i}",
                )
            if bi.shape != (m,):
                raise DimensionMismatchError(
                    f"b[{i}] has shape {bi.shape}, expected ({m},)", block=f"agent {i}"
                )
            if not np.all(np.isfinite(Di)) or not np.all(np.isfinite(bi)):
                raise ConfigurationError("constraint data must be finite", field=f"agent {i}")
        lo = tuple(np.asarray(v, dtype=np.float64).ravel() for v in self.box_lo)
        hi = tuple(np.asarray(v, dtype=np.float64).ravel() for v in self.box_hi)
        for i in range(n):
            if lo[i].shape != (part.dims[i],) or hi[i].shape != (part.dims[i],):
                raise DimensionMismatchError(
                    f"box bounds of agent {i} must have shape ({part.dims[i]},)",
                    block=f"agent {i}",
                )
            if np.any(lo[i] > hi[i]):
                raise ConfigurationError(f"empty box for agent {i}", field=f"agent {i}")
        self.box_lo = lo
        self.box_hi = hi
        if not np.isfinite(self.lipschitz_ell) or self.lipschitz_ell < 0.0:
            raise ConfigurationError("lipschitz_ell must be finite and >= 0", field="lipschitz_ell")
        if self.prox_g is not None and len(self.prox_g) != n:
            raise DimensionMismatchError("need one prox oracle per agent", block="prox_g")
        if self.interaction is None:
            self.interaction = tuple(
                np.array([j for j in range(n) if j != i], dtype=np.int64) for i in range(n)
            )
        else:
            self.interaction = tuple(
                np.asarray(np.sort(np.unique(ix)), dtype=np.int64) for ix in self.interaction
            )
            for i, ix in enumerate(self.interaction):
                if np.any(ix < 0) or np.any(ix >= n) or np.any(ix == i):
                    raise ConfigurationError(
                        f"interaction list of agent {i} must name other agents",
                        field=f"agent {i}",
                    )
        # stacked forms used by projections and norms
        self.lo_stack = np.concatenate(lo)
        self.hi_stack = np.concatenate(hi)
        self.D_stack = np.hstack(self.D)
        self.b_total = np.sum(np.stack(self.b), axis=0)
        small = min(self.D_stack.shape)
        gram = self.D_stack @ self.D_stack.T if small == m else self.D_stack.T @ self.D_stack
        self.d_norm = float(np.sqrt(max(largest_eigenvalue_psd(gram), 0.0)))

    @property
    def num_agents(self) -> int:
        return self.partition.num_agents

    def prox(self, i: int, v: np.ndarray, gamma: float) -> np.ndarray:
        """Prox of agent i's local term at step gamma (box projection by default)."""
        if self.prox_g is not None:
            return self.prox_g[i](v, gamma)
        return np.clip(v, self.box_lo[i], self.box_hi[i])

    @property
    def has_custom_prox(self) -> bool:
        return self.prox_g is not None

    def gradient(self, i: int, u: np.ndarray) -> np.ndarray:
        """Agent i's partial gradient with a finiteness guard."""
        g = np.asarray(self.grad_f[i](u), dtype=np.float64)
        if g.shape != (self.partition.dims[i],):
            raise DimensionMismatchError(
                f"gradient of agent {i} has shape {g.shape}", block=f"agent {i}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError("gradient evaluation produced a non-finite value", agent=i)
        return g


class ExtendedOperator:
    """V together with the resolvent of the separable part T.

    The Lipschitz constant of V satisfies
    ell_V <= ell + 2 kappa + ||D|| with kappa the Laplacian norm, which
    is what step size selection uses.
    """

    __slots__ = ("problem", "graph", "lipschitz_ell_V", "_blocks", "_slots")

    def __init__(self, problem: GameProblem, graph: CommGraph):
        if graph.num_agents != problem.partition.num_agents:
            raise DimensionMismatchError("graph and partition disagree on N", block="graph")
        self.problem = problem
        self.graph = graph
        self.lipschitz_ell_V = float(
            problem.lipschitz_ell + 2.0 * graph.lap_norm + problem.d_norm
        )
        part = problem.partition
        d = part.total_dim
        nm = part.dual_dim
        m = part.constraint_dim
        # per-agent constants unpacked once; D_i^T is stored contiguous,
        # matching the layout agent nodes use, so both executors run the
        # same products
        self._blocks = tuple(
            (
                part.primal_slice(i),
                np.ascontiguousarray(problem.D[i].T),
                problem.D[i],
                problem.b[i],
                float(graph.degrees[i]),
                graph.neighbor_weights[i],
                graph.neighbors[i],
                slice(d + i * m, d + (i + 1) * m),
                slice(d + nm + i * m, d + nm + (i + 1) * m),
            )
            for i in range(part.num_agents)
        )
        # one stacked output buffer per sampling phase with prebound
        # per-agent views, so the solver's two V evaluations per
        # iteration skip slicing and allocation; see v_flat
        slots = []
        for _ in range(2):
            buf = np.empty(part.state_dim)
            views = tuple((buf[t[0]], buf[t[7]], buf[t[8]]) for t in self._blocks)
            slots.append((buf, views))
        self._slots = tuple(slots)

    # flat-array engine ----------------------------------------------------
    #
    # The solver calls these with raw state arrays. Per-agent products go
    # through the same kernels as the distributed executor (laplacian_block,
    # one np.dot per agent) so both executors produce identical floats.

    def f_det(self, u: np.ndarray) -> np.ndarray:
        """Stacked deterministic gradient F(u)."""
        part = self.problem.partition
        out = np.empty(part.total_dim)
        for i in range(part.num_agents):
            out[part.primal_slice(i)] = self.problem.gradient(i, u)
        return out

    def v_flat(
        self, x: np.ndarray, fvals: np.ndarray | None = None, slot: int | None = None
    ) -> np.ndarray:
        """V(x) on a flat state; fvals overrides the F(u) part when given.

        With slot 0 or 1 the result lives in a buffer owned by the
        operator and stays valid only until the next v_flat call with
        the same slot; the solver maps its two per-iteration
        evaluations onto the two slots. The default returns a fresh
        array.
        """
        part = self.problem.partition
        n = part.num_agents
        d = part.total_dim
        nm = part.dual_dim
        m = part.constraint_dim
        u = x[:d]
        mu = x[d : d + nm]
        lam = x[d + nm :]
        if fvals is None:
            fvals = self.f_det(u)
        if slot is None:
            out = np.empty(part.state_dim)
            views = None
        else:
            out, views = self._slots[slot]
        lammat = lam.reshape(n, m)
        diffmat = (lam - mu).reshape(n, m)
        for i, (sl, dT, D, b, deg, wi, nbrs, mu_sl, lam_sl) in enumerate(self._blocks):
            li = lammat[i]
            if views is None:
                vu, vmu, vlam = out[sl], out[mu_sl], out[lam_sl]
            else:
                vu, vmu, vlam = views[i]
            np.dot(dT, li, out=vu)
            vu += fvals[sl]
            laplacian_block(deg, wi, li, lammat[nbrs], out=vmu)
            laplacian_block(deg, wi, diffmat[i], diffmat[nbrs], out=vlam)
            vlam += b
            vlam -= np.dot(D, u[sl])
        return out

    def resolvent_flat(self, x: np.ndarray, psi: Preconditioner) -> np.ndarray:
        """Resolvent of Psi^-1 T: blockwise prox on u, identity on mu, clamp on lambda."""
        part = self.problem.partition
        d = part.total_dim
        nm = part.dual_dim
        out = np.empty(part.state_dim)
        prob = self.problem
        if prob.has_custom_prox:
            for i in range(part.num_agents):
                sl = part.primal_slice(i)
                out[sl] = prob.prox(i, x[sl], float(psi.gamma[i]))
        else:
            np.clip(x[:d], prob.lo_stack, prob.hi_stack, out=out[:d])
        out[d : d + nm] = x[d : d + nm]
        np.maximum(x[d + nm :], 0.0, out=out[d + nm :])
        return out

    def r_psi_flat(self, x: np.ndarray, psi: Preconditioner) -> float:
        """Euclidean norm of the fixed-point displacement of the forward-backward map."""
        v = self.v_flat(x)
        y = self.resolvent_flat(x - psi.inv_weights * v, psi)
        return float(np.linalg.norm(x - y))


def apply_F(p: GameProblem, u: BlockVector) -> BlockVector:
    """Stacked pseudogradient F(u)."""
    if u.kind != "primal":
        raise ConfigurationError("F acts on primal vectors", field="kind")
    part = p.partition
    out = np.empty(part.total_dim)
    for i in range(part.num_agents):
        out[part.primal_slice(i)] = p.gradient(i, u.data)
    return BlockVector(part, out, "primal")


def apply_V(op: ExtendedOperator, x: PrimalDualState) -> PrimalDualState:
    """Extended operator value at a state."""
    return PrimalDualState(x.partition, op.v_flat(x.data))


def resolvent_T(op: ExtendedOperator, x: PrimalDualState, psi: Preconditioner) -> PrimalDualState:
    """Resolvent J of Psi^-1 T applied to a state."""
    return PrimalDualState(x.partition, op.resolvent_flat(x.data, psi))


def residual_r_psi(op: ExtendedOperator, x: PrimalDualState, psi: Preconditioner) -> float:
    """Fixed-point residual; zero exactly at the zeros of V + T."""
    return op.r_psi_flat(x.data, psi)


def proj_shared_set(
    p: GameProblem,
    v: np.ndarray,
    tol: float = 1e-10,
    max_sweeps: int = 10000,
) -> np.ndarray:
    """Euclidean projection onto C = {u in U : D u <= b}.

    Dykstra's alternating scheme over the box U and each constraint
    halfspace. Stops when one full sweep moves the iterate and every
    correction variable by less than tol combined; the iterate alone
    can revisit the same point mid-convergence while the corrections
    still grow, so both must settle. Raises if the sweep budget runs
    out first.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    d = p.partition.total_dim
    if v.shape != (d,):
        raise DimensionMismatchError(f"point has shape {v.shape}, expected ({d},)", block="u")
    m = p.partition.constraint_dim
    rows = p.D_stack
    rhs = p.b_total
    row_sq = np.einsum("ij,ij->i", rows, rows)
    for r in range(m):
        if row_sq[r] == 0.0 and rhs[r] < 0.0:
            raise ConfigurationError(
                f"constraint row {r} is identically zero with negative offset",
                field="D/b",
            )
    x = np.clip(v, p.lo_stack, p.hi_stack)
    corr_box = v - x
    corr = np.zeros((m, d))
    for _ in range(max_sweeps):
        x_prev = x.copy()
        shifted = 0.0
        for r in range(m):
            if row_sq[r] == 0.0:
                continue
            t = x + corr[r]
            gap = float(rows[r] @ t) - rhs[r]
            if gap > 0.0:
                y = t - (gap / row_sq[r]) * rows[r]
            else:
                y = t
            new_corr = t - y
            shifted += float(np.linalg.norm(new_corr - corr[r]))
            corr[r] = new_corr
            x = y
        t = x + corr_box
        y = np.clip(t, p.lo_stack, p.hi_stack)
        shifted += float(np.linalg.norm((t - y) - corr_box))
        corr_box = t - y
        x = y
        moved = float(np.linalg.norm(x - x_prev)) + shifted
        if moved < tol:
            return x
    raise ToleranceError(
        "projection onto the shared feasible set did not converge", achieved=moved
    )


def residual_res(p: GameProblem, u: np.ndarray, proj_tol: float = 1e-10) -> float:
    """Natural residual || u - proj_C(u - F(u)) || of the shared-constraint VI."""
    u = np.asarray(u, dtype=np.float64).ravel()
    part = p.partition
    f = np.empty(part.total_dim)
    for i in range(part.num_agents):
        f[part.primal_slice(i)] = p.gradient(i, u)
    return float(np.linalg.norm(u - proj_shared_set(p, u - f, tol=proj_tol)))


@dataclass(frozen=True)
class KKTReport:
    """Outcome of the first-order optimality test at (u, lambda)."""

    stationarity: bool
    feasibility: bool
    complementarity: bool
    stationarity_gap: float
    feasibility_gap: float
    complementarity_gap: float
    dual_sign_gap: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.stationarity and self.feasibility and self.complementarity


def kkt_check(p: GameProblem, u: np.ndarray, lam: np.ndarray, tol: float = 1e-8) -> KKTReport:
    """First-order conditions with one shared multiplier for all agents.

    Stationarity is tested through the prox characterization
    u_i = prox_{g_i}(u_i - (grad f_i + D_i^T lambda)) at unit step,
    feasibility as D u - b <= tol, and complementarity as
    |lambda_j (D u - b)_j| <= tol together with lambda >= -tol.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    lam = np.asarray(lam, dtype=np.float64).ravel()
    part = p.partition
    if lam.shape != (part.constraint_dim,):
        raise DimensionMismatchError(
            f"multiplier has shape {lam.shape}, expected ({part.constraint_dim},)",
            block="lambda",
        )
    stat = 0.0
    for i in range(part.num_agents):
        sl = part.primal_slice(i)
        g = p.gradient(i, u) + p.D[i].T @ lam
        z = p.prox(i, u[sl] - g, 1.0)
        stat = max(stat, float(np.linalg.norm(u[sl] - z)))
    slack = p.D_stack @ u - p.b_total
    feas = float(np.max(slack, initial=0.0))
    comp = float(np.max(np.abs(lam * slack), initial=0.0))
    dual_sign = float(max(0.0, -np.min(lam, initial=0.0)))
    return KKTReport(
        stationarity=stat <= tol,
        feasibility=feas <= tol,
        complementarity=comp <= tol and dual_sign <= tol,
        stationarity_gap=stat,
        feasibility_gap=feas,
        complementarity_gap=comp,
        dual_sign_gap=dual_sign,
        tol=tol,
    )
