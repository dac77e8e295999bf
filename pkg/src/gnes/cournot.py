"""Networked Cournot competition over shared markets.

Firms sell into markets through a fixed participation pattern. Firm i
chooses one quantity per market it serves, pays a linear production
cost, and receives the market price

    P_j(S_j) = q - p S_j^sigma_d,    S_j = total quantity in market j,

where the slope p is random per demand sample. Market capacities
couple the firms through sum_i D_i u_i <= b, split evenly as b_i = b/N
so the constraint fits the per-agent aggregate form. With the price
decreasing in supply and sigma_d in (1, 3], the stacked cost gradient
is monotone on the orthant, which is what the solver assumptions need;
an increasing price is available for experiments but has to be
requested explicitly.

The default configuration is the ten-firm, seven-market benchmark.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .blockvec import AgentPartition
from .errors import ConfigurationError
from .graph import CommGraph, generate_graph
from .operators import GameProblem
from .stochastic import SamplingOracle

__all__ = [
    "DEFAULT_PARTICIPATION",
    "CournotConfig",
    "CournotDemandOracle",
    "generate",
    "monotonicity_probe",
    "estimate_lipschitz",
]

# markets served by each of the ten default firms (ascending market indices)
DEFAULT_PARTICIPATION: tuple[tuple[int, ...], ...] = (
    (0, 3),
    (0,),
    (0, 2, 4),
    (1, 6),
    (2, 6),
    (6,),
    (2, 5),
    (1, 2, 3, 5),
    (0, 4),
    (3, 4, 5),
)


@dataclass(frozen=True)
class CournotConfig:
    """Generator knobs; the defaults reproduce the benchmark instance."""

    num_firms: int = 10
    num_markets: int = 7
    participation: tuple[tuple[int, ...], ...] | None = None
    demand_q: float = 400.0
    demand_slope: float = 0.02
    demand_sd: float = 0.005
    demand_exponent: float = 1.2
    demand_sign: float = -1.0
    allow_nonmonotone: bool = False
    cost_mean: float = 2.0
    cost_sd: float = 1.0
    cost_floor: float = 0.6
    cap_mean: float = 250.0
    cap_sd: float = 50.0
    cap_floor: float = 0.0
    budget_lo: float = 5.0
    budget_hi: float = 10.0
    graph: str = "ring"
    graph_p: float | None = None
    lipschitz_pairs: int = 10_000
    lipschitz_margin: float = 1.1
    seed: int = 0

    def __post_init__(self):
        if not 1.0 < self.demand_exponent <= 3.0:
            raise ConfigurationError(
                f"demand exponent must lie in (1, 3] for a monotone game, "
                f"got {self.demand_exponent}",
                field="demand_exponent",
            )
        if self.demand_sign not in (-1.0, 1.0):
            raise ConfigurationError(
                "demand sign must be -1.0 (price decreasing in supply) or 1.0",
                field="demand_sign",
            )
        if self.demand_sign > 0 and not self.allow_nonmonotone:
            raise ConfigurationError(
                "an increasing price makes the game non-monotone; "
                "set allow_nonmonotone to generate it anyway",
                field="demand_sign",
            )
        if self.demand_slope <= 0 or self.demand_sd < 0:
            raise ConfigurationError(
                "demand slope must be positive and its deviation nonnegative",
                field="demand_slope",
            )
        if not 0 < self.budget_lo <= self.budget_hi:
            raise ConfigurationError(
                "market budgets need 0 < low <= high", field="budget_lo"
            )
        if self.lipschitz_pairs < 1:
            raise ConfigurationError(
                "need at least one sample pair", field="lipschitz_pairs"
            )
        if self.num_firms < 1 or self.num_markets < 1:
            raise ConfigurationError(
                "need at least one firm and one market", field="num_firms"
            )
        part = self.participation
        if part is None:
            if (self.num_firms, self.num_markets) != (10, 7):
                raise ConfigurationError(
                    "a participation map is required when the firm or market "
                    "count differs from the 10x7 default",
                    field="participation",
                )
            part = DEFAULT_PARTICIPATION
        part = tuple(tuple(int(j) for j in row) for row in part)
        if len(part) != self.num_firms:
            raise ConfigurationError(
                f"participation lists {len(part)} firms, expected {self.num_firms}",
                field="participation",
            )
        served = set()
        for i, row in enumerate(part):
            if len(row) == 0:
                raise ConfigurationError(
                    f"firm {i} participates in no market", field="participation"
                )
            if sorted(set(row)) != list(row):
                raise ConfigurationError(
                    f"markets of firm {i} must be strictly increasing",
                    field="participation",
                )
            if row[0] < 0 or row[-1] >= self.num_markets:
                raise ConfigurationError(
                    f"firm {i} references a market outside 0..{self.num_markets - 1}",
                    field="participation",
                )
            served.update(row)
        if served != set(range(self.num_markets)):
            missing = sorted(set(range(self.num_markets)) - served)
            raise ConfigurationError(
                f"markets {missing} have no participating firm", field="participation"
            )
        object.__setattr__(self, "participation", part)


class _MarketLayout:
    """Gather metadata: where each market's quantities live in the stack."""

    def __init__(self, partition: AgentPartition, participation: tuple, num_markets: int):
        n = partition.num_agents
        offsets = [partition.primal_slice(i).start for i in range(n)]
        coords = [[] for _ in range(num_markets)]
        for i, markets in enumerate(participation):
            for pos, j in enumerate(markets):
                coords[j].append(offsets[i] + pos)
        # ascending firm order per market, identical in both executors
        self.coords = tuple(np.array(c, dtype=np.int64) for c in coords)
        self.own_slice = tuple(partition.primal_slice(i) for i in range(n))
        self.markets = tuple(np.array(m, dtype=np.int64) for m in participation)
        # flattened gather map per firm: one fancy index plus segment sums
        # replaces a python loop over that firm's markets
        gather, bounds = [], []
        for i in range(n):
            flat = [self.coords[j] for j in participation[i]]
            ends = np.cumsum([c.shape[0] for c in flat])
            gather.append(np.concatenate(flat))
            bounds.append(np.concatenate(([0], ends[:-1])).astype(np.int64))
        self._gather = tuple(gather)
        self._bounds = tuple(bounds)
        # per-firm scratch, fully overwritten on every call
        self._pow = tuple(np.empty(m.shape[0]) for m in self.markets)
        self._tmp = tuple(np.empty(m.shape[0]) for m in self.markets)

    def firm_terms(self, i: int, u: np.ndarray, exponent: float):
        """Own quantities and the slope factor S~^s + s u S~^(s-1) per served market.

        Aggregates are clamped at zero before the fractional powers so
        the oracle stays defined when iterates leave the box. The factor
        array is scratch owned by the layout; callers must consume it
        before the next call for the same firm.
        """
        own = u[self.own_slice[i]]
        totals = np.add.reduceat(u[self._gather[i]], self._bounds[i])
        np.maximum(totals, 0.0, out=totals)
        # S^e + e u S^(e-1) factored as S^(e-1) (S + e u); one power
        factor = np.power(totals, exponent - 1.0, out=self._pow[i])
        tmp = np.multiply(exponent, own, out=self._tmp[i])
        tmp += totals
        factor *= tmp
        return own, factor

    def firm_terms_many(self, i: int, pts: np.ndarray, exponent: float):
        """firm_terms over rows of points, with identical per-row floats."""
        own = pts[:, self.own_slice[i]]
        totals = np.add.reduceat(pts[:, self._gather[i]], self._bounds[i], axis=1)
        np.maximum(totals, 0.0, out=totals)
        factor = totals ** (exponent - 1.0)
        factor *= totals + exponent * own
        return own, factor


class CournotDemandOracle(SamplingOracle):
    """Gradient sampler with a random demand slope per draw.

    Each draw perturbs the slope by a symmetric truncated Gaussian, so
    a single draw is unbiased for the deterministic gradient. The
    gradient is affine in the slope, hence the mini-batch average
    equals one gradient evaluation at the averaged slope; sample_mean
    exploits that instead of materializing per-draw gradients.
    """

    def __init__(self, layout: _MarketLayout, costs: tuple, config: CournotConfig):
        self._layout = layout
        self._costs = costs
        self._base = tuple(c - config.demand_q for c in costs)
        self._q = config.demand_q
        self._pbar = config.demand_slope
        self._sd = config.demand_sd
        self._cut = 3.0 * config.demand_sd
        self._exp = config.demand_exponent
        self._sign = config.demand_sign
        self.noise_bound = None

    def dim(self, agent: int) -> int:
        return self._layout.markets[agent].shape[0]

    def _slopes(self, size: int, width: int, rng: np.random.Generator) -> np.ndarray:
        eps = rng.normal(0.0, self._sd, size=(size, width))
        eps.clip(-self._cut, self._cut, out=eps)
        eps += self._pbar
        return eps

    def sample_gradient_batch(self, agent, u, size, rng):
        own, factor = self._layout.firm_terms(agent, u, self._exp)
        slopes = self._slopes(size, own.shape[0], rng)
        return self._base[agent][None, :] - self._sign * slopes * factor[None, :]

    def sample_mean(self, agent, u, size, rng):
        own, factor = self._layout.firm_terms(agent, u, self._exp)
        factor *= self._sign
        eps = rng.normal(0.0, self._sd, size=(size, own.shape[0]))
        np.maximum(eps, -self._cut, out=eps)
        np.minimum(eps, self._cut, out=eps)
        # mean slope without materializing the per-draw shift by pbar
        mean_slope = np.add.reduce(eps, axis=0)
        mean_slope /= size
        mean_slope += self._pbar
        mean_slope *= factor
        np.subtract(self._base[agent], mean_slope, out=mean_slope)
        return mean_slope

    def sample_mean_stack(self, u, size, streams, iteration, phase, out, partition):
        # sample_mean inlined across firms with lookups hoisted; every
        # operation matches it exactly so the stacked estimate is bit
        # identical to the firm-by-firm path the agent nodes take
        layout = self._layout
        exp = self._exp
        em1 = exp - 1.0
        sd = self._sd
        cut = self._cut
        sign = self._sign
        pbar = self._pbar
        base = self._base
        generator = streams.generator
        slices = partition.primal_slices
        for i in range(len(slices)):
            own = u[layout.own_slice[i]]
            totals = np.add.reduceat(u[layout._gather[i]], layout._bounds[i])
            np.maximum(totals, 0.0, out=totals)
            factor = np.power(totals, em1, out=layout._pow[i])
            tmp = np.multiply(exp, own, out=layout._tmp[i])
            tmp += totals
            factor *= tmp
            factor *= sign
            eps = generator(i, iteration, phase).normal(0.0, sd, size=(size, own.shape[0]))
            np.maximum(eps, -cut, out=eps)
            np.minimum(eps, cut, out=eps)
            mean_slope = np.add.reduce(eps, axis=0)
            mean_slope /= size
            mean_slope += pbar
            mean_slope *= factor
            np.subtract(base[i], mean_slope, out=out[slices[i]])


def _make_gradients(layout: _MarketLayout, costs: tuple, config: CournotConfig) -> tuple:
    sign = config.demand_sign
    q = config.demand_q
    pbar = config.demand_slope
    exp = config.demand_exponent

    def make(i: int):
        ci = costs[i]

        def grad(u: np.ndarray) -> np.ndarray:
            _, factor = layout.firm_terms(i, u, exp)
            return ci - q - sign * pbar * factor

        return grad

    return tuple(make(i) for i in range(len(costs)))


def _stacked_gradient(problem: GameProblem, u: np.ndarray) -> np.ndarray:
    part = problem.partition
    out = np.empty(part.total_dim)
    for i in range(part.num_agents):
        out[part.primal_slice(i)] = problem.gradient(i, u)
    return out


def estimate_lipschitz(
    problem: GameProblem,
    seed: int,
    pairs: int = 10_000,
    margin: float = 1.1,
    gradient_many: "callable | None" = None,
) -> float:
    """Empirical Lipschitz constant of the stacked gradient over the box.

    Samples uniform point pairs, takes the largest difference quotient,
    and inflates it by the margin. Deterministic in the seed. When
    gradient_many is given it must map an array of row points to their
    stacked gradients with the same floats as the per-point evaluation;
    the probe then avoids a python loop over the pairs.
    """
    rng = np.random.default_rng([seed, 1])
    lo, hi = problem.lo_stack, problem.hi_stack
    # one row-major block consumes the stream exactly like the former
    # per-point draws: row 2t is pair t's first point, row 2t+1 its second
    points = rng.uniform(lo, hi, size=(2 * pairs, lo.shape[0]))
    u_pts = points[0::2]
    v_pts = points[1::2]
    gaps = np.linalg.norm(u_pts - v_pts, axis=1)
    if gradient_many is not None:
        diffs = gradient_many(u_pts) - gradient_many(v_pts)
        slopes = np.linalg.norm(diffs, axis=1)
    else:
        slopes = np.empty(pairs)
        for t in range(pairs):
            diff = _stacked_gradient(problem, u_pts[t]) - _stacked_gradient(problem, v_pts[t])
            slopes[t] = np.linalg.norm(diff)
    keep = gaps >= 1e-12
    worst = float(np.max(slopes[keep] / gaps[keep])) if np.any(keep) else 0.0
    if worst == 0.0:
        raise ConfigurationError(
            "gradient appears constant; set the Lipschitz constant explicitly",
            field="lipschitz_pairs",
        )
    return margin * worst


def monotonicity_probe(problem: GameProblem, trials: int = 1000, seed: int = 0) -> float:
    """Smallest normalized monotonicity gap over random box pairs.

    Returns min <F(u) - F(v), u - v> / ||u - v||^2; a clearly negative
    value certifies the game is not monotone on the box. Instances are
    acceptable when the probe stays above -1e-8.
    """
    rng = np.random.default_rng([seed, 2])
    lo, hi = problem.lo_stack, problem.hi_stack
    worst = np.inf
    for _ in range(trials):
        u = rng.uniform(lo, hi)
        v = rng.uniform(lo, hi)
        du = u - v
        nsq = float(np.dot(du, du))
        if nsq < 1e-20:
            continue
        gap = float(np.dot(_stacked_gradient(problem, u) - _stacked_gradient(problem, v), du))
        worst = min(worst, gap / nsq)
    return worst


def generate(config: CournotConfig | None = None) -> tuple[GameProblem, CournotDemandOracle, CommGraph]:
    """Draw one benchmark instance from the config's seed.

    The same config yields the same costs, capacities, budgets, graph,
    and Lipschitz estimate. Draw order: per-firm costs, per-firm
    capacities, then market budgets.
    """
    if config is None:
        config = CournotConfig()
    participation = config.participation
    n = config.num_firms
    m = config.num_markets
    dims = tuple(len(row) for row in participation)
    part = AgentPartition(dims, m)
    layout = _MarketLayout(part, participation, m)
    rng = np.random.default_rng(config.seed)
    costs = tuple(
        np.maximum(rng.normal(config.cost_mean, config.cost_sd, k), config.cost_floor)
        for k in dims
    )
    caps = tuple(
        np.maximum(rng.normal(config.cap_mean, config.cap_sd, k), config.cap_floor)
        for k in dims
    )
    budget = rng.uniform(config.budget_lo, config.budget_hi, m)
    d_mats = []
    for i, markets in enumerate(participation):
        di = np.zeros((m, dims[i]))
        for pos, j in enumerate(markets):
            di[j, pos] = 1.0
        d_mats.append(di)
    share = budget / n
    interaction = []
    for i, markets in enumerate(participation):
        others = {
            l
            for j in markets
            for l in range(n)
            if j in participation[l] and l != i
        }
        interaction.append(np.array(sorted(others), dtype=np.int64))
    grads = _make_gradients(layout, costs, config)
    problem = GameProblem(
        partition=part,
        grad_f=grads,
        D=tuple(d_mats),
        b=tuple(share.copy() for _ in range(n)),
        box_lo=tuple(np.zeros(k) for k in dims),
        box_hi=caps,
        lipschitz_ell=1.0,
        interaction=tuple(interaction),
    )
    def gradient_many(pts: np.ndarray) -> np.ndarray:
        out = np.empty_like(pts)
        for i in range(n):
            _, factor = layout.firm_terms_many(i, pts, config.demand_exponent)
            out[:, layout.own_slice[i]] = (
                costs[i] - config.demand_q
                - config.demand_sign * config.demand_slope * factor
            )
        return out

    ell = estimate_lipschitz(
        problem,
        config.seed,
        pairs=config.lipschitz_pairs,
        margin=config.lipschitz_margin,
        gradient_many=gradient_many,
    )
    problem = dataclasses.replace(problem, lipschitz_ell=ell)
    if config.graph == "erdos-renyi":
        graph = generate_graph(config.graph, n, p=config.graph_p, seed=config.seed + 1_000_003)
    else:
        graph = generate_graph(config.graph, n)
    oracle = CournotDemandOracle(layout, costs, config)
    return problem, oracle, graph
