"""Brute-force tabular checks of the planning theory on small deterministic MDPs.

Two identities are checked here:

* The optimal distribution over a length-T action sequence,
  ``q(U) ∝ exp((sum_t r(x_t, u_t) + V(x_T)) / alpha)``, equals the product of the
  per-step Boltzmann policies along the deterministic state trace.
* Solving the MDP with reward ``omega * r + r_R`` gives the same soft-optimal policy
  as solving the augmented MDP with reward ``omega' * log pi_prior + r_R`` when
  ``omega' = alpha`` and ``pi_prior`` is the soft-optimal policy for ``omega * r``.

Everything is finite horizon with gamma = 1, so all quantities are exact sums.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .tabular import DiscreteMDP, StateGrid, soft_q_iteration

ENUMERATION_LIMIT = 1_000_000
FIXTURE_FORMAT = "resmppi-oracle-fixtures/1"


class GridEscapeError(ValueError):
    def __init__(self, pairs):
        shown = ", ".join(f"(cell {s}, action {a})" for s, a in pairs[:10])
        more = f" and {len(pairs) - 10} more" if len(pairs) > 10 else ""
        super().__init__(f"dynamics leave the grid for {len(pairs)} cell/action pairs: {shown}{more}")
        self.pairs = pairs


class EnumerationLimitError(ValueError):
    pass


@dataclass
class GridSpec:
    """Regular state grid over ``dims`` plus a finite action set.

    ``axes`` holds ``(low, high, n)`` per gridded dimension. States outside the
    gridded dimensions are pinned at ``base``.
    """

    dims: tuple
    axes: list
    base: list
    actions: list
    action_cell_volume: float = 1.0

    def grid(self):
        return StateGrid(self.dims, [np.linspace(lo, hi, int(n)) for lo, hi, n in self.axes], self.base)

    def action_array(self):
        return np.atleast_2d(np.asarray(self.actions, dtype=float))

    def to_dict(self):
        return {
            "dims": list(self.dims),
            "axes": [list(a) for a in self.axes],
            "base": list(map(float, self.base)),
            "actions": np.asarray(self.actions, dtype=float).tolist(),
            "action_cell_volume": self.action_cell_volume,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["dims"]), [tuple(a) for a in d["axes"]], d["base"], d["actions"], d["action_cell_volume"])


def discretize_env(env, spec: GridSpec, on_escape="error"):
    """Tabulate ``env`` at the cell centers of ``spec``; next states snap to the nearest cell.

    With ``on_escape="error"`` a :class:`GridEscapeError` lists every (cell, action)
    whose successor leaves the grid box or the pinned non-gridded subspace. With
    ``"clip"`` such successors are clamped to the nearest boundary cell.
    """
    if on_escape not in ("error", "clip"):
        raise ValueError("on_escape must be 'error' or 'clip'")
    grid = spec.grid()
    actions = spec.action_array()
    centers = grid.centers()
    S, A = len(centers), len(actions)
    trans = np.empty((S, A), dtype=np.int64)
    reward = np.empty((S, A))
    addon = np.empty((S, A))
    free = [d for d in range(centers.shape[1]) if d not in grid.dims]
    escapes = []
    for a, u in enumerate(actions):
        ub = np.broadcast_to(u, (S, len(u)))
        nxt = env.step(centers, ub)
        idx, escaped = grid.snap(nxt, clip=True)
        if free:
            escaped |= np.any(np.abs(nxt[:, free] - grid.base[free]) > 1e-12, axis=1)
        escapes += [(int(s), a) for s in np.flatnonzero(escaped)]
        trans[:, a] = np.ravel_multi_index(idx, grid.shape)
        reward[:, a] = env.basic_reward(centers, ub)
        addon[:, a] = env.addon_reward(centers, ub)
    if escapes and on_escape == "error":
        raise GridEscapeError(escapes)
    return DiscreteMDP(trans, reward, spec.action_cell_volume, addon, grid, actions)


def random_mdp(rng, n_states, n_actions, action_cell_volume=1.0, with_addon=True):
    rng = np.random.default_rng(rng)
    trans = rng.integers(0, n_states, size=(n_states, n_actions))
    reward = rng.normal(size=(n_states, n_actions))
    addon = rng.normal(size=(n_states, n_actions)) if with_addon else None
    return DiscreteMDP(trans, reward, action_cell_volume, addon)


def _stage_reward(mdp, t):
    return mdp.reward[t] if mdp.reward.ndim == 3 else mdp.reward


def _enumerate(mdp, x0, T, per_step):
    """Expand all ``A**T`` sequences in lexicographic order (first action most significant).

    ``per_step(t, states)`` returns the ``(n, A)`` log-contribution of each action.
    Returns the accumulated log weights and the final states.
    """
    A = mdp.n_actions
    if A ** T > ENUMERATION_LIMIT:
        raise EnumerationLimitError(f"{A}^{T} = {A ** T} sequences exceeds the limit of {ENUMERATION_LIMIT}")
    states = np.array([int(x0)])
    logw = np.zeros(1)
    for t in range(T):
        logw = (logw[:, None] + per_step(t, states)).reshape(-1)
        states = mdp.transition[states].reshape(-1)
    return logw, states


def sequence_distribution_eq5(mdp, sol, x0, T):
    """Probability of every action sequence from ``exp((sum r + V_T(x_T)) / alpha)``,
    normalized by explicit summation over the enumeration."""
    alpha = sol.alpha
    logw, last = _enumerate(mdp, x0, T, lambda t, s: _stage_reward(mdp, t)[s] / alpha)
    logw = logw + sol.v_at(T)[last] / alpha
    return np.exp(logw - logsumexp(logw))


def sequence_partition(mdp, sol, x0, T):
    """``log sum_U vol^T exp((sum r + V_T) / alpha)``; equals ``V_0(x0) / alpha``."""
    alpha = sol.alpha
    logw, last = _enumerate(mdp, x0, T, lambda t, s: _stage_reward(mdp, t)[s] / alpha)
    return float(logsumexp(logw + sol.v_at(T)[last] / alpha) + T * np.log(mdp.action_cell_volume))


def boltzmann_product(mdp, sol, x0, T):
    """Probability of every action sequence as a product of per-step Boltzmann masses."""
    logp = [np.log(sol.probabilities(t)) for t in range(T)]
    logw, _ = _enumerate(mdp, x0, T, lambda t, s: logp[t][s])
    return np.exp(logw)


def total_variation(p, q, axis=-1):
    return 0.5 * np.sum(np.abs(np.asarray(p) - np.asarray(q)), axis=axis)


@dataclass
class PropositionReport:
    tv: float
    partition_error: float
    n_sequences: int


def check_sequence_factorization(mdp, alpha, T, x0=0, solve_horizon=None):
    """Compare both sequence distributions from ``x0`` under a horizon-``solve_horizon`` solve."""
    H = T if solve_horizon is None else solve_horizon
    if H < T:
        raise ValueError("solve_horizon must be at least T")
    sol = soft_q_iteration(mdp, alpha, horizon=H)
    p = sequence_distribution_eq5(mdp, sol, x0, T)
    q = boltzmann_product(mdp, sol, x0, T)
    z_err = abs(sequence_partition(mdp, sol, x0, T) - sol.v_at(0)[x0] / alpha)
    return PropositionReport(float(total_variation(p, q)), float(z_err), len(p))


@dataclass
class RqlReport:
    max_tv: float
    per_state_tv: np.ndarray
    direct: object
    augmented: object
    prior: object


def augmented_mdp(mdp, prior_sol, omega_prime, addon=None):
    """Stage-indexed augmented reward ``omega' * log pi_t + r_R``."""
    addon = mdp.addon_reward if addon is None else np.asarray(addon, dtype=float)
    if addon is None:
        addon = np.zeros_like(mdp.reward)
    H = prior_sol.q.shape[0]
    reward = np.stack([omega_prime * prior_sol.log_density(t) + addon for t in range(H)])
    return mdp.with_reward(reward)


def check_rql_equivalence(mdp, omega, omega_prime, alpha, horizon, addon=None):
    """Solve the full task directly and through the augmented MDP; report per-state TV.

    The prior is the soft-optimal policy for ``omega * r`` at entropy weight ``alpha``.
    ``per_state_tv`` is the worst TV over stages, per state.
    """
    addon = mdp.addon_reward if addon is None else np.asarray(addon, dtype=float)
    if addon is None:
        addon = np.zeros_like(mdp.reward)
    prior = soft_q_iteration(mdp.with_reward(omega * mdp.reward), alpha, horizon=horizon)
    direct = soft_q_iteration(mdp.with_reward(omega * mdp.reward + addon), alpha, horizon=horizon)
    augmented = soft_q_iteration(augmented_mdp(mdp, prior, omega_prime, addon), alpha, horizon=horizon)
    tv = np.stack([total_variation(direct.probabilities(t), augmented.probabilities(t)) for t in range(horizon)])
    per_state = tv.max(axis=0)
    return RqlReport(float(per_state.max()), per_state, direct, augmented, prior)


def augmented_optimal_action(mdp, prior_sol, omega_prime, alpha, x0, addon=None):
    """Argmax action index and stage-0 Boltzmann row of the augmented MDP at ``x0``.

    ``x0`` is a continuous state (snapped with ``mdp.grid``) or a state index.
    """
    if np.ndim(x0) == 0:
        s = int(x0)
    else:
        if mdp.grid is None:
            raise ValueError("a continuous x0 needs an MDP built by discretize_env")
        idx, escaped = mdp.grid.snap(np.asarray(x0, dtype=float), clip=False)
        if np.any(escaped):
            raise ValueError(f"x0 {x0!r} lies outside the oracle grid")
        s = int(np.ravel_multi_index(idx, mdp.grid.shape))
    H = prior_sol.q.shape[0]
    aug = soft_q_iteration(augmented_mdp(mdp, prior_sol, omega_prime, addon), alpha, horizon=H)
    row = aug.probabilities(0)[s]
    return int(np.argmax(aug.q_at(0)[s])), row


@dataclass
class PointMassFixture:
    env: object
    mdp: DiscreteMDP
    prior_solution: object
    prior: object
    alpha: float
    horizon: int
    x0: np.ndarray


def point_mass_fixture(alpha=0.1, horizon=2, n_cells=21, omega=1.0):
    """Lateral (y) slice of the point mass, tabulated for planner-vs-oracle checks.

    The grid covers ``py`` and ``vy``; ``px`` and ``vx`` stay at zero because every
    action has zero x-acceleration. Actions are five y-accelerations. The continuous
    prior interpolates the per-cell Boltzmann mean and uses the max-entropy spread
    ``sqrt(alpha / (2 c))`` of a quadratic control cost ``c``.
    """
    from .envs import PointMass
    from .priors import TabularSoftPolicy, tabular_to_continuous

    env = PointMass(omega=omega)
    ay = [-1.0, -0.5, 0.0, 0.5, 1.0]
    spec = GridSpec((1, 3), [(-0.05, 0.05, n_cells), (-0.5, 0.5, n_cells)], [0.0] * 4,
                    [[0.0, a] for a in ay], 0.5)
    mdp = discretize_env(env, spec, on_escape="clip")
    mdp = mdp.with_reward(omega * mdp.reward)
    prior_sol = soft_q_iteration(mdp, alpha, horizon=horizon)
    tab = TabularSoftPolicy(mdp.grid, prior_sol, mdp.actions)
    prior = tabular_to_continuous(tab, np.sqrt(alpha / (2.0 * env.control_cost)))
    return PointMassFixture(env, mdp, prior_sol, prior, alpha, horizon, np.zeros(4))


# ---------------------------------------------------------------- fixtures

def mdp_to_dict(mdp):
    d = {
        "transition": mdp.transition.tolist(),
        "reward": mdp.reward.tolist(),
        "action_cell_volume": mdp.action_cell_volume,
    }
    if mdp.addon_reward is not None:
        d["addon_reward"] = mdp.addon_reward.tolist()
    return d


def mdp_from_dict(d):
    return DiscreteMDP(d["transition"], d["reward"], d["action_cell_volume"], d.get("addon_reward"))


def make_fixture_suite(seed=20240, n_prop=100, n_rql=20):
    """Random fixture suite; the committed file was produced by this function."""
    rng = np.random.default_rng(seed)
    fixtures = []
    for i in range(n_prop):
        S = int(rng.integers(2, 7))
        A = int(rng.integers(2, 5))
        T = int(rng.integers(1, 5))
        vol = float(rng.choice([0.5, 1.0, 2.0]))
        mdp = random_mdp(rng, S, A, vol, with_addon=False)
        fixtures.append({
            "name": f"prop-{i:03d}", "kind": "sequence", "expect": "pass", "tolerance": 1e-10,
            "alpha": float(rng.choice([0.3, 1.0, 2.0])), "T": T, "solve_horizon": T + int(rng.integers(0, 3)),
            "x0": int(rng.integers(0, S)), "mdp": mdp_to_dict(mdp),
        })
    for i in range(n_rql):
        mdp = random_mdp(rng, 6, 3, 1.0)
        alpha = float(rng.choice([0.5, 1.0]))
        fixtures.append({
            "name": f"rql-{i:03d}", "kind": "rql", "expect": "pass", "tolerance": 1e-8,
            "alpha": alpha, "omega": float(rng.choice([1.0, 2.0])), "omega_prime": alpha, "horizon": 4,
            "mdp": mdp_to_dict(mdp),
        })
    mdp = random_mdp(rng, 6, 3, 1.0)
    mdp.addon_reward = np.zeros_like(mdp.reward)
    fixtures.append({
        "name": "rql-zero-addon", "kind": "rql", "expect": "pass", "tolerance": 1e-10,
        "alpha": 1.0, "omega": 1.0, "omega_prime": 1.0, "horizon": 4, "mdp": mdp_to_dict(mdp),
    })
    mdp = random_mdp(rng, 6, 3, 1.0)
    fixtures.append({
        "name": "rql-omega-mismatch", "kind": "rql", "expect": "fail", "tolerance": 1e-3,
        "alpha": 1.0, "omega": 1.0, "omega_prime": 100.0, "horizon": 4, "mdp": mdp_to_dict(mdp),
    })
    return {"format": FIXTURE_FORMAT, "fixtures": fixtures}


def save_fixtures(suite, path):
    with open(path, "w") as f:
        json.dump(suite, f, indent=1)
        f.write("\n")


def load_fixtures(path):
    with open(path) as f:
        suite = json.load(f)
    if suite.get("format") != FIXTURE_FORMAT:
        raise ValueError(f"{path}: unsupported fixture format {suite.get('format')!r}")
    return suite


@dataclass
class FixtureResult:
    name: str
    kind: str
    expect: str
    measured: float
    tolerance: float

    @property
    def within(self):
        return self.measured <= self.tolerance

    @property
    def ok(self):
        """Pass fixtures must be within tolerance; expected-fail fixtures must exceed it."""
        return self.within if self.expect == "pass" else not self.within


def run_fixture(fx):
    mdp = mdp_from_dict(fx["mdp"])
    if fx["kind"] == "sequence":
        rep = check_sequence_factorization(mdp, fx["alpha"], fx["T"], fx["x0"], fx["solve_horizon"])
        measured = rep.tv
    elif fx["kind"] == "rql":
        rep = check_rql_equivalence(mdp, fx["omega"], fx["omega_prime"], fx["alpha"], fx["horizon"])
        measured = rep.max_tv
    else:
        raise ValueError(f"fixture {fx.get('name')!r}: unknown kind {fx['kind']!r}")
    return FixtureResult(fx["name"], fx["kind"], fx["expect"], measured, fx["tolerance"])


def run_suite(suite):
    fixtures = suite.get("fixtures", [])
    if not fixtures:
        raise ValueError("fixture set is empty")
    return [run_fixture(fx) for fx in fixtures]
