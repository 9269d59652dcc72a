"""Brute-force ground truth for small binary-mode systems.

Enumerates every K x K binary storage matrix, builds exact slot-transition
distributions (marginalizing over reception vectors and over the uniform
tie-breaking of maximal cliques / empty lines), derives the exact induced
model over aggregated states with its constructed reward, and verifies the
structural claims: value equality between the restricted and induced views,
threshold optimal policies, value monotonicity and slope bounds, transience
of large-clique states, and the binomial clique-transition law.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import breadth_first_order, connected_components

from . import state as st
from .aggregation import (
    Action,
    AggregatedState,
    Scheme,
    SchemeKind,
    aggregate,
    feasible_actions,
)
from .errors import DegeneratePolicy, InfeasibleAction, ModeMismatch, TooLarge
from .learning import Policy, ValueFunction, default_actions, feasibility_mask
from .solvers import relative_value_iteration, value_iteration as vi_tables

GUARD_K = 4


class DetailedSpace:
    """All binary detailed states for K users, indexed by an integer code
    over the off-diagonal entries (row-major)."""

    def __init__(self, k: int, force: bool = False):
        if k < 2:
            raise ValueError("at least two users are required")
        if k > GUARD_K and not force:
            raise TooLarge(
                f"2^(K(K-1)) detailed states at K={k}; pass force=True to override"
            )
        self.k = k
        self.positions = [(i, j) for i in range(k) for j in range(k) if i != j]
        self.n_states = 1 << len(self.positions)
        # Decoded-state memoization pays off only while it fits comfortably.
        self._memoize = self.n_states <= 70_000
        self._states: list = [None] * self.n_states if self._memoize else []
        self._cache: dict = {}

    def encode(self, matrix: np.ndarray) -> int:
        code = 0
        for b, (i, j) in enumerate(self.positions):
            if matrix[i, j]:
                code |= 1 << b
        return code

    def decode(self, code: int) -> st.DetailedState:
        if self._memoize:
            cached = self._states[code]
            if cached is not None:
                return cached
        m = np.zeros((self.k, self.k), dtype=np.int16)
        for b, (i, j) in enumerate(self.positions):
            if code >> b & 1:
                m[i, j] = 1
        s = st.DetailedState(m, None)
        if self._memoize:
            self._states[code] = s
        return s

    def empty_code(self) -> int:
        return 0

    def fiber_map(self, scheme: Scheme) -> np.ndarray:
        """Aggregated state index of every detailed state."""
        key = ("fiber", scheme)
        if key not in self._cache:
            out = np.empty(self.n_states, dtype=np.int32)
            for code in range(self.n_states):
                out[code] = scheme.index(aggregate(self.decode(code), scheme))
            self._cache[key] = out
        return self._cache[key]


def enumerate_detailed(k: int, force: bool = False) -> DetailedSpace:
    return DetailedSpace(k, force=force)


def _realization_tieset(s: st.DetailedState, action: Action, scheme: Scheme):
    """Concrete combinations an abstract action may realize into, with the
    uniform tie-break probabilities used by the simulator."""
    kind = scheme.kind
    if action is Action.EMPTY_LINE:
        if kind is SchemeKind.ONED:
            cliques = st.max_clique_tieset(s)
            pairs = []
            for q in cliques:
                others = [u for u in range(s.k) if u not in q]
                if not others:
                    continue
                w = 1.0 / (len(cliques) * len(others))
                pairs.extend((frozenset({u}), w) for u in others)
            if not pairs:
                raise InfeasibleAction("no line outside the maximal clique")
            return pairs
        empties = st.empty_line_users(s)
        if not empties:
            raise InfeasibleAction("no empty line to transmit")
        w = 1.0 / len(empties)
        return [(frozenset({u}), w) for u in empties]
    if kind is SchemeKind.NOTTE and not s.matrix.any():
        raise InfeasibleAction("nothing stored to code")
    ties = st.max_clique_tieset(s)
    w = 1.0 / len(ties)
    return [(q, w) for q in ties]


def exact_transition(
    space: DetailedSpace,
    code: int,
    action: Action,
    loss,
    scheme: Scheme,
    literal_erase: bool = False,
) -> dict[int, tuple[float, float]]:
    """Exact successor distribution of one abstract action.

    Returns {next_code: (probability, expected reward conditioned on the
    source/successor pair)}.
    """
    if scheme.kind in (SchemeKind.AGG1, SchemeKind.AGG2):
        raise ModeMismatch("exact enumeration covers binary storage only")
    loss = np.asarray(loss, dtype=float)
    if loss.ndim == 0:
        loss = np.full(space.k, float(loss))
    key = (code, int(action), scheme.kind, loss.tobytes(), literal_erase)
    hit = space._cache.get(key)
    if hit is not None:
        return hit
    s = space.decode(code)
    acc_p: dict[int, float] = {}
    acc_pr: dict[int, float] = {}

    def put(next_code: int, p: float, reward: float):
        acc_p[next_code] = acc_p.get(next_code, 0.0) + p
        acc_pr[next_code] = acc_pr.get(next_code, 0.0) + p * reward

    for combo, w in _realization_tieset(s, Action(action), scheme):
        members = sorted(combo)
        if len(members) >= 2:
            for bits in range(1 << len(members)):
                rx = np.zeros(s.k, dtype=bool)
                p = w
                for b, u in enumerate(members):
                    if bits >> b & 1:
                        rx[u] = True
                        p *= 1.0 - loss[u]
                    else:
                        p *= loss[u]
                out = st.apply_outcome(s, combo, rx, literal_erase=literal_erase)
                put(space.encode(out.next_state.matrix), p, out.reward)
        else:
            (u,) = members
            rx = np.zeros(s.k, dtype=bool)
            rx[u] = True
            out = st.apply_outcome(s, combo, rx, literal_erase=literal_erase)
            put(space.encode(out.next_state.matrix), w * (1.0 - loss[u]), out.reward)
            others = [v for v in range(s.k) if v != u]
            for bits in range(1 << len(others)):
                rx = np.zeros(s.k, dtype=bool)
                p = w * loss[u]
                for b, v in enumerate(others):
                    if bits >> b & 1:
                        rx[v] = True
                        p *= 1.0 - loss[v]
                    else:
                        p *= loss[v]
                out = st.apply_outcome(s, combo, rx, literal_erase=literal_erase)
                put(space.encode(out.next_state.matrix), p, 0.0)

    result = {
        c: (p, acc_pr[c] / p if p > 0 else 0.0) for c, p in acc_p.items() if p > 0
    }
    space._cache[key] = result
    return result


@dataclass
class PolicyChain:
    """Detailed chain induced by an aggregated policy."""

    space: DetailedSpace
    scheme: Scheme
    loss: np.ndarray
    policy: Policy
    P: sp.csr_matrix
    r: np.ndarray
    succ: list


def build_policy_chain(
    space: DetailedSpace,
    scheme: Scheme,
    loss,
    policy: Policy,
    literal_erase: bool = False,
) -> PolicyChain:
    loss = np.asarray(loss, dtype=float)
    fibers = space.fiber_map(scheme)
    n = space.n_states
    rows, cols, vals = [], [], []
    r = np.zeros(n)
    succ = []
    for code in range(n):
        action = Action(int(policy.actions[fibers[code]]))
        t = exact_transition(space, code, action, loss, scheme, literal_erase)
        succ.append(t)
        for nxt, (p, er) in t.items():
            rows.append(code)
            cols.append(nxt)
            vals.append(p)
            r[code] += p * er
    P = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return PolicyChain(space, scheme, loss, policy, P, r, succ)


@dataclass
class StationaryAnalysis:
    pi: np.ndarray
    recurrent_mask: np.ndarray
    n_recurrent_classes: int
    reachable_mask: np.ndarray
    absorption: dict


def stationary_from_empty(chain: PolicyChain) -> StationaryAnalysis:
    """Long-run occupation distribution started from the all-empty matrix.

    With several reachable recurrent classes the result is the mixture
    weighted by exact absorption probabilities.
    """
    P = chain.P
    n = P.shape[0]
    start = chain.space.empty_code()
    n_comp, labels = connected_components(P, directed=True, connection="strong")
    # A strongly connected component is recurrent iff no edge leaves it.
    out_edges = np.zeros(n_comp, dtype=bool)
    coo = P.tocoo()
    leaving = labels[coo.row] != labels[coo.col]
    out_edges[np.unique(labels[coo.row[leaving]])] = True
    recurrent_comp = ~out_edges
    recurrent_mask = recurrent_comp[labels]

    order = breadth_first_order(P, start, directed=True, return_predecessors=False)
    reachable_mask = np.zeros(n, dtype=bool)
    reachable_mask[np.atleast_1d(order)] = True

    reach_rec = np.unique(labels[reachable_mask & recurrent_mask])
    if len(reach_rec) == 0:
        raise DegeneratePolicy("no recurrent class is reachable from the empty matrix")

    def class_stationary(comp: int) -> np.ndarray:
        members = np.flatnonzero(labels == comp)
        sub = P[members][:, members].toarray()
        m = len(members)
        A = (sub.T - np.eye(m)).copy()
        A[-1, :] = 1.0
        b = np.zeros(m)
        b[-1] = 1.0
        dist = np.linalg.solve(A, b)
        out = np.zeros(n)
        out[members] = np.clip(dist, 0.0, None)
        out /= out.sum()
        return out

    absorption: dict[int, float] = {}
    if len(reach_rec) == 1:
        absorption[int(reach_rec[0])] = 1.0
        pi = class_stationary(int(reach_rec[0]))
    else:
        pi = np.zeros(n)
        if recurrent_mask[start]:
            comp = int(labels[start])
            absorption[comp] = 1.0
            pi = class_stationary(comp)
        else:
            transient = reachable_mask & ~recurrent_mask
            t_idx = np.flatnonzero(transient)
            pos = {s_: i for i, s_ in enumerate(t_idx)}
            Q = chain.P[t_idx][:, t_idx]
            lhs = sp.identity(len(t_idx), format="csc") - Q.tocsc()
            for comp in reach_rec:
                members = np.flatnonzero(labels == comp)
                b = np.asarray(chain.P[t_idx][:, members].sum(axis=1)).ravel()
                h = sp.linalg.spsolve(lhs, b)
                a = float(np.atleast_1d(h)[pos[start]])
                absorption[int(comp)] = a
                if a > 0:
                    pi = pi + a * class_stationary(int(comp))
            pi /= pi.sum()
    return StationaryAnalysis(
        pi=pi,
        recurrent_mask=recurrent_mask,
        n_recurrent_classes=int(recurrent_comp.sum()),
        reachable_mask=reachable_mask,
        absorption=absorption,
    )


@dataclass
class InducedModelExact:
    """Exact aggregated model under a fixed policy's conditional weights."""

    scheme: Scheme
    loss: np.ndarray
    policy: Policy
    P: np.ndarray
    R: np.ndarray
    r_sa: np.ndarray
    mask: np.ndarray
    weights: np.ndarray
    uniform_fiber_states: list
    stationary: StationaryAnalysis


def induced_model_exact(
    space: DetailedSpace,
    scheme: Scheme,
    loss,
    policy: Policy,
    reward_form: str = "conditional",
    literal_erase: bool = False,
) -> InducedModelExact:
    """Exact induced transition and reward tables over aggregated states.

    The conditional weight of a detailed state within its class is its
    stationary probability under the policy (empty-matrix start); classes
    with zero stationary mass fall back to uniform weights over the fiber
    and are flagged.

    The constructed reward of a class pair is the expected slot reward
    conditioned on that aggregated transition (source weights conditioned on
    actually landing in the successor class).  This normalization is the one
    that reproduces the known closed-form class rewards of partial clique
    decoding, makes the one-step expected reward of the induced view equal
    the restricted view's, and is the limit of the sampling learner's
    running mean.  Pairs with zero probability keep reward 0.
    """
    if reward_form != "conditional":
        raise ValueError("only the conditional reward construction is supported")
    loss = np.asarray(loss, dtype=float)
    chain = build_policy_chain(space, scheme, loss, policy, literal_erase)
    stat = stationary_from_empty(chain)
    fibers = space.fiber_map(scheme)
    states = scheme.states()
    S = len(states)
    mask = feasibility_mask(scheme)

    weights = np.zeros(space.n_states)
    uniform_flagged = []
    for si in range(S):
        members = np.flatnonzero(fibers == si)
        mass = stat.pi[members].sum()
        if mass > 1e-14:
            weights[members] = stat.pi[members] / mass
        else:
            weights[members] = 1.0 / len(members)
            uniform_flagged.append(si)

    P = np.zeros((S, 3, S))
    R = np.zeros((S, 3, S))
    for si in range(S):
        members = np.flatnonzero(fibers == si)
        for a in np.flatnonzero(mask[si]):
            action = Action(int(a) + 1)
            class_p = np.zeros(S)
            class_num = np.zeros(S)
            for code in members:
                w = weights[code]
                if w <= 0:
                    continue
                t = exact_transition(space, int(code), action, loss, scheme, literal_erase)
                for nxt, (p, er) in t.items():
                    sj = fibers[nxt]
                    class_p[sj] += w * p
                    class_num[sj] += w * p * er
            P[si, a] = class_p
            nz = class_p > 0
            R[si, a, nz] = class_num[nz] / class_p[nz]
    r_sa = (P * R).sum(axis=2)
    return InducedModelExact(
        scheme=scheme,
        loss=loss,
        policy=policy,
        P=P,
        R=R,
        r_sa=r_sa,
        mask=mask,
        weights=weights,
        uniform_fiber_states=uniform_flagged,
        stationary=stat,
    )


@dataclass
class Prop1Report:
    """Value comparison between the detailed restricted view and the induced
    aggregated view of one policy."""

    gamma: float
    gaps: np.ndarray
    max_gap: float
    restricted_values: np.ndarray
    induced_values: np.ndarray
    fiber_value_spread: np.ndarray
    uniform_fiber_states: list
    average_gain_detailed: float
    average_gain_induced: float

    @property
    def max_fiber_spread(self) -> float:
        return float(self.fiber_value_spread.max())


def verify_prop1(
    space: DetailedSpace,
    scheme: Scheme,
    loss,
    policy: Policy,
    gamma: float,
) -> Prop1Report:
    """Exact discounted policy evaluation on both views.

    The detailed side solves the full chain and averages start values inside
    each class with the stationary-conditional weights; the induced side
    solves the constructed aggregated model.  The report also carries the
    long-run average gain of both views, which must agree exactly by the
    construction of the class rewards.
    """
    loss = np.asarray(loss, dtype=float)
    model = induced_model_exact(space, scheme, loss, policy)
    chain = build_policy_chain(space, scheme, loss, policy)
    n = space.n_states
    dense_P = chain.P.toarray()
    J = np.linalg.solve(np.eye(n) - gamma * dense_P, chain.r)

    fibers = space.fiber_map(scheme)
    states = scheme.states()
    S = len(states)
    restricted = np.zeros(S)
    spread = np.zeros(S)
    for si in range(S):
        members = np.flatnonzero(fibers == si)
        w = model.weights[members]
        restricted[si] = float(w @ J[members])
        support = members[w > 1e-14]
        if len(support):
            spread[si] = float(J[support].max() - J[support].min())

    idx = np.arange(S)
    a_idx = model.policy.actions.astype(int) - 1
    P_pi = model.P[idx, a_idx]
    r_pi = model.r_sa[idx, a_idx]
    induced = np.linalg.solve(np.eye(S) - gamma * P_pi, r_pi)

    gaps = np.abs(induced - restricted)

    gain_detailed = float(model.stationary.pi @ chain.r)
    class_mass = np.zeros(S)
    for si in range(S):
        class_mass[si] = model.stationary.pi[fibers == si].sum()
    gain_induced = float(class_mass @ r_pi)

    return Prop1Report(
        gamma=gamma,
        gaps=gaps,
        max_gap=float(gaps.max()),
        restricted_values=restricted,
        induced_values=induced,
        fiber_value_spread=spread,
        uniform_fiber_states=model.uniform_fiber_states,
        average_gain_detailed=gain_detailed,
        average_gain_induced=gain_induced,
    )


def all_restricted_policies(scheme: Scheme):
    """Every deterministic policy over the feasible abstract actions."""
    mask = feasibility_mask(scheme)
    choices = [tuple(int(a) + 1 for a in np.flatnonzero(row)) for row in mask]
    for combo in itertools.product(*choices):
        yield Policy(scheme, np.asarray(combo, dtype=np.int8))


def average_gain(space: DetailedSpace, scheme: Scheme, loss, policy: Policy) -> float:
    """Exact long-run packets per slot of the policy from the empty start."""
    chain = build_policy_chain(space, scheme, loss, policy)
    stat = stationary_from_empty(chain)
    return float(stat.pi @ chain.r)


def sweep_optimal(
    space: DetailedSpace,
    scheme: Scheme,
    loss,
    criterion: str = "average",
    gamma: float | None = None,
):
    """Exhaustive policy sweep with exact evaluation on the detailed chain.

    Returns (best_value, best_policies, table) where ``table`` lists
    (policy actions tuple, value) for every deterministic restricted policy.
    The discounted criterion scores the class-weighted value of the
    empty-matrix start.
    """
    results = []
    for policy in all_restricted_policies(scheme):
        if criterion == "average":
            val = average_gain(space, scheme, loss, policy)
        else:
            report = verify_prop1(space, scheme, loss, policy, gamma)
            empty_idx = scheme.index(aggregate(space.decode(0), scheme))
            val = float(report.restricted_values[empty_idx])
        results.append((tuple(int(a) for a in policy.actions), val))
    best_val = max(v for _, v in results)
    best = [acts for acts, v in results if v >= best_val - 1e-10]
    return best_val, best, results


@dataclass
class ExactSolution:
    value: ValueFunction
    policy: Policy
    converged: bool
    rounds: int


def exact_optimal(
    space: DetailedSpace,
    scheme: Scheme,
    loss,
    criterion: str = "discounted",
    gamma: float = 0.99,
    max_rounds: int = 25,
) -> ExactSolution:
    """Optimal restricted policy via iteration on the induced construction.

    The induced model depends on the policy through its conditional weights,
    so the solver alternates: build the exact induced model under the
    current policy, solve it (value iteration or relative value iteration),
    adopt the greedy policy, and repeat until the policy is a fixed point.
    On a cycle the candidate with the best exact detailed-chain score is
    returned with ``converged=False``.
    """
    policy = Policy(scheme, default_actions(scheme))
    seen = {}
    best: tuple[float, Policy, ValueFunction] | None = None
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        model = induced_model_exact(space, scheme, loss, policy)
        if criterion == "discounted":
            V, pol_idx, _ = vi_tables(model.P, model.r_sa, model.mask, gamma, tol=1e-12)
            value = ValueFunction(scheme, V, "discounted", gamma=gamma)
        elif criterion == "average":
            gain, h, pol_idx, _ = relative_value_iteration(
                model.P, model.r_sa, model.mask, tol=1e-12
            )
            value = ValueFunction(scheme, h, "average", gain=gain)
        else:
            raise ValueError("criterion must be 'discounted' or 'average'")
        actions = default_actions(scheme).copy()
        solved = pol_idx >= 0
        actions[solved] = (pol_idx[solved] + 1).astype(np.int8)
        new_policy = Policy(scheme, actions)

        score = average_gain(space, scheme, loss, new_policy)
        if best is None or score > best[0]:
            best = (score, new_policy, value)
        if np.array_equal(new_policy.actions, policy.actions):
            return ExactSolution(value, new_policy, True, rounds)
        key = tuple(int(a) for a in new_policy.actions)
        if key in seen:
            break
        seen[key] = rounds
        policy = new_policy
    _, policy, value = best
    return ExactSolution(value, policy, False, rounds)


def is_threshold(policy: Policy) -> bool:
    """Single-switch shape along the clique-size component: fill first, and
    once coding wins it keeps winning for larger cliques."""
    if policy.scheme.kind is not SchemeKind.ONED:
        raise ValueError("threshold shape is defined over the 1-D scheme")
    acts = [int(a) for a in policy.actions]
    switched = False
    for prev, cur in zip(acts, acts[1:]):
        if cur != prev:
            if switched or not (prev == 2 and cur == 1):
                return False
            switched = True
    return acts[-1] == 1


@dataclass
class SlopeBoundReport:
    monotone: bool
    violations: list
    d: float
    c: float
    description: str


def verify_value_shape(
    value: ValueFunction, scheme: Scheme, slack: float = 0.0
) -> SlopeBoundReport:
    """Monotonicity scan plus empirical slope constants.

    Checks the clique-size component for a nondecreasing pattern (at fixed
    remaining components) and the empty-line component for a nonincreasing
    one.  ``d`` is the largest observed forward difference along the clique
    component; ``c`` is the smallest constant for which V(k) - V(k-i) >=
    i - c over all valid pairs.  Report-only: violations beyond ``slack``
    are listed, never raised.
    """
    states = scheme.states()
    vals = value.values
    names = scheme.component_names
    violations = []
    d = -math.inf
    c = -math.inf

    def slices_along(comp_name):
        pos = names.index(comp_name)
        groups: dict[tuple, list[int]] = {}
        for i, agg in enumerate(states):
            if agg.is_empty_sentinel:
                continue
            key = agg.comps[:pos] + agg.comps[pos + 1 :]
            groups.setdefault(key, []).append(i)
        for key, idxs in groups.items():
            idxs.sort(key=lambda i: states[i].comps[pos])
            yield key, idxs

    clique_comp = "C" if scheme.kind is SchemeKind.AGG1 else "L"
    for key, idxs in slices_along(clique_comp):
        v = vals[idxs]
        for j in range(1, len(v)):
            step = float(v[j] - v[j - 1])
            d = max(d, step)
            if step < -slack:
                violations.append((str(states[idxs[j - 1]]), str(states[idxs[j]]), step))
            for i in range(1, j + 1):
                c = max(c, i - float(v[j] - v[j - i]))
    if "E" in names:
        for key, idxs in slices_along("E"):
            v = vals[idxs]
            for j in range(1, len(v)):
                step = float(v[j] - v[j - 1])
                if step > slack:
                    violations.append(
                        (str(states[idxs[j - 1]]), str(states[idxs[j]]), step)
                    )
    return SlopeBoundReport(
        monotone=not violations,
        violations=violations,
        d=float(d) if math.isfinite(d) else 0.0,
        c=float(c) if math.isfinite(c) else 0.0,
        description=(
            f"nondecreasing in {clique_comp}"
            + (", nonincreasing in E" if "E" in names else "")
        ),
    )


@dataclass
class TransienceReport:
    min_clique_action: int
    ok: bool
    offending_states: list


def claim1_transience(
    space: DetailedSpace, loss, policy: Policy
) -> TransienceReport:
    """Coded transmissions cannot grow the clique, so once the policy codes
    at clique size m every state with a larger clique must be transient.

    m is the smallest clique size >= 2 at which the policy codes; the size-1
    clique action is effectively uncoded and can still grow the clique.
    """
    scheme = policy.scheme
    if scheme.kind is not SchemeKind.ONED:
        raise ValueError("the transience claim is checked on the 1-D scheme")
    acts = [int(a) for a in policy.actions]
    m = next(
        (l for l in range(2, scheme.k + 1) if acts[l - 1] == int(Action.CLIQUE)),
        scheme.k,
    )
    chain = build_policy_chain(space, scheme, loss, policy)
    stat = stationary_from_empty(chain)
    offenders = []
    for code in range(space.n_states):
        if stat.recurrent_mask[code]:
            l = st.max_clique_size(space.decode(code))
            if l > m:
                offenders.append((code, l))
    return TransienceReport(min_clique_action=m, ok=not offenders, offending_states=offenders)


def binomial_pmf(k: int, p: float) -> np.ndarray:
    """Probability of i failed members out of a transmitted clique of k."""
    return np.asarray(
        [math.comb(k, i) * p**i * (1 - p) ** (k - i) for i in range(k + 1)]
    )


def clique_outcome_marginal(
    space: DetailedSpace, code: int, loss, scheme: Scheme
) -> np.ndarray:
    """Distribution of the number of clique members left undecoded after a
    coded transmission (exact, marginalized over tie-breaks)."""
    s = space.decode(code)
    k_clq = len(st.max_clique_tieset(s)[0])
    t = exact_transition(space, code, Action.CLIQUE, loss, scheme)
    # For coded transmissions the reward is determined by the state pair
    # (decoded members are exactly the rows that turned empty), so the
    # per-pair expected reward is an exact integer count of successes.
    out = np.zeros(k_clq + 1)
    for _, (p, er) in t.items():
        failures = k_clq - int(round(er))
        out[failures] += p
    return out
