"""Model-based learning of the induced scheduling MDP.

The learner alternates exploration phases with planning: an epsilon-greedy
mixture of the current planned policy and the uniform restricted policy
drives the simulator, every observed aggregated transition is tallied into
count/reward tables, and value iteration on the sampled model yields the
next policy.  Each phase restarts the simulator from a least-visited
aggregated state so rarely reachable states still collect samples.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import state as st
from .aggregation import (
    Action,
    AggregatedState,
    Scheme,
    SchemeKind,
    aggregate,
    enumerate_aggregated,
    feasible_actions,
    seed_state,
)
from .channel import ChannelConfig, Simulator
from .errors import AmbiguousSlice, NoData, SchemeMismatch
from .solvers import relative_value_iteration as _rvi_tables
from .solvers import value_iteration as _vi_tables

N_ACTIONS = 3


def feasibility_mask(scheme: Scheme) -> np.ndarray:
    states = scheme.states()
    mask = np.zeros((len(states), N_ACTIONS), dtype=bool)
    for i, agg in enumerate(states):
        for a in feasible_actions(agg, scheme):
            mask[i, int(a) - 1] = True
    return mask


def default_actions(scheme: Scheme) -> np.ndarray:
    """First feasible action per state; the fallback for unlearned states."""
    states = scheme.states()
    return np.asarray(
        [int(feasible_actions(agg, scheme)[0]) for agg in states], dtype=np.int8
    )


@dataclass
class TransitionModel:
    """Visit counts n(s', a, s) and reward sums R(s', a, s) with the derived
    estimates p_hat = n / sum_n and r_hat = R / n."""

    scheme: Scheme
    counts: np.ndarray
    rewards: np.ndarray

    @classmethod
    def empty(cls, scheme: Scheme) -> "TransitionModel":
        n = len(scheme.states())
        return cls(
            scheme,
            np.zeros((n, N_ACTIONS, n), dtype=np.int64),
            np.zeros((n, N_ACTIONS, n), dtype=np.float64),
        )

    def record(self, s_idx: int, action: Action, next_idx: int, reward: float):
        a = int(action) - 1
        self.counts[s_idx, a, next_idx] += 1
        self.rewards[s_idx, a, next_idx] += reward

    @property
    def pair_visits(self) -> np.ndarray:
        return self.counts.sum(axis=2)

    @property
    def state_visits(self) -> np.ndarray:
        return self.pair_visits.sum(axis=1)

    def p_hat(self) -> np.ndarray:
        totals = self.pair_visits.astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            p = self.counts / totals[:, :, None]
        return np.nan_to_num(p)

    def r_hat(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            r = self.rewards / self.counts
        return np.nan_to_num(r)

    def save(self, path):
        states = self.scheme.states()
        entries = []
        for i, agg in enumerate(states):
            for a in range(N_ACTIONS):
                n = int(self.counts[i, a].sum())
                if n == 0:
                    continue
                successors = {
                    str(j): int(self.counts[i, a, j])
                    for j in np.flatnonzero(self.counts[i, a])
                }
                entries.append(
                    {
                        "state": list(agg.comps),
                        "action": a + 1,
                        "visits": n,
                        "reward_sum": float(self.rewards[i, a].sum()),
                        "successors": successors,
                    }
                )
        doc = {
            "scheme": self.scheme.kind.value,
            "users": self.scheme.k,
            "ttl": self.scheme.ttl,
            "entries": entries,
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def load(cls, path) -> "TransitionModel":
        with open(path) as fh:
            doc = json.load(fh)
        scheme = Scheme(SchemeKind(doc["scheme"]), doc["users"], doc.get("ttl"))
        model = cls.empty(scheme)
        index = {tuple(agg.comps): i for i, agg in enumerate(scheme.states())}
        for entry in doc["entries"]:
            i = index[tuple(entry["state"])]
            a = entry["action"] - 1
            total = 0
            for j, n in entry["successors"].items():
                model.counts[i, a, int(j)] = n
                total += n
            # Reward sums are stored per pair; spread uniformly over successors
            # only for the aggregate estimate, keeping r_hat(s,a) exact.
            model.rewards[i, a, int(next(iter(entry["successors"])))] = entry["reward_sum"]
        return model


def record(model: TransitionModel, agg, action, next_agg, reward) -> TransitionModel:
    """Tally one observed transition (pure accumulation)."""
    scheme = model.scheme
    model.record(scheme.index(agg), action, scheme.index(next_agg), reward)
    return model


@dataclass
class Policy:
    scheme: Scheme
    actions: np.ndarray

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int8)
        if len(self.actions) != len(self.scheme.states()):
            raise ValueError("one action per enumerated state is required")

    def action_for(self, agg: AggregatedState) -> Action:
        return Action(int(self.actions[self.scheme.index(agg)]))

    def decide(self, s, agg, rng):
        if agg is None:
            agg = aggregate(s, self.scheme)
        return int(self.actions[self.scheme.index(agg)]), None

    def save(self, path):
        doc = {
            "scheme": self.scheme.kind.value,
            "users": self.scheme.k,
            "ttl": self.scheme.ttl,
            "actions": [
                {"state": list(agg.comps), "action": int(a)}
                for agg, a in zip(self.scheme.states(), self.actions)
            ],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)

    @classmethod
    def load(cls, path) -> "Policy":
        with open(path) as fh:
            doc = json.load(fh)
        scheme = Scheme(SchemeKind(doc["scheme"]), doc["users"], doc.get("ttl"))
        lookup = {tuple(e["state"]): e["action"] for e in doc["actions"]}
        actions = [lookup[tuple(agg.comps)] for agg in scheme.states()]
        return cls(scheme, np.asarray(actions, dtype=np.int8))


@dataclass
class ValueFunction:
    scheme: Scheme
    values: np.ndarray
    criterion: str = "discounted"
    gamma: float | None = None
    gain: float | None = None

    def value_for(self, agg: AggregatedState) -> float:
        return float(self.values[self.scheme.index(agg)])


@dataclass
class LearningSchedule:
    """Exploration schedule and stop rules for the learning loop."""

    eps0: float = 1.0
    eps_decay: float = 0.7
    eps_min: float = 0.05
    slots_per_phase: int = 50_000
    max_phases: int = 40
    min_phases: int = 5
    stop_tol: float = 0.5
    policy_stable_phases: int = 3
    vi_tol: float = 1e-9
    least_visited_seeding: bool = True

    def __post_init__(self):
        if not (0 <= self.eps_min <= self.eps0 <= 1):
            raise ValueError("epsilon sequence must stay within [0, 1]")
        if self.eps_decay > 1 or self.eps_decay <= 0:
            raise ValueError("epsilon decay must keep the sequence nonincreasing")
        if self.slots_per_phase < 1:
            raise ValueError("each phase needs at least one slot")

    def epsilon(self, phase: int) -> float:
        return max(self.eps_min, self.eps0 * self.eps_decay**phase)


@dataclass
class PhaseRecord:
    phase: int
    epsilon: float
    slots: int
    seeded_state: int | None
    sup_delta: float
    policy_changed: bool
    values: np.ndarray


@dataclass
class LearningHistory:
    phases: list
    converged: bool
    stop_reason: str | None
    total_slots: int


def value_iteration(model: TransitionModel, gamma: float, tol: float = 1e-9):
    """Plan on the sampled model: Bellman backups over visited state-action
    pairs only (no optimism for unvisited ones)."""
    return plan_on_model(model, "discounted", gamma=gamma, tol=tol)


def plan_on_model(
    model: TransitionModel,
    criterion: str = "discounted",
    gamma: float = 0.99,
    tol: float = 1e-9,
):
    """Solve the sampled model for either criterion.

    "discounted" runs value iteration; "average" runs relative value
    iteration, whose bias vector is reported as the value snapshot.  Only
    visited state-action pairs enter the Bellman maxima; states with no
    visited action keep value 0 and the first feasible action.
    """
    if model.counts.sum() == 0:
        raise NoData("the transition model is empty")
    scheme = model.scheme
    mask = feasibility_mask(scheme) & (model.pair_visits > 0)
    P = model.p_hat()
    r_sa = model.rewards.sum(axis=2) / np.maximum(model.pair_visits, 1)
    if criterion == "discounted":
        V, pol_idx, _ = _vi_tables(P, r_sa, mask, gamma, tol=tol)
        value = ValueFunction(scheme, V, criterion="discounted", gamma=gamma)
    elif criterion == "average":
        ref = int(np.argmax(model.state_visits))
        gain, h, pol_idx, _ = _rvi_tables(P, r_sa, mask, tol=max(tol, 1e-12), ref=ref)
        value = ValueFunction(scheme, h, criterion="average", gain=gain)
    else:
        raise ValueError("criterion must be 'discounted' or 'average'")
    actions = default_actions(scheme).copy()
    learned = pol_idx >= 0
    actions[learned] = (pol_idx[learned] + 1).astype(np.int8)
    return value, Policy(scheme, actions)


@dataclass
class LearnResult:
    value: ValueFunction
    policy: Policy
    history: LearningHistory
    model: TransitionModel


def algorithm_a(
    config: ChannelConfig,
    scheme: Scheme,
    schedule: LearningSchedule | None = None,
    criterion: str = "discounted",
) -> LearnResult:
    """Phase-alternating model-based learner.

    Each phase: refresh epsilon, restart from a least-visited aggregated
    state (teleporting is possible in simulation; disable with
    ``schedule.least_visited_seeding`` for online-realistic runs from the
    empty matrix), drive the epsilon-greedy mixture for the phase budget,
    then re-plan on the sampled model.  Stops when the value snapshot moved
    less than ``stop_tol`` in sup norm or the planned policy stayed
    unchanged for ``policy_stable_phases`` phases; otherwise runs out the
    phase budget and returns the best-so-far with ``converged=False``.

    ``criterion`` selects the planning objective.  Discounted planning at
    gamma near 1 approximates the long-run average objective, but fringe
    states can stay below their Blackwell threshold at gamma = 0.99, so
    throughput claims are checked with ``criterion="average"``.
    """
    schedule = schedule or LearningSchedule()
    sim = Simulator(config, scheme)
    rng = sim.rng
    states = scheme.states()
    S = len(states)
    model = TransitionModel.empty(scheme)
    feas = feasibility_mask(scheme)
    feas_actions = [
        [Action(a + 1) for a in np.flatnonzero(feas[i])] for i in range(S)
    ]
    gamma = config.gamma

    planned: np.ndarray | None = None
    V_prev = np.zeros(S)
    phases: list[PhaseRecord] = []
    stable_streak = 0
    converged = False
    stop_reason = None
    total_slots = 0
    s = sim.initial_state()

    from .aggregation import _comps_of
    from .channel import realize_action

    comps_index = scheme.comps_index()
    kind = scheme.kind
    counts = model.counts
    rewards = model.rewards
    k = config.k
    p = config.loss

    for phase in range(schedule.max_phases):
        eps = schedule.epsilon(phase)
        seeded_idx = None
        if schedule.least_visited_seeding:
            visits = model.state_visits
            least = np.flatnonzero(visits == visits.min())
            seeded_idx = int(least[int(rng.integers(len(least)))])
            s = seed_state(states[seeded_idx], scheme)
        m = s.matrix.copy()
        s = st.DetailedState._wrap(m, config.ttl)
        idx = comps_index[_comps_of(m, kind)]
        force_least_tried = schedule.least_visited_seeding
        for _ in range(schedule.slots_per_phase):
            if force_least_tried:
                # First slot after a seeded restart samples the thinnest
                # action of the seeded state instead of the mixture.
                options = feas_actions[idx]
                pair = model.pair_visits[idx]
                action = min(options, key=lambda a: pair[int(a) - 1])
                force_least_tried = False
            elif planned is None or rng.random() < eps:
                options = feas_actions[idx]
                action = options[int(rng.integers(len(options)))]
            else:
                action = Action(int(planned[idx]))
            combo = realize_action(s, action, scheme, rng)
            rx = rng.random(k) >= p
            reward = len(sim._advance_inplace(m, combo, rx))
            nidx = comps_index[_comps_of(m, kind)]
            a = int(action) - 1
            counts[idx, a, nidx] += 1
            rewards[idx, a, nidx] += reward
            idx = nidx
        total_slots += schedule.slots_per_phase

        value, policy = plan_on_model(model, criterion, gamma=gamma, tol=schedule.vi_tol)
        delta = float(np.max(np.abs(value.values - V_prev)))
        changed = planned is None or bool(np.any(policy.actions != planned))
        phases.append(
            PhaseRecord(
                phase=phase,
                epsilon=eps,
                slots=schedule.slots_per_phase,
                seeded_state=seeded_idx,
                sup_delta=delta,
                policy_changed=changed,
                values=value.values.copy(),
            )
        )
        V_prev = value.values
        planned = policy.actions.copy()
        stable_streak = 0 if changed else stable_streak + 1

        if phase + 1 >= schedule.min_phases:
            if delta < schedule.stop_tol:
                converged = True
                stop_reason = "value"
                break
            if stable_streak >= schedule.policy_stable_phases:
                converged = True
                stop_reason = "policy"
                break

    value, policy = plan_on_model(model, criterion, gamma=gamma, tol=schedule.vi_tol)
    history = LearningHistory(
        phases=phases,
        converged=converged,
        stop_reason=stop_reason,
        total_slots=total_slots,
    )
    return LearnResult(value=value, policy=policy, history=history, model=model)


def threshold_accelerate(
    policy: Policy,
    component: str,
    direction: str = "ascending",
    overwrite: bool = False,
) -> Policy:
    """Force at most one action switch along ``component`` in every slice of
    states that agree on the remaining components.

    A slice that is already threshold-shaped is left alone.  A slice with
    several switches raises :class:`AmbiguousSlice` unless ``overwrite`` is
    set, in which case the action taken at the first switch is propagated to
    the rest of the slice (where feasible).
    """
    scheme = policy.scheme
    names = scheme.component_names
    if component not in names:
        raise ValueError(f"scheme {scheme.kind.value} has components {names}")
    pos = names.index(component)
    feas = feasibility_mask(scheme)
    states = scheme.states()
    slices: dict[tuple, list[int]] = {}
    for i, agg in enumerate(states):
        if agg.is_empty_sentinel:
            continue
        key = agg.comps[:pos] + agg.comps[pos + 1 :]
        slices.setdefault(key, []).append(i)

    actions = policy.actions.copy()
    reverse = direction == "descending"
    for key, idxs in slices.items():
        idxs.sort(key=lambda i: states[i].comps[pos], reverse=reverse)
        acts = [int(actions[i]) for i in idxs]
        switches = [j for j in range(1, len(acts)) if acts[j] != acts[j - 1]]
        if len(switches) <= 1:
            continue
        if not overwrite:
            raise AmbiguousSlice(
                f"slice {key} has {len(switches)} switches along {component}"
            )
        first = switches[0]
        forced = acts[first]
        for j in range(first, len(idxs)):
            i = idxs[j]
            if feas[i, forced - 1]:
                actions[i] = forced
    return Policy(scheme, actions)


def threshold_rule_policy(
    scheme: Scheme, component: str, switch_at: int, before: Action, after: Action
) -> Policy:
    """Single-switch rule: take ``before`` while the component is below
    ``switch_at`` and ``after`` from there on, clamped to feasibility."""
    names = scheme.component_names
    pos = names.index(component)
    feas = feasibility_mask(scheme)
    hi = max(
        (agg.comps[pos] for agg in scheme.states() if not agg.is_empty_sentinel),
        default=0,
    )
    actions = default_actions(scheme).copy()
    for i, agg in enumerate(scheme.states()):
        comp = hi + 1 if agg.is_empty_sentinel else agg.comps[pos]
        if component == "E" and agg.is_empty_sentinel:
            comp = scheme.k
        want = int(after) if comp >= switch_at else int(before)
        if feas[i, want - 1]:
            actions[i] = want
        else:
            other = int(after) if want == int(before) else int(before)
            if feas[i, other - 1]:
                actions[i] = other
    return Policy(scheme, actions)


def select_threshold_rule(
    model: TransitionModel,
    component: str,
    before: Action = Action.CLIQUE,
    after: Action = Action.EMPTY_LINE,
    criterion: str = "average",
    gamma: float = 0.99,
) -> Policy:
    """Correct rarely visited states by the best-supported threshold rule.

    Candidate single-switch rules along ``component`` are evaluated on the
    sampled model (average gain or discounted value of the empty start) and
    the best one is returned.  Individual fringe states may be too thinly
    sampled for a reliable per-state argmax, but the rule comparison pools
    the whole data set, so the switch point is identified from the bulk
    statistics exactly as the structural-acceleration argument prescribes.
    """
    from .solvers import policy_evaluation_discounted, stationary_gain

    scheme = model.scheme
    names = scheme.component_names
    pos = names.index(component)
    values = sorted(
        {agg.comps[pos] for agg in scheme.states() if not agg.is_empty_sentinel}
    )
    if component == "E" and any(a.is_empty_sentinel for a in scheme.states()):
        values.append(scheme.k)
    P = model.p_hat()
    r_all = model.r_hat()
    visited = model.pair_visits > 0
    start = _empty_start_index(scheme)

    best: tuple[float, Policy] | None = None
    for switch_at in values + [values[-1] + 1]:
        policy = threshold_rule_policy(scheme, component, switch_at, before, after)
        a_idx = policy.actions.astype(int) - 1
        rows = np.arange(len(policy.actions))
        if not visited[rows, a_idx].all():
            continue  # the data cannot certify this rule
        P_pi = P[rows, a_idx]
        r_pi = (P_pi * r_all[rows, a_idx]).sum(axis=1)
        try:
            if criterion == "average":
                score, _ = stationary_gain(P_pi, r_pi, start)
            else:
                score = float(
                    policy_evaluation_discounted(P_pi, r_pi, gamma)[start]
                )
        except ValueError:
            continue
        if best is None or score > best[0]:
            best = (score, policy)
    if best is None:
        raise NoData("no threshold rule is fully covered by the sampled model")
    return best[1]


def _empty_start_index(scheme: Scheme) -> int:
    for i, agg in enumerate(scheme.states()):
        if agg.is_empty_sentinel:
            return i
        if scheme.kind is SchemeKind.NOTTE and agg.comps == (1, scheme.k):
            return i
        if scheme.kind is SchemeKind.ONED and agg.comps == (1,):
            return i
    raise ValueError("scheme has no empty-matrix state")


@dataclass
class EvalResult:
    mean: float
    stderr: float
    per_seed: list

    def __iter__(self):
        return iter((self.mean, self.stderr))


def average_cost_eval(
    policy,
    config: ChannelConfig,
    scheme: Scheme,
    n_slots: int,
    n_seeds: int,
) -> EvalResult:
    """Empirical packets-per-slot of a policy, averaged over seeds."""
    if n_slots * n_seeds < 1:
        raise ValueError("a positive slot budget is required")
    rates = []
    for i in range(n_seeds):
        cfg = ChannelConfig(
            k=config.k,
            loss=config.loss.copy(),
            ttl=config.ttl,
            gamma=config.gamma,
            seed=config.seed + i,
            loss_jitter=config.loss_jitter,
        )
        sim = Simulator(cfg, scheme)
        trace = sim.run_episode(policy, n_slots)
        rates.append(trace.throughput)
    rates = np.asarray(rates, dtype=float)
    stderr = float(rates.std(ddof=1) / np.sqrt(n_seeds)) if n_seeds > 1 else 0.0
    return EvalResult(float(rates.mean()), stderr, rates.tolist())


def discounted_value_eval(
    policy,
    config: ChannelConfig,
    scheme: Scheme,
    n_slots: int,
    n_seeds: int,
    horizon: int = 1500,
) -> EvalResult:
    """Monte-Carlo estimate of the discounted value from the empty start.

    Each seed's slot budget is spent on independent episodes of ``horizon``
    slots restarted from the empty matrix; every episode contributes one
    discounted-return sample.  The horizon truncation error is bounded by
    K * gamma^horizon / (1 - gamma), negligible at the defaults.
    """
    episodes_per_seed = max(1, n_slots // horizon)
    samples = []
    for i in range(n_seeds):
        cfg = ChannelConfig(
            k=config.k,
            loss=config.loss.copy(),
            ttl=config.ttl,
            gamma=config.gamma,
            seed=config.seed + i,
            loss_jitter=config.loss_jitter,
        )
        sim = Simulator(cfg, scheme)
        for _ in range(episodes_per_seed):
            trace = sim.run_episode(policy, horizon, record_states=False)
            samples.append(trace.discounted_return)
    samples = np.asarray(samples, dtype=float)
    stderr = (
        float(samples.std(ddof=1) / np.sqrt(len(samples))) if len(samples) > 1 else 0.0
    )
    return EvalResult(float(samples.mean()), stderr, samples.tolist())


def export_value_csv(value: ValueFunction, policy: Policy | None, path):
    import csv

    scheme = value.scheme
    names = scheme.component_names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["state_index", *names, "value"] + (["action"] if policy is not None else []))
        for i, agg in enumerate(scheme.states()):
            comps = list(agg.comps) if not agg.is_empty_sentinel else [0] * len(names)
            if agg.is_empty_sentinel:
                comps[-1] = scheme.k
            row = [i, *comps, f"{value.values[i]:.6f}"]
            if policy is not None:
                row.append(int(policy.actions[i]))
            w.writerow(row)
