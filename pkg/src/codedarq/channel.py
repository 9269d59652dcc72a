"""Slot-by-slot stochastic broadcast channel and episode runner.

Each slot the scheduler picks an abstract action, the channel realizes it
into a concrete user set, samples independent per-user receptions, applies
the outcome to the storage matrix and (lifetime mode) ages every copy that
was not refreshed this slot.  A simulator instance owns its random generator,
so runs with the same seed are bit-identical and independent instances may
run in parallel.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import state as st
from .aggregation import Action, AggregatedState, Scheme, SchemeKind, aggregate, feasible_actions
from .errors import InfeasibleAction


@dataclass
class ChannelConfig:
    k: int
    loss: float | tuple | list | np.ndarray = 0.25
    ttl: int | None = None
    gamma: float = 0.99
    seed: int = 0
    loss_jitter: float = 0.0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("at least two users are required")
        p = np.asarray(self.loss, dtype=float)
        if p.ndim == 0:
            p = np.full(self.k, float(p))
        if p.shape != (self.k,):
            raise ValueError("loss must be a scalar or one probability per user")
        if np.any(p < 0) or np.any(p >= 1):
            raise ValueError("loss probabilities must lie in [0, 1)")
        self.loss = p
        if self.ttl is not None and self.ttl < 1:
            raise ValueError("lifetime bound must be >= 1")
        if not 0 <= self.gamma < 1:
            raise ValueError("discount factor must lie in [0, 1)")
        if self.loss_jitter < 0:
            raise ValueError("loss jitter must be nonnegative")


@dataclass
class Trace:
    """Per-slot record of one episode plus summary counters."""

    scheme: Scheme
    gamma: float
    state_idx: np.ndarray
    action: np.ndarray
    next_idx: np.ndarray
    reward: np.ndarray
    per_user_decoded: np.ndarray
    discounted_return: float

    @property
    def slots(self) -> int:
        return len(self.reward)

    @property
    def total_reward(self) -> int:
        return int(self.reward.sum())

    @property
    def throughput(self) -> float | None:
        """Packets decoded per slot; None for an empty trace."""
        if self.slots == 0:
            return None
        return self.total_reward / self.slots

    def to_csv(self, path):
        if len(self.state_idx) != self.slots:
            raise ValueError("trace was recorded without per-slot states")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "state_index", "action", "next_state_index", "reward"])
            for t in range(self.slots):
                w.writerow(
                    [t, int(self.state_idx[t]), int(self.action[t]),
                     int(self.next_idx[t]), int(self.reward[t])]
                )


def realize_action(
    s: st.DetailedState,
    action: Action,
    scheme: Scheme,
    rng: np.random.Generator | None = None,
) -> frozenset[int]:
    """Turn an abstract action into a concrete user set on the detailed state.

    Ties (several maximum cliques, several empty lines) are drawn uniformly
    under ``rng``; with ``rng=None`` the lexicographically smallest choice is
    taken, which is the canonical deterministic mode used by exact analysis.
    """
    action = Action(action)
    kind = scheme.kind
    if action is Action.EMPTY_LINE:
        if kind is SchemeKind.ONED:
            clique = st.max_clique(s, rng)
            others = [u for u in range(s.k) if u not in clique]
            if not others:
                raise InfeasibleAction("no line outside the maximal clique")
            if rng is None:
                return frozenset({others[0]})
            return frozenset({others[int(rng.integers(len(others)))]})
        empties = st.empty_line_users(s)
        if not empties:
            raise InfeasibleAction("no empty line to transmit")
        if rng is None:
            return frozenset({empties[0]})
        return frozenset({empties[int(rng.integers(len(empties)))]})
    if action is Action.MAX_CLIQUE:
        if kind is not SchemeKind.AGG2:
            raise InfeasibleAction("global-clique action exists only under agg2")
        if not s.matrix.any():
            raise InfeasibleAction("nothing stored to code")
        return st.max_clique(s, rng)
    # Action.CLIQUE
    if kind in (SchemeKind.AGG1, SchemeKind.AGG2):
        _, clique = st.clique_with_oldest(s, rng)
        return clique
    if kind is SchemeKind.NOTTE and not s.matrix.any():
        raise InfeasibleAction("nothing stored to code")
    return st.max_clique(s, rng)


class Simulator:
    """Owns the channel randomness and advances the detailed state."""

    def __init__(self, config: ChannelConfig, scheme: Scheme):
        if scheme.k != config.k:
            raise ValueError("scheme and channel user counts differ")
        tte_scheme = scheme.kind in (SchemeKind.AGG1, SchemeKind.AGG2)
        if tte_scheme and config.ttl != scheme.ttl:
            raise ValueError("scheme and channel lifetime bounds differ")
        if not tte_scheme and config.ttl is not None:
            raise ValueError(f"{scheme.kind.value} runs on a binary channel")
        self.config = config
        self.scheme = scheme
        self.rng = np.random.default_rng(config.seed)

    def initial_state(self) -> st.DetailedState:
        return st.DetailedState.empty(self.config.k, self.config.ttl)

    def sample_reception(self) -> np.ndarray:
        p = self.config.loss
        if self.config.loss_jitter > 0:
            p = np.clip(
                p + self.rng.uniform(-self.config.loss_jitter, self.config.loss_jitter, p.shape),
                0.0,
                0.999999,
            )
        return self.rng.random(self.config.k) >= p

    def step_concrete(self, s: st.DetailedState, combo) -> tuple[st.DetailedState, int, frozenset]:
        rx = self.sample_reception()
        out = st.apply_outcome(s, combo, rx)
        return st.settle_slot(s, out), out.reward, out.decoded_users

    def _advance_inplace(self, m: np.ndarray, combo, rx) -> list[int]:
        """One slot of dynamics on a raw matrix: decode/store per the
        reception vector, then (lifetime mode) age everything that was not
        refreshed this slot.  Returns the decoded users.  Must stay
        bit-identical to apply_outcome + settle_slot."""
        ttl = self.config.ttl
        decoded = []
        refreshed = -1
        if len(combo) == 1:
            u = next(iter(combo))
            if rx[u]:
                m[u, :] = 0
                decoded.append(u)
            else:
                if ttl is None:
                    heard = rx.copy()
                    heard[u] = False
                    m[u, heard] = 1
                else:
                    eligible = rx | (m[u] > 0)
                    eligible[u] = False
                    m[u, :] = 0
                    m[u, eligible] = ttl
                    refreshed = u
        else:
            for u in combo:
                if rx[u]:
                    m[u, :] = 0
                    decoded.append(u)
        if ttl is not None:
            if refreshed >= 0:
                saved = m[refreshed].copy()
                m[m > 0] -= 1
                m[refreshed] = saved
            else:
                m[m > 0] -= 1
        return decoded

    def step(
        self, s: st.DetailedState, action: Action, agg: AggregatedState | None = None
    ) -> tuple[st.DetailedState, AggregatedState, int]:
        if agg is None:
            agg = aggregate(s, self.scheme)
        if Action(action) not in feasible_actions(agg, self.scheme):
            raise InfeasibleAction(f"action {action} is not feasible in {agg}")
        combo = realize_action(s, action, self.scheme, self.rng)
        nxt, reward, _ = self.step_concrete(s, combo)
        return nxt, aggregate(nxt, self.scheme), reward

    def run_episode(
        self,
        policy,
        n_slots: int,
        s0: st.DetailedState | None = None,
        gamma: float | None = None,
        record_states: bool = True,
    ) -> Trace:
        """Drive ``policy`` for ``n_slots`` slots and record the trace.

        ``policy`` exposes ``decide(s, agg, rng) -> (label, combo_or_None)``;
        a None combo is realized from the abstract label.  The discounted
        return is accumulated from slot 0 of this episode.  With
        ``record_states=False`` the per-slot aggregated-state columns are
        skipped, which roughly halves the cost of throughput evaluations.
        """
        if gamma is None:
            gamma = self.config.gamma
        if s0 is None:
            s0 = self.initial_state()
        if hasattr(policy, "reset"):
            policy.reset()
        k = self.config.k
        ttl = self.config.ttl
        rng = self.rng
        state_idx = np.zeros(n_slots if record_states else 0, dtype=np.int32)
        action_col = np.zeros(n_slots if record_states else 0, dtype=np.int8)
        next_idx = np.zeros(n_slots if record_states else 0, dtype=np.int32)
        reward_col = np.zeros(n_slots, dtype=np.int16)
        per_user = np.zeros(k, dtype=np.int64)
        disc = 0.0
        g = 1.0
        m = s0.matrix.copy()
        s = st.DetailedState._wrap(m, ttl)
        agg = aggregate(s, self.scheme) if record_states else None
        jitter = self.config.loss_jitter > 0
        p = self.config.loss
        for t in range(n_slots):
            label, combo = policy.decide(s, agg, rng)
            if combo is None:
                combo = realize_action(s, Action(label), self.scheme, rng)
            rx = self.sample_reception() if jitter else rng.random(k) >= p
            decoded = self._advance_inplace(m, combo, rx)
            reward = len(decoded)
            for u in decoded:
                per_user[u] += 1
            reward_col[t] = reward
            disc += g * reward
            g *= gamma
            if record_states:
                nagg = aggregate(s, self.scheme)
                state_idx[t] = self.scheme.index(agg)
                action_col[t] = int(label)
                next_idx[t] = self.scheme.index(nagg)
                agg = nagg
        return Trace(
            scheme=self.scheme,
            gamma=gamma,
            state_idx=state_idx,
            action=action_col,
            next_idx=next_idx,
            reward=reward_col,
            per_user_decoded=per_user,
            discounted_return=disc,
        )
