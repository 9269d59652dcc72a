"""Reference transmission policies: uncoded ARQ, greedy, semi-greedy,
modified semi-greedy and the uniform-random restricted policy."""
from __future__ import annotations

import numpy as np

from . import state as st
from .aggregation import Action, Scheme, SchemeKind, aggregate, feasible_actions
from .channel import realize_action
from .errors import ModeMismatch

BASELINE_IDS = ("uncoded", "greedy", "sg", "msg", "random")


def _pick(items, rng):
    if rng is None:
        return items[0]
    return items[int(rng.integers(len(items)))]


def decide(
    baseline_id: str,
    s: st.DetailedState,
    rng: np.random.Generator | None = None,
    *,
    slot: int = 0,
    scheme: Scheme | None = None,
) -> frozenset[int]:
    """Concrete user set chosen by the named baseline on this state.

    ``slot`` drives the uncoded round-robin pointer; ``scheme`` is required
    for the random restricted baseline.
    """
    if baseline_id == "uncoded":
        return frozenset({slot % s.k})
    if baseline_id == "greedy":
        ties = st.max_clique_tieset(s)
        if len(ties[0]) >= 2:
            return _pick(ties, rng)
        empties = st.empty_line_users(s)
        if empties:
            return frozenset({_pick(empties, rng)})
        return _pick(ties, rng)
    if baseline_id == "sg":
        empties = st.empty_line_users(s)
        if empties:
            return frozenset({_pick(empties, rng)})
        return _pick(st.max_clique_tieset(s), rng)
    if baseline_id == "msg":
        if s.is_binary:
            raise ModeMismatch("modified semi-greedy needs lifetime storage")
        if np.any(s.matrix == 1):
            _, ties = st.oldest_clique_tieset(s)
            return _pick(ties, rng)
        return decide("sg", s, rng)
    if baseline_id == "random":
        if scheme is None:
            raise ValueError("random restricted baseline needs a scheme")
        agg = aggregate(s, scheme)
        acts = feasible_actions(agg, scheme)
        action = _pick(list(acts), rng)
        return realize_action(s, action, scheme, rng)
    raise ValueError(f"unknown baseline {baseline_id!r}")


class BaselinePolicy:
    """Adapter exposing the episode-runner protocol for a baseline id."""

    def __init__(self, baseline_id: str, scheme: Scheme | None = None):
        if baseline_id not in BASELINE_IDS:
            raise ValueError(f"unknown baseline {baseline_id!r}")
        self.baseline_id = baseline_id
        self.scheme = scheme
        self._slot = 0

    def reset(self):
        self._slot = 0

    def decide(self, s, agg, rng):
        combo = decide(self.baseline_id, s, rng, slot=self._slot, scheme=self.scheme)
        self._slot += 1
        return self._label(s, combo), combo

    def _label(self, s, combo) -> int:
        # Best-effort abstract label for the trace; 0 marks a raw uncoded pick.
        if self.baseline_id == "uncoded":
            return 0
        if len(combo) == 1:
            (u,) = combo
            if not s.matrix[u].any():
                return int(Action.EMPTY_LINE)
        return int(Action.CLIQUE)


def sg_abstract_policy(scheme: Scheme):
    """Semi-greedy expressed over the aggregated states: fill an empty line
    whenever one exists, otherwise code the clique."""
    from .learning import Policy

    if scheme.kind is SchemeKind.ONED:
        raise ValueError("semi-greedy needs the empty-line count in the state")
    actions = []
    for agg in scheme.states():
        acts = feasible_actions(agg, scheme)
        if Action.EMPTY_LINE in acts and (agg.is_empty_sentinel or agg.comps[-1] > 0):
            actions.append(int(Action.EMPTY_LINE))
        else:
            actions.append(int(acts[0]))
    return Policy(scheme, np.asarray(actions, dtype=np.int8))
