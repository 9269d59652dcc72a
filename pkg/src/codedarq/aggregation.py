"""Aggregation maps from detailed states to small abstract state spaces.

Four schemes are supported:

* ``notte`` -- binary storage, state (L, E): maximal clique size and number
  of empty lines.
* ``agg1``  -- lifetime storage, state (F, C, E): minimum positive lifetime,
  size of the maximal clique anchored on an oldest line, empty lines.
* ``agg2``  -- lifetime storage, state (F, L, E): like ``agg1`` but with the
  global maximal clique size instead of the anchored one.
* ``oned``  -- binary storage, state (L,) only.

For the lifetime schemes the all-empty matrix has no defined F and is
represented by a dedicated sentinel state with an empty component tuple.

Enumeration order is E ascending, then C/L ascending, then F ascending,
with the sentinel last; every CSV and table index in the package follows it.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum
from functools import lru_cache

import numpy as np

from . import state as st
from .errors import InfeasibleAction, ModeMismatch, Unrepresentable


class SchemeKind(str, Enum):
    NOTTE = "notte"
    AGG1 = "agg1"
    AGG2 = "agg2"
    ONED = "oned"


class Action(IntEnum):
    """Restricted abstract actions.

    CLIQUE codes the clique anchored on the oldest line under the lifetime
    schemes and the global maximal clique otherwise.  EMPTY_LINE sends an
    uncoded packet to a random empty line (for the 1-D scheme: to a random
    line outside the coded clique).  MAX_CLIQUE codes the global maximal
    clique and only exists under ``agg2``.
    """

    CLIQUE = 1
    EMPTY_LINE = 2
    MAX_CLIQUE = 3


@dataclass(frozen=True)
class Scheme:
    kind: SchemeKind
    k: int
    ttl: int | None = None

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("schemes require at least two users")
        needs_ttl = self.kind in (SchemeKind.AGG1, SchemeKind.AGG2)
        if needs_ttl and (self.ttl is None or self.ttl < 1):
            raise ValueError(f"scheme {self.kind.value} requires a lifetime bound")
        if not needs_ttl and self.ttl is not None:
            raise ValueError(f"scheme {self.kind.value} uses binary storage")

    @property
    def component_names(self) -> tuple[str, ...]:
        return {
            SchemeKind.NOTTE: ("L", "E"),
            SchemeKind.AGG1: ("F", "C", "E"),
            SchemeKind.AGG2: ("F", "L", "E"),
            SchemeKind.ONED: ("L",),
        }[self.kind]

    def states(self) -> tuple["AggregatedState", ...]:
        return enumerate_aggregated(self)

    def index(self, agg: "AggregatedState") -> int:
        table = _index_table(self)
        try:
            return table[agg]
        except KeyError:
            raise KeyError(f"{agg} is not an enumerated state of {self}") from None

    def comps_index(self) -> dict:
        return _comps_table(self)


@dataclass(frozen=True)
class AggregatedState:
    kind: SchemeKind
    comps: tuple[int, ...]

    @property
    def is_empty_sentinel(self) -> bool:
        return self.comps == ()

    def component(self, name: str, k: int | None = None) -> int:
        names = {
            SchemeKind.NOTTE: ("L", "E"),
            SchemeKind.AGG1: ("F", "C", "E"),
            SchemeKind.AGG2: ("F", "L", "E"),
            SchemeKind.ONED: ("L",),
        }[self.kind]
        if self.is_empty_sentinel:
            raise ValueError("sentinel state has no components")
        return self.comps[names.index(name)]

    def __str__(self):
        if self.is_empty_sentinel:
            return f"{self.kind.value}:empty"
        return f"{self.kind.value}:{','.join(str(c) for c in self.comps)}"


def _check_mode(s: st.DetailedState, scheme: Scheme):
    if scheme.kind in (SchemeKind.NOTTE, SchemeKind.ONED):
        if not s.is_binary:
            raise ModeMismatch(f"{scheme.kind.value} aggregates binary states")
    else:
        if s.is_binary or s.ttl != scheme.ttl:
            raise ModeMismatch(
                f"{scheme.kind.value} aggregates lifetime states with T={scheme.ttl}"
            )


def _comps_of(matrix: np.ndarray, kind: SchemeKind) -> tuple[int, ...]:
    if kind is SchemeKind.ONED:
        size, _ = st._max_cliques_cached(st._mutual_masks(matrix))
        return (max(size, 1),)
    rowany = matrix.any(axis=1)
    e = int(len(rowany) - rowany.sum())
    if kind is SchemeKind.NOTTE:
        size, _ = st._max_cliques_cached(st._mutual_masks(matrix))
        return (max(size, 1), e)
    if not rowany.any():
        return ()
    f, csize, _ = st._oldest_tie_masks(matrix)
    if kind is SchemeKind.AGG1:
        return (f, csize, e)
    size, _ = st._max_cliques_cached(st._mutual_masks(matrix))
    return (f, max(size, 1), e)


def aggregate(s: st.DetailedState, scheme: Scheme) -> AggregatedState:
    """Map a detailed state to its aggregated state under the scheme."""
    _check_mode(s, scheme)
    if s.k != scheme.k:
        raise ModeMismatch("user count does not match the scheme")
    return AggregatedState(scheme.kind, _comps_of(s.matrix, scheme.kind))


def feasible_actions(agg: AggregatedState, scheme: Scheme) -> tuple[Action, ...]:
    """Feasible abstract actions; never empty."""
    kind = scheme.kind
    if kind is SchemeKind.ONED:
        (l,) = agg.comps
        if l < scheme.k:
            return (Action.CLIQUE, Action.EMPTY_LINE)
        return (Action.CLIQUE,)
    if kind is SchemeKind.NOTTE:
        l, e = agg.comps
        acts = []
        if e < scheme.k:
            acts.append(Action.CLIQUE)
        if e > 0:
            acts.append(Action.EMPTY_LINE)
        return tuple(acts)
    if agg.is_empty_sentinel:
        return (Action.EMPTY_LINE,)
    e = agg.comps[-1]
    acts = [Action.CLIQUE]
    if e > 0:
        acts.append(Action.EMPTY_LINE)
    if kind is SchemeKind.AGG2:
        acts.append(Action.MAX_CLIQUE)
    return tuple(acts)


@lru_cache(maxsize=None)
def enumerate_aggregated(scheme: Scheme) -> tuple[AggregatedState, ...]:
    """All aggregated states reachable by the restricted dynamics, in the
    documented stable order.

    Candidates from the component grid are kept only when the canonical
    seed construction produces a detailed state that maps back to them,
    which removes combinations such as a K-clique together with an empty
    line, or lifetime patterns that no refresh history can produce.
    """
    k, t = scheme.k, scheme.ttl
    kind = scheme.kind
    out: list[AggregatedState] = []
    if kind is SchemeKind.ONED:
        return tuple(AggregatedState(kind, (l,)) for l in range(1, k + 1))
    if kind is SchemeKind.NOTTE:
        for e in range(k):
            for l in range(1, k - e + 1):
                cand = AggregatedState(kind, (l, e))
                if _seedable(cand, scheme):
                    out.append(cand)
        out.append(AggregatedState(kind, (1, k)))
        return tuple(out)
    for e in range(k):
        rows = k - e
        # One row at most is refreshed per slot, so n non-empty rows require
        # the oldest refresh to be at least n-1 slots old: F <= T - n + 1.
        f_hi = min(t, t - rows + 1)
        for c in range(1, rows + 1):
            for f in range(1, f_hi + 1):
                cand = AggregatedState(kind, (f, c, e))
                if _seedable(cand, scheme):
                    out.append(cand)
    out.append(AggregatedState(kind, ()))
    return tuple(out)


@lru_cache(maxsize=None)
def _index_table(scheme: Scheme) -> dict:
    return {agg: i for i, agg in enumerate(enumerate_aggregated(scheme))}


@lru_cache(maxsize=None)
def _comps_table(scheme: Scheme) -> dict:
    return {agg.comps: i for i, agg in enumerate(enumerate_aggregated(scheme))}


def _seedable(agg: AggregatedState, scheme: Scheme) -> bool:
    try:
        _build_seed(agg, scheme)
        return True
    except Unrepresentable:
        return False


def seed_state(agg: AggregatedState, scheme: Scheme) -> st.DetailedState:
    """A canonical detailed state whose aggregate is ``agg``.

    The clique occupies the lowest-indexed users with the oldest line first;
    empty lines sit at the highest indices; any remaining rows carry a single
    off-clique entry.  Lifetime rows take pairwise distinct ages so the state
    is consistent with one refresh per slot and simulation from a seed never
    leaves the enumerated aggregated space.
    """
    return _build_seed(agg, scheme)


def _build_seed(agg: AggregatedState, scheme: Scheme) -> st.DetailedState:
    if agg.kind != scheme.kind:
        raise Unrepresentable("aggregated state belongs to a different scheme")
    k, t = scheme.k, scheme.ttl
    kind = scheme.kind

    if kind in (SchemeKind.NOTTE, SchemeKind.ONED):
        if kind is SchemeKind.ONED:
            (l,) = agg.comps
            e = k - l if l > 1 else k
        else:
            l, e = agg.comps
        if not (1 <= l <= k and 0 <= e <= k):
            raise Unrepresentable(f"components out of range for K={k}")
        if l == 1 and e == k:
            m = np.zeros((k, k), dtype=np.int16)
        else:
            if l + e > k:
                raise Unrepresentable("clique and empty lines exceed the user count")
            m = _structure_matrix(k, l, k - e, fill=1)
        cand = st.DetailedState(m, None)
        got = aggregate(cand, scheme)
        if got != agg:
            raise Unrepresentable(f"no detailed state maps to {agg}")
        return cand

    if agg.is_empty_sentinel:
        return st.DetailedState.empty(k, t)
    f, c, e = agg.comps
    rows = k - e
    if not (1 <= f <= t and 1 <= c <= rows <= k):
        raise Unrepresentable(f"components out of range for K={k}, T={t}")
    if f > t - rows + 1:
        raise Unrepresentable("not enough refresh slots for that many stored lines")
    m = _structure_matrix(k, c, rows, fill=1)
    values = [f] + [t - i for i in range(rows - 1)]
    for i in range(rows):
        m[i][m[i] > 0] = values[i]
    cand = st.DetailedState(m, t)
    got = aggregate(cand, scheme)
    if got != agg:
        raise Unrepresentable(f"no detailed state maps to {agg}")
    return cand


def _structure_matrix(k: int, clique: int, rows: int, fill: int) -> np.ndarray:
    """Binary skeleton: users 0..clique-1 form the clique, users
    clique..rows-1 carry one off-clique entry, the rest are empty lines."""
    m = np.zeros((k, k), dtype=np.int16)
    if clique >= 2:
        for a in range(clique):
            for b in range(clique):
                if a != b:
                    m[a, b] = fill
        for r in range(clique, rows):
            m[r, 0] = fill
    else:
        # No mutual pair is allowed: chain each stored line to the next user.
        for r in range(rows):
            m[r, (r + 1) % k] = fill
    return m
