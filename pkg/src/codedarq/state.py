"""Ground state of the coded-retransmission scheduler and its slot dynamics.

The scheduler tracks a K x K storage matrix: entry (i, j) > 0 means user j
currently holds a copy of the packet pending for user i.  In binary mode
entries are 0/1 and copies never expire.  In lifetime mode each positive
entry carries the number of slots the copy remains valid (1..T); it is
decremented once per slot and the copy is dropped when it reaches 0.

A *clique* is a user set in which every member holds every other member's
pending packet, so a single XOR of all the members' packets is decodable by
each of them in one slot.  Single users are vacuously cliques, which makes
"transmit the maximal clique" degenerate gracefully into an uncoded
transmission when no coded opportunity exists.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AllExpired, EmptyCombination, ModeMismatch, NotAClique


@dataclass
class DetailedState:
    """K x K storage matrix plus its storage mode.

    ``ttl is None`` selects binary mode; otherwise ``ttl`` is the maximum
    lifetime T and entries lie in 0..T.
    """

    matrix: np.ndarray
    ttl: int | None = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.int16)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"storage matrix must be square, got {m.shape}")
        if m.shape[0] < 2:
            raise ValueError("at least two users are required")
        if np.any(np.diag(m) != 0):
            raise ValueError("diagonal entries must be zero")
        if np.any(m < 0):
            raise ValueError("entries must be nonnegative")
        if self.ttl is None:
            if np.any(m > 1):
                raise ValueError("binary mode allows entries 0/1 only")
        else:
            if self.ttl < 1:
                raise ValueError("lifetime bound must be >= 1")
            if np.any(m > self.ttl):
                raise ValueError("lifetime entries must not exceed the bound")
        self.matrix = m

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    @property
    def is_binary(self) -> bool:
        return self.ttl is None

    def copy(self) -> "DetailedState":
        return DetailedState(self.matrix.copy(), self.ttl)

    @classmethod
    def empty(cls, k: int, ttl: int | None = None) -> "DetailedState":
        return cls(np.zeros((k, k), dtype=np.int16), ttl)

    @classmethod
    def _wrap(cls, matrix: np.ndarray, ttl: int | None) -> "DetailedState":
        # Hot-path constructor for matrices produced by validated dynamics.
        obj = object.__new__(cls)
        obj.matrix = matrix
        obj.ttl = ttl
        return obj


@dataclass(frozen=True)
class Packet:
    """One pending packet: raw payload plus its owner and sequence number."""

    payload: bytes
    owner: int = 0
    seq: int = 0


@dataclass
class SlotOutcome:
    """Result of applying one transmission outcome to a state.

    ``refreshed_row`` marks the row whose copies were stamped with a fresh
    lifetime this slot (failed uncoded transmission); the per-slot aging pass
    must not decrement that row again in the same slot.
    """

    next_state: DetailedState
    reward: int
    decoded_users: frozenset[int]
    refreshed_row: int | None = None


def empty_lines(s: DetailedState) -> int:
    """Number of all-zero rows: users whose packet is stored nowhere."""
    return int(np.count_nonzero(~s.matrix.any(axis=1)))


def empty_line_users(s: DetailedState) -> list[int]:
    return [int(i) for i in np.flatnonzero(~s.matrix.any(axis=1))]


_POWERS = np.array([1 << j for j in range(32)], dtype=np.int64)


def _mutual_masks(m: np.ndarray) -> tuple[int, ...]:
    # Undirected edge (i, j) iff both directed copies exist (s_ij>0 and s_ji>0).
    pos = m > 0
    mut = pos & pos.T
    k = m.shape[0]
    return tuple(int(x) for x in mut @ _POWERS[:k])


def _collect_max_cliques(adj, seed_mask: int, seed_size: int, cand: int):
    """All maximum-size cliques extending ``seed_mask`` with vertices from
    ``cand``, added in ascending index order so every clique is produced
    exactly once.  Returns (size, [bitmasks])."""
    best_size = seed_size
    best = [seed_mask] if seed_size else []

    def grow(mask: int, size: int, c: int):
        nonlocal best_size, best
        if size > best_size:
            best_size = size
            best = [mask]
        elif size == best_size and size:
            best.append(mask)
        if size + c.bit_count() < best_size:
            return
        while c:
            b = c & -c
            v = b.bit_length() - 1
            c ^= b
            grow(mask | b, size + 1, c & adj[v])

    grow(seed_mask, seed_size, cand)
    return best_size, best


_CLIQUE_CACHE: dict = {}
_ANCHORED_CACHE: dict = {}


def _lex_sorted(masks) -> tuple[int, ...]:
    return tuple(sorted(set(masks), key=_mask_to_list))


def _max_cliques_cached(adj: tuple[int, ...]) -> tuple[int, tuple[int, ...]]:
    hit = _CLIQUE_CACHE.get(adj)
    if hit is None:
        size, masks = _collect_max_cliques(adj, 0, 0, (1 << len(adj)) - 1)
        hit = (size, _lex_sorted(masks))
        _CLIQUE_CACHE[adj] = hit
    return hit


def _anchored_cliques_cached(adj: tuple[int, ...], rows_mask: int) -> tuple[int, tuple[int, ...]]:
    key = (adj, rows_mask)
    hit = _ANCHORED_CACHE.get(key)
    if hit is None:
        pool: set[int] = set()
        best = 0
        rm = rows_mask
        while rm:
            b = rm & -rm
            r = b.bit_length() - 1
            rm ^= b
            size, masks = _collect_max_cliques(adj, 1 << r, 1, adj[r])
            if size > best:
                best = size
                pool = set(masks)
            elif size == best:
                pool.update(masks)
        hit = (best, _lex_sorted(pool))
        _ANCHORED_CACHE[key] = hit
    return hit


def _mask_to_set(mask: int) -> frozenset[int]:
    out = set()
    while mask:
        b = mask & -mask
        out.add(b.bit_length() - 1)
        mask ^= b
    return frozenset(out)


def _mask_to_list(mask: int) -> list[int]:
    out = []
    while mask:
        b = mask & -mask
        out.append(b.bit_length() - 1)
        mask ^= b
    return out


def _clique_tie_masks(m: np.ndarray) -> tuple[int, list[int]]:
    """Maximum-clique tie set as bitmasks, applying the singleton rule: at
    size 1 only users with a non-empty row qualify (all users when the whole
    matrix is empty)."""
    adj = _mutual_masks(m)
    size, masks = _max_cliques_cached(adj)
    if size >= 2:
        return size, list(masks)
    rowany = m.any(axis=1)
    if rowany.any():
        return 1, [1 << int(i) for i in np.flatnonzero(rowany)]
    return 1, [1 << i for i in range(m.shape[0])]


def max_clique_tieset(s: DetailedState) -> list[frozenset[int]]:
    """All maximum cliques of the state, lexicographic order.

    When the maximum size is 1, singleton candidates are restricted to users
    whose row is non-empty (the stored side information the transmission
    would serve); on the all-zero matrix every user qualifies.
    """
    _, masks = _clique_tie_masks(s.matrix)
    return [_mask_to_set(x) for x in masks]


def max_clique_size(s: DetailedState) -> int:
    size, _ = _max_cliques_cached(_mutual_masks(s.matrix))
    return max(size, 1)


def max_clique(s: DetailedState, rng: np.random.Generator | None = None) -> frozenset[int]:
    """One maximum clique; ties drawn uniformly under ``rng``, else the
    lexicographically smallest user set."""
    _, masks = _clique_tie_masks(s.matrix)
    if rng is None:
        return _mask_to_set(masks[0])
    return _mask_to_set(masks[int(rng.integers(len(masks)))])


def _oldest_tie_masks(m: np.ndarray) -> tuple[int, int, list[int]]:
    """(F, anchored clique size, clique bitmasks) for lifetime matrices."""
    positive = m[m > 0]
    if positive.size == 0:
        raise AllExpired("state has no stored copies")
    f = int(positive.min())
    rows_mask = 0
    for i in np.flatnonzero((m == f).any(axis=1)):
        rows_mask |= 1 << int(i)
    adj = _mutual_masks(m)
    size, masks = _anchored_cliques_cached(adj, rows_mask)
    return f, size, list(masks)


def oldest_clique_tieset(s: DetailedState) -> tuple[int, list[frozenset[int]]]:
    """Minimum positive lifetime F and all maximum cliques anchored on an
    oldest line (a row holding an entry equal to F)."""
    if s.is_binary:
        raise ModeMismatch("oldest-line analysis requires lifetime mode")
    f, _, masks = _oldest_tie_masks(s.matrix)
    return f, [_mask_to_set(x) for x in masks]


def clique_with_oldest(
    s: DetailedState, rng: np.random.Generator | None = None
) -> tuple[int, frozenset[int]]:
    """(F, clique): the minimum positive lifetime and a maximum clique
    containing an oldest line.  Raises AllExpired on an empty matrix."""
    f, ties = oldest_clique_tieset(s)
    if rng is None:
        return f, ties[0]
    return f, ties[int(rng.integers(len(ties)))]


def is_clique(s: DetailedState, users) -> bool:
    users = sorted(users)
    for a in users:
        for b in users:
            if a != b and s.matrix[a, b] <= 0:
                return False
    return True


def apply_outcome(
    s: DetailedState,
    combo,
    rx: np.ndarray,
    *,
    literal_erase: bool = False,
) -> SlotOutcome:
    """Apply one slot's reception outcome for the transmitted combination.

    Members of ``combo`` whose reception flag is set decode: their row is
    zeroed and each contributes 1 to the reward.  A failed uncoded
    transmission to user u stores/refreshes u's packet at every user that
    heard it, and (lifetime mode) restamps existing holders to the full
    lifetime.  Coded combinations are never stored by anyone.

    ``literal_erase`` selects the stricter binary-mode reading in which a
    failed uncoded transmission also erases prior copies at users that did
    not hear this retransmission.

    Lifetime aging is a separate per-slot step (see :func:`age_tte`).
    """
    combo = frozenset(int(u) for u in combo)
    if not combo:
        raise ValueError("combination must contain at least one user")
    if any(u < 0 or u >= s.k for u in combo):
        raise ValueError("user index out of range")
    rx = np.asarray(rx, dtype=bool)
    if rx.shape != (s.k,):
        raise ValueError("reception vector length must equal the user count")
    if len(combo) > 1 and not is_clique(s, combo):
        raise NotAClique(f"{sorted(combo)} is not a clique of the state")

    m = s.matrix.copy()
    decoded = frozenset(u for u in combo if rx[u])
    refreshed_row = None

    if len(combo) == 1:
        (u,) = combo
        if not rx[u]:
            holders = m[u] > 0
            heard = rx.copy()
            heard[u] = False
            if s.is_binary:
                if literal_erase:
                    m[u, :] = 0
                m[u, heard] = 1
            else:
                eligible = heard | holders
                eligible[u] = False
                m[u, :] = 0
                m[u, eligible] = s.ttl
            refreshed_row = u

    for u in decoded:
        m[u, :] = 0

    return SlotOutcome(
        next_state=DetailedState._wrap(m, s.ttl),
        reward=len(decoded),
        decoded_users=decoded,
        refreshed_row=refreshed_row,
    )


def age_tte(s: DetailedState) -> DetailedState:
    """Decrement every positive lifetime entry by one; copies at 0 are gone."""
    if s.is_binary:
        raise ModeMismatch("aging applies to lifetime mode only")
    m = s.matrix.copy()
    m[m > 0] -= 1
    return DetailedState._wrap(m, s.ttl)


def settle_slot(s: DetailedState, outcome: SlotOutcome) -> DetailedState:
    """Finish a slot: in lifetime mode, age every copy except those stamped
    fresh by this slot's outcome, so a packet heard this slot survives
    exactly T subsequent slots."""
    nxt = outcome.next_state
    if s.is_binary:
        return nxt
    aged = age_tte(nxt)
    if outcome.refreshed_row is not None:
        aged.matrix[outcome.refreshed_row, :] = nxt.matrix[outcome.refreshed_row, :]
    return aged


def xor_payloads(payloads) -> bytes:
    """Bitwise XOR of byte strings, zero-padding the shorter ones."""
    payloads = list(payloads)
    if not payloads:
        raise EmptyCombination("nothing to combine")
    width = max(len(p) for p in payloads)
    acc = bytearray(width)
    for p in payloads:
        for i, b in enumerate(p):
            acc[i] ^= b
    return bytes(acc)


def xor_combine(packets, coefficients) -> bytes:
    """Encode the selected packets into one XOR combination.

    Decoding is the same operation: a receiver holding all constituents but
    one recovers the missing payload by XOR-ing its stored copies with the
    combination.
    """
    coefficients = list(coefficients)
    if len(coefficients) != len(packets):
        raise ValueError("one coefficient per packet is required")
    selected = [p.payload for p, c in zip(packets, coefficients) if c]
    if not selected:
        raise EmptyCombination("all coefficients are zero")
    return xor_payloads(selected)
