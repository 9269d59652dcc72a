"""Storage-matrix model: clique analysis, slot outcomes, aging, XOR codec."""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as hst

from codedarq import state as st
from codedarq.errors import AllExpired, EmptyCombination, ModeMismatch, NotAClique


def S(rows, ttl=None):
    return st.DetailedState(np.array(rows, dtype=np.int16), ttl)


# Matrices from the five-user walkthrough used across the suite.
S1 = [
    [0, 1, 0, 0, 1],
    [1, 0, 1, 1, 0],
    [0, 1, 0, 1, 0],
    [0, 1, 1, 0, 0],
    [0, 1, 0, 0, 0],
]
S2 = [
    [0, 1, 1, 0, 1],
    [1, 0, 1, 0, 1],
    [1, 1, 0, 0, 0],
    [0, 0, 0, 0, 1],
    [1, 1, 0, 0, 0],
]
# Four-user example: 3-clique {0,1,2}, one extra copy in row 1, row 3 empty.
S5 = [
    [0, 1, 1, 0],
    [1, 0, 1, 1],
    [1, 1, 0, 0],
    [0, 0, 0, 0],
]


def brute_force_cliques(m):
    """Independent oracle: exhaustive subset scan."""
    k = len(m)
    best, best_size = [], 1
    for r in range(1, k + 1):
        for combo in itertools.combinations(range(k), r):
            if all(m[i][j] > 0 for i in combo for j in combo if i != j):
                if r > best_size:
                    best, best_size = [set(combo)], r
                elif r == best_size:
                    best.append(set(combo))
    return best_size, best


def random_state(rng, k, ttl=None):
    if ttl is None:
        m = (rng.random((k, k)) < 0.45).astype(np.int16)
    else:
        m = rng.integers(0, ttl + 1, size=(k, k)).astype(np.int16)
    np.fill_diagonal(m, 0)
    return st.DetailedState(m, ttl)


class TestEmptyLines:
    def test_walkthrough_states_have_none(self):
        assert st.empty_lines(S(S1)) == 0
        assert st.empty_lines(S(S2)) == 0

    def test_all_zero_matrix(self):
        assert st.empty_lines(st.DetailedState.empty(5)) == 5

    def test_single_empty_row(self):
        assert st.empty_lines(S(S5)) == 1
        assert st.empty_line_users(S(S5)) == [3]


class TestMaxClique:
    def test_s1_unique_triangle(self):
        assert st.max_clique(S(S1)) == frozenset({1, 2, 3})
        assert st.max_clique_size(S(S1)) == 3

    def test_s2_two_triangles(self):
        ties = st.max_clique_tieset(S(S2))
        assert ties == [frozenset({0, 1, 2}), frozenset({0, 1, 4})]

    def test_all_zero_gives_singletons(self):
        ties = st.max_clique_tieset(st.DetailedState.empty(4))
        assert ties == [frozenset({u}) for u in range(4)]

    def test_singletons_prefer_stored_rows(self):
        s = S([[0, 1, 0], [0, 0, 0], [0, 0, 0]])
        assert st.max_clique_tieset(s) == [frozenset({0})]

    def test_matches_brute_force_on_random_states(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            k = int(rng.integers(2, 7))
            s = random_state(rng, k)
            size, cliques = brute_force_cliques(s.matrix)
            assert st.max_clique_size(s) == size
            if size >= 2:
                got = {tuple(sorted(c)) for c in st.max_clique_tieset(s)}
                want = {tuple(sorted(c)) for c in cliques}
                assert got == want

    def test_rng_tiebreak_hits_every_clique(self):
        rng = np.random.default_rng(0)
        seen = {tuple(sorted(st.max_clique(S(S2), rng))) for _ in range(200)}
        assert seen == {(0, 1, 2), (0, 1, 4)}


class TestCliqueWithOldest:
    def test_three_user_example(self):
        s = S([[0, 3, 0], [2, 0, 4], [0, 0, 0]], ttl=5)
        f, clique = st.clique_with_oldest(s)
        assert (f, clique) == (2, frozenset({0, 1}))

    def test_anchored_differs_from_global(self):
        s = S([[0, 5, 5, 0], [5, 0, 5, 0], [5, 5, 0, 0], [1, 0, 0, 0]], ttl=5)
        f, clique = st.clique_with_oldest(s)
        assert f == 1
        assert clique == frozenset({3})
        assert st.max_clique_size(s) == 3

    def test_single_entry(self):
        s = S([[0, 4], [0, 0]], ttl=6)
        assert st.clique_with_oldest(s) == (4, frozenset({0}))

    def test_all_expired_raises(self):
        with pytest.raises(AllExpired):
            st.clique_with_oldest(st.DetailedState.empty(3, ttl=4))

    def test_binary_mode_rejected(self):
        with pytest.raises(ModeMismatch):
            st.clique_with_oldest(S(S1))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            k = int(rng.integers(2, 6))
            s = random_state(rng, k, ttl=4)
            if not s.matrix.any():
                continue
            f = int(s.matrix[s.matrix > 0].min())
            oldest = [i for i in range(k) if (s.matrix[i] == f).any()]
            _, cliques = brute_force_cliques(s.matrix)
            anchored = []
            best = 0
            for r in range(1, k + 1):
                for combo in itertools.combinations(range(k), r):
                    if not any(i in combo for i in oldest):
                        continue
                    if all(s.matrix[i][j] > 0 for i in combo for j in combo if i != j):
                        if r > best:
                            best, anchored = r, [set(combo)]
                        elif r == best:
                            anchored.append(set(combo))
            got_f, got_clique = st.clique_with_oldest(s)
            assert got_f == f
            assert set(got_clique) in anchored
            assert len(got_clique) == best


class TestApplyOutcome:
    def test_walkthrough_partial_decode(self):
        s = S(S5)
        rx = np.array([True, False, True, False])
        out = st.apply_outcome(s, {0, 1, 2}, rx)
        expected = np.zeros((4, 4), dtype=np.int16)
        expected[1] = [1, 0, 1, 1]
        assert np.array_equal(out.next_state.matrix, expected)
        assert out.reward == 2
        assert out.decoded_users == {0, 2}

    def test_uncoded_success_clears_row(self):
        s = S(S1)
        rx = np.array([False, True, False, False, False])
        out = st.apply_outcome(s, {1}, rx)
        assert not out.next_state.matrix[1].any()
        assert out.reward == 1

    def test_uncoded_failure_stores_at_hearers(self):
        s = st.DetailedState.empty(3)
        rx = np.array([False, True, False])
        out = st.apply_outcome(s, {0}, rx)
        assert out.next_state.matrix[0, 1] == 1
        assert out.next_state.matrix[0, 2] == 0
        assert out.reward == 0
        assert out.refreshed_row == 0

    def test_binary_prior_copies_persist_by_default(self):
        s = S([[0, 1, 0], [0, 0, 0], [0, 0, 0]])
        rx = np.array([False, False, True])
        out = st.apply_outcome(s, {0}, rx)
        assert out.next_state.matrix[0, 1] == 1
        assert out.next_state.matrix[0, 2] == 1

    def test_binary_literal_erase_variant(self):
        s = S([[0, 1, 0], [0, 0, 0], [0, 0, 0]])
        rx = np.array([False, False, True])
        out = st.apply_outcome(s, {0}, rx, literal_erase=True)
        assert out.next_state.matrix[0, 1] == 0
        assert out.next_state.matrix[0, 2] == 1

    def test_lifetime_refresh_extends_holders(self):
        s = S([[0, 2, 0], [0, 0, 0], [0, 0, 0]], ttl=5)
        rx = np.array([False, False, True])
        out = st.apply_outcome(s, {0}, rx)
        assert out.next_state.matrix[0, 1] == 5
        assert out.next_state.matrix[0, 2] == 5

    def test_non_clique_combo_rejected(self):
        with pytest.raises(NotAClique):
            st.apply_outcome(S(S1), {0, 2}, np.zeros(5, dtype=bool))

    def test_coded_packets_never_stored(self):
        s = S(S5)
        rx = np.array([False, False, False, True])
        out = st.apply_outcome(s, {0, 1, 2}, rx)
        assert np.array_equal(out.next_state.matrix, s.matrix)
        assert out.reward == 0

    def test_clique_tx_never_grows_clique(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            s = random_state(rng, 5)
            ties = st.max_clique_tieset(s)
            if len(ties[0]) < 2:
                continue
            rx = rng.random(5) < 0.5
            out = st.apply_outcome(s, ties[0], rx)
            assert st.max_clique_size(out.next_state) <= len(ties[0])

    def test_uncoded_tx_grows_clique_by_at_most_one(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            s = random_state(rng, 5)
            before = st.max_clique_size(s)
            u = int(rng.integers(5))
            rx = rng.random(5) < 0.5
            out = st.apply_outcome(s, {u}, rx)
            if rx[u]:
                continue
            assert st.max_clique_size(out.next_state) <= before + 1

    def test_reward_counts_receiving_members(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            s = random_state(rng, 4)
            ties = st.max_clique_tieset(s)
            combo = ties[0]
            rx = rng.random(4) < 0.5
            out = st.apply_outcome(s, combo, rx)
            assert out.reward == sum(bool(rx[u]) for u in combo)

    def test_rows_outside_combo_unchanged(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            s = random_state(rng, 5, ttl=3)
            u = int(rng.integers(5))
            rx = rng.random(5) < 0.5
            out = st.apply_outcome(s, {u}, rx)
            others = [v for v in range(5) if v != u]
            assert np.array_equal(out.next_state.matrix[others], s.matrix[others])


class TestAging:
    def test_decrement_and_drop(self):
        s = S([[0, 3], [1, 0]], ttl=5)
        aged = st.age_tte(s)
        assert np.array_equal(aged.matrix, np.array([[0, 2], [0, 0]]))

    def test_empty_matrix_fixed_point(self):
        s = st.DetailedState.empty(3, ttl=4)
        assert np.array_equal(st.age_tte(s).matrix, s.matrix)

    def test_binary_mode_rejected(self):
        with pytest.raises(ModeMismatch):
            st.age_tte(S(S1))

    def test_settle_protects_fresh_refresh(self):
        # A row refreshed this slot must still read T at the next decision.
        s = S([[0, 2, 0], [0, 0, 3], [0, 0, 0]], ttl=5)
        rx = np.array([False, True, False])
        out = st.apply_outcome(s, {0}, rx)
        settled = st.settle_slot(s, out)
        assert settled.matrix[0, 1] == 5
        assert settled.matrix[1, 2] == 2

    def test_settle_ages_unrefreshed_rows(self):
        s = S([[0, 1, 0], [0, 0, 3], [0, 0, 0]], ttl=5)
        rx = np.array([True, False, False])
        out = st.apply_outcome(s, {0}, rx)
        settled = st.settle_slot(s, out)
        assert settled.matrix[0].sum() == 0
        assert settled.matrix[1, 2] == 2

    def test_no_entry_exceeds_bound_or_goes_negative(self):
        rng = np.random.default_rng(8)
        s = random_state(rng, 4, ttl=3)
        for _ in range(200):
            u = int(rng.integers(4))
            rx = rng.random(4) < 0.5
            out = st.apply_outcome(s, {u}, rx)
            s = st.settle_slot(s, out)
            assert s.matrix.min() >= 0
            assert s.matrix.max() <= 3


class TestXorCodec:
    def test_single_packet_unchanged(self):
        pkts = [st.Packet(b"hello", 0, 0), st.Packet(b"world", 1, 0)]
        assert st.xor_combine(pkts, [1, 0]) == b"hello"

    def test_xor_involution(self):
        d1, d2 = b"alpha", b"bravo"
        z = st.xor_payloads([d1, d2])
        assert st.xor_payloads([z, d2]) == d1

    def test_unequal_lengths_zero_padded(self):
        d1, d2, d3 = b"\x01", b"\x02\x03", b"\x04\x05\x06"
        z = st.xor_payloads([d1, d2, d3])
        assert st.xor_payloads([z, d1, d2]) == d3 and len(z) == 3

    def test_empty_combination_rejected(self):
        with pytest.raises(EmptyCombination):
            st.xor_combine([st.Packet(b"x", 0, 0)], [0])

    @settings(max_examples=200, deadline=None)
    @given(
        payloads=hst.lists(hst.binary(min_size=0, max_size=40), min_size=2, max_size=6),
        data=hst.data(),
    )
    def test_round_trip_recovers_any_constituent(self, payloads, data):
        z = st.xor_payloads(payloads)
        miss = data.draw(hst.integers(min_value=0, max_value=len(payloads) - 1))
        rest = [p for i, p in enumerate(payloads) if i != miss]
        recovered = st.xor_payloads([z] + rest)
        width = max(len(p) for p in payloads)
        assert recovered == payloads[miss].ljust(width, b"\x00")

    @settings(max_examples=100, deadline=None)
    @given(a=hst.binary(max_size=30), b=hst.binary(max_size=30), c=hst.binary(max_size=30))
    def test_associative_commutative(self, a, b, c):
        z1 = st.xor_payloads([st.xor_payloads([a, b]), c])
        z2 = st.xor_payloads([a, st.xor_payloads([b, c])])
        z3 = st.xor_payloads([c, b, a])
        width = max(len(z1), len(z2), len(z3))
        assert z1.ljust(width, b"\x00") == z2.ljust(width, b"\x00") == z3.ljust(width, b"\x00")


class TestValidation:
    def test_nonzero_diagonal_rejected(self):
        with pytest.raises(ValueError):
            st.DetailedState(np.eye(3, dtype=np.int16))

    def test_binary_mode_rejects_large_entries(self):
        with pytest.raises(ValueError):
            st.DetailedState(np.array([[0, 2], [0, 0]], dtype=np.int16))

    def test_lifetime_bound_enforced(self):
        with pytest.raises(ValueError):
            st.DetailedState(np.array([[0, 6], [0, 0]], dtype=np.int16), ttl=5)

    def test_one_user_rejected(self):
        with pytest.raises(ValueError):
            st.DetailedState(np.zeros((1, 1), dtype=np.int16))
