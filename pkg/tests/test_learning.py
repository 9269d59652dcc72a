"""Model tables, planning, the learning loop and threshold tooling."""
import numpy as np
import pytest

from codedarq import state as st
from codedarq.aggregation import Action, AggregatedState, Scheme, SchemeKind, aggregate
from codedarq.channel import ChannelConfig, Simulator
from codedarq.errors import AmbiguousSlice, NoData
from codedarq.learning import (
    LearningSchedule,
    Policy,
    TransitionModel,
    algorithm_a,
    average_cost_eval,
    default_actions,
    discounted_value_eval,
    feasibility_mask,
    plan_on_model,
    record,
    select_threshold_rule,
    threshold_accelerate,
    threshold_rule_policy,
    value_iteration,
)
from codedarq.baselines import BaselinePolicy, sg_abstract_policy

NOTTE3 = Scheme(SchemeKind.NOTTE, 3)
NOTTE5 = Scheme(SchemeKind.NOTTE, 5)
ONED5 = Scheme(SchemeKind.ONED, 5)


def A(kind, *comps):
    return AggregatedState(kind, tuple(comps))


class TestRecord:
    def test_first_record_sets_mean(self):
        model = TransitionModel.empty(NOTTE3)
        a = A(SchemeKind.NOTTE, 2, 0)
        b = A(SchemeKind.NOTTE, 1, 2)
        record(model, a, Action.CLIQUE, b, 2.0)
        i, j = NOTTE3.index(a), NOTTE3.index(b)
        assert model.counts[i, 0, j] == 1
        assert model.r_hat()[i, 0, j] == 2.0

    def test_running_mean(self):
        model = TransitionModel.empty(NOTTE3)
        a = A(SchemeKind.NOTTE, 2, 0)
        b = A(SchemeKind.NOTTE, 1, 2)
        record(model, a, Action.CLIQUE, b, 1.0)
        record(model, a, Action.CLIQUE, b, 3.0)
        i, j = NOTTE3.index(a), NOTTE3.index(b)
        assert model.r_hat()[i, 0, j] == 2.0

    def test_clique_outcome_frequencies_match_binomial(self):
        # Sampling the coded transmission from the full three-user clique:
        # the landing-class mass for "everyone decoded" is (1-p)^3.
        scheme = NOTTE3
        cfg = ChannelConfig(k=3, loss=0.25, seed=21)
        sim = Simulator(cfg, scheme)
        full = st.DetailedState(
            np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0]], dtype=np.int16)
        )
        model = TransitionModel.empty(scheme)
        agg = aggregate(full, scheme)
        for _ in range(100_000):
            _, nagg, reward = sim.step(full, Action.CLIQUE, agg)
            record(model, agg, Action.CLIQUE, nagg, reward)
        p_hat = model.p_hat()
        i = scheme.index(agg)
        j_empty = scheme.index(A(SchemeKind.NOTTE, 1, 3))
        assert abs(p_hat[i, 0, j_empty] - 0.421875) <= 0.01

    def test_rows_sum_to_one_where_visited(self):
        cfg = ChannelConfig(k=4, loss=0.3, seed=2)
        scheme = Scheme(SchemeKind.NOTTE, 4)
        res = algorithm_a(
            cfg, scheme, LearningSchedule(slots_per_phase=2000, max_phases=5, min_phases=5)
        )
        p_hat = res.model.p_hat()
        visited = res.model.pair_visits > 0
        sums = p_hat.sum(axis=2)[visited]
        assert np.allclose(sums, 1.0, atol=1e-12)


class TestValueIteration:
    def test_self_loop_closed_form(self):
        model = TransitionModel.empty(NOTTE5)
        empty = A(SchemeKind.NOTTE, 1, 5)
        for _ in range(4):
            record(model, empty, Action.EMPTY_LINE, empty, 0.75)
        value, policy = value_iteration(model, gamma=0.99)
        assert abs(value.value_for(empty) - 75.0) < 1e-6

    def test_gamma_zero_is_one_step_greedy(self):
        model = TransitionModel.empty(NOTTE3)
        a = A(SchemeKind.NOTTE, 2, 1)
        b = A(SchemeKind.NOTTE, 1, 2)
        record(model, a, Action.CLIQUE, b, 2.0)
        record(model, a, Action.EMPTY_LINE, b, 0.5)
        value, policy = value_iteration(model, gamma=0.0)
        assert value.value_for(a) == 2.0
        assert policy.action_for(a) is Action.CLIQUE

    def test_two_state_chain_matches_linear_solve(self):
        """Hand-built two-state model checked against the direct solve of
        each deterministic policy's linear system."""
        scheme = NOTTE3
        s0, s1 = A(SchemeKind.NOTTE, 2, 1), A(SchemeKind.NOTTE, 1, 2)
        i0, i1 = scheme.index(s0), scheme.index(s1)
        model = TransitionModel.empty(scheme)
        # s0, clique: stays s0 w.p. 0.3 (reward 0), else to s1 (reward 2)
        for _ in range(3):
            record(model, s0, Action.CLIQUE, s0, 0.0)
        for _ in range(7):
            record(model, s0, Action.CLIQUE, s1, 2.0)
        # s0, fill: self-loop, reward 0.6
        for _ in range(5):
            record(model, s0, Action.EMPTY_LINE, s0, 0.6)
        # s1, fill: back to s0, reward 0.5
        for _ in range(4):
            record(model, s1, Action.EMPTY_LINE, s0, 0.5)
        gamma = 0.9
        value, policy = value_iteration(model, gamma)

        best = {}
        for a0 in (Action.CLIQUE, Action.EMPTY_LINE):
            P = np.zeros((2, 2))
            r = np.zeros(2)
            if a0 is Action.CLIQUE:
                P[0] = [0.3, 0.7]
                r[0] = 0.7 * 2.0
            else:
                P[0] = [1.0, 0.0]
                r[0] = 0.6
            P[1] = [1.0, 0.0]
            r[1] = 0.5
            V = np.linalg.solve(np.eye(2) - gamma * P, r)
            for s, v in enumerate(V):
                best[s] = max(best.get(s, -np.inf), v)
        assert abs(value.values[i0] - best[0]) < 1e-8
        assert abs(value.values[i1] - best[1]) < 1e-8

    def test_contraction_of_successive_sweeps(self):
        from codedarq.solvers import value_iteration as raw_vi

        rng = np.random.default_rng(3)
        S, Acount = 6, 2
        P = rng.random((S, Acount, S))
        P /= P.sum(axis=2, keepdims=True)
        r = rng.random((S, Acount))
        mask = np.ones((S, Acount), dtype=bool)
        gamma = 0.9
        _, _, deltas = raw_vi(P, r, mask, gamma, tol=1e-12)
        for d1, d2 in zip(deltas, deltas[1:]):
            assert d2 <= gamma * d1 + 1e-12

    def test_empty_model_raises(self):
        with pytest.raises(NoData):
            value_iteration(TransitionModel.empty(NOTTE3), 0.9)

    def test_policy_invariant_to_affine_reward_rescale(self):
        rng = np.random.default_rng(4)
        model = TransitionModel.empty(NOTTE3)
        states = NOTTE3.states()
        mask = feasibility_mask(NOTTE3)
        for i, agg in enumerate(states):
            for a in np.flatnonzero(mask[i]):
                for _ in range(30):
                    j = int(rng.integers(len(states)))
                    record(model, agg, Action(a + 1), states[j], float(rng.integers(0, 3)))
        _, pol1 = value_iteration(model, 0.9)
        scaled = TransitionModel(NOTTE3, model.counts.copy(), 2.5 * model.rewards)
        _, pol2 = value_iteration(scaled, 0.9)
        assert np.array_equal(pol1.actions, pol2.actions)

    def test_unvisited_states_keep_default_action(self):
        model = TransitionModel.empty(NOTTE5)
        empty = A(SchemeKind.NOTTE, 1, 5)
        record(model, empty, Action.EMPTY_LINE, empty, 0.7)
        value, policy = value_iteration(model, 0.9)
        defaults = default_actions(NOTTE5)
        for i, agg in enumerate(NOTTE5.states()):
            if agg == empty:
                continue
            assert value.values[i] == 0.0
            assert policy.actions[i] == defaults[i]


class TestAlgorithmA:
    def test_lossless_channel_learns_full_rate(self):
        cfg = ChannelConfig(k=3, loss=0.0, gamma=0.9, seed=5)
        res = algorithm_a(
            cfg,
            NOTTE3,
            LearningSchedule(slots_per_phase=2000, max_phases=6, min_phases=4),
        )
        visited = res.model.state_visits > 0
        recurrent_value = res.value.values[visited]
        assert np.all(recurrent_value <= 3 / (1 - 0.9) + 1e-9)
        gain = average_cost_eval(res.policy, cfg, NOTTE3, 5000, 2)
        assert gain.mean == 1.0

    def test_pure_exploration_visits_both_actions(self):
        cfg = ChannelConfig(k=3, loss=0.25, seed=6)
        sched = LearningSchedule(
            eps0=1.0, eps_decay=1.0, eps_min=1.0,
            slots_per_phase=4000, max_phases=4, min_phases=4,
        )
        res = algorithm_a(cfg, NOTTE3, sched)
        mask = feasibility_mask(NOTTE3)
        visited = res.model.pair_visits > 0
        two_action = mask.sum(axis=1) == 2
        assert np.all(visited[two_action].sum(axis=1) == 2)

    def test_pure_exploitation_follows_planned_policy(self):
        cfg = ChannelConfig(k=3, loss=0.25, seed=7)
        sched = LearningSchedule(
            eps0=0.0, eps_decay=0.5, eps_min=0.0,
            slots_per_phase=3000, max_phases=4, min_phases=2,
            least_visited_seeding=False,
        )
        res = algorithm_a(cfg, NOTTE3, sched)
        assert res.history.total_slots >= 6000

    def test_learned_value_matches_exact_oracle(self):
        from codedarq import oracle as orc

        cfg = ChannelConfig(k=3, loss=0.25, gamma=0.99, seed=8)
        sched = LearningSchedule(
            slots_per_phase=4000, max_phases=80, min_phases=60,
            eps_decay=0.97, eps_min=0.02, stop_tol=0.05, policy_stable_phases=30,
        )
        res = algorithm_a(cfg, NOTTE3, sched)
        space = orc.enumerate_detailed(3)
        sol = orc.exact_optimal(space, NOTTE3, 0.25, "discounted", gamma=0.99)
        scale = np.abs(sol.value.values).max()
        gap = np.abs(res.value.values - sol.value.values).max()
        assert gap <= 0.02 * scale

    def test_seeding_flag_disables_teleports(self):
        cfg = ChannelConfig(k=3, loss=0.25, seed=9)
        sched = LearningSchedule(
            slots_per_phase=500, max_phases=3, min_phases=3,
            least_visited_seeding=False,
        )
        res = algorithm_a(cfg, NOTTE3, sched)
        assert all(ph.seeded_state is None for ph in res.history.phases)

    def test_history_records_phases(self):
        cfg = ChannelConfig(k=3, loss=0.3, seed=10)
        sched = LearningSchedule(slots_per_phase=500, max_phases=4, min_phases=4)
        res = algorithm_a(cfg, NOTTE3, sched)
        assert len(res.history.phases) == 4
        assert res.history.total_slots == 2000
        assert [ph.epsilon for ph in res.history.phases] == [
            max(0.05, 0.7**k) for k in range(4)
        ]


class TestThresholdTools:
    def test_already_threshold_unchanged(self):
        pol = Policy(ONED5, np.array([2, 2, 1, 1, 1], dtype=np.int8))
        out = threshold_accelerate(pol, "L")
        assert np.array_equal(out.actions, pol.actions)

    def test_multi_switch_enforced_with_overwrite(self):
        pol = Policy(ONED5, np.array([2, 2, 1, 2, 1], dtype=np.int8))
        out = threshold_accelerate(pol, "L", overwrite=True)
        assert list(out.actions) == [2, 2, 1, 1, 1]

    def test_multi_switch_raises_without_overwrite(self):
        pol = Policy(ONED5, np.array([2, 2, 1, 2, 1], dtype=np.int8))
        with pytest.raises(AmbiguousSlice):
            threshold_accelerate(pol, "L")

    def test_fill_rule_along_empty_lines(self):
        sg = sg_abstract_policy(NOTTE5)
        noisy = sg.actions.copy()
        idx = NOTTE5.index(AggregatedState(SchemeKind.NOTTE, (2, 2)))
        noisy[idx] = 1
        out = threshold_accelerate(Policy(NOTTE5, noisy), "E", overwrite=True)
        assert np.array_equal(out.actions, sg.actions)

    def test_rule_policy_matches_semi_greedy(self):
        pol = threshold_rule_policy(NOTTE5, "E", 1, Action.CLIQUE, Action.EMPTY_LINE)
        assert np.array_equal(pol.actions, sg_abstract_policy(NOTTE5).actions)

    def test_rule_selection_certifies_coverage(self):
        with pytest.raises(NoData):
            select_threshold_rule(TransitionModel.empty(NOTTE5), "E")


class TestEvaluation:
    def test_uncoded_throughput(self):
        cfg = ChannelConfig(k=5, loss=0.25, seed=12)
        res = average_cost_eval(BaselinePolicy("uncoded"), cfg, NOTTE5, 50_000, 3)
        assert abs(res.mean - 0.75) < 0.01
        assert res.stderr < 0.01

    def test_lossless_exact(self):
        cfg = ChannelConfig(k=5, loss=0.0, seed=12)
        res = average_cost_eval(BaselinePolicy("uncoded"), cfg, NOTTE5, 2_000, 2)
        assert res.mean == 1.0

    def test_zero_budget_rejected(self):
        cfg = ChannelConfig(k=5, loss=0.0, seed=12)
        with pytest.raises(ValueError):
            average_cost_eval(BaselinePolicy("uncoded"), cfg, NOTTE5, 0, 0)

    def test_discounted_eval_matches_closed_form(self):
        cfg = ChannelConfig(k=5, loss=0.25, gamma=0.99, seed=12)
        res = discounted_value_eval(
            BaselinePolicy("uncoded"), cfg, NOTTE5, 50_000, 2
        )
        assert abs(res.mean - 75.0) < 1.0


class TestModelCheckpoint:
    def test_save_load_round_trip(self, tmp_path):
        cfg = ChannelConfig(k=3, loss=0.3, seed=13)
        sched = LearningSchedule(slots_per_phase=2000, max_phases=3, min_phases=3)
        res = algorithm_a(cfg, NOTTE3, sched)
        path = tmp_path / "model.json"
        res.model.save(path)
        loaded = TransitionModel.load(path)
        assert np.array_equal(loaded.counts, res.model.counts)
        assert np.allclose(
            loaded.rewards.sum(axis=2), res.model.rewards.sum(axis=2)
        )
        v1, p1 = value_iteration(res.model, 0.95)
        v2, p2 = value_iteration(loaded, 0.95)
        assert np.allclose(v1.values, v2.values)
        assert np.array_equal(p1.actions, p2.actions)

    def test_policy_save_load(self, tmp_path):
        pol = sg_abstract_policy(NOTTE5)
        path = tmp_path / "policy.json"
        pol.save(path)
        loaded = Policy.load(path)
        assert loaded.scheme == pol.scheme
        assert np.array_equal(loaded.actions, pol.actions)
