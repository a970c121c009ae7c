from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from core.behavior_metrics import QUERY_MEASURES, SESSION_MEASURES, behavior_table, session_profile
from core.error_handler import ArtifactVersionError, InvalidInputError
from core.session_log import EventKind, split_sessions
from core.taxonomy import HierarchyLevel, IntentLabel
from tools.synthgen import (
    RANK_SUPPORT, _expected_click_given_hover, _expected_min, allocate, check_mix, conflict_relevance_functions,
    generate_confounded_satisfaction, generate_ranking_data, generate_satisfaction, generate_sessions,
    indicator_relevance, load_profiles, percentile_relevance, relevance_from_id, truncated_geometric,
)
from tools.text_features import CONTENT_FEATURES

PROFILE = Path(__file__).resolve().parent.parent / "profiles" / "paper_tables.json"
PC, CH, PE, PR, IN = (IntentLabel.PARTICULAR_CASE, IntentLabel.CHARACTERIZATION, IntentLabel.PENALTY,
                      IntentLabel.PROCEDURE, IntentLabel.INTEREST)


@pytest.fixture(scope="module")
def profiles():
    return load_profiles(PROFILE)


class TestProfiles:
    def test_default_profile_file(self, profiles):
        assert set(profiles.profiles) == {PC, CH, PE, PR}
        assert sum(profiles.intent_mix.values()) == pytest.approx(1.0, abs=1e-3)
        assert profiles.profiles[CH].relevance_function == "+avg_tf"

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "profiles.json"
        path.write_text(PROFILE.read_text(encoding="utf-8").replace('"format_version": 1', '"format_version": 3'),
                        encoding="utf-8")
        with pytest.raises(ArtifactVersionError):
            load_profiles(path)

    def test_infeasible_dwell(self, profiles):
        values = profiles.profiles[CH].model_dump()
        values.update(click_dwell_mean=5.0, sats_click_rate=0.9)
        with pytest.raises(ValidationError):
            type(profiles.profiles[CH]).model_validate(values)

    def test_serp_share_leaves_no_think_time(self, profiles):
        values = profiles.profiles[PC].model_dump()
        values.update(serp_time_share=0.05)
        with pytest.raises(ValidationError):
            type(profiles.profiles[PC]).model_validate(values)

    @pytest.mark.parametrize("intent", [PC, CH, PE, PR])
    def test_expected_measures(self, profiles, intent):
        profile = profiles.profiles[intent]
        expected = profile.expected_measures(30.0)
        assert list(expected) == list(SESSION_MEASURES + QUERY_MEASURES)
        assert expected["pct_serp_time"] == pytest.approx(profile.serp_time_share)
        assert expected["pct_sats_click"] == pytest.approx(profile.sats_click_rate)
        assert expected["avg_click_rank"] == profile.click_rank_mean
        assert 1.0 <= expected["min_click_rank"] <= profile.click_rank_mean
        assert 0.0 < expected["p_click_given_hover"] < 1.0
        assert expected["task_time"] > 0


class TestDistributions:
    @pytest.mark.parametrize("mean", [1.2, 3.0, 5.5, 8.0])
    def test_truncated_geometric_mean(self, mean):
        pmf = truncated_geometric(mean)
        assert pmf.shape == (RANK_SUPPORT,)
        assert pmf.sum() == pytest.approx(1.0)
        assert pmf @ np.arange(1, RANK_SUPPORT + 1) == pytest.approx(mean, abs=1e-9)

    def test_truncated_geometric_range(self):
        with pytest.raises(InvalidInputError):
            truncated_geometric(RANK_SUPPORT)

    def test_expected_min_point_mass(self):
        pmf = np.zeros(RANK_SUPPORT)
        pmf[3] = 1.0
        assert _expected_min(pmf, 2.0) == pytest.approx(4.0)

    def test_expected_min_and_click_given_hover_by_simulation(self):
        rng = np.random.default_rng(0)
        hover_pmf = np.array([0.5, 0.3, 0.2])
        click_pmf = np.array([0.6, 0.3, 0.1])
        hover_rate, click_rate = 2.0, 1.0
        mins, ratios = [], []
        for _ in range(40_000):
            hovers = rng.choice(3, size=rng.poisson(hover_rate), p=hover_pmf)
            clicks = rng.choice(3, size=rng.poisson(click_rate), p=click_pmf)
            if hovers.size:
                mins.append(hovers.min() + 1)
                hovered = set(hovers.tolist())
                ratios.append(len(hovered & set(clicks.tolist())) / len(hovered))
        assert _expected_min(hover_pmf, hover_rate) == pytest.approx(np.mean(mins), abs=0.02)
        assert _expected_click_given_hover(hover_pmf, click_pmf, hover_rate, click_rate) == pytest.approx(
            np.mean(ratios), abs=0.01)


class TestMix:
    def test_codes_accepted(self):
        assert check_mix({"Ch": 0.5, "Pe": 0.5}, [CH, PE]) == {CH: 0.5, PE: 0.5}

    @pytest.mark.parametrize("mix", [
        {"Ch": 0.5, "Pe": 0.4},
        {"Ch": 1.2, "Pe": -0.2},
        {"Ch": 0.5, "In": 0.5},
        {"Xx": 1.0},
    ])
    def test_invalid_mix(self, mix):
        with pytest.raises(InvalidInputError):
            check_mix(mix, [CH, PE])

    def test_allocate_largest_remainder(self):
        assert allocate({PC: 0.5, CH: 0.5}, 3) == [PC, PC, CH]
        assert allocate({CH: 0.7, PR: 0.3}, 10).count(PR) == 3


class TestSessionGenerator:
    def test_deterministic_and_thread_independent(self, profiles):
        a = generate_sessions(profiles, 30, seed=11)
        b = generate_sessions(profiles, 30, seed=11, threads=4)
        assert a == b
        assert a != generate_sessions(profiles, 30, seed=12)

    def test_single_intent_mix(self, profiles):
        events = generate_sessions(profiles, 25, {"Ch": 1.0}, seed=1)
        sessions = split_sessions(events).sessions
        assert len(sessions) == 25
        assert {s.intent.value for s in sessions} == {CH}

    def test_sessions_survive_resplitting(self, profiles):
        events = generate_sessions(profiles, 40, seed=2, n_users=4)
        report = split_sessions(events)
        assert len(report.sessions) == 40
        assert report.orphan_events == 0
        assert report.unmatched_hover_exits == 0

    def test_event_structure(self, profiles):
        events = generate_sessions(profiles, 5, seed=3)
        kinds = [e.kind for e in events]
        assert kinds[0] is EventKind.QUERY_ISSUED
        assert kinds[1] is EventKind.SERP_PAGE_VIEW
        assert kinds.count(EventKind.QUERY_ISSUED) == kinds.count(EventKind.EXPLICIT_FEEDBACK)
        assert kinds.count(EventKind.RESULT_CLICK) == kinds.count(EventKind.PAGE_LEAVE)
        for query in split_sessions(events).sessions[0].queries:
            assert 1 <= query.satisfaction <= 5
            assert len(query.impressions) == 10 * query.pages_viewed

    def test_zero_sessions(self, profiles):
        assert generate_sessions(profiles, 0, seed=1) == []

    def test_missing_mix(self, profiles):
        with pytest.raises(InvalidInputError):
            generate_sessions(profiles.profiles, 5, seed=1)

    def test_satisfaction_instances(self, profiles):
        instances = generate_satisfaction(profiles, 40, {"Pe": 0.5, "Pr": 0.5}, seed=5)
        assert instances
        assert {i.intent for i in instances} == {PE, PR}
        assert {i.label for i in instances} <= {0, 1}

    @pytest.mark.slow
    @pytest.mark.parametrize("intent", [PC, CH, PE, PR])
    def test_calibration(self, profiles, intent):
        """
        每個度量的樣本均值落在剖面期望值的 5% 內

        task_time 與 clicks 的會話間變異大（點擊數為 Poisson、停留為對數常態），
        500 個會話時均值的標準誤約 4%，5% 容差只有約 1.2 個標準誤，換個種子就可能越界；
        3000 個會話時標準誤約 1.6%，容差超過 3 個標準誤。
        """
        profile = profiles.profiles[intent]
        sessions = split_sessions(generate_sessions(profiles, 3000, {intent: 1.0}, seed=21)).sessions
        expected = profile.expected_measures(30.0)
        rows = [session_profile(s, 30.0) for s in sessions]
        for name, value in expected.items():
            if name == "pct_serp_time":
                serp = sum(sum(q.serp_time_seconds for q in s.queries) for s in sessions)
                observed = serp / sum(s.task_time_seconds for s in sessions)
            else:
                observed = np.mean([r[name] for r in rows if r[name] is not None])
            assert observed == pytest.approx(value, rel=0.05), name

    @pytest.mark.slow
    def test_only_varied_measures_flagged(self, profiles):
        base = profiles.profiles[CH]
        variants = {intent: base.model_copy(update={"intent": intent, "click_rank_mean": mean})
                    for intent, mean in ((CH, 2.0), (PE, 3.5), (PR, 6.0))}
        events = generate_sessions(variants, 900, {CH: 1 / 3, PE: 1 / 3, PR: 1 / 3}, seed=8)
        rows = behavior_table(split_sessions(events).sessions, level=HierarchyLevel.CRITERION3)
        flagged = {row.measure for row in rows if row.stars}
        assert {"min_click_rank", "avg_click_rank"} <= flagged
        assert len(flagged - {"min_click_rank", "avg_click_rank", "p_click_given_hover"}) <= 1


class TestConfoundedSatisfaction:
    def test_shape(self):
        instances = generate_confounded_satisfaction(200, seed=1)
        assert len(instances) == 200
        assert instances[0].query_id == "cq00000"
        assert {i.intent for i in instances} <= {PC, CH, PE, PR}
        assert all(not any(i.imputed.values()) for i in instances)
        assert 0.2 < np.mean([i.label for i in instances]) < 0.8

    def test_deterministic(self):
        assert generate_confounded_satisfaction(50, seed=3) == generate_confounded_satisfaction(50, seed=3)


class TestRelevanceFunctions:
    def test_percentile(self):
        X = np.zeros((4, len(CONTENT_FEATURES)))
        X[:, 1] = [3.0, 1.0, 4.0, 2.0]
        np.testing.assert_allclose(percentile_relevance("avg_idf")(X), [0.75, 0.25, 1.0, 0.5])
        np.testing.assert_allclose(percentile_relevance("avg_idf", -1)(X), [0.5, 1.0, 0.25, 0.75])

    def test_indicator(self):
        X = np.zeros((4, len(CONTENT_FEATURES)))
        X[:, 0] = [3.0, 1.0, 4.0, 2.0]
        np.testing.assert_array_equal(indicator_relevance("avg_tf")(X), [1.0, 0.0, 1.0, 0.0])

    @pytest.mark.parametrize("function_id", ["avg_tf", "*avg_tf", "+pagerank", ""])
    def test_bad_function_id(self, function_id):
        with pytest.raises(InvalidInputError):
            relevance_from_id(function_id)

    def test_profile_functions(self, profiles):
        assert set(conflict_relevance_functions(profiles)) == {PC, CH, PE, PR}


class TestRankingGenerator:
    def test_deterministic(self):
        fns = conflict_relevance_functions()
        a, _ = generate_ranking_data(fns, 20, 6, seed=4)
        b, _ = generate_ranking_data(fns, 20, 6, seed=4)
        assert a == b

    def test_noise_free_indicator_labels(self):
        fn = indicator_relevance("avg_tf")
        instances, _ = generate_ranking_data({CH: fn}, 15, 8, noise=0.0, seed=6)
        by_query = {}
        for i in instances:
            by_query.setdefault(i.query_id, []).append(i)
        for rows in by_query.values():
            X = np.array([r.features for r in rows])
            assert [r.relevance for r in rows] == fn(X).astype(int).tolist()
            assert len(rows) == 8

    def test_features_match_corpus(self):
        instances, corpus = generate_ranking_data({PR: percentile_relevance("bm25")}, 5, 4, seed=2)
        assert all(i.doc_id in corpus for i in instances)
        assert all(i.intent is PR for i in instances)

    def test_all_zero_relevance(self):
        with pytest.raises(InvalidInputError):
            generate_ranking_data({CH: lambda X: np.zeros(len(X))}, 5, 4, noise=0.0, seed=1)

    def test_out_of_range_relevance(self):
        with pytest.raises(InvalidInputError):
            generate_ranking_data({CH: lambda X: np.full(len(X), 2.0)}, 5, 4, seed=1)

    @pytest.mark.parametrize("kwargs", [{"noise": 1.5}, {"docs_per_query": 0}])
    def test_invalid_arguments(self, kwargs):
        arguments = {"n_queries": 5, "docs_per_query": 4, "seed": 1, **kwargs}
        with pytest.raises(InvalidInputError):
            generate_ranking_data(conflict_relevance_functions(), **arguments)

    def test_unsupported_intent(self):
        with pytest.raises(InvalidInputError):
            generate_ranking_data({IN: indicator_relevance("avg_tf")}, 5, 4, seed=1)
