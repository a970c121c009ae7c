import numpy as np
import pytest

from core.boosting import BoostParams
from core.error_handler import InvalidInputError, UnsupportedIntentError
from core.session_log import Click, QueryUnit, Session
from core.taxonomy import AggregateLabel, AnnotatorLabel, IntentLabel
from tools import ltr
from tools.ltr import (
    METRICS, IntentAwareRanker, RankingInstance, compare_modes, cross_validate, dump_instances, evaluate,
    intent_aware_score, labels_from_clicks, load_instances, load_ranker, qrels_of, save_ranker, train,
    trec_run_lines,
)
from tools.rankers import LtrParams
from tools.synthgen import conflict_relevance_functions, generate_ranking_data, indicator_relevance
from tools.text_features import Corpus

FAST = LtrParams(boost=BoostParams(n_trees=30, learning_rate=0.2, max_depth=3, min_samples_leaf=2),
                 adarank_max_rounds=30, rankboost_rounds=50)


def instance(qid, doc, rel, intent=IntentLabel.CHARACTERIZATION, features=(0.0,) * 5):
    return RankingInstance(query_id=qid, doc_id=doc, features=features, relevance=rel, intent=intent)


@pytest.fixture(scope="module")
def conflict_data():
    instances, _ = generate_ranking_data(conflict_relevance_functions(), n_queries=120, docs_per_query=10,
                                         noise=0.1, seed=3)
    return instances


class TestLabelsFromClicks:
    @pytest.fixture
    def corpus(self):
        return Corpus.from_texts({"d1": "loan fraud", "d2": "fraud sentence", "d3": "theft"})

    def session(self, sid, intent, clicks):
        query = QueryUnit(query_id=f"{sid}#0", user_id="u", query_text="loan fraud", start_time=0,
                          end_time=10_000, impressions=((1, "d1"), (2, "d2"), (3, "d3")),
                          clicks=tuple(Click(rank=r, click_time=1_000 * r, dwell_seconds=5.0) for r in clicks))
        return Session(session_id=sid, user_id="u", intent=intent, queries=(query,))

    def test_clicked_results_are_relevant(self, corpus):
        sessions = [self.session("s1", AnnotatorLabel(value=IntentLabel.PENALTY), [2])]
        instances = labels_from_clicks(sessions, corpus)
        assert [(i.doc_id, i.relevance) for i in instances] == [("d1", 0), ("d2", 1), ("d3", 0)]
        assert {i.intent for i in instances} == {IntentLabel.PENALTY}
        assert instances[0].features[0] == pytest.approx(1.0)

    def test_excluded_sessions_and_unclicked_queries(self, corpus):
        multi = AnnotatorLabel(value=AggregateLabel.MULTI, explanation="unclear")
        sessions = [
            self.session("s1", multi, [1]),
            self.session("s2", AnnotatorLabel(value=IntentLabel.INTEREST), [1]),
            self.session("s3", AnnotatorLabel(value=IntentLabel.PROCEDURE), []),
            self.session("s4", None, [1]),
        ]
        assert labels_from_clicks(sessions, corpus) == []


class TestIntentAwareRanker:
    @pytest.fixture
    def rankers(self, conflict_data):
        by_intent = {}
        for intent in (IntentLabel.PARTICULAR_CASE, IntentLabel.CHARACTERIZATION,
                       IntentLabel.PENALTY, IntentLabel.PROCEDURE):
            by_intent[intent] = train("AdaRank", [i for i in conflict_data if i.intent is intent], FAST)
        return by_intent

    def test_hard_indicator_uses_sub_ranker(self, rankers):
        mixture = IntentAwareRanker(rankers)
        X = np.random.default_rng(0).random((6, 5))
        np.testing.assert_array_equal(intent_aware_score(mixture, IntentLabel.PENALTY, X),
                                      rankers[IntentLabel.PENALTY].score(X))

    def test_soft_mixture(self, rankers):
        mixture = IntentAwareRanker(rankers)
        X = np.random.default_rng(1).random((4, 5))
        soft = mixture.score_soft(X, {IntentLabel.PARTICULAR_CASE: 0.25, IntentLabel.PROCEDURE: 0.75})
        expected = (0.25 * rankers[IntentLabel.PARTICULAR_CASE].score(X)
                    + 0.75 * rankers[IntentLabel.PROCEDURE].score(X))
        np.testing.assert_allclose(soft, expected)

    def test_soft_probabilities_must_sum_to_one(self, rankers):
        with pytest.raises(InvalidInputError):
            IntentAwareRanker(rankers).score_soft(np.zeros((1, 5)), {IntentLabel.PENALTY: 0.5})

    def test_shared_ranker_matches_agnostic_scores(self, rankers):
        shared = IntentAwareRanker.shared(rankers[IntentLabel.CHARACTERIZATION])
        X = np.random.default_rng(2).random((5, 5))
        for intent in (IntentLabel.PARTICULAR_CASE, IntentLabel.PROCEDURE):
            np.testing.assert_array_equal(shared.score(X, intent),
                                          rankers[IntentLabel.CHARACTERIZATION].score(X))

    def test_missing_sub_ranker(self, rankers):
        partial = {k: v for k, v in rankers.items() if k is not IntentLabel.PROCEDURE}
        with pytest.raises(InvalidInputError):
            IntentAwareRanker(partial)

    def test_unsupported_intent(self, rankers):
        with pytest.raises(UnsupportedIntentError):
            IntentAwareRanker(rankers).score(np.zeros((1, 5)), IntentLabel.INTEREST)

    def test_saved_ranker_scores_identically(self, rankers, tmp_path):
        path = tmp_path / "ranker.json"
        save_ranker(path, rankers[IntentLabel.PENALTY])
        X = np.random.default_rng(3).random((5, 5))
        np.testing.assert_array_equal(load_ranker(path).score(X), rankers[IntentLabel.PENALTY].score(X))


class TestEvaluate:
    def test_example_metrics(self):
        run = {"q": [("a", 0.9), ("b", 0.5), ("c", 0.1)]}
        result = evaluate(run, {"q": {"a": 1, "b": 0, "c": 1}})
        assert result.per_query["q"]["MAP"] == pytest.approx(5 / 6)
        assert result.per_query["q"]["NDCG@5"] == pytest.approx(0.9197, abs=1e-4)
        assert list(result.metrics) == list(METRICS)

    def test_ties_ordered_by_doc_id(self):
        result = evaluate({"q": [("b", 0.5), ("a", 0.5)]}, {"q": {"a": 1, "b": 0}})
        assert result.metrics["MAP"] == pytest.approx(1.0)

    def test_unjudged_query(self):
        with pytest.raises(InvalidInputError):
            evaluate({"q": [("a", 1.0)]}, {"r": {"a": 1}})

    def test_trec_lines(self):
        lines = trec_run_lines({"q2": [("x", 0.1), ("y", 0.7)], "q1": [("z", 1.0)]}, "aware")
        assert lines == [
            "q1 Q0 z 1 1.000000 aware",
            "q2 Q0 y 1 0.700000 aware",
            "q2 Q0 x 2 0.100000 aware",
        ]


class TestInstances:
    def test_relevance_must_be_binary(self):
        with pytest.raises(ValueError):
            instance("q", "a", 2)

    def test_duplicate_pairs_rejected(self):
        with pytest.raises(InvalidInputError):
            train("AdaRank", [instance("q", "a", 1), instance("q", "a", 0)])

    def test_unknown_algorithm(self):
        with pytest.raises(InvalidInputError):
            train("ListNet", [instance("q", "a", 1)])

    def test_jsonl(self, conflict_data, tmp_path):
        path = tmp_path / "instances.jsonl"
        dump_instances(path, conflict_data[:20])
        assert load_instances(path) == conflict_data[:20]

    def test_qrels(self):
        qrels = qrels_of([instance("q", "a", 1), instance("q", "b", 0), instance("r", "a", 0)])
        assert qrels == {"q": {"a": 1, "b": 0}, "r": {"a": 0}}


class TestCrossValidation:
    def test_forced_shared_is_identical_to_agnostic(self, conflict_data):
        base = cross_validate(conflict_data, "AdaRank", "agnostic", folds=3, seed=5, params=FAST)
        forced = cross_validate(conflict_data, "AdaRank", "aware", folds=3, seed=5, params=FAST,
                                force_shared=True)
        assert forced.metrics == base.metrics
        assert forced.per_query == base.per_query
        assert forced.run == base.run

    def test_every_query_tested_once(self, conflict_data):
        report = cross_validate(conflict_data, "RankBoost", "aware", folds=3, seed=5, params=FAST)
        assert set(report.per_query) == {i.query_id for i in conflict_data}
        assert report.folds == 3
        assert len(report.fold_metrics) == 3

    def test_threads_do_not_change_results(self, conflict_data):
        one = cross_validate(conflict_data, "AdaRank", "aware", folds=3, seed=5, params=FAST, threads=1)
        many = cross_validate(conflict_data, "AdaRank", "aware", folds=3, seed=5, params=FAST, threads=3)
        assert one.run == many.run

    def test_seed_reaches_every_trained_ranker(self, conflict_data, monkeypatch):
        seeds = []
        original = ltr.train

        def recording_train(algorithm, instances, params=None, seed=None):
            seeds.append(seed)
            return original(algorithm, instances, params, seed=seed)

        monkeypatch.setattr(ltr, "train", recording_train)
        cross_validate(conflict_data, "LambdaMART", "aware", folds=3, seed=11, params=FAST, threads=1)
        assert seeds
        assert set(seeds) == {11}

    def test_subsampled_lambdamart_depends_on_seed(self, conflict_data):
        params = FAST.model_copy(update={"boost": FAST.boost.model_copy(update={"subsample": 0.5})})
        X = np.array([i.features for i in conflict_data], dtype=float)
        a = train("LambdaMART", conflict_data, params, seed=11).score(X)
        b = train("LambdaMART", conflict_data, params, seed=11).score(X)
        c = train("LambdaMART", conflict_data, params, seed=12).score(X)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_unknown_mode(self, conflict_data):
        with pytest.raises(InvalidInputError):
            cross_validate(conflict_data, "AdaRank", "oracle")

    def test_two_intent_dataset(self):
        fns = {IntentLabel.CHARACTERIZATION: indicator_relevance("avg_tf"),
               IntentLabel.PROCEDURE: indicator_relevance("tfidf_cosine")}
        instances, _ = generate_ranking_data(fns, n_queries=60, docs_per_query=8, noise=0.0, seed=2)
        report = cross_validate(instances, "AdaRank", "aware", folds=3, seed=1, params=FAST)
        assert {i.intent for i in instances} == set(fns)
        assert 0.0 < report.metrics["NDCG@10"] <= 1.0

    @pytest.mark.slow
    def test_intent_aware_beats_agnostic_on_conflicting_data(self):
        instances, _ = generate_ranking_data(conflict_relevance_functions(), n_queries=400,
                                             docs_per_query=10, noise=0.1, seed=7)
        params = LtrParams(boost=BoostParams(n_trees=100, learning_rate=0.1, max_depth=4, min_samples_leaf=5),
                           rankboost_rounds=100)
        rows = compare_modes(instances, folds=5, seed=7, params=params)
        gains = {row.algorithm: row.aware["NDCG@5"] - row.base["NDCG@5"] for row in rows}
        assert set(gains) == {"AdaRank", "RankBoost", "LambdaMART"}
        assert all(gain > 0 for gain in gains.values())
        assert sum(gain >= 0.02 for gain in gains.values()) >= 2
