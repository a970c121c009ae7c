import numpy as np
import pytest
from pydantic import ValidationError

from core.behavior_metrics import (
    MEASURE_GROUPS, MetricVector, Scope, behavior_table, click_reason_distribution,
    correlate_with_satisfaction, online_metrics, queries_by_intent, query_measures, session_measures,
    session_profile,
)
from core.session_log import Click, ClickReason, Hover, QueryUnit, Session
from core.taxonomy import AnnotatorLabel, HierarchyLevel, IntentLabel


def make_query(qid="q", user="u1", start=0, end=100_000, clicks=(), hovers=(), pages=1,
               serp=0.0, satisfaction=None, reasons=None):
    return QueryUnit(
        query_id=qid, user_id=user, query_text="loan fraud", start_time=start, end_time=end,
        clicks=tuple(Click(rank=r, click_time=t, dwell_seconds=d) for r, t, d in clicks),
        hovers=tuple(Hover(rank=r, enter_time=a, exit_time=b) for r, a, b in hovers),
        pages_viewed=pages, serp_time_seconds=serp, satisfaction=satisfaction,
        click_reasons=frozenset(reasons) if reasons is not None else None,
    )


def make_session(sid, intent, queries, user="u1"):
    return Session(session_id=sid, user_id=user,
                   intent=AnnotatorLabel(value=intent) if intent is not None else None,
                   queries=tuple(queries))


@pytest.fixture
def rich_query():
    return make_query(
        start=1_000, end=101_000,
        clicks=[(2, 5_000, 45.0), (4, 60_000, 10.0)],
        hovers=[(1, 2_000, 3_000), (2, 3_000, 5_000), (3, 6_000, 9_000)],
        pages=2,
    )


class TestQueryMeasures:
    def test_example(self, rich_query):
        m = query_measures(rich_query, sats_dwell_threshold_seconds=30)
        assert m["min_click_rank"] == 2
        assert m["avg_click_rank"] == 3
        assert m["pct_sats_click"] == pytest.approx(0.5)
        assert m["p_click_given_hover"] == pytest.approx(1 / 3)
        assert m["min_hover_rank"] == 1
        assert m["avg_hover_time"] == pytest.approx(2.0)
        assert m["avg_click_dwell"] == pytest.approx(27.5)
        assert m["search_depth"] == 2

    def test_no_clicks_is_undefined(self):
        m = query_measures(make_query())
        assert m["min_click_rank"] is None
        assert m["pct_sats_click"] is None
        assert m["p_click_given_hover"] is None

    def test_unknown_metric_rejected(self):
        with pytest.raises(ValidationError):
            MetricVector(scope=Scope.SESSION, values={"UCTR": 1.0})


class TestOnlineMetrics:
    def test_reciprocal_ranks(self, rich_query):
        m = online_metrics(rich_query)
        assert m["MaxRR"] == pytest.approx(0.5)
        assert m["MinRR"] == pytest.approx(0.25)
        assert m["MeanRR"] == pytest.approx(0.375)
        assert m["UCTR"] == 1.0
        assert m["QCTR"] == 2.0
        assert m["SumClickDwell"] == pytest.approx(55.0)
        assert m["QueryDwell"] == pytest.approx(100.0)
        assert m["TimeToFirstClick"] == pytest.approx(4.0)
        assert m["TimeToLastClick"] == pytest.approx(59.0)

    def test_no_clicks(self):
        m = online_metrics(make_query())
        assert (m["UCTR"], m["QCTR"], m["MaxRR"], m["MeanRR"]) == (0.0, 0.0, 0.0, 0.0)
        assert m["AvgClickDwell"] is None
        assert m["TimeToFirstClick"] is None

    def test_reciprocal_ranks_match_direct_definition(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            ranks = rng.integers(1, 31, size=int(rng.integers(1, 8))).tolist()
            m = online_metrics(make_query(clicks=[(r, 1_000 * (i + 1), 5.0) for i, r in enumerate(ranks)]))
            assert abs(m["MaxRR"] - 1.0 / min(ranks)) <= 1e-9
            assert abs(m["MinRR"] - 1.0 / max(ranks)) <= 1e-9
            assert abs(m["MeanRR"] - sum(1.0 / r for r in ranks) / len(ranks)) <= 1e-9


class TestSessionMeasures:
    def test_counts_and_serp_share(self, rich_query):
        second = make_query(qid="q2", start=101_000, end=201_000, serp=50.0)
        session = make_session("s", IntentLabel.PENALTY, [rich_query.model_copy(update={"serp_time_seconds": 50.0}),
                                                          second])
        m = session_measures(session)
        assert m["queries"] == 2
        assert m["pages"] == 3
        assert m["clicks"] == 2
        assert m["hovers"] == 3
        assert m["task_time"] == pytest.approx(200.0)
        assert m["pct_serp_time"] == pytest.approx(0.5)

    def test_profile_averages_defined_queries(self, rich_query):
        session = make_session("s", IntentLabel.PENALTY, [rich_query, make_query(qid="q2", start=101_000)])
        profile = session_profile(session)
        assert profile["min_click_rank"] == 2
        assert profile["search_depth"] == pytest.approx(1.5)


def criterion1_sessions():
    sessions = []
    for i in range(6):
        queries = [make_query(qid=f"pc{i}", clicks=[(1, 1_000, 40.0)])]
        sessions.append(make_session(f"pc{i}", IntentLabel.PARTICULAR_CASE, queries, user=f"p{i}"))
    for i in range(6):
        queries = [make_query(qid=f"le{i}-{j}", start=j * 100_000, end=(j + 1) * 100_000,
                              clicks=[(5 + i % 3, j * 100_000 + 1_000, 20.0)]) for j in range(3)]
        intent = IntentLabel.CHARACTERIZATION if i % 2 else IntentLabel.PENALTY
        sessions.append(make_session(f"le{i}", intent, queries, user=f"l{i}"))
    sessions.append(make_session("none", None, [make_query()]))
    return sessions


class TestBehaviorTable:
    def test_rows_follow_measure_groups(self):
        rows = behavior_table(criterion1_sessions())
        assert [(r.group, r.measure) for r in rows] == [
            (group, measure) for group, measures in MEASURE_GROUPS.items() for measure in measures]

    def test_criterion1_difference(self):
        rows = {r.measure: r for r in behavior_table(criterion1_sessions(), alpha=0.05)}
        queries = rows["queries"]
        assert queries.means == {"PC": 1.0, "Le": 3.0}
        assert queries.counts == {"PC": 6, "Le": 6}
        assert queries.p_value < 0.01
        assert queries.p_adjusted >= queries.p_value
        assert queries.stars in ("*", "**", "***")
        assert rows["min_click_rank"].means["PC"] == 1.0

    def test_untestable_measure_left_blank(self):
        rows = {r.measure: r for r in behavior_table(criterion1_sessions())}
        hovers = rows["min_hover_rank"]
        assert hovers.counts == {"PC": 0, "Le": 0}
        assert hovers.p_value is None
        assert hovers.stars == ""

    def test_criterion3_groups(self):
        rows = behavior_table(criterion1_sessions(), level=HierarchyLevel.CRITERION3)
        assert set(rows[0].means) == {"Ch", "Pe"}

    def test_intent_groups(self):
        rows = {r.measure: r for r in behavior_table(criterion1_sessions(), level=HierarchyLevel.INTENT)}
        queries = rows["queries"]
        assert list(queries.means) == ["PC", "Ch", "Pe"]
        assert queries.means["PC"] == 1.0 and queries.means["Ch"] == 3.0
        assert queries.counts == {"PC": 6, "Ch": 3, "Pe": 3}
        assert queries.p_value is not None


class TestCorrelation:
    def test_perfect_click_count_correlation(self):
        queries = [make_query(qid=f"q{s}", satisfaction=s,
                              clicks=[(1, 1_000 + k, 10.0) for k in range(s)]) for s in range(1, 6)]
        cells = {c.metric: c for c in correlate_with_satisfaction({"Ch": queries})}
        assert cells["QCTR"].r == pytest.approx(1.0)
        assert cells["QCTR"].significant
        assert cells["UCTR"].r is None
        assert cells["QCTR"].n == 5

    def test_unrated_queries_ignored(self):
        cells = correlate_with_satisfaction({"Pe": [make_query(), make_query()]})
        assert all(c.n == 0 and c.r is None for c in cells)


class TestClickReasons:
    def test_user_level_proportions(self):
        grouped = {
            "Ch": [make_query(user="a", reasons=[ClickReason.DIVERSITY]),
                   make_query(user="a", reasons=[ClickReason.RELEVANCE]),
                   make_query(user="b", reasons=[ClickReason.RELEVANCE]),
                   make_query(user="c")],
            "Pe": [make_query(user="d", reasons=[ClickReason.RELEVANCE]),
                   make_query(user="e", reasons=[ClickReason.RELEVANCE, ClickReason.REGION])],
        }
        report = click_reason_distribution(grouped)
        assert report.users == {"Ch": 2, "Pe": 2}
        assert report.proportions["Ch"]["Diversity"] == pytest.approx(0.5)
        assert report.proportions["Ch"]["Relevance"] == pytest.approx(1.0)
        assert report.proportions["Pe"]["Region"] == pytest.approx(0.5)
        assert report.anova["Relevance"].statistic == 0.0
        assert report.anova["Diversity"].df == (1, 2)

    def test_no_feedback(self):
        assert click_reason_distribution({"Ch": [make_query()]}).proportions == {}


def test_queries_by_intent_skips_unlabelled():
    grouped = queries_by_intent(criterion1_sessions())
    assert set(grouped) == {"PC", "Ch", "Pe"}
    assert len(grouped["Ch"]) == 9
