import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError

from core.error_handler import InvalidInputError
from core.session_log import (
    ClickReason, EventKind, RawEvent, attach_intents, dump_sessions, filter_sessions, load_sessions,
    pair_hovers, split_sessions,
)
from core.taxonomy import AnnotatorLabel, IntentLabel

MINUTE = 60_000


def ev(kind, ts, user="u1", **fields):
    return RawEvent(user_id=user, timestamp=ts, kind=kind, **fields)


def query(ts, text="loan fraud", user="u1", **fields):
    return ev(EventKind.QUERY_ISSUED, ts, user=user, query_text=text, **fields)


def click(ts, rank, user="u1", **fields):
    return ev(EventKind.RESULT_CLICK, ts, user=user, result_rank=rank, **fields)


def enter(ts, rank):
    return ev(EventKind.RESULT_HOVER_ENTER, ts, result_rank=rank)


def leave(ts, rank):
    return ev(EventKind.RESULT_HOVER_EXIT, ts, result_rank=rank)


class TestRawEvent:
    def test_rank_required_for_ranked_kinds(self):
        with pytest.raises(ValidationError):
            RawEvent(user_id="u1", timestamp=0, kind=EventKind.RESULT_CLICK)

    def test_query_text_only_on_queries(self):
        with pytest.raises(ValidationError):
            RawEvent(user_id="u1", timestamp=0, kind=EventKind.PAGE_LEAVE, query_text="x")


class TestSplitting:
    @pytest.mark.parametrize("gap_minutes,expected", [(29, 1), (30, 2), (31, 2)])
    def test_idle_gap(self, gap_minutes, expected):
        report = split_sessions([query(0), query(gap_minutes * MINUTE)])
        assert len(report.sessions) == expected
        assert report.n_queries == 2

    def test_users_split_independently(self):
        events = [query(0, user="a"), query(MINUTE, user="b"), query(2 * MINUTE, user="a")]
        report = split_sessions(events)
        assert [s.user_id for s in report.sessions] == ["a", "b"]
        assert len(report.sessions[0].queries) == 2

    def test_threads_give_same_sessions(self):
        events = [query(i * MINUTE, user=f"u{i % 3}") for i in range(12)]
        assert split_sessions(events, threads=3).sessions == split_sessions(events, threads=1).sessions

    def test_unsorted_events(self):
        with pytest.raises(InvalidInputError):
            split_sessions([query(MINUTE), query(0)])

    def test_orphans_before_first_query(self):
        report = split_sessions([click(0, 1), query(1000)])
        assert report.orphan_events == 1
        assert len(report.sessions) == 1

    def test_chunk_without_query_dropped(self):
        report = split_sessions([click(0, 1), click(1000, 2)])
        assert report.sessions == []
        assert report.dropped_sessions == 1
        assert report.summary()["orphan_events"] == 2

    def test_query_owns_following_events(self):
        events = [
            query(0),
            ev(EventKind.SERP_PAGE_VIEW, 500, serp_page=1, payload={"doc_ids": ["d1", "d2"]}),
            click(1000, 2, doc_id="d2"),
            ev(EventKind.PAGE_LEAVE, 46_000),
            ev(EventKind.SERP_PAGE_VIEW, 50_000, serp_page=2, payload={"doc_ids": ["d9"]}),
            click(55_000, 11),
            ev(EventKind.EXPLICIT_FEEDBACK, 60_000,
               payload={"satisfaction": 4, "click_reasons": ["Authority", "Relevance"]}),
            query(70_000, text="theft"),
        ]
        first, second = split_sessions(events).sessions[0].queries
        assert [c.dwell_seconds for c in first.clicks] == [45.0, 5.0]
        assert first.clicks[0].doc_id == "d2"
        assert first.impressions == ((1, "d1"), (2, "d2"), (11, "d9"))
        assert first.pages_viewed == 2
        assert first.satisfaction == 4
        assert first.click_reasons == frozenset({ClickReason.RELEVANCE, ClickReason.AUTHORITY})
        assert first.serp_time_seconds == pytest.approx(70.0 - 50.0)
        assert first.end_time == 70_000
        assert second.query_text == "theft"
        assert second.clicks == ()

    def test_last_click_has_zero_dwell(self):
        session = split_sessions([query(0), click(1000, 1)]).sessions[0]
        assert session.queries[0].clicks[0].dwell_seconds == 0.0

    def test_trailing_click_dwell_runs_to_next_query(self):
        session = split_sessions([query(0), click(1000, 1), query(60_000, text="second one")]).sessions[0]
        first, second = session.queries
        assert first.clicks[0].dwell_seconds == pytest.approx(59.0)
        assert first.duration_seconds == pytest.approx(60.0)
        assert first.serp_time_seconds == pytest.approx(1.0)
        assert second.start_time == 60_000

    def test_task_intent_becomes_session_label(self):
        session = split_sessions([query(0, task_intent=IntentLabel.PENALTY)]).sessions[0]
        assert session.intent.value is IntentLabel.PENALTY

    def test_short_hovers_filtered(self):
        events = [query(0), enter(100, 1), leave(200, 1), enter(300, 2), leave(2300, 2)]
        report = split_sessions(events, hover_min_seconds=1.0)
        assert [h.rank for h in report.sessions[0].queries[0].hovers] == [2]
        assert report.short_hovers == 1


class TestPairHovers:
    def test_simple_pair(self):
        pairing = pair_hovers([enter(0, 3), leave(4, 3)], end_time=10)
        assert [(h.rank, h.enter_time, h.exit_time) for h in pairing.hovers] == [(3, 0, 4)]

    def test_nested_ranks(self):
        pairing = pair_hovers([enter(0, 1), enter(2, 2), leave(5, 2), leave(8, 1)], end_time=10)
        assert [(h.rank, h.enter_time, h.exit_time) for h in pairing.hovers] == [(1, 0, 8), (2, 2, 5)]

    def test_unmatched_enter_closed_at_end(self):
        pairing = pair_hovers([enter(3, 4)], end_time=20)
        assert [(h.rank, h.enter_time, h.exit_time) for h in pairing.hovers] == [(4, 3, 20)]

    def test_unmatched_exit_dropped(self):
        pairing = pair_hovers([leave(3, 4)], end_time=20)
        assert pairing.hovers == []
        assert pairing.unmatched_exits == 1


class TestSessionHelpers:
    def test_filter_by_longest_query(self):
        sessions = split_sessions([
            query(0, text="fraud", user="a"),
            query(0, text="fraud", user="b"), query(1000, text="loan fraud", user="b"),
        ]).sessions
        kept = filter_sessions(sessions, min_max_query_terms=2)
        assert [s.user_id for s in kept] == ["b"]

    def test_attach_intents(self):
        sessions = split_sessions([query(0, user="a"), query(0, user="b")]).sessions
        label = AnnotatorLabel(value=IntentLabel.CHARACTERIZATION)
        attached = attach_intents(sessions, {sessions[0].session_id: label})
        assert attached[0].intent == label
        assert attached[1].intent is None

    def test_jsonl_round_trip(self, tmp_path):
        events = [query(0), click(1000, 1), ev(EventKind.EXPLICIT_FEEDBACK, 9000,
                                               payload={"click_reasons": ["Region"]})]
        sessions = split_sessions(events).sessions
        path = tmp_path / "sessions.jsonl"
        dump_sessions(path, sessions)
        assert load_sessions(path) == sessions


STREAM_KINDS = [EventKind.QUERY_ISSUED, EventKind.RESULT_CLICK, EventKind.RESULT_HOVER_ENTER,
                EventKind.RESULT_HOVER_EXIT, EventKind.PAGE_LEAVE]


@st.composite
def interleaved_logs(draw, n_events=50):
    """兩位使用者交錯的隨機事件流，每位使用者內按時間排序"""
    clocks = {"a": 0, "b": 0}
    events = []
    for _ in range(n_events):
        user = draw(st.sampled_from(["a", "b"]))
        clocks[user] += draw(st.sampled_from([0, 500, 20_000, 10 * MINUTE, 40 * MINUTE]))
        kind = draw(st.sampled_from(STREAM_KINDS))
        if kind is EventKind.QUERY_ISSUED:
            events.append(query(clocks[user], text=draw(st.sampled_from(["fraud", "loan fraud"])), user=user))
        elif kind in (EventKind.RESULT_CLICK, EventKind.RESULT_HOVER_ENTER, EventKind.RESULT_HOVER_EXIT):
            events.append(ev(kind, clocks[user], user=user, result_rank=draw(st.integers(1, 4))))
        else:
            events.append(ev(kind, clocks[user], user=user))
    return events


class TestSplittingProperties:
    @settings(max_examples=60, deadline=None)
    @given(interleaved_logs())
    def test_matches_per_user_regrouping(self, events):
        report = split_sessions(events, hover_min_seconds=0.0)
        for session in report.sessions:
            assert {e.user_id for e in session.events} == {session.user_id}
        for user in ("a", "b"):
            alone = split_sessions([e for e in events if e.user_id == user], hover_min_seconds=0.0).sessions
            assert [s for s in report.sessions if s.user_id == user] == alone

    @settings(max_examples=60, deadline=None)
    @given(interleaved_logs())
    def test_resplitting_a_session_returns_it(self, events):
        for session in split_sessions(events, hover_min_seconds=0.0).sessions:
            assert split_sessions(list(session.events), hover_min_seconds=0.0).sessions == [session]

    @settings(max_examples=60, deadline=None)
    @given(interleaved_logs())
    def test_serp_time_and_dwell_fit_in_query_duration(self, events):
        for session in split_sessions(events, hover_min_seconds=0.0).sessions:
            for q in session.queries:
                dwell = sum(c.dwell_seconds for c in q.clicks)
                assert q.serp_time_seconds + dwell <= q.duration_seconds + 1.0
                assert all(c.dwell_seconds >= 0 for c in q.clicks)
