"""
會話日誌
讀入原始互動事件，以閒置間隔切分會話，組裝以查詢為中心的會話模型，並套用過濾規則
"""
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, FrozenSet, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveInt, field_serializer, model_validator

from config import settings
from .artifact_store import read_jsonl, write_jsonl
from .error_handler import InvalidInputError
from .taxonomy import AnnotatorLabel, IntentLabel
from tools.text_features import tokenize

logger = logging.getLogger(__name__)


class EventKind(str, Enum):
    """原始事件類型"""
    QUERY_ISSUED = "QueryIssued"
    RESULT_CLICK = "ResultClick"
    RESULT_HOVER_ENTER = "ResultHoverEnter"
    RESULT_HOVER_EXIT = "ResultHoverExit"
    SERP_PAGE_VIEW = "SerpPageView"
    PAGE_LEAVE = "PageLeave"
    EXPLICIT_FEEDBACK = "ExplicitFeedback"


RANKED_KINDS = frozenset({EventKind.RESULT_CLICK, EventKind.RESULT_HOVER_ENTER, EventKind.RESULT_HOVER_EXIT})


class ClickReason(str, Enum):
    """點擊原因選項"""
    RELEVANCE = "Relevance"
    DIVERSITY = "Diversity"
    AUTHORITY = "Authority"
    TIMELINESS = "Timeliness"
    REGION = "Region"
    INSPIRATION = "Inspiration"
    RANKING = "Ranking"
    OTHERS = "Others"


CLICK_REASONS: Tuple[ClickReason, ...] = tuple(ClickReason)


class RawEvent(BaseModel):
    """一筆原始互動事件，時間戳為毫秒"""
    model_config = ConfigDict(frozen=True)

    user_id: str
    timestamp: int = Field(ge=0)
    kind: EventKind
    query_text: Optional[str] = None
    result_rank: Optional[PositiveInt] = None
    serp_page: Optional[PositiveInt] = None
    doc_id: Optional[str] = None
    task_intent: Optional[IntentLabel] = None
    payload: Optional[Dict[str, Any]] = None

    @model_validator(mode='after')
    def check_kind_fields(self) -> 'RawEvent':
        if (self.result_rank is not None) != (self.kind in RANKED_KINDS):
            raise ValueError(f"{self.kind.value} 事件的 result_rank 欄位不符合規則")
        if (self.query_text is not None) != (self.kind is EventKind.QUERY_ISSUED):
            raise ValueError(f"{self.kind.value} 事件的 query_text 欄位不符合規則")
        return self


class FeedbackPayload(BaseModel):
    """ExplicitFeedback 事件的內容"""
    satisfaction: Optional[int] = Field(default=None, ge=1, le=5)
    click_reasons: Optional[List[ClickReason]] = None


class Click(BaseModel):
    model_config = ConfigDict(frozen=True)

    rank: PositiveInt
    click_time: int
    dwell_seconds: float = Field(ge=0)
    doc_id: Optional[str] = None


class Hover(BaseModel):
    model_config = ConfigDict(frozen=True)

    rank: PositiveInt
    enter_time: int
    exit_time: int

    @property
    def duration_seconds(self) -> float:
        return (self.exit_time - self.enter_time) / 1000.0


class QueryUnit(BaseModel):
    """一次查詢及其擁有的點擊、懸停、翻頁與回饋"""
    model_config = ConfigDict(frozen=True)

    query_id: str
    user_id: str
    query_text: str
    start_time: int
    end_time: int
    clicks: Tuple[Click, ...] = ()
    hovers: Tuple[Hover, ...] = ()
    impressions: Tuple[Tuple[int, str], ...] = ()
    pages_viewed: PositiveInt = 1
    serp_time_seconds: float = Field(default=0.0, ge=0)
    satisfaction: Optional[int] = Field(default=None, ge=1, le=5)
    click_reasons: Optional[FrozenSet[ClickReason]] = None

    @field_serializer('click_reasons')
    def serialize_reasons(self, reasons: Optional[FrozenSet[ClickReason]]) -> Optional[List[str]]:
        if reasons is None:
            return None
        return [r.value for r in CLICK_REASONS if r in reasons]

    @model_validator(mode='after')
    def check_order(self) -> 'QueryUnit':
        if self.end_time < self.start_time:
            raise ValueError(f"查詢 {self.query_id} 的結束時間早於開始時間")
        if any(a.click_time > b.click_time for a, b in zip(self.clicks, self.clicks[1:])):
            raise ValueError(f"查詢 {self.query_id} 的點擊未按時間排序")
        if any(a.enter_time > b.enter_time for a, b in zip(self.hovers, self.hovers[1:])):
            raise ValueError(f"查詢 {self.query_id} 的懸停未按時間排序")
        return self

    @property
    def duration_seconds(self) -> float:
        return (self.end_time - self.start_time) / 1000.0


class Session(BaseModel):
    """以閒置間隔切出的搜尋會話；保留自身的原始事件以便重新切分"""
    model_config = ConfigDict(frozen=True)

    session_id: str
    user_id: str
    intent: Optional[AnnotatorLabel] = None
    queries: Tuple[QueryUnit, ...] = Field(min_length=1)
    events: Tuple[RawEvent, ...] = ()

    @property
    def start_time(self) -> int:
        return self.queries[0].start_time

    @property
    def end_time(self) -> int:
        return max(q.end_time for q in self.queries)

    @property
    def task_time_seconds(self) -> float:
        return (self.end_time - self.start_time) / 1000.0


class HoverPairing(NamedTuple):
    hovers: List[Hover]
    unmatched_exits: int


class SplitReport(BaseModel):
    """切分結果與計數"""
    sessions: List[Session]
    orphan_events: int = 0
    unmatched_hover_exits: int = 0
    short_hovers: int = 0
    dropped_sessions: int = 0

    @property
    def n_queries(self) -> int:
        return sum(len(s.queries) for s in self.sessions)

    def summary(self) -> Dict[str, int]:
        return {
            "sessions": len(self.sessions),
            "queries": self.n_queries,
            "orphan_events": self.orphan_events,
            "unmatched_hover_exits": self.unmatched_hover_exits,
            "short_hovers": self.short_hovers,
            "dropped_sessions": self.dropped_sessions,
        }


def pair_hovers(events: Sequence[RawEvent], end_time: int) -> HoverPairing:
    """
    配對懸停進入與離開事件

    每個離開事件配對同一排名上最近一個尚未配對的進入事件；
    查詢結束時仍未配對的進入事件在 end_time 關閉。

    Args:
        events: 單一查詢內按時間排序的事件（非懸停事件會被忽略）
        end_time: 查詢結束時間

    Returns:
        依進入時間排序的懸停區間，以及被丟棄的孤立離開事件數
    """
    open_enters: Dict[int, List[int]] = defaultdict(list)
    hovers: List[Hover] = []
    unmatched = 0
    for event in events:
        if event.kind is EventKind.RESULT_HOVER_ENTER:
            open_enters[event.result_rank].append(event.timestamp)
        elif event.kind is EventKind.RESULT_HOVER_EXIT:
            stack = open_enters.get(event.result_rank)
            if not stack:
                unmatched += 1
                continue
            hovers.append(Hover(rank=event.result_rank, enter_time=stack.pop(), exit_time=event.timestamp))

    for rank, stack in open_enters.items():
        for enter in stack:
            hovers.append(Hover(rank=rank, enter_time=enter, exit_time=max(end_time, enter)))

    if unmatched:
        logger.warning(f"丟棄 {unmatched} 個沒有對應進入事件的懸停離開事件")
    hovers.sort(key=lambda h: (h.enter_time, h.rank, h.exit_time))
    return HoverPairing(hovers, unmatched)


class _Counters:
    def __init__(self):
        self.orphan_events = 0
        self.unmatched_hover_exits = 0
        self.short_hovers = 0
        self.dropped_sessions = 0

    def merge(self, other: "_Counters"):
        self.orphan_events += other.orphan_events
        self.unmatched_hover_exits += other.unmatched_hover_exits
        self.short_hovers += other.short_hovers
        self.dropped_sessions += other.dropped_sessions


def _build_query(owned: List[RawEvent], next_query_time: Optional[int], query_id: str,
                 results_per_page: int, hover_min_seconds: float, counters: _Counters) -> QueryUnit:
    """
    由一個查詢擁有的事件建立 QueryUnit

    查詢在下一個查詢發出時結束；會話最後一個查詢在它的最後一個事件結束。
    點擊停留時間取到下一個事件（PageLeave、下一次點擊或下一個查詢），
    會話最後一個事件沒有後繼，停留記為 0。
    """
    head = owned[0]
    end_time = next_query_time if next_query_time is not None else owned[-1].timestamp

    clicks = []
    for i, event in enumerate(owned):
        if event.kind is not EventKind.RESULT_CLICK:
            continue
        if i + 1 < len(owned):
            successor = owned[i + 1].timestamp
        else:
            successor = next_query_time if next_query_time is not None else event.timestamp
        dwell = (successor - event.timestamp) / 1000.0
        clicks.append(Click(rank=event.result_rank, click_time=event.timestamp,
                            dwell_seconds=dwell, doc_id=event.doc_id))

    pairing = pair_hovers(owned, end_time)
    counters.unmatched_hover_exits += pairing.unmatched_exits
    hovers = [h for h in pairing.hovers if h.duration_seconds >= hover_min_seconds]
    counters.short_hovers += len(pairing.hovers) - len(hovers)

    pages_viewed = max((e.serp_page for e in owned if e.serp_page is not None), default=1)

    impressions: Dict[int, str] = {}
    satisfaction = None
    click_reasons = None
    for event in owned:
        if event.kind is EventKind.SERP_PAGE_VIEW and event.payload and event.payload.get("doc_ids"):
            page = event.serp_page or 1
            for offset, doc_id in enumerate(event.payload["doc_ids"]):
                impressions[(page - 1) * results_per_page + offset + 1] = str(doc_id)
        elif event.kind is EventKind.EXPLICIT_FEEDBACK and event.payload:
            feedback = FeedbackPayload.model_validate(event.payload)
            if feedback.satisfaction is not None:
                satisfaction = feedback.satisfaction
            if feedback.click_reasons is not None:
                click_reasons = frozenset(feedback.click_reasons)

    duration = (end_time - head.timestamp) / 1000.0
    serp_time = max(duration - sum(c.dwell_seconds for c in clicks), 0.0)

    return QueryUnit(
        query_id=query_id,
        user_id=head.user_id,
        query_text=head.query_text,
        start_time=head.timestamp,
        end_time=end_time,
        clicks=tuple(clicks),
        hovers=tuple(hovers),
        impressions=tuple(sorted(impressions.items())),
        pages_viewed=pages_viewed,
        serp_time_seconds=serp_time,
        satisfaction=satisfaction,
        click_reasons=click_reasons,
    )


def _build_session(chunk: List[RawEvent], results_per_page: int, hover_min_seconds: float,
                   counters: _Counters) -> Optional[Session]:
    first_query = next((i for i, e in enumerate(chunk) if e.kind is EventKind.QUERY_ISSUED), None)
    if first_query is None:
        counters.orphan_events += len(chunk)
        counters.dropped_sessions += 1
        return None
    counters.orphan_events += first_query
    kept = chunk[first_query:]

    session_id = f"{kept[0].user_id}:{kept[0].timestamp}"
    groups: List[List[RawEvent]] = []
    for event in kept:
        if event.kind is EventKind.QUERY_ISSUED:
            groups.append([])
        groups[-1].append(event)

    starts = [owned[0].timestamp for owned in groups[1:]] + [None]
    queries = tuple(
        _build_query(owned, next_start, f"{session_id}#{i}", results_per_page, hover_min_seconds, counters)
        for i, (owned, next_start) in enumerate(zip(groups, starts))
    )
    task_intent = next((e.task_intent for e in kept if e.task_intent is not None), None)
    intent = AnnotatorLabel(value=task_intent) if task_intent is not None else None
    return Session(session_id=session_id, user_id=kept[0].user_id, intent=intent,
                   queries=queries, events=tuple(kept))


def _split_user(events: List[RawEvent], gap_ms: float, results_per_page: int,
                hover_min_seconds: float) -> Tuple[List[Session], _Counters]:
    counters = _Counters()
    chunks: List[List[RawEvent]] = []
    for event in events:
        if not chunks or event.timestamp - chunks[-1][-1].timestamp >= gap_ms:
            chunks.append([])
        chunks[-1].append(event)

    sessions = []
    for chunk in chunks:
        session = _build_session(chunk, results_per_page, hover_min_seconds, counters)
        if session is not None:
            sessions.append(session)
    return sessions, counters


def split_sessions(events: Sequence[RawEvent], gap_minutes: Optional[float] = None,
                   results_per_page: Optional[int] = None,
                   hover_min_seconds: Optional[float] = None,
                   threads: Optional[int] = None) -> SplitReport:
    """
    以閒置間隔切分會話

    同一使用者內，與前一個事件的間隔 >= gap_minutes 時開始新會話；
    每個 QueryIssued 開啟一個新的查詢單元，擁有其後直到下一個查詢或會話結束的事件。
    會話中第一個查詢之前的事件會被丟棄並計數。

    Args:
        events: 每位使用者內按時間排序的事件（使用者之間可交錯）
        gap_minutes: 會話切分間隔（分鐘）
        results_per_page: 每頁結果數，用來把頁內位置換算為排名
        hover_min_seconds: 懸停的最短持續時間
        threads: 並行處理使用者的執行緒數

    Returns:
        SplitReport，會話依使用者首次出現順序與時間排列
    """
    gap_minutes = settings.session_gap_minutes if gap_minutes is None else gap_minutes
    results_per_page = results_per_page or settings.results_per_page
    hover_min_seconds = settings.hover_min_seconds if hover_min_seconds is None else hover_min_seconds
    threads = threads or settings.threads
    if gap_minutes <= 0:
        raise InvalidInputError(f"gap_minutes 必須為正數，收到 {gap_minutes}")

    by_user: Dict[str, List[RawEvent]] = {}
    for index, event in enumerate(events):
        user_events = by_user.setdefault(event.user_id, [])
        if user_events and event.timestamp < user_events[-1].timestamp:
            raise InvalidInputError(
                f"事件未按時間排序: 第 {index} 筆 (user={event.user_id}, ts={event.timestamp})")
        user_events.append(event)

    gap_ms = gap_minutes * 60_000

    def work(user_events: List[RawEvent]) -> Tuple[List[Session], _Counters]:
        return _split_user(user_events, gap_ms, results_per_page, hover_min_seconds)

    if threads > 1 and len(by_user) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(work, by_user.values()))
    else:
        results = [work(user_events) for user_events in by_user.values()]

    sessions: List[Session] = []
    totals = _Counters()
    for user_sessions, counters in results:
        sessions.extend(user_sessions)
        totals.merge(counters)

    if totals.orphan_events:
        logger.warning(f"丟棄 {totals.orphan_events} 個出現在會話首個查詢之前的事件")
    logger.info(f"切分出 {len(sessions)} 個會話，來自 {len(by_user)} 位使用者")
    return SplitReport(sessions=sessions, orphan_events=totals.orphan_events,
                       unmatched_hover_exits=totals.unmatched_hover_exits,
                       short_hovers=totals.short_hovers, dropped_sessions=totals.dropped_sessions)


def max_query_terms(session: Session, tokenizer: Optional[Callable[[str], List[str]]] = None) -> int:
    tokenizer = tokenizer or tokenize
    return max((len(tokenizer(q.query_text)) for q in session.queries), default=0)


def filter_sessions(sessions: Sequence[Session], min_max_query_terms: Optional[int] = None,
                    tokenizer: Optional[Callable[[str], List[str]]] = None) -> List[Session]:
    """
    過濾查詢過於模糊的會話

    保留最長查詢的詞項數 >= min_max_query_terms 的會話，並丟棄沒有查詢的會話。

    Args:
        sessions: 會話列表
        min_max_query_terms: 最長查詢的最少詞項數
        tokenizer: 分詞函數，預設使用 text_features.tokenize

    Returns:
        保留的會話
    """
    threshold = settings.min_max_query_terms if min_max_query_terms is None else min_max_query_terms
    kept = [s for s in sessions if s.queries and max_query_terms(s, tokenizer) >= threshold]
    dropped = len(sessions) - len(kept)
    if dropped:
        logger.info(f"過濾掉 {dropped} 個最長查詢少於 {threshold} 個詞項的會話")
    return kept


def attach_intents(sessions: Sequence[Session], labels: Mapping[str, AnnotatorLabel]) -> List[Session]:
    """以 session_id 對應聚合後的標註意圖，沒有標註的會話保持原樣"""
    attached = []
    missing = 0
    for session in sessions:
        label = labels.get(session.session_id)
        if label is None:
            missing += 1
            attached.append(session)
        else:
            attached.append(session.model_copy(update={"intent": label}))
    if missing:
        logger.warning(f"{missing} 個會話沒有對應的意圖標註")
    return attached


def load_events(path: Union[str, Path]) -> List[RawEvent]:
    return read_jsonl(path, RawEvent)


def load_sessions(path: Union[str, Path]) -> List[Session]:
    return read_jsonl(path, Session)


def dump_sessions(path: Union[str, Path], sessions: Sequence[Session]):
    write_jsonl(path, sessions)
