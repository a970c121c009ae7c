"""
行為指標
會話與查詢層級的行為度量、線上評估指標、點擊原因分佈，以及按意圖分組的顯著性檢定
"""
import logging
from collections import defaultdict
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from config import settings
from .error_handler import UndefinedStatisticError
from .session_log import CLICK_REASONS, ClickReason, QueryUnit, Session
from .stats import TestResult, anova_oneway, holm_bonferroni, kruskal_wallis, pearson, significance_stars
from .taxonomy import BASE_INTENTS, HierarchyLevel, hierarchy_group

logger = logging.getLogger(__name__)


class Scope(str, Enum):
    QUERY = "Query"
    SESSION = "Session"


SESSION_MEASURES = ("queries", "pages", "clicks", "hovers", "task_time", "pct_serp_time")
QUERY_MEASURES = (
    "search_depth", "min_click_rank", "avg_click_rank", "pct_sats_click",
    "min_hover_rank", "avg_hover_rank", "avg_hover_time", "p_click_given_hover", "avg_click_dwell",
)
ONLINE_METRICS = (
    "UCTR", "QCTR", "MaxRR", "MinRR", "MeanRR",
    "SumClickDwell", "AvgClickDwell", "QueryDwell", "TimeToFirstClick", "TimeToLastClick",
)

METRIC_REGISTRY = {
    Scope.SESSION: frozenset(SESSION_MEASURES),
    Scope.QUERY: frozenset(QUERY_MEASURES + ONLINE_METRICS),
}

# 行為度量分組，Holm 校正在組內進行
MEASURE_GROUPS: Dict[str, Tuple[str, ...]] = {
    "Task Events": ("queries", "pages", "search_depth"),
    "Click": ("clicks", "min_click_rank", "avg_click_rank", "pct_sats_click"),
    "Hover": ("hovers", "min_hover_rank", "avg_hover_rank", "avg_hover_time", "p_click_given_hover"),
    "Dwell Time": ("task_time", "pct_serp_time", "avg_click_dwell"),
}

ONLINE_METRIC_GROUPS: Dict[str, Tuple[str, ...]] = {
    "Click": ("UCTR", "QCTR", "MaxRR", "MinRR", "MeanRR"),
    "Dwell": ("SumClickDwell", "AvgClickDwell", "QueryDwell", "TimeToFirstClick", "TimeToLastClick"),
}


class MetricVector(BaseModel):
    """一組具名指標；未定義的值明確記為 None"""
    model_config = ConfigDict(frozen=True)

    scope: Scope
    values: Dict[str, Optional[float]]

    @model_validator(mode='after')
    def check_values(self) -> 'MetricVector':
        unknown = set(self.values) - METRIC_REGISTRY[self.scope]
        if unknown:
            raise ValueError(f"{self.scope.value} 層級沒有這些指標: {sorted(unknown)}")
        for name, value in self.values.items():
            if value is not None and not np.isfinite(value):
                raise ValueError(f"指標 {name} 不是有限值: {value}")
        return self

    def __getitem__(self, name: str) -> Optional[float]:
        return self.values[name]


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if len(values) else None


def session_measures(session: Session) -> MetricVector:
    """會話層級度量：查詢數、頁數、點擊數、懸停數、任務時間、SERP 時間比例"""
    task_time = session.task_time_seconds
    serp_time = sum(q.serp_time_seconds for q in session.queries)
    return MetricVector(scope=Scope.SESSION, values={
        "queries": float(len(session.queries)),
        "pages": float(sum(q.pages_viewed for q in session.queries)),
        "clicks": float(sum(len(q.clicks) for q in session.queries)),
        "hovers": float(sum(len(q.hovers) for q in session.queries)),
        "task_time": task_time,
        "pct_serp_time": serp_time / task_time if task_time > 0 else None,
    })


def query_measures(query: QueryUnit, sats_dwell_threshold_seconds: Optional[float] = None) -> MetricVector:
    """
    查詢層級度量

    沒有點擊時點擊排名、滿意點擊比例與平均停留時間為未定義；
    沒有懸停時懸停相關度量為未定義。P(click|hover) 以排名為單位計算。

    Args:
        query: 查詢單元
        sats_dwell_threshold_seconds: 滿意點擊的停留時間閾值

    Returns:
        查詢層級的 MetricVector
    """
    threshold = (settings.sats_dwell_threshold_seconds
                 if sats_dwell_threshold_seconds is None else sats_dwell_threshold_seconds)
    click_ranks = [c.rank for c in query.clicks]
    dwells = [c.dwell_seconds for c in query.clicks]
    hover_ranks = [h.rank for h in query.hovers]
    hovered = set(hover_ranks)

    return MetricVector(scope=Scope.QUERY, values={
        "search_depth": float(query.pages_viewed),
        "min_click_rank": float(min(click_ranks)) if click_ranks else None,
        "avg_click_rank": _mean(click_ranks),
        "pct_sats_click": sum(d >= threshold for d in dwells) / len(dwells) if dwells else None,
        "min_hover_rank": float(min(hover_ranks)) if hover_ranks else None,
        "avg_hover_rank": _mean(hover_ranks),
        "avg_hover_time": _mean([h.duration_seconds for h in query.hovers]),
        "p_click_given_hover": len(hovered & set(click_ranks)) / len(hovered) if hovered else None,
        "avg_click_dwell": _mean(dwells),
    })


def online_metrics(query: QueryUnit) -> MetricVector:
    """
    線上評估指標

    沒有點擊時 UCTR/QCTR 與倒數排名系列記為 0，點擊時間系列為未定義。
    """
    reciprocal = [1.0 / c.rank for c in query.clicks]
    dwells = [c.dwell_seconds for c in query.clicks]
    click_times = [c.click_time for c in query.clicks]
    return MetricVector(scope=Scope.QUERY, values={
        "UCTR": 1.0 if query.clicks else 0.0,
        "QCTR": float(len(query.clicks)),
        "MaxRR": max(reciprocal, default=0.0),
        "MinRR": min(reciprocal, default=0.0),
        "MeanRR": _mean(reciprocal) if reciprocal else 0.0,
        "SumClickDwell": float(sum(dwells)),
        "AvgClickDwell": _mean(dwells),
        "QueryDwell": query.duration_seconds,
        "TimeToFirstClick": (min(click_times) - query.start_time) / 1000.0 if click_times else None,
        "TimeToLastClick": (max(click_times) - query.start_time) / 1000.0 if click_times else None,
    })


def session_profile(session: Session, sats_dwell_threshold_seconds: Optional[float] = None) -> Dict[str, Optional[float]]:
    """
    會話的行為度量：會話層級度量直接取值，查詢層級度量取會話內有定義查詢的平均值
    """
    profile = dict(session_measures(session).values)
    per_query = [query_measures(q, sats_dwell_threshold_seconds) for q in session.queries]
    for name in QUERY_MEASURES:
        profile[name] = _mean([v[name] for v in per_query if v[name] is not None])
    return profile


def intent_key(session: Session) -> Optional[str]:
    if session.intent is None:
        return None
    return session.intent.value.value


def queries_by_intent(sessions: Sequence[Session]) -> Dict[str, List[QueryUnit]]:
    """依會話意圖簡碼把查詢分組；沒有意圖的會話略過"""
    grouped: Dict[str, List[QueryUnit]] = defaultdict(list)
    for session in sessions:
        key = intent_key(session)
        if key is not None:
            grouped[key].extend(session.queries)
    return dict(grouped)


class BehaviorRow(BaseModel):
    """行為差異表的一行"""
    group: str
    measure: str
    means: Dict[str, Optional[float]]
    counts: Dict[str, int]
    statistic: Optional[float] = None
    p_value: Optional[float] = None
    p_adjusted: Optional[float] = None
    stars: str = ""


def behavior_table(sessions: Sequence[Session], level: HierarchyLevel = HierarchyLevel.CRITERION1,
                   sats_dwell_threshold_seconds: Optional[float] = None,
                   alpha: Optional[float] = None) -> List[BehaviorRow]:
    """
    按意圖層級分組比較行為度量

    每個會話貢獻一個樣本（查詢層級度量先在會話內平均），各組取宏平均；
    以 Kruskal-Wallis 檢定組間差異，Holm 校正在每個度量分組內進行。

    Args:
        sessions: 帶意圖的會話
        level: intent（各基礎意圖）、criterion1（PC 對 Le）或 criterion3（Ch/Pe/Pr）
        sats_dwell_threshold_seconds: 滿意點擊閾值
        alpha: 顯著水準

    Returns:
        依固定分組與度量順序排列的行
    """
    alpha = settings.significance_alpha if alpha is None else alpha
    profiles: Dict[str, List[Dict[str, Optional[float]]]] = defaultdict(list)
    skipped = 0
    for session in sessions:
        group = hierarchy_group(session.intent.value, level) if session.intent is not None else None
        if group is None:
            skipped += 1
            continue
        profiles[group].append(session_profile(session, sats_dwell_threshold_seconds))
    if skipped:
        logger.info(f"{level.value} 層級略過 {skipped} 個沒有對應意圖的會話")

    if level is HierarchyLevel.INTENT:
        order = [i.value for i in BASE_INTENTS]
    elif level is HierarchyLevel.CRITERION1:
        order = ["PC", "Le"]
    else:
        order = ["Ch", "Pe", "Pr"]
    present = [g for g in order if profiles.get(g)]

    rows: List[BehaviorRow] = []
    for group_name, measures in MEASURE_GROUPS.items():
        group_rows = []
        for measure in measures:
            samples = {g: [p[measure] for p in profiles[g] if p[measure] is not None] for g in present}
            means = {g: _mean(samples[g]) for g in present}
            counts = {g: len(samples[g]) for g in present}
            row = BehaviorRow(group=group_name, measure=measure, means=means, counts=counts)
            testable = [samples[g] for g in present if samples[g]]
            if len(testable) >= 2 and sum(len(s) for s in testable) >= 3:
                result = kruskal_wallis(testable)
                row = row.model_copy(update={"statistic": result.statistic, "p_value": result.p_value})
            group_rows.append(row)

        tested = [i for i, row in enumerate(group_rows) if row.p_value is not None]
        if tested:
            adjusted = holm_bonferroni([group_rows[i].p_value for i in tested])
            for i, p_adj in zip(tested, adjusted):
                group_rows[i] = group_rows[i].model_copy(update={
                    "p_adjusted": float(p_adj), "stars": significance_stars(float(p_adj), alpha)})
        rows.extend(group_rows)
    return rows


class CorrelationCell(BaseModel):
    intent: str
    metric: str
    n: int
    r: Optional[float] = None
    p_value: Optional[float] = None
    significant: bool = False


def correlate_with_satisfaction(grouped: Mapping[str, Sequence[QueryUnit]],
                                star_alpha: float = 0.001) -> List[CorrelationCell]:
    """
    線上指標與 1-5 滿意度的 Pearson 相關

    只使用帶滿意度回饋的查詢；未定義的指標值成對排除。樣本不足或零變異時 r 留空。

    Args:
        grouped: 意圖簡碼 → 查詢
        star_alpha: 標記顯著的 p 值門檻

    Returns:
        每個 (意圖, 指標) 一格
    """
    cells = []
    for intent, queries in grouped.items():
        rated = [q for q in queries if q.satisfaction is not None]
        vectors = [online_metrics(q) for q in rated]
        for metric in ONLINE_METRICS:
            pairs = [(v[metric], q.satisfaction) for v, q in zip(vectors, rated) if v[metric] is not None]
            cell = CorrelationCell(intent=intent, metric=metric, n=len(pairs))
            if len(pairs) >= 3:
                x, y = zip(*pairs)
                try:
                    result = pearson(x, y)
                    cell = cell.model_copy(update={"r": result.statistic, "p_value": result.p_value,
                                                   "significant": result.p_value < star_alpha})
                except UndefinedStatisticError as e:
                    logger.debug(f"{intent}/{metric} 相關係數未定義: {e}")
            cells.append(cell)
    return cells


class ClickReasonReport(BaseModel):
    """每個意圖下選過各點擊原因的使用者比例，以及各原因的 ANOVA"""
    proportions: Dict[str, Dict[str, float]] = {}
    users: Dict[str, int] = {}
    anova: Dict[str, Optional[TestResult]] = {}


def click_reason_distribution(grouped: Mapping[str, Sequence[QueryUnit]]) -> ClickReasonReport:
    """
    點擊原因分佈

    比例 = 在該意圖下至少選過一次該原因的使用者數 / 該意圖下提供過點擊原因的使用者數；
    ANOVA 以每位使用者的 0/1 指標為樣本，比較各意圖。

    Args:
        grouped: 意圖簡碼 → 查詢（需帶 user_id 與 click_reasons）

    Returns:
        ClickReasonReport；沒有任何回饋時為空結果
    """
    selected: Dict[str, Dict[str, set]] = {}
    for intent, queries in grouped.items():
        per_user: Dict[str, set] = defaultdict(set)
        for query in queries:
            if query.click_reasons is not None:
                per_user[query.user_id] |= set(query.click_reasons)
        if per_user:
            selected[intent] = dict(per_user)

    if not selected:
        logger.warning("沒有任何點擊原因回饋，回傳空結果")
        return ClickReasonReport()

    indicators: Dict[str, Dict[ClickReason, List[float]]] = {}
    proportions: Dict[str, Dict[str, float]] = {}
    for intent, per_user in selected.items():
        users = sorted(per_user)
        indicators[intent] = {r: [1.0 if r in per_user[u] else 0.0 for u in users] for r in CLICK_REASONS}
        proportions[intent] = {r.value: float(np.mean(indicators[intent][r])) for r in CLICK_REASONS}

    anova: Dict[str, Optional[TestResult]] = {}
    for reason in CLICK_REASONS:
        groups = [indicators[intent][reason] for intent in selected if len(indicators[intent][reason]) >= 2]
        result = None
        if len(groups) >= 2:
            try:
                result = anova_oneway(groups)
            except UndefinedStatisticError as e:
                logger.debug(f"{reason.value} 的 ANOVA 未定義: {e}")
        anova[reason.value] = result

    return ClickReasonReport(proportions=proportions,
                             users={intent: len(per_user) for intent, per_user in selected.items()},
                             anova=anova)
