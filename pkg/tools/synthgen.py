"""
合成資料產生器
依各意圖的行為剖面產生原始互動日誌、排序資料集與滿意度資料集，
所有隨機性都來自以 (seed, 索引) 劃分的確定性亂數流
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import brentq
from scipy.special import expit
from scipy.stats import norm, rankdata

from config import settings
from core.artifact_store import ArtifactStore
from core.behavior_metrics import QUERY_MEASURES, SESSION_MEASURES
from core.error_handler import InvalidInputError
from core.session_log import CLICK_REASONS, ClickReason, EventKind, RawEvent, split_sessions
from core.taxonomy import IntentLabel
from .ltr import RANKING_INTENTS, RankingInstance
from .satisfaction import FEATURE_GROUPS, SatInstance, build_instances
from .text_features import CONTENT_FEATURES, Corpus, feature_rows

logger = logging.getLogger(__name__)

PROFILE_FORMAT_VERSION = 1
RANK_SUPPORT = 10
# 滿意點擊比例在這個停留時間閾值上校準
SATS_CALIBRATION_SECONDS = 30.0
SATISFACTION_CUTPOINTS = (-1.5, -0.5, 0.5, 1.5)
SESSION_GAP_RANGE_MINUTES = (31.0, 240.0)
_EPOCH_MS = 1_600_000_000_000

_QUERY_VOCABULARY: Dict[IntentLabel, Tuple[str, ...]] = {
    IntentLabel.PARTICULAR_CASE: ("案號", "判決書", "原告", "被告", "法院", "民事", "裁定", "上訴"),
    IntentLabel.CHARACTERIZATION: ("構成要件", "罪名", "認定", "故意", "過失", "詐騙", "竊盜", "侵權"),
    IntentLabel.PENALTY: ("量刑", "刑期", "緩刑", "罰金", "有期徒刑", "減刑", "賠償金額", "累犯"),
    IntentLabel.PROCEDURE: ("管轄", "時效", "強制執行", "上訴期間", "訴訟費用", "證據保全", "送達", "再審"),
    IntentLabel.INTEREST: ("新聞", "案例", "評論", "熱點", "法律", "事件", "分析", "報導"),
}


def truncated_geometric(mean: float, support: int = RANK_SUPPORT) -> np.ndarray:
    """
    擬合 1..support 上平均值為 mean 的截斷幾何分佈

    Returns:
        長度為 support 的機率向量
    """
    if not 1.0 < mean < support:
        raise InvalidInputError(f"截斷幾何分佈的平均值必須在 (1, {support}) 之間，收到 {mean}")
    ranks = np.arange(1, support + 1)

    def pmf(theta: float) -> np.ndarray:
        weights = np.exp((ranks - 1) * math.log(theta))
        return weights / weights.sum()

    theta = brentq(lambda t: float(pmf(t) @ ranks) - mean, 1e-6, 1e6, xtol=1e-14)
    return pmf(theta)


def _expected_min(pmf: np.ndarray, rate: float) -> float:
    """Poisson(rate) 個獨立排名（至少一個）的最小值期望"""
    survival = pmf[::-1].cumsum()[::-1]
    empty = math.exp(-rate)
    return float(np.sum(np.exp(rate * (survival - 1.0)) - empty) / (1.0 - empty))


def _expected_click_given_hover(hover_pmf: np.ndarray, click_pmf: np.ndarray,
                                hover_rate: float, click_rate: float) -> float:
    """
    以子集合枚舉計算 P(click|hover) 的期望

    被懸停排名集合 U 的分佈由 P(U ⊆ S) = exp(λ_h (g(S) - 1)) 做 Möbius 反演得到；
    給定 U，每個排名被點擊的機率為 1 - exp(-λ_c f_r)。
    """
    n = len(hover_pmf)
    masks = np.arange(1 << n)
    members = (masks[:, None] >> np.arange(n)) & 1
    mass = members @ hover_pmf
    exact = np.exp(hover_rate * (mass - 1.0))
    for bit in range(n):
        with_bit = masks[(masks >> bit) & 1 == 1]
        exact[with_bit] -= exact[with_bit ^ (1 << bit)]
    clicked = 1.0 - np.exp(-click_rate * click_pmf)
    sizes = members.sum(axis=1)
    nonempty = sizes > 0
    ratio = (members[nonempty] @ clicked) / sizes[nonempty]
    return float(exact[nonempty] @ ratio / (1.0 - math.exp(-hover_rate)))


class IntentProfile(BaseModel):
    """
    單一意圖的行為剖面

    計數、排名、停留與懸停時間的平均值直接作為產生器參數；
    頁數、最小排名、P(click|hover)、任務時間等由這些參數推導，見 expected_measures。
    """
    model_config = ConfigDict(frozen=True)

    intent: IntentLabel
    queries_per_session: float = Field(ge=1)
    pages_per_query: float = Field(ge=1)
    clicks_per_session: float = Field(gt=0)
    hovers_per_session: float = Field(gt=0)
    click_rank_mean: float = Field(gt=1, lt=RANK_SUPPORT)
    hover_rank_mean: float = Field(gt=1, lt=RANK_SUPPORT)
    click_dwell_mean: float = Field(gt=0)
    sats_click_rate: float = Field(gt=0, lt=1)
    hover_time_mean: float = Field(gt=0)
    hover_time_sigma: float = Field(default=0.5, gt=0)
    serp_time_share: float = Field(gt=0, lt=1)
    sat_intercept: float = 0.0
    sat_dwell_weight: float = 1.0
    click_reason_rates: Dict[ClickReason, float] = {}
    relevance_function: Optional[str] = None
    reported: Dict[str, float] = {}

    @model_validator(mode='after')
    def check_feasible(self) -> 'IntentProfile':
        for reason, rate in self.click_reason_rates.items():
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"點擊原因 {reason.value} 的比例必須在 [0, 1] 之間")
        self.dwell_lognormal()
        if self.think_time_mean <= 0:
            raise ValueError(f"{self.intent.value}: 懸停時間已超過 SERP 時間比例所允許的範圍")
        return self

    @property
    def clicks_per_query(self) -> float:
        return self.clicks_per_session / self.queries_per_session

    @property
    def hovers_per_query(self) -> float:
        return self.hovers_per_session / self.queries_per_session

    def dwell_lognormal(self) -> Tuple[float, float]:
        """
        求滿足平均值與 P(dwell >= 30s) 的對數常態參數

        Returns:
            (mu, sigma)
        """
        z = norm.ppf(1.0 - self.sats_click_rate)
        disc = z * z + 2.0 * math.log(self.click_dwell_mean / SATS_CALIBRATION_SECONDS)
        sigma = z + math.sqrt(disc) if disc >= 0 else -1.0
        if sigma <= 0:
            raise ValueError(f"{self.intent.value}: 平均停留 {self.click_dwell_mean}s 與滿意點擊比例 "
                             f"{self.sats_click_rate} 無法同時滿足")
        return math.log(self.click_dwell_mean) - sigma * sigma / 2.0, sigma

    def hover_lognormal(self) -> Tuple[float, float]:
        sigma = self.hover_time_sigma
        return math.log(self.hover_time_mean) - sigma * sigma / 2.0, sigma

    @property
    def think_time_mean(self) -> float:
        """每個查詢在懸停之外的 SERP 瀏覽時間平均值"""
        share = self.serp_time_share
        dwell = self.clicks_per_query * self.click_dwell_mean
        return share / (1.0 - share) * dwell - self.hovers_per_query * self.hover_time_mean

    def click_rank_pmf(self) -> np.ndarray:
        return truncated_geometric(self.click_rank_mean)

    def hover_rank_pmf(self) -> np.ndarray:
        return truncated_geometric(self.hover_rank_mean)

    def expected_measures(self, sats_dwell_threshold_seconds: Optional[float] = None) -> Dict[str, float]:
        """
        每個行為度量的期望值

        查詢層級度量是「有定義查詢」上的條件期望；SERP 時間比例為期望值之比。
        """
        threshold = (settings.sats_dwell_threshold_seconds
                     if sats_dwell_threshold_seconds is None else sats_dwell_threshold_seconds)
        mu, sigma = self.dwell_lognormal()
        click_pmf, hover_pmf = self.click_rank_pmf(), self.hover_rank_pmf()
        q = self.queries_per_session
        serp = q * self.think_time_mean + self.hovers_per_session * self.hover_time_mean
        task = serp + self.clicks_per_session * self.click_dwell_mean
        expected = {
            "queries": q,
            "pages": q * self.pages_per_query,
            "clicks": self.clicks_per_session,
            "hovers": self.hovers_per_session,
            "task_time": task,
            "pct_serp_time": serp / task,
            "search_depth": self.pages_per_query,
            "min_click_rank": _expected_min(click_pmf, self.clicks_per_query),
            "avg_click_rank": self.click_rank_mean,
            "pct_sats_click": float(norm.sf((math.log(threshold) - mu) / sigma)) if threshold > 0 else 1.0,
            "min_hover_rank": _expected_min(hover_pmf, self.hovers_per_query),
            "avg_hover_rank": self.hover_rank_mean,
            "avg_hover_time": self.hover_time_mean,
            "p_click_given_hover": _expected_click_given_hover(hover_pmf, click_pmf, self.hovers_per_query,
                                                               self.clicks_per_query),
            "avg_click_dwell": self.click_dwell_mean,
        }
        return {name: expected[name] for name in SESSION_MEASURES + QUERY_MEASURES}


class ProfileSet(BaseModel):
    """剖面檔內容：各意圖剖面與預設意圖比例"""
    profiles: Dict[IntentLabel, IntentProfile]
    intent_mix: Dict[IntentLabel, float] = {}
    satisfaction_cutpoints: Tuple[float, float, float, float] = SATISFACTION_CUTPOINTS


def load_profiles(path: Union[str, Path]) -> ProfileSet:
    """讀取剖面檔（kind = intent_profiles）"""
    document = ArtifactStore("intent_profiles", PROFILE_FORMAT_VERSION).load(path)
    profiles = [IntentProfile.model_validate(p) for p in document.get("profiles", [])]
    by_intent = {p.intent: p for p in profiles}
    if len(by_intent) != len(profiles):
        raise InvalidInputError(f"剖面檔 {path} 有重複的意圖")
    profile_set = ProfileSet(profiles=by_intent, intent_mix=document.get("intent_mix", {}),
                             satisfaction_cutpoints=document.get("satisfaction_cutpoints", SATISFACTION_CUTPOINTS))
    logger.info(f"載入 {len(by_intent)} 個意圖剖面: {[i.value for i in by_intent]}")
    return profile_set


def check_mix(intent_mix: Mapping[Union[IntentLabel, str], float],
              available: Sequence[IntentLabel]) -> Dict[IntentLabel, float]:
    """驗證意圖比例：非負、總和為 1、且每個意圖都有剖面"""
    mix = {}
    for key, weight in intent_mix.items():
        intent = key if isinstance(key, IntentLabel) else IntentLabel.from_code(key)
        if weight < 0 or not math.isfinite(weight):
            raise InvalidInputError(f"意圖 {intent.value} 的比例無效: {weight}")
        if weight > 0 and intent not in available:
            raise InvalidInputError(f"意圖 {intent.value} 沒有對應的剖面")
        mix[intent] = float(weight)
    total = sum(mix.values())
    if abs(total - 1.0) > 1e-6:
        raise InvalidInputError(f"意圖比例總和必須為 1，目前為 {total:.6f}")
    return {intent: w for intent, w in mix.items() if w > 0}


def allocate(mix: Mapping[IntentLabel, float], n: int) -> List[IntentLabel]:
    """最大餘數法把 n 個名額分給各意圖，順序依意圖定義順序"""
    intents = [i for i in IntentLabel if i in mix]
    quotas = np.array([mix[i] * n for i in intents])
    counts = np.floor(quotas).astype(int)
    remainder = n - counts.sum()
    order = np.lexsort((np.arange(len(intents)), -(quotas - counts)))
    counts[order[:remainder]] += 1
    return [intent for intent, count in zip(intents, counts) for _ in range(count)]


def _query_text(intent: IntentLabel, rng: np.random.Generator) -> str:
    vocabulary = _QUERY_VOCABULARY[intent]
    n_terms = int(rng.integers(2, 5))
    return " ".join(vocabulary[i] for i in rng.choice(len(vocabulary), size=n_terms, replace=False))


def _session_events(profile: IntentProfile, index: int, seed: int, cutpoints: Sequence[float],
                    results_per_page: int) -> Tuple[float, List[dict]]:
    """
    產生一個會話的事件（相對時間，毫秒）

    Returns:
        (與前一會話的間隔分鐘數, 事件欄位字典列表)
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    gap_minutes = float(rng.uniform(*SESSION_GAP_RANGE_MINUTES))
    dwell_mu, dwell_sigma = profile.dwell_lognormal()
    hover_mu, hover_sigma = profile.hover_lognormal()
    click_pmf, hover_pmf = profile.click_rank_pmf(), profile.hover_rank_pmf()
    intent = profile.intent

    events: List[dict] = []
    clock = 0.0

    def emit(kind: EventKind, at: float, **fields):
        events.append({"kind": kind, "timestamp": int(round(at * 1000.0)), **fields})

    n_queries = 1 + int(rng.poisson(profile.queries_per_session - 1.0))
    for k in range(n_queries):
        n_pages = 1 + int(rng.poisson(profile.pages_per_query - 1.0))
        click_ranks = rng.choice(RANK_SUPPORT, size=int(rng.poisson(profile.clicks_per_query)), p=click_pmf) + 1
        hover_ranks = rng.choice(RANK_SUPPORT, size=int(rng.poisson(profile.hovers_per_query)), p=hover_pmf) + 1
        dwells = rng.lognormal(dwell_mu, dwell_sigma, size=len(click_ranks))
        hover_times = rng.lognormal(hover_mu, hover_sigma, size=len(hover_ranks))
        think = float(rng.exponential(profile.think_time_mean))
        query_text = _query_text(intent, rng)

        actions = ([("hover", i) for i in range(len(hover_ranks))]
                   + [("click", i) for i in range(len(click_ranks))]
                   + [("page", p) for p in range(2, n_pages + 1)])
        order = rng.permutation(len(actions))
        segments = rng.dirichlet(np.ones(len(actions) + 1)) * think

        def doc_id(rank: int, page: int = 1) -> str:
            return f"d{index:05d}.{k}.{(page - 1) * results_per_page + rank:03d}"

        emit(EventKind.QUERY_ISSUED, clock, query_text=query_text, task_intent=intent)
        emit(EventKind.SERP_PAGE_VIEW, clock, serp_page=1,
             payload={"doc_ids": [doc_id(r) for r in range(1, results_per_page + 1)]})
        clock += segments[0]
        for step, position in enumerate(order, 1):
            action, i = actions[position]
            if action == "hover":
                rank = int(hover_ranks[i])
                emit(EventKind.RESULT_HOVER_ENTER, clock, result_rank=rank, doc_id=doc_id(rank))
                clock += hover_times[i]
                emit(EventKind.RESULT_HOVER_EXIT, clock, result_rank=rank, doc_id=doc_id(rank))
            elif action == "click":
                rank = int(click_ranks[i])
                emit(EventKind.RESULT_CLICK, clock, result_rank=rank, doc_id=doc_id(rank))
                clock += dwells[i]
                emit(EventKind.PAGE_LEAVE, clock)
            else:
                emit(EventKind.SERP_PAGE_VIEW, clock, serp_page=i,
                     payload={"doc_ids": [doc_id(r, i) for r in range(1, results_per_page + 1)]})
            clock += segments[step]

        latent = (profile.sat_intercept + profile.sat_dwell_weight * math.log1p(float(dwells.sum()) / 60.0)
                  + rng.normal())
        feedback = {"satisfaction": 1 + int(np.searchsorted(cutpoints, latent))}
        if len(click_ranks):
            draws = rng.random(len(CLICK_REASONS))
            feedback["click_reasons"] = [reason.value for reason, u in zip(CLICK_REASONS, draws)
                                         if u < profile.click_reason_rates.get(reason, 0.0)]
        emit(EventKind.EXPLICIT_FEEDBACK, clock, payload=feedback)

    return gap_minutes, events


def generate_sessions(profiles: Union[ProfileSet, Mapping[IntentLabel, IntentProfile]], n_sessions: int,
                      intent_mix: Optional[Mapping[Union[IntentLabel, str], float]] = None,
                      seed: Optional[int] = None, n_users: Optional[int] = None,
                      threads: Optional[int] = None) -> List[RawEvent]:
    """
    產生原始互動日誌

    第 i 個會話使用 SeedSequence([seed, i]) 的亂數流，與並行度無關；
    同一使用者的相鄰會話間隔 31 到 240 分鐘，重新切分不會改變會話邊界。

    Args:
        profiles: 剖面集合或 {意圖: 剖面}
        n_sessions: 會話數
        intent_mix: 意圖比例，預設取剖面檔中的比例
        seed: 隨機種子
        n_users: 使用者數，會話以輪替方式分配
        threads: 並行產生的執行緒數

    Returns:
        每位使用者內按時間排序的 RawEvent 列表
    """
    seed = settings.seed if seed is None else seed
    threads = threads or settings.threads
    cutpoints = SATISFACTION_CUTPOINTS
    if isinstance(profiles, ProfileSet):
        cutpoints = profiles.satisfaction_cutpoints
        intent_mix = intent_mix if intent_mix is not None else profiles.intent_mix
        profiles = profiles.profiles
    if n_sessions < 0:
        raise InvalidInputError(f"會話數不能為負: {n_sessions}")
    if intent_mix is None:
        raise InvalidInputError("需要提供意圖比例")
    mix = check_mix(intent_mix, list(profiles))
    n_users = n_users or max(1, n_sessions // 5)

    assigned = allocate(mix, n_sessions)
    shuffle = np.random.default_rng(np.random.SeedSequence([seed])).permutation(n_sessions)
    intents = [assigned[i] for i in shuffle]
    results_per_page = settings.results_per_page

    def work(index: int) -> Tuple[float, List[dict]]:
        return _session_events(profiles[intents[index]], index, seed, cutpoints, results_per_page)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            generated = list(executor.map(work, range(n_sessions)))
    else:
        generated = [work(index) for index in range(n_sessions)]

    events: List[RawEvent] = []
    for user in range(n_users):
        user_id = f"u{user:04d}"
        clock = _EPOCH_MS + user * 1000
        for index in range(user, n_sessions, n_users):
            gap_minutes, relative = generated[index]
            if index != user:
                clock += int(round(gap_minutes * 60_000))
            start = clock
            for fields in relative:
                events.append(RawEvent(user_id=user_id, **{**fields, "timestamp": start + fields["timestamp"]}))
            clock = start + relative[-1]["timestamp"]

    counts = {i.value: intents.count(i) for i in mix}
    logger.info(f"產生 {n_sessions} 個會話、{len(events)} 個事件，意圖分佈 {counts}")
    return events


def generate_satisfaction(profiles: Union[ProfileSet, Mapping[IntentLabel, IntentProfile]], n_sessions: int,
                          intent_mix: Optional[Mapping[Union[IntentLabel, str], float]] = None,
                          seed: Optional[int] = None) -> List[SatInstance]:
    """產生日誌、切分會話並抽取滿意度樣本；滿意度只依賴點擊停留時間"""
    events = generate_sessions(profiles, n_sessions, intent_mix, seed)
    return build_instances(split_sessions(events).sessions)


def generate_confounded_satisfaction(n: int, seed: Optional[int] = None,
                                     strength: float = 3.0) -> List[SatInstance]:
    """
    建構特徵與滿意度關係隨意圖反轉的資料集

    PC/Ch 上平均點擊停留越長越滿意，Pe/Pr 上相反；其他特徵與意圖、標籤皆無關。
    忽略意圖的模型只能看到互相抵消的混合關係。

    Args:
        n: 樣本數
        seed: 隨機種子
        strength: 標準化停留時間的 logit 係數

    Returns:
        SatInstance 列表，每個樣本自成一個會話
    """
    seed = settings.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, n]))
    signs = {IntentLabel.PARTICULAR_CASE: 1.0, IntentLabel.CHARACTERIZATION: 1.0,
             IntentLabel.PENALTY: -1.0, IntentLabel.PROCEDURE: -1.0}
    intents = [RANKING_INTENTS[i] for i in rng.integers(0, len(RANKING_INTENTS), size=n)]

    log_dwell = rng.normal(math.log(40.0), 0.8, size=n)
    z = (log_dwell - math.log(40.0)) / 0.8
    labels = rng.random(n) < expit(np.array([signs[i] for i in intents]) * strength * z)

    instances = []
    for j in range(n):
        clicks = 1 + int(rng.poisson(1.0))
        ranks = rng.integers(1, RANK_SUPPORT + 1, size=clicks)
        hovers = 1 + int(rng.poisson(6.0))
        hover_ranks = rng.integers(1, RANK_SUPPORT + 1, size=hovers)
        terms = int(rng.integers(2, 6))
        dwell = float(math.exp(log_dwell[j]))
        features = {
            "num_clicks": float(clicks),
            "ctr": len(set(ranks)) / RANK_SUPPORT,
            "max_rr": float(1.0 / ranks.min()),
            "min_rr": float(1.0 / ranks.max()),
            "mean_rr": float(np.mean(1.0 / ranks)),
            "num_hovers": float(hovers),
            "p_click_given_hover": len(set(hover_ranks) & set(ranks)) / len(set(hover_ranks)),
            "avg_skipped_between_hovers": float(np.mean(np.maximum(np.abs(np.diff(hover_ranks)) - 1, 0)))
            if hovers > 1 else 0.0,
            "max_hover_rank": float(hover_ranks.max()),
            "min_hover_rank": float(hover_ranks.min()),
            "mean_hover_rank": float(hover_ranks.mean()),
            "serp_dwell": float(rng.exponential(30.0)),
            "landing_dwell": dwell * clicks,
            "time_to_first_click": float(rng.exponential(10.0)),
            "avg_hover_dwell": float(rng.lognormal(0.8, 0.5)),
            "avg_click_dwell": dwell,
            "query_length_chars": float(terms * 3 + rng.integers(0, 4)),
            "num_query_terms": float(terms),
            "unique_term_ratio": 1.0,
            "visited_pages": float(1 + rng.poisson(0.3)),
        }
        instances.append(SatInstance(query_id=f"cq{j:05d}", session_id=f"cs{j:05d}", features=features,
                                     imputed={group: False for group in FEATURE_GROUPS},
                                     intent=intents[j], label=int(labels[j])))
    return instances


RelevanceFn = Callable[[np.ndarray], np.ndarray]


def percentile_relevance(feature: str, sign: int = 1) -> RelevanceFn:
    """點擊機率為某特徵在查詢內的百分位（sign < 0 時反向）"""
    index = CONTENT_FEATURES.index(feature)

    def relevance(features: np.ndarray) -> np.ndarray:
        column = features[:, index] if sign > 0 else -features[:, index]
        return rankdata(column) / len(column)
    return relevance


def indicator_relevance(feature: str) -> RelevanceFn:
    """特徵高於查詢內中位數時必定點擊"""
    index = CONTENT_FEATURES.index(feature)

    def relevance(features: np.ndarray) -> np.ndarray:
        column = features[:, index]
        return (column > np.median(column)).astype(float)
    return relevance


def relevance_from_id(function_id: str) -> RelevanceFn:
    """解析 "+avg_tf"、"-tfidf_cosine" 形式的百分位函數代號"""
    sign, feature = function_id[:1], function_id[1:]
    if not sign or sign not in "+-" or feature not in CONTENT_FEATURES:
        raise InvalidInputError(f"無法解析相關度函數: {function_id!r}")
    return percentile_relevance(feature, 1 if sign == "+" else -1)


def conflict_relevance_functions(profiles: Optional[ProfileSet] = None) -> Dict[IntentLabel, RelevanceFn]:
    """
    各意圖互相衝突的相關度函數

    預設 PC 偏好低 tfidf_cosine、Ch 偏好高 avg_tf、Pe 偏好低 avg_tf、Pr 偏好高 tfidf_cosine；
    給定剖面時改用剖面中的 relevance_function。
    """
    if profiles is not None:
        return {intent: relevance_from_id(p.relevance_function)
                for intent, p in profiles.profiles.items()
                if p.relevance_function and intent in RANKING_INTENTS}
    return {
        IntentLabel.PARTICULAR_CASE: percentile_relevance("tfidf_cosine", -1),
        IntentLabel.CHARACTERIZATION: percentile_relevance("avg_tf", 1),
        IntentLabel.PENALTY: percentile_relevance("avg_tf", -1),
        IntentLabel.PROCEDURE: percentile_relevance("tfidf_cosine", 1),
    }


def synthetic_corpus(n_documents: int, vocabulary_size: int, rng: np.random.Generator) -> Corpus:
    """Zipf 詞頻的合成語料，詞項為 t0000 形式"""
    weights = 1.0 / np.arange(1, vocabulary_size + 1)
    weights /= weights.sum()
    corpus = Corpus()
    for i in range(n_documents):
        length = 30 + int(rng.poisson(50))
        terms = rng.choice(vocabulary_size, size=length, p=weights)
        corpus.add_document(f"d{i:05d}", [f"t{t:04d}" for t in terms])
    return corpus.freeze()


def generate_ranking_data(relevance_fns: Mapping[IntentLabel, RelevanceFn], n_queries: int,
                          docs_per_query: int, noise: float = 0.1, seed: Optional[int] = None,
                          intent_mix: Optional[Mapping[Union[IntentLabel, str], float]] = None,
                          vocabulary_size: int = 400) -> Tuple[List[RankingInstance], Corpus]:
    """
    產生排序資料集

    每個查詢的候選文檔取自包含查詢詞項的文檔，特徵由語料計算；
    點擊機率為 (1 - noise) * f(特徵) + noise * 0.5，f 為該意圖的相關度函數。
    沒有任何點擊的查詢被丟棄（與 labels_from_clicks 相同的規則）。

    Args:
        relevance_fns: {意圖: 特徵矩陣 → 點擊機率}
        n_queries: 查詢數
        docs_per_query: 每個查詢的候選文檔數
        noise: 雜訊比例，0 為完全依相關度函數
        seed: 隨機種子
        intent_mix: 意圖比例，預設在 relevance_fns 的意圖間平均分配
        vocabulary_size: 語料詞彙量

    Returns:
        (RankingInstance 列表, 語料)
    """
    seed = settings.seed if seed is None else seed
    if not relevance_fns:
        raise InvalidInputError("至少需要一個意圖的相關度函數")
    if not 0.0 <= noise <= 1.0:
        raise InvalidInputError(f"noise 必須在 [0, 1] 之間，收到 {noise}")
    if docs_per_query < 1:
        raise InvalidInputError(f"每個查詢至少需要一個候選文檔，收到 {docs_per_query}")
    unsupported = [i.value for i in relevance_fns if i not in RANKING_INTENTS]
    if unsupported:
        raise InvalidInputError(f"排序資料只支援 PC/Ch/Pe/Pr，收到 {unsupported}")
    if intent_mix is None:
        intent_mix = {intent: 1.0 / len(relevance_fns) for intent in relevance_fns}
    mix = check_mix(intent_mix, list(relevance_fns))

    master = np.random.default_rng(np.random.SeedSequence([seed]))
    corpus = synthetic_corpus(max(500, docs_per_query * 20), vocabulary_size, master)
    postings: Dict[str, List[str]] = {}
    for doc_id, tf in corpus.documents.items():
        for term in tf:
            postings.setdefault(term, []).append(doc_id)
    all_docs = sorted(corpus.documents)
    assigned = allocate(mix, n_queries)
    intents = [assigned[i] for i in master.permutation(n_queries)]
    # 避開最常見與最罕見的詞項
    query_terms_pool = [f"t{t:04d}" for t in range(min(20, vocabulary_size // 4), min(200, vocabulary_size))]

    instances: List[RankingInstance] = []
    peak: Dict[IntentLabel, float] = {intent: 0.0 for intent in mix}
    dropped = 0
    for index, intent in enumerate(intents):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1, index]))
        n_terms = int(rng.integers(2, 5))
        terms = [query_terms_pool[i] for i in rng.choice(len(query_terms_pool), size=n_terms, replace=False)]
        candidates = sorted({d for t in terms for d in postings.get(t, [])})
        if len(candidates) >= docs_per_query:
            docs = [candidates[i] for i in rng.choice(len(candidates), size=docs_per_query, replace=False)]
        else:
            taken = set(candidates)
            others = [d for d in all_docs if d not in taken]
            extra = rng.choice(len(others), size=docs_per_query - len(candidates), replace=False)
            docs = candidates + [others[i] for i in extra]
        X = np.asarray(feature_rows(terms, docs, corpus), dtype=float)
        f = np.asarray(relevance_fns[intent](X), dtype=float)
        if f.shape != (len(docs),) or not np.all((f >= 0.0) & (f <= 1.0)):
            raise InvalidInputError(f"意圖 {intent.value} 的相關度函數必須為每個文檔回傳 [0, 1] 內的機率")
        peak[intent] = max(peak[intent], float(f.max()))
        clicks = rng.random(len(docs)) < (1.0 - noise) * f + noise * 0.5
        if not clicks.any():
            dropped += 1
            continue
        query_id = f"rq{index:05d}"
        for doc_id, row, clicked in zip(docs, X, clicks):
            instances.append(RankingInstance(query_id=query_id, doc_id=doc_id, features=tuple(row),
                                             relevance=int(clicked), intent=intent))

    degenerate = [intent.value for intent, value in peak.items() if value == 0.0 and intents.count(intent)]
    if degenerate:
        raise InvalidInputError(f"相關度函數在所有文檔上都是 0: {degenerate}")
    logger.info(f"產生 {n_queries - dropped} 個排序查詢、{len(instances)} 個樣本；丟棄 {dropped} 個無點擊查詢")
    return instances, corpus
