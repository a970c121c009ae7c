"""
意圖感知的排序學習
點擊標註、三種排序演算法的訓練、按意圖混合的排序器，以及交叉驗證評估
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from config import settings
from core.artifact_store import ArtifactStore, read_jsonl, write_jsonl
from core.error_handler import (FoldDegenerateError, InvalidInputError, UndefinedStatisticError,
                                UnsupportedIntentError)
from core.session_log import Session
from core.stats import paired_ttest
from core.taxonomy import IntentLabel
from .folds import Fold, stratified_group_folds, validation_split
from .rankers import (
    RANKERS, LtrParams, QueryGroups, Ranker, average_precision, ndcg_at_k, rank_order, ranker_from_body,
)
from .text_features import CONTENT_FEATURES, Bm25Params, Corpus, feature_rows, tokenize

logger = logging.getLogger(__name__)

# 排序實驗涵蓋的意圖；Interest、Others、Multi 的會話被排除
RANKING_INTENTS: Tuple[IntentLabel, ...] = (
    IntentLabel.PARTICULAR_CASE, IntentLabel.CHARACTERIZATION, IntentLabel.PENALTY, IntentLabel.PROCEDURE)

METRICS = ("NDCG@5", "NDCG@10", "NDCG@15", "MAP")
RANKER_FORMAT_VERSION = 1


class RankingInstance(BaseModel):
    """一個（查詢, 文檔）配對"""
    model_config = ConfigDict(frozen=True)

    query_id: str
    doc_id: str
    features: Tuple[float, float, float, float, float]
    relevance: int
    intent: IntentLabel
    session_id: Optional[str] = None

    @field_validator('relevance')
    @classmethod
    def check_relevance(cls, value: int) -> int:
        if value not in (0, 1):
            raise ValueError(f"相關度只能是 0 或 1，收到 {value}")
        return value

    @property
    def group_key(self) -> str:
        return self.session_id or self.query_id


def labels_from_clicks(sessions: Sequence[Session], corpus: Corpus,
                       bm25: Optional[Bm25Params] = None) -> List[RankingInstance]:
    """
    由點擊產生二元相關度標註

    被點擊的結果為相關，其餘曝光結果為不相關；沒有點擊的查詢被丟棄，
    意圖不屬於 PC/Ch/Pe/Pr（含 Multi、Others）的會話被排除。

    Args:
        sessions: 帶曝光列表與意圖的會話
        corpus: 計算內容特徵的語料
        bm25: BM25 參數

    Returns:
        RankingInstance 列表
    """
    instances: List[RankingInstance] = []
    excluded_sessions = 0
    dropped_queries = 0
    for session in sessions:
        intent = session.intent.value if session.intent is not None else None
        if intent not in RANKING_INTENTS:
            excluded_sessions += 1
            continue
        for query in session.queries:
            clicked_ranks = {c.rank for c in query.clicks}
            clicked_docs = {c.doc_id for c in query.clicks if c.doc_id is not None}
            terms = tokenize(query.query_text)
            seen = set()
            docs: List[Tuple[str, int]] = []
            for rank, doc_id in query.impressions:
                if doc_id in seen:
                    continue
                seen.add(doc_id)
                docs.append((doc_id, int(rank in clicked_ranks or doc_id in clicked_docs)))
            if not terms or not any(rel for _, rel in docs):
                dropped_queries += 1
                continue
            rows = feature_rows(terms, [doc_id for doc_id, _ in docs], corpus, bm25)
            for (doc_id, rel), row in zip(docs, rows):
                instances.append(RankingInstance(query_id=query.query_id, doc_id=doc_id, features=tuple(row),
                                                 relevance=rel, intent=intent, session_id=session.session_id))
    logger.info(f"產生 {len(instances)} 個排序樣本；排除 {excluded_sessions} 個會話、{dropped_queries} 個無點擊查詢")
    return instances


def check_instances(instances: Sequence[RankingInstance]):
    seen = set()
    for instance in instances:
        key = (instance.query_id, instance.doc_id)
        if key in seen:
            raise InvalidInputError(f"重複的（查詢, 文檔）配對: {key}")
        seen.add(key)


def to_groups(instances: Sequence[RankingInstance]) -> QueryGroups:
    check_instances(instances)
    if not instances:
        raise InvalidInputError("排序樣本為空")
    return QueryGroups(
        np.array([i.features for i in instances], dtype=float),
        [i.relevance for i in instances],
        [i.query_id for i in instances],
        [i.doc_id for i in instances],
    )


def train(algorithm: str, instances: Sequence[RankingInstance], params: Optional[LtrParams] = None,
          seed: Optional[int] = None) -> Ranker:
    """
    訓練排序器

    Args:
        algorithm: AdaRank、RankBoost 或 LambdaMART
        instances: 訓練樣本（至少兩個查詢，且同時有相關與不相關文檔）
        params: 演算法參數
        seed: 覆寫提升樹的隨機種子

    Returns:
        Ranker
    """
    if algorithm not in RANKERS:
        raise InvalidInputError(f"未知的排序演算法: {algorithm}，可選 {sorted(RANKERS)}")
    params = params or LtrParams()
    if seed is not None:
        params = params.model_copy(update={"boost": params.boost.model_copy(update={"seed": seed})})
    return RANKERS[algorithm].fit(to_groups(instances), params)


def select_rounds(ranker: Ranker, validation: QueryGroups, k: int = 10) -> Ranker:
    """以驗證集平均 NDCG@k 選擇輪數（同分取較少輪）"""
    if ranker.n_rounds == 0:
        return ranker
    best_rounds, best_value = 1, -np.inf
    for t, scores in enumerate(ranker.staged_scores(validation.X), 1):
        value = float(np.mean(validation.ndcg_per_query(scores, k)))
        if value > best_value:
            best_rounds, best_value = t, value
    logger.debug(f"{ranker.algorithm} 驗證 NDCG@{k} = {best_value:.4f}，保留 {best_rounds}/{ranker.n_rounds} 輪")
    return ranker.truncate(best_rounds)


def save_ranker(path: Union[str, Path], ranker: Ranker):
    ArtifactStore("ranker", RANKER_FORMAT_VERSION).save(path, {"algorithm": ranker.algorithm,
                                                               "body": ranker.to_body()})


def load_ranker(path: Union[str, Path]) -> Ranker:
    document = ArtifactStore("ranker", RANKER_FORMAT_VERSION).load(path)
    return ranker_from_body(document["algorithm"], document["body"])


class IntentAwareRanker:
    """
    按意圖混合的排序器 P(r|q) = Σ_i P(i|q) P(r|q,i)

    出貨流程使用硬指示 P(i|q) ∈ {0, 1}，此時分數就是該意圖子排序器的分數；
    score_soft 提供軟機率的擴充介面。
    """

    def __init__(self, rankers: Mapping[IntentLabel, Ranker]):
        missing = [i.value for i in RANKING_INTENTS if i not in rankers]
        if missing:
            raise InvalidInputError(f"缺少意圖子排序器: {missing}")
        self.rankers: Dict[IntentLabel, Ranker] = dict(rankers)

    @classmethod
    def shared(cls, ranker: Ranker) -> "IntentAwareRanker":
        return cls({intent: ranker for intent in RANKING_INTENTS})

    def _ranker(self, intent: IntentLabel) -> Ranker:
        ranker = self.rankers.get(intent)
        if ranker is None:
            raise UnsupportedIntentError(f"意圖 {getattr(intent, 'value', intent)} 沒有對應的子排序器")
        return ranker

    def score(self, features: np.ndarray, intent: IntentLabel) -> np.ndarray:
        return self._ranker(intent).score(np.asarray(features, dtype=float).reshape(-1, len(CONTENT_FEATURES)))

    def score_soft(self, features: np.ndarray, probabilities: Mapping[IntentLabel, float]) -> np.ndarray:
        total = sum(probabilities.values())
        if any(p < 0 for p in probabilities.values()) or not np.isclose(total, 1.0):
            raise InvalidInputError(f"P(i|q) 必須非負且總和為 1，收到總和 {total}")
        X = np.asarray(features, dtype=float).reshape(-1, len(CONTENT_FEATURES))
        scores = np.zeros(X.shape[0])
        for intent, p in probabilities.items():
            if p > 0:
                scores += p * self._ranker(intent).score(X)
        return scores


def intent_aware_score(ranker: IntentAwareRanker, intent: IntentLabel, features: np.ndarray) -> np.ndarray:
    """以查詢意圖的硬指示計算分數"""
    return ranker.score(features, intent)


class EvalResult(BaseModel):
    metrics: Dict[str, float]
    per_query: Dict[str, Dict[str, float]]


Run = Mapping[str, Sequence[Tuple[str, float]]]
Qrels = Mapping[str, Mapping[str, int]]


def evaluate(run: Run, qrels: Qrels) -> EvalResult:
    """
    NDCG@5/10/15 與 MAP，對查詢取宏平均

    Args:
        run: 查詢 → [(doc_id, score)]，依分數遞減、doc_id 遞增排序
        qrels: 查詢 → {doc_id: 相關度}

    Returns:
        EvalResult
    """
    per_query: Dict[str, Dict[str, float]] = {}
    for query_id, scored in run.items():
        if query_id not in qrels:
            raise InvalidInputError(f"查詢 {query_id} 不在相關度標註中")
        judgments = qrels[query_id]
        doc_ids = [doc_id for doc_id, _ in scored]
        order = rank_order([score for _, score in scored], doc_ids)
        ranked = [judgments.get(doc_ids[i], 0) for i in order]
        ideal = list(judgments.values())
        per_query[query_id] = {
            "NDCG@5": ndcg_at_k(ranked, 5, ideal),
            "NDCG@10": ndcg_at_k(ranked, 10, ideal),
            "NDCG@15": ndcg_at_k(ranked, 15, ideal),
            "MAP": average_precision(ranked, sum(1 for r in ideal if r > 0)),
        }
    if not per_query:
        raise InvalidInputError("沒有可評估的查詢")
    metrics = {m: float(np.mean([v[m] for v in per_query.values()])) for m in METRICS}
    return EvalResult(metrics=metrics, per_query=per_query)


def qrels_of(instances: Sequence[RankingInstance]) -> Dict[str, Dict[str, int]]:
    qrels: Dict[str, Dict[str, int]] = {}
    for instance in instances:
        qrels.setdefault(instance.query_id, {})[instance.doc_id] = instance.relevance
    return qrels


class CVReport(BaseModel):
    """單一模式的交叉驗證結果"""
    algorithm: str
    intent_mode: str
    folds: int
    metrics: Dict[str, float]
    fold_metrics: List[Dict[str, float]]
    per_query: Dict[str, Dict[str, float]]
    run: Dict[str, List[Tuple[str, float]]]


def _query_table(instances: Sequence[RankingInstance]):
    first: Dict[str, RankingInstance] = {}
    for instance in instances:
        first.setdefault(instance.query_id, instance)
    query_ids = list(first)
    intents = np.array([first[q].intent.value for q in query_ids])
    groups = np.array([first[q].group_key for q in query_ids])
    return query_ids, intents, groups


def _check_intent_coverage(intents: np.ndarray, required: Sequence[str]):
    def check(folds: List[Fold]):
        for number, (train_idx, _) in enumerate(folds):
            present = intents[train_idx]
            for intent in required:
                if np.sum(present == intent) < 2:
                    raise FoldDegenerateError(f"第 {number} 折的訓練資料缺少意圖 {intent}（少於 2 個查詢）")
    return check


def _fit_with_validation(algorithm: str, instances: List[RankingInstance], params: LtrParams,
                         seed: int, val_fraction: float) -> Ranker:
    query_ids, _, groups = _query_table(instances)
    split = validation_split(groups, val_fraction, seed)
    if split is None:
        return train(algorithm, instances, params, seed=seed)
    sub_ids = {query_ids[i] for i in split[0]}
    val_ids = {query_ids[i] for i in split[1]}
    sub_train = [i for i in instances if i.query_id in sub_ids]
    validation = [i for i in instances if i.query_id in val_ids]
    try:
        ranker = train(algorithm, sub_train, params, seed=seed)
    except InvalidInputError as e:
        logger.warning(f"驗證切分後的訓練資料無法訓練 {algorithm}（{e}），改用全部訓練資料且不選輪數")
        return train(algorithm, instances, params, seed=seed)
    return select_rounds(ranker, to_groups(validation))


def _score_queries(instances: Sequence[RankingInstance], scorer) -> Dict[str, List[Tuple[str, float]]]:
    by_query: Dict[str, List[RankingInstance]] = {}
    for instance in instances:
        by_query.setdefault(instance.query_id, []).append(instance)
    run = {}
    for query_id, rows in by_query.items():
        X = np.array([r.features for r in rows], dtype=float)
        scores = scorer(X, rows[0].intent)
        run[query_id] = [(r.doc_id, float(s)) for r, s in zip(rows, scores)]
    return run


def _fold_rankers(algorithm: str, train_set: List[RankingInstance], intent_mode: str, params: LtrParams,
                  seed: int, val_fraction: float, force_shared: bool) -> IntentAwareRanker:
    if intent_mode == "agnostic" or force_shared:
        return IntentAwareRanker.shared(_fit_with_validation(algorithm, train_set, params, seed, val_fraction))
    rankers = {}
    for intent in RANKING_INTENTS:
        subset = [i for i in train_set if i.intent is intent]
        if subset:
            rankers[intent] = _fit_with_validation(algorithm, subset, params, seed, val_fraction)
    if not rankers:
        raise FoldDegenerateError("訓練資料不含任何 PC/Ch/Pe/Pr 查詢")
    missing = [intent for intent in RANKING_INTENTS if intent not in rankers]
    if missing:
        # 資料集中沒有的意圖不會出現在測試折，以共用模型補齊
        logger.debug(f"意圖 {[i.value for i in missing]} 沒有訓練資料，改用共用排序器")
        fallback = _fit_with_validation(algorithm, train_set, params, seed, val_fraction)
        rankers.update({intent: fallback for intent in missing})
    return IntentAwareRanker(rankers)


def cross_validate(instances: Sequence[RankingInstance], algorithm: str, intent_mode: str = "agnostic",
                   folds: Optional[int] = None, val_fraction: Optional[float] = None,
                   seed: Optional[int] = None, params: Optional[LtrParams] = None,
                   force_shared: bool = False, threads: Optional[int] = None) -> CVReport:
    """
    按會話分組、按意圖分層的交叉驗證

    agnostic 模式訓練單一排序器；aware 模式每個意圖各訓練一個子排序器並以硬指示混合。
    兩種模式在相同種子下使用完全相同的測試折。force_shared 讓 aware 模式的子排序器共用同一個模型。

    Args:
        instances: 排序樣本
        algorithm: 排序演算法
        intent_mode: agnostic 或 aware
        folds: 折數
        val_fraction: 每折訓練資料中切出的驗證比例
        seed: 隨機種子
        params: 演算法參數
        force_shared: 強制子排序器相同
        threads: 並行訓練折疊的執行緒數

    Returns:
        CVReport
    """
    if intent_mode not in ("agnostic", "aware"):
        raise InvalidInputError(f"intent_mode 只能是 agnostic 或 aware，收到 {intent_mode}")
    folds = folds or settings.folds
    val_fraction = settings.val_fraction if val_fraction is None else val_fraction
    seed = settings.seed if seed is None else seed
    threads = threads or settings.threads
    params = params or LtrParams()
    instances = list(instances)
    check_instances(instances)

    query_ids, intents, groups = _query_table(instances)
    present = [i.value for i in RANKING_INTENTS if np.any(intents == i.value)]
    fold_splits = stratified_group_folds(intents, groups, folds, seed,
                                         check=_check_intent_coverage(intents, present))
    qrels = qrels_of(instances)

    def run_fold(split: Fold):
        train_ids = {query_ids[i] for i in split[0]}
        test_ids = {query_ids[i] for i in split[1]}
        train_set = [i for i in instances if i.query_id in train_ids]
        test_set = [i for i in instances if i.query_id in test_ids]
        mixture = _fold_rankers(algorithm, train_set, intent_mode, params, seed, val_fraction, force_shared)
        run = _score_queries(test_set, mixture.score)
        return run, evaluate(run, qrels)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            results = list(executor.map(run_fold, fold_splits))
    else:
        results = [run_fold(split) for split in fold_splits]

    run: Dict[str, List[Tuple[str, float]]] = {}
    per_query: Dict[str, Dict[str, float]] = {}
    for fold_run, result in results:
        run.update(fold_run)
        per_query.update(result.per_query)
    metrics = {m: float(np.mean([v[m] for v in per_query.values()])) for m in METRICS}
    logger.info(f"{algorithm} ({intent_mode}) 交叉驗證: " + ", ".join(f"{m}={v:.4f}" for m, v in metrics.items()))
    return CVReport(algorithm=algorithm, intent_mode=intent_mode, folds=len(fold_splits), metrics=metrics,
                    fold_metrics=[r.metrics for _, r in results], per_query=per_query,
                    run={q: list(v) for q, v in run.items()})


class ComparisonRow(BaseModel):
    """一個演算法的 base / intent-aware / 改進幅度"""
    algorithm: str
    base: Dict[str, float]
    aware: Dict[str, float]
    improvement: Dict[str, Optional[float]]
    ttest_statistic: Optional[float] = None
    ttest_p_value: Optional[float] = None


def compare_modes(instances: Sequence[RankingInstance], algorithms: Sequence[str] = tuple(RANKERS),
                  folds: Optional[int] = None, val_fraction: Optional[float] = None,
                  seed: Optional[int] = None, params: Optional[LtrParams] = None) -> List[ComparisonRow]:
    """在相同測試折上比較意圖無關與意圖感知模型，並以每查詢 NDCG@5 做成對 t 檢定"""
    rows = []
    for algorithm in algorithms:
        base = cross_validate(instances, algorithm, "agnostic", folds, val_fraction, seed, params)
        aware = cross_validate(instances, algorithm, "aware", folds, val_fraction, seed, params)
        improvement = {m: (aware.metrics[m] - base.metrics[m]) / base.metrics[m] if base.metrics[m] > 0 else None
                       for m in METRICS}
        shared = sorted(base.per_query)
        row = ComparisonRow(algorithm=algorithm, base=base.metrics, aware=aware.metrics, improvement=improvement)
        try:
            test = paired_ttest([aware.per_query[q]["NDCG@5"] for q in shared],
                                [base.per_query[q]["NDCG@5"] for q in shared])
            row = row.model_copy(update={"ttest_statistic": test.statistic, "ttest_p_value": test.p_value})
        except UndefinedStatisticError as e:
            logger.warning(f"{algorithm} 的成對 t 檢定無定義: {e}")
        rows.append(row)
    return rows


def trec_run_lines(run: Mapping[str, Sequence[Tuple[str, float]]], tag: str) -> List[str]:
    """TREC 格式：query_id Q0 doc_id rank score tag"""
    lines = []
    for query_id in sorted(run):
        scored = run[query_id]
        order = rank_order([s for _, s in scored], [d for d, _ in scored])
        for position, i in enumerate(order, 1):
            doc_id, score = scored[i]
            lines.append(f"{query_id} Q0 {doc_id} {position} {score:.6f} {tag}")
    return lines


def load_instances(path: Union[str, Path]) -> List[RankingInstance]:
    instances = read_jsonl(path, RankingInstance)
    check_instances(instances)
    return instances


def dump_instances(path: Union[str, Path], instances: Sequence[RankingInstance]):
    write_jsonl(path, instances)
