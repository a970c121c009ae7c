"""
滿意度預測
從查詢行為抽取 20 個特徵，二值化滿意度，並以梯度提升樹比較意圖無關與意圖感知的預測表現（AUC）
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from config import settings
from core.artifact_store import read_jsonl, write_jsonl
from core.boosting import BoostParams, Loss, gbdt_fit
from core.error_handler import FoldDegenerateError, IntentIRError, InvalidInputError
from core.session_log import QueryUnit, Session
from core.stats import auc
from core.taxonomy import BASE_INTENTS, IntentLabel
from .folds import Fold, stratified_group_folds
from .text_features import tokenize

logger = logging.getLogger(__name__)

FEATURE_GROUPS: Dict[str, Tuple[str, ...]] = {
    "Click": ("num_clicks", "ctr", "max_rr", "min_rr", "mean_rr"),
    "Hover": ("num_hovers", "p_click_given_hover", "avg_skipped_between_hovers",
              "max_hover_rank", "min_hover_rank", "mean_hover_rank"),
    "Dwell": ("serp_dwell", "landing_dwell", "time_to_first_click", "avg_hover_dwell", "avg_click_dwell"),
    "Query": ("query_length_chars", "num_query_terms", "unique_term_ratio", "visited_pages"),
}
FEATURE_NAMES: Tuple[str, ...] = tuple(name for names in FEATURE_GROUPS.values() for name in names)
GROUP_CHOICES = tuple(FEATURE_GROUPS) + ("All",)
MODES = ("intent_agnostic", "intent_aware", "per_intent")
GRID_INTENTS = (IntentLabel.PARTICULAR_CASE, IntentLabel.CHARACTERIZATION,
                 IntentLabel.PENALTY, IntentLabel.PROCEDURE)


class SatInstance(BaseModel):
    """一個帶滿意度回饋的查詢"""
    model_config = ConfigDict(frozen=True)

    query_id: str
    session_id: Optional[str] = None
    features: Dict[str, float]
    imputed: Dict[str, bool] = {}
    intent: Optional[IntentLabel] = None
    label: int

    @model_validator(mode='after')
    def check_features(self) -> 'SatInstance':
        if set(self.features) != set(FEATURE_NAMES):
            missing = sorted(set(FEATURE_NAMES) - set(self.features))
            extra = sorted(set(self.features) - set(FEATURE_NAMES))
            raise ValueError(f"特徵名稱不符：缺少 {missing}，多出 {extra}")
        if self.label not in (0, 1):
            raise ValueError(f"標籤只能是 0 或 1，收到 {self.label}")
        if not all(np.isfinite(v) for v in self.features.values()):
            raise ValueError("特徵含有非有限值")
        return self

    @property
    def group_key(self) -> str:
        return self.session_id or self.query_id


def binarize(satisfaction: int) -> int:
    """1-3 → 0（不滿意），4-5 → 1（滿意）"""
    if isinstance(satisfaction, bool) or int(satisfaction) != satisfaction or not 1 <= satisfaction <= 5:
        raise InvalidInputError(f"滿意度必須是 1 到 5 的整數，收到 {satisfaction!r}")
    return int(satisfaction >= 4)


def _mean_or_zero(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else 0.0


def extract_features(query: QueryUnit, results_per_page: Optional[int] = None) -> Tuple[Dict[str, float], Dict[str, bool]]:
    """
    抽取 20 個行為特徵

    沒有點擊或懸停時對應的特徵填 0，並在所屬分組的 <group>_imputed 標記為 True。

    Args:
        query: 查詢單元
        results_per_page: 每頁結果數，用於點擊率的分母

    Returns:
        (特徵字典, 各分組的填補標記)
    """
    results_per_page = results_per_page or settings.results_per_page
    click_ranks = [c.rank for c in query.clicks]
    reciprocal = [1.0 / r for r in click_ranks]
    dwells = [c.dwell_seconds for c in query.clicks]
    hover_ranks = [h.rank for h in query.hovers]
    hovered = set(hover_ranks)
    terms = tokenize(query.query_text)

    gaps = [max(abs(b - a) - 1, 0) for a, b in zip(hover_ranks, hover_ranks[1:])]
    first_click = (min(c.click_time for c in query.clicks) - query.start_time) / 1000.0 if query.clicks else 0.0

    features = {
        "num_clicks": float(len(click_ranks)),
        "ctr": len(set(click_ranks)) / (query.pages_viewed * results_per_page),
        "max_rr": max(reciprocal, default=0.0),
        "min_rr": min(reciprocal, default=0.0),
        "mean_rr": _mean_or_zero(reciprocal),
        "num_hovers": float(len(hover_ranks)),
        "p_click_given_hover": len(hovered & set(click_ranks)) / len(hovered) if hovered else 0.0,
        "avg_skipped_between_hovers": _mean_or_zero(gaps),
        "max_hover_rank": float(max(hover_ranks, default=0)),
        "min_hover_rank": float(min(hover_ranks, default=0)),
        "mean_hover_rank": _mean_or_zero(hover_ranks),
        "serp_dwell": query.serp_time_seconds,
        "landing_dwell": float(sum(dwells)),
        "time_to_first_click": first_click,
        "avg_hover_dwell": _mean_or_zero([h.duration_seconds for h in query.hovers]),
        "avg_click_dwell": _mean_or_zero(dwells),
        "query_length_chars": float(len(query.query_text.strip())),
        "num_query_terms": float(len(terms)),
        "unique_term_ratio": len(set(terms)) / len(terms) if terms else 0.0,
        "visited_pages": float(query.pages_viewed),
    }
    imputed = {
        "Click": not click_ranks,
        "Hover": not hover_ranks,
        "Dwell": not click_ranks or not hover_ranks,
        "Query": not terms,
    }
    return features, imputed


def build_instances(sessions: Sequence[Session], results_per_page: Optional[int] = None) -> List[SatInstance]:
    """為每個帶滿意度回饋的查詢建立樣本；意圖取會話的基本意圖標籤"""
    instances = []
    for session in sessions:
        intent = session.intent.value if session.intent is not None else None
        if not isinstance(intent, IntentLabel):
            intent = None
        for query in session.queries:
            if query.satisfaction is None:
                continue
            features, imputed = extract_features(query, results_per_page)
            instances.append(SatInstance(query_id=query.query_id, session_id=session.session_id,
                                         features=features, imputed=imputed, intent=intent,
                                         label=binarize(query.satisfaction)))
    positives = sum(i.label for i in instances)
    logger.info(f"建立 {len(instances)} 個滿意度樣本（滿意 {positives}，不滿意 {len(instances) - positives}）")
    return instances


def selected_groups(feature_groups: Sequence[str]) -> List[str]:
    groups = []
    for group in feature_groups:
        if group not in GROUP_CHOICES:
            raise InvalidInputError(f"未知的特徵分組: {group}，可選 {GROUP_CHOICES}")
        for name in (FEATURE_GROUPS if group == "All" else [group]):
            if name not in groups:
                groups.append(name)
    if not groups:
        raise InvalidInputError("至少需要選擇一個特徵分組")
    return groups


def feature_matrix(instances: Sequence[SatInstance], feature_groups: Sequence[str],
                   intent_aware: bool = False) -> Tuple[np.ndarray, List[str]]:
    """
    組裝特徵矩陣：所選分組的特徵、分組填補標記，以及（意圖感知時）意圖 one-hot

    Returns:
        (矩陣, 欄位名稱)
    """
    groups = selected_groups(feature_groups)
    names = [name for group in groups for name in FEATURE_GROUPS[group]]
    columns = names + [f"{group.lower()}_imputed" for group in groups]
    rows = []
    for instance in instances:
        row = [instance.features[name] for name in names]
        row += [float(instance.imputed.get(group, False)) for group in groups]
        rows.append(row)
    if intent_aware:
        columns += [f"intent_{intent.value}" for intent in BASE_INTENTS]
        for row, instance in zip(rows, instances):
            row += [float(instance.intent is intent) for intent in BASE_INTENTS]
    return np.asarray(rows, dtype=float).reshape(len(instances), len(columns)), columns


class ExperimentResult(BaseModel):
    mode: str
    feature_groups: List[str]
    intent: Optional[str] = None
    auc: float
    fold_aucs: List[float]
    n_instances: int


def _check_classes(labels: np.ndarray):
    def check(folds: List[Fold]):
        for number, (train_idx, test_idx) in enumerate(folds):
            if np.unique(labels[train_idx]).size < 2 or np.unique(labels[test_idx]).size < 2:
                raise FoldDegenerateError(f"第 {number} 折只有單一類別")
    return check


def run_experiment(instances: Sequence[SatInstance], mode: str = "intent_agnostic",
                   feature_groups: Sequence[str] = ("All",), folds: Optional[int] = None,
                   seed: Optional[int] = None, params: Optional[BoostParams] = None,
                   intent: Optional[IntentLabel] = None, threads: Optional[int] = None) -> ExperimentResult:
    """
    以 K 折交叉驗證評估滿意度預測

    折疊按標籤分層、以會話為單位切分；單一類別的折疊會換種子重新分層，仍失敗則拋出錯誤。

    Args:
        instances: 滿意度樣本
        mode: intent_agnostic、intent_aware 或 per_intent
        feature_groups: Click/Hover/Dwell/Query/All 的子集
        folds: 折數
        seed: 隨機種子
        params: 提升參數
        intent: per_intent 模式下的意圖
        threads: 並行訓練折疊的執行緒數

    Returns:
        ExperimentResult，包含平均 AUC 與每折 AUC
    """
    if mode not in MODES:
        raise InvalidInputError(f"未知的模式: {mode}，可選 {MODES}")
    folds = folds or settings.folds
    seed = settings.seed if seed is None else seed
    threads = threads or settings.threads
    params = params or BoostParams(seed=seed)

    if mode == "per_intent":
        if intent is None:
            raise InvalidInputError("per_intent 模式需要指定意圖")
        instances = [i for i in instances if i.intent is intent]
    instances = list(instances)
    if not instances:
        raise InvalidInputError("沒有可用的滿意度樣本")

    X, columns = feature_matrix(instances, feature_groups, intent_aware=(mode == "intent_aware"))
    y = np.array([i.label for i in instances], dtype=float)
    if np.unique(y).size < 2:
        raise InvalidInputError("滿意度樣本只有單一類別")
    groups = np.array([i.group_key for i in instances])
    fold_splits = stratified_group_folds(y, groups, folds, seed, check=_check_classes(y))

    def run_fold(split: Fold) -> float:
        train_idx, test_idx = split
        model = gbdt_fit(X[train_idx], y[train_idx], loss=Loss.LOGISTIC, params=params, feature_names=columns)
        return auc(y[test_idx].astype(int), model.predict(X[test_idx]))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            fold_aucs = list(executor.map(run_fold, fold_splits))
    else:
        fold_aucs = [run_fold(split) for split in fold_splits]

    result = ExperimentResult(mode=mode, feature_groups=list(feature_groups),
                              intent=intent.value if intent is not None else None,
                              auc=float(np.mean(fold_aucs)), fold_aucs=fold_aucs, n_instances=len(instances))
    logger.info(f"滿意度預測 {mode} {list(feature_groups)}: AUC={result.auc:.4f}")
    return result


class GridRow(BaseModel):
    """一個特徵分組在各欄位的 AUC；無法評估的格子為 None"""
    feature_group: str
    cells: Dict[str, Optional[float]]


def feature_group_grid(instances: Sequence[SatInstance], folds: Optional[int] = None,
                       seed: Optional[int] = None, params: Optional[BoostParams] = None,
                       feature_groups: Sequence[str] = GROUP_CHOICES) -> List[GridRow]:
    """特徵分組 × {PC, Ch, Pe, Pr, agnostic, aware} 的 AUC 表"""
    rows = []
    for group in feature_groups:
        cells: Dict[str, Optional[float]] = {}
        for intent in GRID_INTENTS:
            try:
                cells[intent.value] = run_experiment(instances, "per_intent", [group], folds, seed, params,
                                                     intent=intent).auc
            except IntentIRError as e:
                logger.warning(f"{group}/{intent.value} 無法評估: {e}")
                cells[intent.value] = None
        cells["agnostic"] = run_experiment(instances, "intent_agnostic", [group], folds, seed, params).auc
        cells["aware"] = run_experiment(instances, "intent_aware", [group], folds, seed, params).auc
        rows.append(GridRow(feature_group=group, cells=cells))
    return rows


def load_instances(path: Union[str, Path]) -> List[SatInstance]:
    return read_jsonl(path, SatInstance)


def dump_instances(path: Union[str, Path], instances: Sequence[SatInstance]):
    write_jsonl(path, instances)
