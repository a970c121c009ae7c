"""
統計檢定
Kruskal-Wallis、Bonferroni-Holm、Pearson 相關、單因子 ANOVA、Fleiss's kappa、ROC AUC
"""
import logging
from typing import ClassVar, Dict, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from scipy import stats as sps
from sklearn.metrics import roc_auc_score
from statsmodels.stats.inter_rater import fleiss_kappa as sm_fleiss_kappa
from statsmodels.stats.multitest import multipletests

from .error_handler import InvalidInputError, UndefinedStatisticError

logger = logging.getLogger(__name__)


class TestResult(BaseModel):
    """檢定結果"""
    __test__: ClassVar[bool] = False
    model_config = ConfigDict(frozen=True)

    statistic: float
    p_value: float
    df: Optional[Tuple[float, ...]] = None
    group_sizes: Optional[Tuple[int, ...]] = None
    details: Dict[str, float] = {}

    @field_validator('statistic')
    @classmethod
    def check_statistic(cls, v: float) -> float:
        if not np.isfinite(v):
            raise ValueError(f"檢定統計量必須為有限值，收到 {v}")
        return v

    @field_validator('p_value')
    @classmethod
    def check_p_value(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"p 值必須在 [0, 1] 內，收到 {v}")
        return v


def _as_groups(groups: Sequence[Sequence[float]], min_size: int) -> list:
    if len(groups) < 2:
        raise InvalidInputError(f"至少需要兩組樣本，收到 {len(groups)} 組")
    arrays = [np.asarray(g, dtype=float) for g in groups]
    for i, g in enumerate(arrays):
        if g.size < min_size:
            raise InvalidInputError(f"第 {i} 組樣本數 {g.size} 小於 {min_size}")
        if not np.all(np.isfinite(g)):
            raise InvalidInputError(f"第 {i} 組含有非有限值")
    return arrays


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> TestResult:
    """
    Kruskal-Wallis H 檢定（中位秩 + 同分校正）

    所有觀測值皆同分時校正分母為 0，此時定義 H = 0、p = 1。

    Args:
        groups: 兩組以上的非空樣本

    Returns:
        H 統計量與自由度 k-1 的卡方上尾機率
    """
    arrays = _as_groups(groups, min_size=1)
    sizes = np.array([g.size for g in arrays])
    n = int(sizes.sum())
    if n < 3:
        raise InvalidInputError(f"Kruskal-Wallis 需要總樣本數至少 3，收到 {n}")

    ranks = sps.rankdata(np.concatenate(arrays))
    tie = sps.tiecorrect(ranks)
    df = len(arrays) - 1

    if tie == 0:
        return TestResult(statistic=0.0, p_value=1.0, df=(df,), group_sizes=tuple(sizes.tolist()))

    bounds = np.cumsum(sizes)[:-1]
    rank_sums = np.array([r.sum() for r in np.split(ranks, bounds)])
    h = 12.0 / (n * (n + 1)) * np.sum(rank_sums ** 2 / sizes) - 3.0 * (n + 1)
    h = max(h / tie, 0.0)
    p = float(sps.chi2.sf(h, df))
    return TestResult(statistic=float(h), p_value=min(max(p, 0.0), 1.0),
                      df=(df,), group_sizes=tuple(sizes.tolist()))


def holm_bonferroni(p_values: Sequence[float]) -> np.ndarray:
    """
    Bonferroni-Holm 逐步調整，輸出順序與輸入一致

    Args:
        p_values: 原始 p 值

    Returns:
        調整後 p 值
    """
    p = np.asarray(p_values, dtype=float)
    if p.size == 0:
        return p
    if np.any(~np.isfinite(p)) or np.any((p < 0.0) | (p > 1.0)):
        raise InvalidInputError(f"p 值必須在 [0, 1] 之間: {p.tolist()}")
    _, adjusted, _, _ = multipletests(p, method="holm")
    return np.minimum(adjusted, 1.0)


def pearson(x: Sequence[float], y: Sequence[float]) -> TestResult:
    """
    Pearson 相關係數與雙尾 t 檢定

    Args:
        x, y: 等長樣本，n >= 3

    Returns:
        r 與自由度 n-2 的 p 值
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidInputError(f"樣本長度不一致: {x.shape} vs {y.shape}")
    if x.size < 3:
        raise InvalidInputError(f"Pearson 相關需要至少 3 個樣本，收到 {x.size}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedStatisticError("零變異數樣本的相關係數沒有定義")

    result = sps.pearsonr(x, y)
    r = float(np.clip(result.statistic, -1.0, 1.0))
    return TestResult(statistic=r, p_value=float(np.clip(result.pvalue, 0.0, 1.0)),
                      df=(x.size - 2,), group_sizes=(int(x.size),))


def anova_oneway(groups: Sequence[Sequence[float]]) -> TestResult:
    """
    單因子變異數分析

    組內、組間平方和皆為 0 時依慣例回傳 F = 0；
    只有組內平方和為 0 時 F 無界，視為未定義。

    Args:
        groups: 兩組以上、每組至少兩個觀測值

    Returns:
        F 統計量與 F(k-1, n-k) 上尾機率
    """
    arrays = _as_groups(groups, min_size=2)
    k = len(arrays)
    n = sum(g.size for g in arrays)
    if n <= k:
        raise InvalidInputError(f"自由度退化: n={n}, k={k}")

    grand_mean = np.concatenate(arrays).mean()
    ss_between = float(sum(g.size * (g.mean() - grand_mean) ** 2 for g in arrays))
    ss_within = float(sum(((g - g.mean()) ** 2).sum() for g in arrays))
    df = (k - 1, n - k)
    details = {"ss_between": ss_between, "ss_within": ss_within}
    sizes = tuple(int(g.size) for g in arrays)

    if ss_within == 0.0:
        if ss_between == 0.0:
            return TestResult(statistic=0.0, p_value=1.0, df=df, group_sizes=sizes, details=details)
        raise UndefinedStatisticError("組內變異為 0 而組間變異不為 0，F 無界")

    f = (ss_between / df[0]) / (ss_within / df[1])
    p = float(sps.f.sf(f, *df))
    return TestResult(statistic=float(f), p_value=min(max(p, 0.0), 1.0),
                      df=df, group_sizes=sizes, details=details)


def fleiss_kappa(counts: np.ndarray) -> float:
    """
    Fleiss's kappa

    Args:
        counts: N 條目 × K 類別的計數矩陣，每行總和為相同的標註人數 n >= 2

    Returns:
        κ = (P̄ - P̄e) / (1 - P̄e)
    """
    table = np.asarray(counts)
    if table.ndim != 2 or table.shape[0] == 0:
        raise InvalidInputError("計數矩陣必須是非空的二維陣列")
    if np.any(table < 0):
        raise InvalidInputError("計數不可為負")
    row_sums = table.sum(axis=1)
    if np.any(row_sums != row_sums[0]):
        raise InvalidInputError(f"每個條目的標註人數必須相同: {sorted(set(row_sums.tolist()))}")
    if row_sums[0] < 2:
        raise InvalidInputError("每個條目至少需要兩位標註者")

    proportions = table.sum(axis=0) / table.sum()
    if np.isclose(np.sum(proportions ** 2), 1.0):
        raise UndefinedStatisticError("所有標註集中在同一類別，期望一致度為 1，kappa 沒有定義")
    return float(sm_fleiss_kappa(table, method="fleiss"))


def auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """
    ROC AUC（Mann-Whitney 形式，同分計 0.5）

    Args:
        labels: 0/1 標籤
        scores: 預測分數

    Returns:
        隨機正例分數高於隨機負例的機率
    """
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=float)
    if y.shape != s.shape or y.ndim != 1:
        raise InvalidInputError(f"標籤與分數長度不一致: {y.shape} vs {s.shape}")
    if not np.all(np.isin(y, (0, 1))):
        raise InvalidInputError("AUC 的標籤必須是 0/1")
    if np.unique(y).size < 2:
        raise InvalidInputError("AUC 需要同時包含正例與負例")
    return float(roc_auc_score(y, s))


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TestResult:
    """成對 t 檢定；差值全為 0 時 t = 0、p = 1，差值為非零常數時 t 無定義"""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise InvalidInputError(f"成對樣本長度不一致或不足: {a.shape} vs {b.shape}")
    diff = a - b
    if np.ptp(diff) == 0:
        if diff[0] == 0:
            return TestResult(statistic=0.0, p_value=1.0, df=(a.size - 1,))
        raise UndefinedStatisticError(f"成對差值為非零常數 {diff[0]:g}，t 統計量無定義")
    result = sps.ttest_rel(a, b)
    return TestResult(statistic=float(result.statistic), p_value=float(result.pvalue), df=(a.size - 1,))


def significance_stars(p_value: float, alpha: float = 0.05) -> str:
    """* p<alpha, ** p<0.01, *** p<0.001"""
    if p_value < 0.001:
        return "***"
    if p_value < 0.01:
        return "**"
    if p_value < alpha:
        return "*"
    return ""
