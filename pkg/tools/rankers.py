"""
排序演算法與評估指標
NDCG/AP、AdaRank（逐特徵弱排序器的列表式提升）、RankBoost（閾值弱學習器的成對提升）、
LambdaMART（以 NDCG 交換增益加權的 lambda 梯度驅動梯度提升樹）
"""
import logging
from abc import ABC, abstractmethod
from typing import ClassVar, Dict, Iterator, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

from config import settings
from core.boosting import BoostParams, Loss, TreeEnsemble, gbdt_fit
from core.error_handler import InvalidInputError

logger = logging.getLogger(__name__)

_EPS = 1e-10


# ---------------------------------------------------------------------------
# 評估指標
# ---------------------------------------------------------------------------

def rank_order(scores: Sequence[float], doc_ids: Sequence[str]) -> np.ndarray:
    """分數遞減排序，同分時依 doc_id 遞增"""
    scores = np.asarray(scores, dtype=float)
    return np.lexsort((np.asarray(doc_ids, dtype=str), -scores))


def dcg_at_k(relevances: Sequence[float], k: Optional[int] = None) -> float:
    """DCG，增益 2^rel - 1，折扣 1/log2(rank+1)"""
    rel = np.asarray(relevances, dtype=float)[:k]
    if rel.size == 0:
        return 0.0
    discounts = 1.0 / np.log2(np.arange(2, rel.size + 2))
    return float(np.sum((np.power(2.0, rel) - 1.0) * discounts))


def ndcg_at_k(ranked_relevances: Sequence[float], k: Optional[int] = None,
              ideal_relevances: Optional[Sequence[float]] = None) -> float:
    """
    NDCG@k

    Args:
        ranked_relevances: 按排序位置排列的相關度
        k: 截斷位置，None 表示整個列表
        ideal_relevances: 理想排序所用的相關度全集（預設為列表本身）

    Returns:
        [0, 1] 之間的值；沒有相關文檔時為 0
    """
    ideal = np.sort(np.asarray(ranked_relevances if ideal_relevances is None else ideal_relevances,
                               dtype=float))[::-1]
    ideal_dcg = dcg_at_k(ideal, k)
    if ideal_dcg == 0.0:
        return 0.0
    return min(dcg_at_k(ranked_relevances, k) / ideal_dcg, 1.0)


def average_precision(ranked_relevances: Sequence[float], n_relevant: Optional[int] = None) -> float:
    """平均精確率；n_relevant 預設為列表中的相關文檔數"""
    rel = np.asarray(ranked_relevances, dtype=float) > 0
    total = int(rel.sum()) if n_relevant is None else n_relevant
    if total == 0:
        return 0.0
    hits = np.cumsum(rel)
    precisions = hits[rel] / (np.flatnonzero(rel) + 1)
    return float(np.sum(precisions) / total)


# ---------------------------------------------------------------------------
# 訓練資料
# ---------------------------------------------------------------------------

class QueryGroups:
    """按查詢分組的特徵矩陣"""

    def __init__(self, features: np.ndarray, relevance: Sequence[int], query_ids: Sequence[str],
                 doc_ids: Sequence[str]):
        self.X = np.asarray(features, dtype=np.float64)
        self.y = np.asarray(relevance, dtype=np.float64)
        self.query_ids = np.asarray(query_ids, dtype=str)
        self.doc_ids = np.asarray(doc_ids, dtype=str)
        if self.X.ndim != 2 or not (len(self.y) == len(self.query_ids) == len(self.doc_ids) == self.X.shape[0]):
            raise InvalidInputError("排序資料的特徵、標籤與 ID 長度不一致")

        order: Dict[str, List[int]] = {}
        for i, qid in enumerate(self.query_ids):
            order.setdefault(qid, []).append(i)
        self.groups: List[np.ndarray] = [np.asarray(rows) for rows in order.values()]
        self.group_ids: List[str] = list(order)

    def __len__(self) -> int:
        return len(self.groups)

    def subset(self, group_indices: Sequence[int]) -> "QueryGroups":
        rows = np.concatenate([self.groups[g] for g in group_indices]) if len(group_indices) else np.array([], int)
        return QueryGroups(self.X[rows].reshape(-1, self.X.shape[1]), self.y[rows],
                           self.query_ids[rows], self.doc_ids[rows])

    def check_trainable(self):
        if len(self.groups) < 2:
            raise InvalidInputError(f"訓練排序模型至少需要 2 個查詢，收到 {len(self.groups)}")
        if np.unique(self.y).size < 2:
            raise InvalidInputError("訓練資料必須同時包含相關與不相關文檔")

    def ndcg_per_query(self, scores: np.ndarray, k: Optional[int] = 10) -> np.ndarray:
        values = np.empty(len(self.groups))
        for g, rows in enumerate(self.groups):
            order = rank_order(scores[rows], self.doc_ids[rows])
            values[g] = ndcg_at_k(self.y[rows][order], k)
        return values

    def padded(self):
        """(Q×m 列索引, 遮罩, 同查詢內 doc_id 的排序鍵)，供向量化的 lambda 計算使用"""
        width = max(len(rows) for rows in self.groups)
        index = np.zeros((len(self.groups), width), dtype=np.int64)
        mask = np.zeros((len(self.groups), width), dtype=bool)
        doc_key = np.full((len(self.groups), width), width, dtype=np.int64)
        for g, rows in enumerate(self.groups):
            index[g, :len(rows)] = rows
            mask[g, :len(rows)] = True
            doc_key[g, :len(rows)] = np.argsort(np.argsort(self.doc_ids[rows], kind="stable"), kind="stable")
        return index, mask, doc_key


# ---------------------------------------------------------------------------
# 排序器
# ---------------------------------------------------------------------------

class LtrParams(BaseModel):
    """排序演算法參數"""
    model_config = ConfigDict(frozen=True)

    boost: BoostParams = Field(default_factory=BoostParams)
    adarank_max_rounds: int = Field(default_factory=lambda: settings.adarank_max_rounds, ge=1)
    adarank_min_weak_performance: float = Field(default_factory=lambda: settings.adarank_min_weak_performance)
    adarank_k: int = 10
    rankboost_rounds: int = Field(default_factory=lambda: settings.rankboost_rounds, ge=1)


class Ranker(ABC):
    """排序器：分數只取決於特徵"""
    algorithm: ClassVar[str]

    @property
    @abstractmethod
    def n_rounds(self) -> int:
        pass

    @abstractmethod
    def score(self, features: np.ndarray) -> np.ndarray:
        pass

    @abstractmethod
    def staged_scores(self, features: np.ndarray) -> Iterator[np.ndarray]:
        """依序產生使用前 1..T 輪時的分數"""

    @abstractmethod
    def truncate(self, n_rounds: int) -> "Ranker":
        pass

    @abstractmethod
    def to_body(self) -> dict:
        pass

    @classmethod
    @abstractmethod
    def fit(cls, data: QueryGroups, params: LtrParams) -> "Ranker":
        pass


class AdaRank(Ranker):
    """
    AdaRank

    弱排序器為單一特徵乘上方向 ±1；每輪選擇在查詢權重下 NDCG@k 最高者，
    權重 α = ½ ln(Σ P(1+E) / Σ P(1-E))，再依組合排序器的表現重新分配查詢權重。
    """
    algorithm = "AdaRank"

    def __init__(self, features: Sequence[int], signs: Sequence[int], alphas: Sequence[float], n_features: int):
        self.features = [int(f) for f in features]
        self.signs = [int(s) for s in signs]
        self.alphas = [float(a) for a in alphas]
        self.n_features = n_features

    @property
    def n_rounds(self) -> int:
        return len(self.alphas)

    def weights(self, n_rounds: Optional[int] = None) -> np.ndarray:
        w = np.zeros(self.n_features)
        for f, s, a in list(zip(self.features, self.signs, self.alphas))[:n_rounds]:
            w[f] += s * a
        return w

    def score(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=float) @ self.weights()

    def staged_scores(self, features: np.ndarray) -> Iterator[np.ndarray]:
        X = np.asarray(features, dtype=float)
        scores = np.zeros(X.shape[0])
        for f, s, a in zip(self.features, self.signs, self.alphas):
            scores = scores + s * a * X[:, f]
            yield scores

    def truncate(self, n_rounds: int) -> "AdaRank":
        return AdaRank(self.features[:n_rounds], self.signs[:n_rounds], self.alphas[:n_rounds], self.n_features)

    def to_body(self) -> dict:
        return {"features": self.features, "signs": self.signs, "alphas": self.alphas,
                "n_features": self.n_features}

    @classmethod
    def from_body(cls, body: dict) -> "AdaRank":
        return cls(body["features"], body["signs"], body["alphas"], body["n_features"])

    @classmethod
    def fit(cls, data: QueryGroups, params: LtrParams) -> "AdaRank":
        data.check_trainable()
        n_queries = len(data)
        d = data.X.shape[1]
        candidates = [(f, s) for f in range(d) for s in (1, -1)]
        performance = np.array([data.ndcg_per_query(s * data.X[:, f], params.adarank_k) for f, s in candidates])

        weights = np.full(n_queries, 1.0 / n_queries)
        chosen_f, chosen_s, alphas = [], [], []
        combined = np.zeros(data.X.shape[0])
        for round_index in range(params.adarank_max_rounds):
            weighted = performance @ weights
            best = int(np.argmax(weighted))
            if round_index > 0 and weighted[best] <= params.adarank_min_weak_performance:
                logger.debug(f"AdaRank 第 {round_index} 輪最佳弱排序器表現 {weighted[best]:.4f}，停止")
                break
            e = performance[best]
            alpha = 0.5 * np.log((np.sum(weights * (1 + e)) + _EPS) / (np.sum(weights * (1 - e)) + _EPS))
            f, s = candidates[best]
            chosen_f.append(f)
            chosen_s.append(s)
            alphas.append(float(alpha))

            combined = combined + s * alpha * data.X[:, f]
            exp_loss = np.exp(-data.ndcg_per_query(combined, params.adarank_k))
            weights = exp_loss / exp_loss.sum()

        logger.info(f"AdaRank 訓練完成: {len(alphas)} 輪")
        return cls(chosen_f, chosen_s, alphas, d)


class RankBoost(Ranker):
    """
    RankBoost

    弱學習器 h(x) = [x_f > θ]，θ 取特徵觀測值的中點；在每對（相關, 不相關）文檔的分佈 D 下
    選擇 |r| 最大者，α = ½ ln((1+r)/(1-r))，r < 0 時 α 為負即反向使用該特徵。
    """
    algorithm = "RankBoost"

    def __init__(self, features: Sequence[int], thresholds: Sequence[float], alphas: Sequence[float],
                 n_features: int):
        self.features = [int(f) for f in features]
        self.thresholds = [float(t) for t in thresholds]
        self.alphas = [float(a) for a in alphas]
        self.n_features = n_features

    @property
    def n_rounds(self) -> int:
        return len(self.alphas)

    def score(self, features: np.ndarray) -> np.ndarray:
        X = np.asarray(features, dtype=float)
        scores = np.zeros(X.shape[0])
        for f, t, a in zip(self.features, self.thresholds, self.alphas):
            scores += a * (X[:, f] > t)
        return scores

    def staged_scores(self, features: np.ndarray) -> Iterator[np.ndarray]:
        X = np.asarray(features, dtype=float)
        scores = np.zeros(X.shape[0])
        for f, t, a in zip(self.features, self.thresholds, self.alphas):
            scores = scores + a * (X[:, f] > t)
            yield scores

    def truncate(self, n_rounds: int) -> "RankBoost":
        return RankBoost(self.features[:n_rounds], self.thresholds[:n_rounds], self.alphas[:n_rounds],
                         self.n_features)

    def to_body(self) -> dict:
        return {"features": self.features, "thresholds": self.thresholds, "alphas": self.alphas,
                "n_features": self.n_features}

    @classmethod
    def from_body(cls, body: dict) -> "RankBoost":
        return cls(body["features"], body["thresholds"], body["alphas"], body["n_features"])

    @staticmethod
    def _pairs(data: QueryGroups):
        high, low = [], []
        for rows in data.groups:
            rel = data.y[rows]
            for i in rows[rel > 0]:
                for j in rows[rel < data.y[i]]:
                    high.append(i)
                    low.append(j)
        return np.asarray(high, dtype=np.int64), np.asarray(low, dtype=np.int64)

    @classmethod
    def fit(cls, data: QueryGroups, params: LtrParams) -> "RankBoost":
        data.check_trainable()
        n, d = data.X.shape
        high, low = cls._pairs(data)
        if high.size == 0:
            raise InvalidInputError("沒有任何（相關, 不相關）文檔對，無法訓練 RankBoost")
        distribution = np.full(high.size, 1.0 / high.size)

        # 每個特徵的遞減排序與各個唯一值區段的結尾位置
        sorted_rows, boundaries, cut_values = [], [], []
        for f in range(d):
            order = np.argsort(-data.X[:, f], kind="stable")
            values = data.X[order, f]
            ends = np.flatnonzero(values[:-1] != values[1:])
            sorted_rows.append(order)
            boundaries.append(ends)
            cut_values.append((values[ends] + values[ends + 1]) / 2.0)

        features, thresholds, alphas = [], [], []
        for _ in range(params.rankboost_rounds):
            potential = (np.bincount(high, weights=distribution, minlength=n)
                         - np.bincount(low, weights=distribution, minlength=n))
            best = (0.0, -1, 0.0)
            for f in range(d):
                if boundaries[f].size == 0:
                    continue
                r_values = np.cumsum(potential[sorted_rows[f]])[boundaries[f]]
                k = int(np.argmax(np.abs(r_values)))
                if abs(r_values[k]) > abs(best[0]):
                    best = (float(r_values[k]), f, float(cut_values[f][k]))
            r, f, theta = best
            if f < 0 or abs(r) < _EPS:
                logger.debug("RankBoost 沒有可改進的弱學習器，提前停止")
                break
            r = float(np.clip(r, -1 + _EPS, 1 - _EPS))
            alpha = 0.5 * np.log((1 + r) / (1 - r))
            features.append(f)
            thresholds.append(theta)
            alphas.append(float(alpha))

            h = (data.X[:, f] > theta).astype(float)
            distribution = distribution * np.exp(-alpha * (h[high] - h[low]))
            distribution /= distribution.sum()

        logger.info(f"RankBoost 訓練完成: {len(alphas)} 輪，{high.size} 個文檔對")
        return cls(features, thresholds, alphas, d)


class LambdaMART(Ranker):
    """LambdaMART：λ_ij = |ΔNDCG| × 成對 logistic 梯度，交給梯度提升樹擬合"""
    algorithm = "LambdaMART"

    def __init__(self, ensemble: TreeEnsemble):
        self.ensemble = ensemble

    @property
    def n_rounds(self) -> int:
        return len(self.ensemble.trees)

    def score(self, features: np.ndarray) -> np.ndarray:
        return self.ensemble.predict(np.asarray(features, dtype=float).reshape(-1, self.ensemble.n_features))

    def staged_scores(self, features: np.ndarray) -> Iterator[np.ndarray]:
        return self.ensemble.staged_predict(np.asarray(features, dtype=float))

    def truncate(self, n_rounds: int) -> "LambdaMART":
        return LambdaMART(self.ensemble.truncate(n_rounds))

    def to_body(self) -> dict:
        return {"ensemble": self.ensemble.to_body()}

    @classmethod
    def from_body(cls, body: dict) -> "LambdaMART":
        return cls(TreeEnsemble.from_body(body["ensemble"]))

    @staticmethod
    def lambda_gradients(data: QueryGroups):
        """建立梯度回呼：輸入目前分數，回傳 (-λ, w)"""
        index, mask, doc_key = data.padded()
        labels = np.where(mask, data.y[index], 0.0)
        gains = np.where(mask, np.power(2.0, labels) - 1.0, 0.0)
        width = index.shape[1]
        ideal = -np.sort(-gains, axis=1)
        ideal_dcg = np.sum(ideal / np.log2(np.arange(2, width + 2)), axis=1)
        pair_valid = (labels[:, :, None] > labels[:, None, :]) & mask[:, :, None] & mask[:, None, :]
        pair_valid &= (ideal_dcg > 0)[:, None, None]
        safe_idcg = np.where(ideal_dcg > 0, ideal_dcg, 1.0)
        rows = index[mask]

        def gradient_fn(scores: np.ndarray):
            s = np.where(mask, scores[index], -np.inf)
            order = np.lexsort((doc_key, -s), axis=-1)
            positions = np.empty_like(order)
            np.put_along_axis(positions, order, np.arange(1, width + 1)[None, :].repeat(len(order), 0), axis=1)
            discount = np.where(mask, 1.0 / np.log2(positions + 1.0), 0.0)

            s = np.where(mask, s, 0.0)
            delta = np.abs((gains[:, :, None] - gains[:, None, :]) * (discount[:, :, None] - discount[:, None, :]))
            delta /= safe_idcg[:, None, None]
            rho = expit(-(s[:, :, None] - s[:, None, :]))
            push = np.where(pair_valid, rho * delta, 0.0)
            curvature = np.where(pair_valid, rho * (1.0 - rho) * delta, 0.0)

            lambdas = push.sum(axis=2) - push.sum(axis=1)
            hessians = curvature.sum(axis=2) + curvature.sum(axis=1)
            grad = np.zeros(data.X.shape[0])
            hess = np.zeros(data.X.shape[0])
            grad[rows] = -lambdas[mask]
            hess[rows] = hessians[mask]
            return grad, hess

        return gradient_fn

    @classmethod
    def fit(cls, data: QueryGroups, params: LtrParams) -> "LambdaMART":
        data.check_trainable()
        ensemble = gbdt_fit(data.X, loss=Loss.EXTERNAL, params=params.boost,
                            gradient_fn=cls.lambda_gradients(data))
        return cls(ensemble)


RANKERS = {cls.algorithm: cls for cls in (AdaRank, RankBoost, LambdaMART)}


def ranker_from_body(algorithm: str, body: dict) -> Ranker:
    if algorithm not in RANKERS:
        raise InvalidInputError(f"未知的排序演算法: {algorithm}")
    return RANKERS[algorithm].from_body(body)
