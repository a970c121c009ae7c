"""
梯度提升樹
加權迴歸樹與可插拔損失的梯度提升，供滿意度分類（logistic）與 LambdaMART（外部梯度）共用
"""
import logging
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit
from sklearn.tree import DecisionTreeRegressor

from config import settings
from .artifact_store import ArtifactStore
from .error_handler import InvalidInputError

logger = logging.getLogger(__name__)

ENSEMBLE_FORMAT_VERSION = 1
_HESSIAN_FLOOR = 1e-12

GradientFn = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]


class Loss(str, Enum):
    LOGISTIC = "logistic"
    LEAST_SQUARES = "least_squares"
    EXTERNAL = "external_gradients"


class BoostParams(BaseModel):
    """提升參數；預設值取自 settings"""
    model_config = ConfigDict(frozen=True)

    n_trees: int = Field(default_factory=lambda: settings.n_trees, ge=0)
    learning_rate: float = Field(default_factory=lambda: settings.learning_rate, gt=0)
    max_depth: int = Field(default_factory=lambda: settings.max_depth, gt=0)
    min_samples_leaf: int = Field(default_factory=lambda: settings.min_samples_leaf, gt=0)
    subsample: float = Field(default_factory=lambda: settings.subsample, gt=0, le=1)
    seed: int = Field(default_factory=lambda: settings.seed)


class RegressionTree:
    """
    二元迴歸樹

    以平行陣列儲存節點：feature < 0 表示葉節點。
    分裂規則為 x[feature] <= threshold 走左子樹，特徵先轉成 float32 再比較。
    """

    def __init__(self, feature: np.ndarray, threshold: np.ndarray, left: np.ndarray,
                 right: np.ndarray, value: np.ndarray):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return int(self.feature.size)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] >= 0:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max()) if self.n_nodes else 0

    def apply(self, X: np.ndarray) -> np.ndarray:
        """每一行落入的葉節點編號"""
        X32 = np.asarray(X, dtype=np.float32)
        node = np.zeros(X32.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while np.any(active):
            rows = np.flatnonzero(active)
            current = node[rows]
            go_left = X32[rows, self.feature[current]] <= self.threshold[current]
            node[rows] = np.where(go_left, self.left[current], self.right[current])
            active = self.feature[node] >= 0
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> Dict[str, list]:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, list]) -> "RegressionTree":
        return cls(data["feature"], data["threshold"], data["left"], data["right"], data["value"])

    def __eq__(self, other) -> bool:
        if not isinstance(other, RegressionTree):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("feature", "threshold", "left", "right", "value"))


def _check_matrix(features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2:
        raise InvalidInputError(f"特徵必須是二維矩陣，收到形狀 {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InvalidInputError("特徵含有非有限值，請先填補缺失值")
    return X


def fit_tree(features: np.ndarray, targets: Sequence[float], weights: Optional[Sequence[float]] = None,
             params: Optional[BoostParams] = None, seed: Optional[int] = None) -> RegressionTree:
    """
    擬合一棵加權迴歸樹

    以加權平方誤差的貪婪分裂建樹，閾值取相鄰觀測值的中點；葉值為葉內目標的加權平均。

    Args:
        features: n×d 特徵矩陣
        targets: n 個目標值
        weights: n 個非負權重，預設全為 1
        params: 深度與葉節點最小樣本數
        seed: 分裂平手時的隨機種子，預設 params.seed

    Returns:
        RegressionTree
    """
    params = params or BoostParams()
    X = _check_matrix(features)
    y = np.asarray(targets, dtype=np.float64)
    n = X.shape[0]
    if y.shape != (n,):
        raise InvalidInputError(f"目標長度 {y.shape} 與特徵行數 {n} 不一致")
    if n < 2 * params.min_samples_leaf:
        raise InvalidInputError(
            f"樣本數 {n} 少於 2 × min_samples_leaf ({params.min_samples_leaf})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,) or np.any(w < 0):
        raise InvalidInputError("權重長度不符或含有負值")

    regressor = DecisionTreeRegressor(
        max_depth=params.max_depth,
        min_samples_leaf=params.min_samples_leaf,
        random_state=params.seed if seed is None else seed,
    )
    regressor.fit(X, y, sample_weight=w)
    structure = regressor.tree_

    tree = RegressionTree(
        feature=np.where(structure.children_left >= 0, structure.feature, -1),
        threshold=np.where(structure.children_left >= 0, structure.threshold, 0.0),
        left=structure.children_left,
        right=structure.children_right,
        value=np.zeros(structure.node_count),
    )

    # 葉值重新以加權平均計算，與預測時的路徑規則一致
    leaves = tree.apply(X)
    sums = np.bincount(leaves, weights=w * y, minlength=tree.n_nodes)
    totals = np.bincount(leaves, weights=w, minlength=tree.n_nodes)
    tree.value = np.divide(sums, totals, out=np.zeros(tree.n_nodes), where=totals > 0)
    return tree


class TreeEnsemble:
    """加法樹模型：score = base_score + learning_rate · Σ tree(x)"""

    def __init__(self, base_score: float, learning_rate: float, trees: List[RegressionTree],
                 n_features: int, loss: Loss = Loss.LEAST_SQUARES,
                 feature_names: Optional[List[str]] = None, params: Optional[BoostParams] = None):
        self.base_score = float(base_score)
        self.learning_rate = float(learning_rate)
        self.trees = list(trees)
        self.n_features = int(n_features)
        self.loss = Loss(loss)
        self.feature_names = list(feature_names) if feature_names is not None else None
        self.params = params

    def _check(self, features) -> Tuple[np.ndarray, bool]:
        X = np.asarray(features, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X.reshape(1, -1)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise InvalidInputError(f"特徵維度 {X.shape[-1]} 與訓練時的 {self.n_features} 不一致")
        return X, single

    def predict(self, features) -> Union[float, np.ndarray]:
        """單行輸入回傳純量，矩陣輸入回傳陣列"""
        X, single = self._check(features)
        scores = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            scores += self.learning_rate * tree.predict(X)
        return float(scores[0]) if single else scores

    def predict_proba(self, features) -> Union[float, np.ndarray]:
        scores = self.predict(features)
        return float(expit(scores)) if np.isscalar(scores) else expit(scores)

    def staged_predict(self, features) -> Iterator[np.ndarray]:
        """依序產生使用前 1..T 棵樹時的分數"""
        X, _ = self._check(features)
        scores = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            scores = scores + self.learning_rate * tree.predict(X)
            yield scores

    def truncate(self, n_trees: int) -> "TreeEnsemble":
        return TreeEnsemble(self.base_score, self.learning_rate, self.trees[:n_trees], self.n_features,
                            self.loss, self.feature_names, self.params)

    def to_body(self) -> dict:
        return {
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "n_features": self.n_features,
            "loss": self.loss.value,
            "feature_names": self.feature_names,
            "params": self.params.model_dump() if self.params else None,
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_body(cls, body: dict) -> "TreeEnsemble":
        return cls(
            base_score=body["base_score"],
            learning_rate=body["learning_rate"],
            trees=[RegressionTree.from_dict(t) for t in body["trees"]],
            n_features=body["n_features"],
            loss=Loss(body["loss"]),
            feature_names=body.get("feature_names"),
            params=BoostParams(**body["params"]) if body.get("params") else None,
        )

    def to_json(self) -> str:
        return ArtifactStore("tree_ensemble", ENSEMBLE_FORMAT_VERSION).dumps(self.to_body())

    @classmethod
    def from_json(cls, text: str) -> "TreeEnsemble":
        return cls.from_body(ArtifactStore("tree_ensemble", ENSEMBLE_FORMAT_VERSION).loads(text))

    def save(self, path: Union[str, Path]):
        ArtifactStore("tree_ensemble", ENSEMBLE_FORMAT_VERSION).save(path, self.to_body())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TreeEnsemble":
        return cls.from_body(ArtifactStore("tree_ensemble", ENSEMBLE_FORMAT_VERSION).load(path))


def _initial_score(loss: Loss, y: Optional[np.ndarray]) -> float:
    if loss is Loss.LEAST_SQUARES:
        return float(np.mean(y))
    if loss is Loss.LOGISTIC:
        rate = float(np.mean(y))
        return float(np.log(rate / (1.0 - rate)))
    return 0.0


def _gradients(loss: Loss, y: Optional[np.ndarray], scores: np.ndarray,
               gradient_fn: Optional[GradientFn]) -> Tuple[np.ndarray, np.ndarray]:
    if loss is Loss.LEAST_SQUARES:
        return scores - y, np.ones_like(scores)
    if loss is Loss.LOGISTIC:
        p = expit(scores)
        return p - y, p * (1.0 - p)
    grad, hess = gradient_fn(scores)
    return np.asarray(grad, dtype=np.float64), np.asarray(hess, dtype=np.float64)


def gbdt_fit(features: np.ndarray, labels: Optional[Sequence[float]] = None,
             loss: Union[Loss, str] = Loss.LEAST_SQUARES, params: Optional[BoostParams] = None,
             gradient_fn: Optional[GradientFn] = None,
             feature_names: Optional[List[str]] = None) -> TreeEnsemble:
    """
    逐階段擬合梯度提升樹

    每一階段以 (-g/h, 權重 h) 擬合一棵加權迴歸樹，葉值即 Newton 步 Σ(-g)/Σh；
    平方損失時 h = 1，葉值退化為殘差平均。

    Args:
        features: n×d 特徵矩陣
        labels: 目標（least_squares）或 0/1 標籤（logistic）
        loss: 損失函數
        params: 提升參數
        gradient_fn: external_gradients 時由呼叫者提供，輸入目前分數，回傳 (梯度, 二階導數)
        feature_names: 特徵名稱，隨模型保存

    Returns:
        TreeEnsemble
    """
    params = params or BoostParams()
    loss = Loss(loss)
    X = _check_matrix(features)
    n, d = X.shape

    y = None
    if loss is Loss.EXTERNAL:
        if gradient_fn is None:
            raise InvalidInputError("external_gradients 需要提供 gradient_fn")
    else:
        if labels is None:
            raise InvalidInputError(f"{loss.value} 需要提供標籤")
        y = np.asarray(labels, dtype=np.float64)
        if y.shape != (n,):
            raise InvalidInputError(f"標籤長度 {y.shape} 與特徵行數 {n} 不一致")
    if loss is Loss.LOGISTIC:
        if not np.all(np.isin(y, (0.0, 1.0))):
            raise InvalidInputError("logistic 損失的標籤必須是 0/1")
        if np.unique(y).size < 2:
            raise InvalidInputError("logistic 損失需要同時包含兩個類別")
    if feature_names is not None and len(feature_names) != d:
        raise InvalidInputError(f"特徵名稱數 {len(feature_names)} 與特徵維度 {d} 不一致")

    base_score = _initial_score(loss, y)
    scores = np.full(n, base_score)
    rng = np.random.default_rng(params.seed)
    sample_size = max(2 * params.min_samples_leaf, int(round(params.subsample * n)))
    trees: List[RegressionTree] = []

    for stage in range(params.n_trees):
        grad, hess = _gradients(loss, y, scores, gradient_fn)
        hess = np.maximum(hess, _HESSIAN_FLOOR)
        rows = np.arange(n)
        if sample_size < n:
            rows = np.sort(rng.choice(n, size=sample_size, replace=False))
        tree = fit_tree(X[rows], -grad[rows] / hess[rows], hess[rows], params, seed=params.seed + stage)
        trees.append(tree)
        scores = scores + params.learning_rate * tree.predict(X)
        if stage % 50 == 0:
            logger.debug(f"第 {stage} 棵樹: {tree.n_leaves} 個葉節點")

    logger.info(f"{loss.value} 提升完成: {len(trees)} 棵樹，{n} 個樣本，{d} 個特徵")
    return TreeEnsemble(base_score, params.learning_rate, trees, d, loss, feature_names, params)
