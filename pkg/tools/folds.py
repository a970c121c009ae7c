"""
交叉驗證折疊
以會話為單位、按類別分層切分，折疊退化時換洗牌種子重試
"""
import itertools
import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import GroupShuffleSplit, StratifiedGroupKFold
from tenacity import before_sleep_log, retry, retry_if_exception_type, stop_after_attempt

from config import settings
from core.error_handler import FoldDegenerateError, InvalidInputError

logger = logging.getLogger(__name__)

Fold = Tuple[np.ndarray, np.ndarray]
FoldCheck = Callable[[List[Fold]], None]


def stratified_group_folds(strata: Sequence, groups: Sequence, n_folds: Optional[int] = None,
                           seed: Optional[int] = None, check: Optional[FoldCheck] = None,
                           max_attempts: Optional[int] = None) -> List[Fold]:
    """
    分層分組 K 折

    同一組（會話）的樣本只會出現在同一個測試折；每個樣本恰好出現在一個測試折。
    check 回報 FoldDegenerateError 時以 seed+1, seed+2, ... 重新洗牌，超過次數後拋出最後一次的錯誤。

    Args:
        strata: 分層依據（標籤或意圖）
        groups: 分組依據（會話 ID）
        n_folds: 折數
        seed: 洗牌種子
        check: 檢查折疊是否可用的函數
        max_attempts: 最多嘗試次數

    Returns:
        (訓練索引, 測試索引) 列表
    """
    n_folds = n_folds or settings.folds
    seed = settings.seed if seed is None else seed
    max_attempts = max_attempts or settings.max_restratify_attempts
    strata = np.asarray(strata)
    groups = np.asarray(groups)
    if strata.shape != groups.shape or strata.ndim != 1:
        raise InvalidInputError("分層與分組陣列長度不一致")
    n_groups = np.unique(groups).size
    if n_groups < n_folds:
        raise InvalidInputError(f"只有 {n_groups} 個會話，無法切成 {n_folds} 折")

    offsets = itertools.count()

    @retry(stop=stop_after_attempt(max_attempts),
           retry=retry_if_exception_type(FoldDegenerateError),
           before_sleep=before_sleep_log(logger, logging.WARNING),
           reraise=True)
    def attempt() -> List[Fold]:
        attempt_seed = seed + next(offsets)
        splitter = StratifiedGroupKFold(n_splits=n_folds, shuffle=True, random_state=attempt_seed)
        folds = [(np.asarray(train), np.asarray(test))
                 for train, test in splitter.split(np.zeros(len(strata)), strata, groups)]
        if check is not None:
            check(folds)
        return folds

    return attempt()


def validation_split(groups: Sequence, val_fraction: Optional[float] = None,
                     seed: Optional[int] = None) -> Optional[Fold]:
    """
    從訓練資料中按組切出驗證集

    Returns:
        (子訓練索引, 驗證索引)；組數不足以切分時為 None
    """
    val_fraction = settings.val_fraction if val_fraction is None else val_fraction
    seed = settings.seed if seed is None else seed
    groups = np.asarray(groups)
    if np.unique(groups).size < 3:
        return None
    splitter = GroupShuffleSplit(n_splits=1, test_size=val_fraction, random_state=seed)
    train, val = next(splitter.split(np.zeros(len(groups)), groups=groups))
    if train.size == 0 or val.size == 0:
        return None
    return np.asarray(train), np.asarray(val)
