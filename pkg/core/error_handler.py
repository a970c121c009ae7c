"""
錯誤處理
統一的例外類型、錯誤分類、CLI 退出碼對應與重試策略
"""
import logging
from typing import Dict, Any, List
from enum import Enum

from pydantic import ValidationError

logger = logging.getLogger(__name__)


class IntentIRError(Exception):
    """所有工具包錯誤的基底類別"""


class InvalidInputError(IntentIRError, ValueError):
    """輸入不符合前置條件（排序、取值範圍、缺少欄位等）"""


class UndefinedStatisticError(IntentIRError, ValueError):
    """統計量在此輸入上沒有定義（例如零變異數的相關係數）"""


class UnsupportedIntentError(IntentIRError, KeyError):
    """意圖不在排序模型支援的集合內"""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unsupported intent"


class FoldDegenerateError(IntentIRError):
    """交叉驗證的某一折缺少類別或意圖"""


class ArtifactVersionError(IntentIRError):
    """模型或索引檔案的格式版本不符"""


class ErrorType(Enum):
    """錯誤類型"""
    VALIDATION = "validation"
    UNDEFINED = "undefined"
    UNSUPPORTED_INTENT = "unsupported_intent"
    DEGENERATE_FOLD = "degenerate_fold"
    ARTIFACT_VERSION = "artifact_version"
    INTERNAL = "internal"


# CLI 退出碼：驗證類錯誤為 1，其餘內部錯誤為 2
EXIT_CODES = {
    ErrorType.VALIDATION: 1,
    ErrorType.UNDEFINED: 1,
    ErrorType.UNSUPPORTED_INTENT: 1,
    ErrorType.DEGENERATE_FOLD: 1,
    ErrorType.ARTIFACT_VERSION: 1,
    ErrorType.INTERNAL: 2,
}


class ErrorHandler:
    """錯誤處理器"""

    def __init__(self, max_retries: int = 5):
        """
        初始化錯誤處理器

        Args:
            max_retries: 可重試錯誤的最大嘗試次數
        """
        self.max_retries = max_retries
        self.error_history: List[Dict[str, Any]] = []

    def handle_error(self, error: Exception, context: Dict[str, Any] = None) -> Dict[str, Any]:
        """
        處理錯誤

        Args:
            error: 異常對象
            context: 上下文信息（子命令、輸入路徑等）

        Returns:
            錯誤處理結果，包含退出碼
        """
        error_type = self.classify_error(error)

        error_info = {
            "type": error_type.value,
            "message": str(error),
            "context": context or {},
            "exit_code": EXIT_CODES[error_type],
            "should_retry": self.should_retry(error_type),
        }

        self.error_history.append(error_info)
        if error_type is ErrorType.INTERNAL:
            logger.exception(f"內部錯誤: {error_info}")
        else:
            logger.error(f"輸入錯誤: {error_info['message']}")

        return error_info

    @staticmethod
    def classify_error(error: Exception) -> ErrorType:
        """分類錯誤類型"""
        if isinstance(error, FoldDegenerateError):
            return ErrorType.DEGENERATE_FOLD
        if isinstance(error, UnsupportedIntentError):
            return ErrorType.UNSUPPORTED_INTENT
        if isinstance(error, UndefinedStatisticError):
            return ErrorType.UNDEFINED
        if isinstance(error, ArtifactVersionError):
            return ErrorType.ARTIFACT_VERSION
        if isinstance(error, (InvalidInputError, ValidationError, FileNotFoundError)):
            return ErrorType.VALIDATION
        return ErrorType.INTERNAL

    @staticmethod
    def should_retry(error_type: ErrorType) -> bool:
        """判斷是否應該重試：只有折疊分層失敗可以換一個洗牌種子再試"""
        return error_type is ErrorType.DEGENERATE_FOLD

    def get_retry_strategy(self, error_type: ErrorType) -> Dict[str, Any]:
        """
        獲取重試策略

        Args:
            error_type: 錯誤類型

        Returns:
            重試策略配置
        """
        if self.should_retry(error_type):
            return {"max_attempts": self.max_retries, "reseed": True}
        return {"max_attempts": 1, "reseed": False}

    def get_error_statistics(self) -> Dict[str, Any]:
        """獲取錯誤統計"""
        error_counts: Dict[str, int] = {}
        for error in self.error_history:
            error_counts[error["type"]] = error_counts.get(error["type"], 0) + 1

        return {
            "total_errors": len(self.error_history),
            "error_counts": error_counts,
            "recent_errors": self.error_history[-10:],
        }
