# core: 分類體系、會話日誌、行為指標、統計檢定與梯度提升樹
from .error_handler import ErrorHandler, IntentIRError, InvalidInputError, UndefinedStatisticError
