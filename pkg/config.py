"""
系統配置
所有閾值、演算法預設值與並行度都集中在這裡，可由環境變數 INTENTIR_* 或 .env 覆寫
"""
import logging
from pydantic import Field, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)

__version__ = "0.1.0"


class Settings(BaseSettings):
    """系統配置類別"""

    model_config = SettingsConfigDict(
        env_prefix="INTENTIR_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    # Session log
    session_gap_minutes: float = Field(default=30.0, gt=0)
    min_max_query_terms: int = Field(default=2, ge=0)
    hover_min_seconds: float = Field(default=0.0, ge=0)
    results_per_page: int = Field(default=10, gt=0)

    # Behavior metrics
    sats_dwell_threshold_seconds: float = Field(default=30.0, ge=0)
    significance_alpha: float = Field(default=0.05, gt=0, lt=1)

    # Text features
    cjk_bigrams: bool = True
    bm25_k1: float = Field(default=1.2, ge=0)
    bm25_b: float = 0.75

    # Boosting
    n_trees: int = Field(default=300, ge=0)
    learning_rate: float = Field(default=0.1, gt=0)
    max_depth: int = Field(default=6, gt=0)
    min_samples_leaf: int = Field(default=5, gt=0)
    subsample: float = 1.0

    # Experiments
    seed: int = 7
    folds: int = Field(default=5, ge=2)
    val_fraction: float = Field(default=0.10, gt=0, lt=1)
    max_restratify_attempts: int = Field(default=5, ge=1)
    adarank_max_rounds: int = Field(default=100, ge=1)
    adarank_min_weak_performance: float = 0.5
    rankboost_rounds: int = Field(default=300, ge=1)

    # INTENTIR_THREADS
    threads: int = 1

    @model_validator(mode='after')
    def check_ranges(self) -> 'Settings':
        if not 0.0 < self.subsample <= 1.0:
            raise ValueError(f"subsample 必須在 (0, 1] 之間，目前為 {self.subsample}")
        if not 0.0 <= self.bm25_b <= 1.0:
            raise ValueError(f"bm25_b 必須在 [0, 1] 之間，目前為 {self.bm25_b}")
        if self.threads < 1:
            logger.warning(f"INTENTIR_THREADS={self.threads} 無效，改用單執行緒")
            self.threads = 1
        return self


# 全局配置實例
settings = Settings()
