"""
全局配置设置 - process-level knobs for the simulation engine.

Scenario parameters live in scenario documents (see docs/guides/config-schema.md),
not here.
"""
from typing import Optional

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """应用配置"""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    # 基础配置
    PROJECT_NAME: str = "RDSim"
    VERSION: str = "1.0.0"

    # 日志配置
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "text"  # text | json
    LOG_DIR: Optional[str] = None

    # 运行配置
    RDSIM_WORKERS: int = Field(default=1, ge=1)
    RDSIM_OUTPUT_DIR: str = "results"
    RDSIM_DEFAULT_SIMS: int = Field(default=1000, ge=1)
    RDSIM_FULL_SCALE_SIMS: int = Field(default=6000, ge=1)
    RDSIM_CHECKPOINT_EVERY: int = Field(default=50, ge=1)

    # 真值（oracle mega-trial）
    ORACLE_PATIENTS_PER_ARM: int = Field(default=5_000_000, ge=1)
    ORACLE_CHUNK: int = Field(default=250_000, ge=1)
    ORACLE_SEED: int = 20240917

    # IRLS
    IRLS_TOL: float = Field(default=1e-8, gt=0)
    IRLS_MAX_ITER: int = Field(default=50, ge=1)

    @field_validator("LOG_FORMAT")
    @classmethod
    def _check_log_format(cls, v: str) -> str:
        v = (v or "text").strip().lower()
        if v not in ("text", "json"):
            raise ValueError("LOG_FORMAT must be 'text' or 'json'")
        return v


# 创建全局配置实例
settings = Settings()
