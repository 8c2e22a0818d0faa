from typing import Optional
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="CNAS_",
        case_sensitive=True,
        extra="ignore",
    )

    APP_TITLE: str = "Conformer DARTS Search"
    APP_VERSION: str = "1.0.0"

    # Overrides --out when set (CNAS_OUTPUT_DIR)
    OUTPUT_DIR: Optional[str] = None

    # Steps between info-level progress lines during search and training
    LOG_EVERY: int = 25

    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


settings = Settings()
