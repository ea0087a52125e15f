from typing import Optional
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="AUTOOD_", env_file=".env", extra="ignore")

    # Service Configuration
    APP_NAME: str = "autood"
    APP_VERSION: str = "1.0.0"
    ENVIRONMENT: str = "development"

    # Output directory override (AUTOOD_OUT)
    OUT: Optional[str] = None

    # Seed used when neither the config file nor --seed provides one
    DEFAULT_SEED: int = 0

    # Logging
    LOG_LEVEL: str = "INFO"


settings = Settings()
