from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Reproducibility
    seed: int = 0  # IVPT_SEED

    # Output locations
    output_dir: str = "runs"
    log_dir: str = "logs"

    # Sweep parallelism (process pool size)
    jobs: int = 1

    # Environment
    environment: str = "development"

    # Logging control
    debug: bool = False
    log_level: str = "INFO"
    log_to_file: bool = True

    # Error Tracking
    sentry_dsn: str | None = None  # Only initialized when set
    sentry_traces_sample_rate: float = 0.0

    model_config = SettingsConfigDict(
        env_prefix="IVPT_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

settings = Settings()
