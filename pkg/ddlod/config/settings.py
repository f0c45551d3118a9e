from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Application
    debug: bool = False
    log_level: str = "INFO"

    # Linear algebra
    direct_solver_limit: int = 200_000
    dense_solver_limit: int = 400
    iterative_tol: float = 1e-10
    iterative_max_iter: int = 20_000

    # Multiscale basis
    threads: int = 1
    basis_chunk_size: int = 32
    corrector_j: int = 3
    cache_dir: str = ".ddlod-cache"

    # Optimizer
    pdas_max_iter: int = 50
    pdas_tol: float = 1e-10

    model_config = SettingsConfigDict(
        env_prefix="DDLOD_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )


settings = Settings()
