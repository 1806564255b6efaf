from pathlib import Path
import logging
import logging.config
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="l0_dynamics_", env_file=".env")

    root_dir: Path = Path.cwd()

    @property
    def data_dir(self) -> Path:
        return self.root_dir / "Data"

    @property
    def log_dir(self) -> Path:
        return self.data_dir / "logs"

    # Default parallelism for dataset shards and lambda sweeps
    max_workers: int = Field(default=4, ge=1)

    # Rows per forward pass when evaluating a whole dataset
    eval_chunk_size: int = Field(default=8192, ge=1)

    # Smallest |coef * z| printed by equation extraction
    print_threshold: float = Field(default=1e-8, ge=0.0)

    # Uniform gate noise is clamped to [noise_eps, 1 - noise_eps]
    noise_eps: float = Field(default=1e-7, gt=0.0, lt=0.5)

    # Fills the seconds column of metrics.csv
    record_wall_time: bool = False

    show_progress: bool = True

    debug: bool = False


config = Settings()


class RunAdapter(logging.LoggerAdapter):
    def process(self, msg, kwargs):
        run_name = (
            self.extra["run_name"]
            if self.extra and "run_name" in self.extra
            else "Unknown"
        )
        return f"[Run {run_name}] {msg}", kwargs


def setup_logging(log_file_dir: Path | None = None):
    log_file_dir = log_file_dir or config.log_dir
    if not log_file_dir.exists():
        log_file_dir.mkdir(parents=True, exist_ok=True)
    log_file_path = log_file_dir / "app.log"

    logging.config.dictConfig(
        {
            "version": 1,
            "formatters": {
                "standard": {
                    "class": "logging.Formatter",
                    "format": "[%(asctime)s] [%(filename)s:%(lineno)d] [%(levelname)s] [%(threadName)s] %(message)s",
                    "datefmt": "%Y-%m-%d %H:%M:%S",
                }
            },
            "handlers": {
                "console": {
                    "class": "logging.StreamHandler",
                    "formatter": "standard",
                    "level": "DEBUG" if config.debug else "INFO",
                    # stdout carries command results
                    "stream": "ext://sys.stderr",
                },
                "file": {
                    "class": "logging.FileHandler",
                    "formatter": "standard",
                    "level": "DEBUG",
                    "filename": log_file_path,
                    "mode": "a",
                    "encoding": "utf-8",
                },
            },
            "loggers": {
                "l0_dynamics": {
                    "handlers": ["console", "file"],
                    "level": "DEBUG",
                    "propagate": False,
                },
            },
            "root": {"level": "WARNING", "handlers": ["console"]},
            "disable_existing_loggers": False,
        }
    )


if __name__ == "__main__":
    print(config.model_dump_json(indent=4))
