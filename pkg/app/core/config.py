from pydantic_settings import BaseSettings
import os
import logging
from rich.logging import RichHandler
from rich.theme import Theme
from rich.console import Console


class Settings(BaseSettings):
    # Project Information
    PROJECT_NAME: str = "FedConPE Simulator"
    VERSION: str = "1.0.0"
    DESCRIPTION: str = "Federated conversational bandit simulator and experiment runner"

    # Log level
    LOG_LEVEL: str = os.getenv("FEDCON_LOG", "INFO")

    # Experimental design solver
    DESIGN_TOL: float = float(os.getenv("FEDCON_DESIGN_TOL", "1e-2"))
    DESIGN_MAX_ITER: int = int(os.getenv("FEDCON_DESIGN_MAX_ITER", "10000"))
    DESIGN_PRUNE_THRESHOLD: float = 1e-6

    # Key-term richness estimation
    RICHNESS_DIRECTIONS: int = int(os.getenv("FEDCON_RICHNESS_DIRECTIONS", "2000"))

    # Parallel seeds (1 runs everything in-process)
    MAX_WORKERS: int = int(os.getenv("FEDCON_MAX_WORKERS", "1"))

    # Desk-scale experiment defaults
    DEFAULT_DIM: int = 10
    DEFAULT_ARMS: int = 50
    DEFAULT_CLIENTS: int = 5
    DEFAULT_HORIZON: int = 20_000
    DEFAULT_SEEDS: int = 10

    class Config:
        case_sensitive = True
        env_file = ".env"
        extra = "ignore"  # Ignore extra environment variables


settings = Settings()


def setup_logging(level: str | None = None):
    """Configure colored logging with Rich."""

    custom_theme = Theme(
        {
            "logging.level.debug": "yellow",
            "logging.level.info": "green",
            "logging.level.warning": "orange3",
            "logging.level.error": "red",
            "logging.level.critical": "bold red",
            "logging.keyword": "cyan",
            "logging.string": "magenta",
            "logging.number": "bright_blue",
        }
    )

    # stderr keeps CSV/JSON on stdout clean
    console = Console(theme=custom_theme, stderr=True)

    rich_handler = RichHandler(
        console=console,
        show_time=True,
        show_level=True,
        show_path=False,
        enable_link_path=False,
        markup=True,
        rich_tracebacks=True,
        tracebacks_show_locals=False,
        keywords=["PHASE", "SEED", "SWEEP"],
    )
    rich_handler.setFormatter(
        logging.Formatter(fmt="[%(name)s] %(message)s", datefmt="[%X]")
    )

    log_level = (level or settings.LOG_LEVEL).upper()
    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, log_level, logging.INFO))
    root_logger.handlers.clear()
    root_logger.addHandler(rich_handler)

    loggers_config = {
        # Simulator loggers follow the requested level
        "app": getattr(logging, log_level, logging.INFO),
    }

    for logger_name, logger_level in loggers_config.items():
        logger = logging.getLogger(logger_name)
        logger.setLevel(logger_level)
        logger.propagate = True

    setup_logger = logging.getLogger("app.core.config")
    setup_logger.debug("Rich logging configured")
    setup_logger.debug(f"Log level: [bold cyan]{log_level}[/bold cyan]")
