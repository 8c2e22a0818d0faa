import argparse
import logging
import sys
from typing import Callable, List, Optional, Sequence, Tuple, Type

from .config import settings
from .commands import inspect, search, training
from .core.exceptions import (
    ArtifactError,
    ConfigurationError,
    DivergenceError,
    GenotypeError,
    NasError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_IO = 4


def _report_divergence(exc: DivergenceError) -> None:
    logger.error(f"Training diverged: {exc}")
    for key, value in exc.diagnostics.items():
        logger.error(f"  {key}: {value}")
    logger.error(f"Last good checkpoint: {exc.last_good_checkpoint or 'none'}")


def _report(title: str) -> Callable[[BaseException], None]:
    def handler(exc: BaseException) -> None:
        logger.error(f"{title}: {exc}")
    return handler


# First match wins, so subclasses come before their bases.
EXCEPTION_HANDLERS: List[Tuple[Type[BaseException], int, Callable[[BaseException], None]]] = [
    (ConfigurationError, EXIT_CONFIG, _report("Configuration error")),
    (GenotypeError, EXIT_CONFIG, _report("Invalid genotype")),
    (ArtifactError, EXIT_IO, _report("Artifact error")),
    (DivergenceError, EXIT_RUNTIME, _report_divergence),
    (NasError, EXIT_RUNTIME, _report("Runtime error")),
    (OSError, EXIT_IO, _report("I/O error")),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conformer-nas",
        description=f"{settings.APP_TITLE} v{settings.APP_VERSION}",
    )
    parser.add_argument("--log-level", default=settings.LOG_LEVEL,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")
    subparsers = parser.add_subparsers(dest="command", required=True)
    search.register(subparsers)
    training.register(subparsers)
    inspect.register(subparsers)
    return parser


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level),
        format=settings.LOG_FORMAT,
        handlers=[
            logging.StreamHandler(),
        ],
        force=True,
    )


def handle_exception(exc: BaseException) -> int:
    for exc_type, code, handler in EXCEPTION_HANDLERS:
        if isinstance(exc, exc_type):
            handler(exc)
            return code
    raise exc


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    logger.debug(f"Running command {args.command}")
    try:
        return args.handler(args)
    except Exception as exc:
        return handle_exception(exc)


if __name__ == "__main__":
    sys.exit(main())
