"""
Logging setup shared by the CLI and the API server.
"""
import logging

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def setup_logging(level: str = "INFO") -> None:
    """Configure the root logger once; later calls only change the level."""
    root = logging.getLogger()
    if not root.handlers:
        logging.basicConfig(level=level.upper(), format=LOG_FORMAT)
    root.setLevel(level.upper())


def banner(logger: logging.Logger, title: str, lines: dict) -> None:
    """Log a framed block of key/value lines."""
    logger.info("=" * 50)
    logger.info(title)
    logger.info("=" * 50)
    for key, value in lines.items():
        logger.info("%s: %s", key, value)
    logger.info("=" * 50)
