import logging
from logging.handlers import RotatingFileHandler

from rich.logging import RichHandler  # type: ignore

from _globals import LOGGER_NAME


def get_logger(logger=None):
    """Return `logger` when given, otherwise the package logger."""
    return logger if logger is not None else logging.getLogger(LOGGER_NAME)


def setup_logging(log_file='mmreg.log', verbose=False):
    """
    Sets up logging for the registration tools.

    Parameters:
    - log_file (str or None): Path to the log file. None disables file logging.
    - verbose (bool): Show DEBUG records on the console.

    Returns:
    - logger: Configured logger instance.
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(logging.DEBUG)  # Capture all levels of logs

    # Prevent adding multiple handlers if the logger already has them
    if not logger.handlers:
        c_handler = RichHandler(show_path=False)
        c_handler.setLevel(logging.DEBUG if verbose else logging.INFO)
        c_handler.setFormatter(logging.Formatter('%(message)s', datefmt='[%X]'))
        logger.addHandler(c_handler)

        if log_file:
            f_handler = RotatingFileHandler(log_file, maxBytes=5*1024*1024, backupCount=2)
            f_handler.setLevel(logging.DEBUG)
            f_handler.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))
            logger.addHandler(f_handler)

    return logger
