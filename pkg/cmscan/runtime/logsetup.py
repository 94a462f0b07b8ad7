import os, logging
from rich.console import Console
from rich.logging import RichHandler
from cmscan.numerics.tensor import ConfigurationError

LOG_LEVELS = {'error': logging.ERROR, 'warn': logging.WARNING, 'info': logging.INFO, 'debug': logging.DEBUG}
DEFAULT_LEVEL = 'info'

def resolve_level(level : str = None):
    """Log level from an explicit value, else the CMSCAN_LOG environment variable, else info
    ----------

    Parameters
    ----------
    level : str (optional)
        One of LOG_LEVELS

    Raises
    -------
    ConfigurationError
        Unknown level

    Returns
    -------
    level : int
        logging level
    """
    if level is None: level = os.getenv('CMSCAN_LOG') or DEFAULT_LEVEL
    level = level.strip().lower()
    if level not in LOG_LEVELS: raise ConfigurationError('Unknown log level ' + repr(level) + ', expected one of ' + str(tuple(LOG_LEVELS)))
    return LOG_LEVELS[level]

def setup_logging(level : str = None):
    """Route the cmscan loggers to a rich handler on stderr
    ----------
    """
    resolved = resolve_level(level)
    logger = logging.getLogger('cmscan')
    for handler in list(logger.handlers): logger.removeHandler(handler)
    handler = RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=False)
    handler.setFormatter(logging.Formatter('%(message)s', datefmt='[%X]'))
    logger.addHandler(handler)
    logger.setLevel(resolved)
    logger.propagate = False
    return logger
