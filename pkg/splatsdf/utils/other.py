import os
import re
import logging


LOG_FORMAT = '%(asctime)s - %(name)s - %(lineno)-4d - %(levelname)-9s :: %(message)s'
# Third party loggers that flood DEBUG output during image and mesh IO.
QUIET_LOGGERS = ("PIL", "matplotlib", "trimesh")


def setup_logging(
        console=True,
        logfile=False,
        filedir=None,
        filename='splatsdf.log',
        level=logging.INFO,
    ):
    """
    Attach console and file handlers to the root logger.

    Handlers installed by an earlier call are removed first, so calling
    ``main`` several times in one process does not duplicate log lines.

    Parameters
    ----------
    console : `boolean`
        Output logging to stderr
    logfile : `boolean`
        Also append to ``filedir/filename``
    filedir : `str`
        Directory of the log file, created if missing
    filename : `str`
        Name of the log file
    level : `int`
        Level of the root logger and of every handler

    Returns
    -------
    logger : `logging.Logger`
        The configured root logger
    """
    logger = logging.getLogger()
    logger.setLevel(level)
    for handler in [h for h in logger.handlers if getattr(h, "_splatsdf", False)]:
        logger.removeHandler(handler)
        handler.close()
    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(max(level, logging.WARNING))

    formatter = logging.Formatter(LOG_FORMAT)

    def attach(handler):
        handler.setLevel(level)
        handler.setFormatter(formatter)
        handler._splatsdf = True
        logger.addHandler(handler)

    if console:
        attach(logging.StreamHandler())

    if logfile:
        if not filedir:
            raise ValueError("filedir must be given when logging to a file")
        os.makedirs(filedir, exist_ok=True)
        log_path = os.path.join(filedir, filename)
        # One line of hashes separates runs appended to the same file
        if os.path.exists(log_path):
            with open(log_path, 'a') as f:
                f.write(20 * "#" + "\n")
        attach(logging.FileHandler(log_path))
        logger.info(f"Logging to {log_path}")

    return logger


def to_snake_case(text):
    snake_case = re.sub(r'(?<!^)(?=[A-Z])', '_', text).lower()
    return snake_case


def to_command_name(text):
    """Convert a class name such as ``TrainSdf`` into the CLI name ``train-sdf``."""
    return to_snake_case(text).replace("_", "-")


def chunk_list(lst, chunk_size):
    for i in range(0, len(lst), chunk_size):
        yield lst[i:i + chunk_size]
