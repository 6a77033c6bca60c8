import random
import logging
import time
import functools

import numpy as np
import torch

from itertools import islice


logger = logging.getLogger(__name__)

LOG_FORMAT = "%(levelname)s - %(filename)s - %(lineno)s: %(message)s"


def timeit(method):
    """Logs the wall time of every call to ``method``."""
    @functools.wraps(method)
    def timed(*args, **kw):
        started = time.perf_counter()
        try:
            return method(*args, **kw)
        finally:
            logger.info("Timeit - '{}' took {:.3f}s".format(
                method.__qualname__, time.perf_counter() - started))
    return timed


def configure_colored_logging(logger, loglevel='info'):
    import coloredlogs
    styles = dict(coloredlogs.DEFAULT_FIELD_STYLES, asctime={})
    coloredlogs.install(logger=logger, level=loglevel, use_chroot=False,
                        fmt=LOG_FORMAT, field_styles=styles)


def freeze_seeds(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.cuda.manual_seed_all(seed)


def derive_seed(*keys):
    """Derives a 32-bit integer seed from a tuple of non-negative integers.

    Every random draw of the package goes through an explicit generator
    seeded this way, e.g. ``derive_seed(seed, split_id, domain, index)``.
    """
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def chunk(iterable, c_size, stack_func=None):
    """Yields consecutive groups of ``c_size`` items; the last one may be shorter.

    Works on plain iterators (no ``len`` needed). ``stack_func``, when
    given, is applied to every group before it is yielded.
    """
    if c_size < 1:
        raise ValueError("Invalid chunk size: {}".format(c_size))
    it = iter(iterable)
    group = list(islice(it, c_size))
    while group:
        yield stack_func(group) if stack_func else group
        group = list(islice(it, c_size))


def to_tensor(ndarray):
    """Wraps a numpy array (made contiguous first) as a torch tensor sharing its memory."""
    return torch.from_numpy(np.ascontiguousarray(ndarray))


class dotdict(dict):
    """dot.notation access to dictionary attributes"""

    def __getattr__(self, attr):
        # keep copy/pickle protocol lookups away from the dict keys
        if attr.startswith('__'):
            raise AttributeError(attr)
        return self.get(attr)

    __setattr__ = dict.__setitem__
    __delattr__ = dict.__delitem__
