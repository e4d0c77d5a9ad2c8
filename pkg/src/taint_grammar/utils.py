"""Shared helpers: loggers, stage timing and the error hierarchy."""
import time
from contextlib import contextmanager

from easydict import EasyDict as edict
from pymodaq_utils import logger as logger_module
from pymodaq_utils.logger import get_module_name
from pymodaq_utils.utils import getLineInfo

LOGGER_BASE_NAME = 'taint_grammar'


def set_logger(logger_name, add_handler=False, base_logger=False, add_to_console=False, log_level=None):
    """pymodaq logger named under ``taint_grammar`` instead of ``pymodaq``."""
    return logger_module.set_logger(logger_name, add_handler=add_handler, base_logger=base_logger,
                                    add_to_console=add_to_console, log_level=log_level,
                                    logger_base_name=LOGGER_BASE_NAME)


class StageTimer:
    """Accumulates wall time per named stage; a stage opened inside another is also counted in it.

    Dominance and totals only consider outermost stages.
    """

    def __init__(self):
        self.timings = edict()
        self.parents = dict()
        self._open = []

    @contextmanager
    def stage(self, name):
        self.parents.setdefault(name, self._open[-1] if self._open else None)
        self.timings.setdefault(name, 0.)
        self._open.append(name)
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self._open.pop()
            self.timings[name] += time.perf_counter() - t0

    def top_level(self):
        return {name: seconds for name, seconds in self.timings.items() if self.parents.get(name) is None}

    def dominant(self):
        outer = self.top_level()
        if not outer:
            return None
        return max(outer, key=lambda name: outer[name])

    def total(self):
        return sum(self.top_level().values())


class TraceFormatError(ValueError):
    """Malformed trace or cfg document."""


class TraceValidationError(ValueError):
    """A trace whose intervals or tuples violate the trace invariants."""


class CfgError(ValueError):
    pass


class CoverageError(ValueError):
    pass


class DanglingPathError(KeyError):
    pass


class UnsatisfiableError(RuntimeError):
    pass


class AssemblyError(ValueError):
    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f'line {lineno}: {message}'
        super().__init__(message)
        self.lineno = lineno


class StageError(RuntimeError):
    """Failure of one pipeline stage; ``stage`` names it, ``__cause__`` holds the original."""

    def __init__(self, stage, cause):
        super().__init__(f'{stage} stage failed: {cause}')
        self.stage = stage


class MatchBudgetError(RuntimeError):
    pass


class VmError(RuntimeError):
    """Program bug detected while interpreting (unset register, bad operand)."""
