"""
Exception hierarchy for the bench.

Everything raised on purpose derives from TaaBenchError so the CLI can map
configuration problems to exit code 1 and everything else to exit code 2.
"""

from typing import Iterable, Optional


class TaaBenchError(Exception):
    """Base class for every error raised on purpose by taabench"""


class ShapeError(TaaBenchError, ValueError):
    """An op received operands whose shapes do not conform"""

    def __init__(self, op: str, first, second=None, detail: str = ""):
        self.op = op
        self.shapes = (tuple(first), None if second is None else tuple(second))
        message = f"{op}: incompatible shapes {self.shapes[0]}"
        if second is not None:
            message += f" and {self.shapes[1]}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class TapeError(TaaBenchError, RuntimeError):
    """Misuse of the gradient tape (non-scalar backward, double backward, ...)"""


class NonFiniteError(TaaBenchError, FloatingPointError):
    """A public op produced NaN or Inf"""


class TrainingDivergedError(TaaBenchError, RuntimeError):
    def __init__(self, epoch: int, term: str = "loss", detail: str = ""):
        self.epoch = epoch
        self.term = term
        message = f"training diverged at epoch {epoch} ({term} is not finite)"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class UnknownTapError(TaaBenchError, KeyError):
    def __init__(self, name: str, valid: Iterable[str]):
        self.name = name
        self.valid = sorted(valid)
        super().__init__(f"unknown tap '{name}'; valid taps: {', '.join(self.valid)}")

    def __str__(self) -> str:
        return self.args[0]


class WeightFileError(TaaBenchError, ValueError):
    """Weight file is corrupted, truncated or holds another architecture"""


class ConfigError(TaaBenchError, ValueError):
    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        self.key = key
        self.line = line
        where = []
        if key:
            where.append(f"key '{key}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} [{', '.join(where)}]"
        super().__init__(message)


class UnknownNameError(ConfigError):
    def __init__(self, kind: str, name: str, valid: Iterable[str], key: Optional[str] = None,
                 line: Optional[int] = None):
        self.kind = kind
        self.name = name
        self.valid = sorted(valid)
        super().__init__(
            f"unknown {kind} '{name}'; valid names: {', '.join(self.valid)}", key=key, line=line
        )


class BudgetViolationError(TaaBenchError, AssertionError):
    """An attack returned x' outside the epsilon-ball or the pixel range"""

    def __init__(self, attack: str, sample_id: int, linf: float, epsilon: float):
        self.attack = attack
        self.sample_id = sample_id
        super().__init__(f"{attack}: sample {sample_id} has ||delta||_inf = {linf:.3e} > epsilon = {epsilon:.3e} "
                         f"or leaves the pixel range")
