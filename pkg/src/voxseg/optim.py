"""SGD with momentum, dual learning-rate groups, polynomial decay.

Convolutional parameters ("cnn") and attention-bearing parameters
("trans") form two groups whose learning rates stay in a fixed ratio:
lr_g(e) = lambda_g * init_lr * (1 - e/MAX_EPOCH)^power, with the shared
base factor computed once per epoch so the ratio is exact by
construction.  Weight decay skips normalization gains/biases and query
embeddings (their ParamInfo carries decay=False).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, SpecError
from .layers import ParamInfo


@dataclass
class Schedule:
    init_lr: float = 1e-3
    max_epoch: int = 100
    power: float = 0.9


def poly_base(epoch: float, schedule: Schedule) -> float:
    """init_lr * (1 - e/MAX)^power; shared by both groups."""
    if not 0 <= epoch <= schedule.max_epoch:
        raise SpecError(f"epoch {epoch} outside [0, {schedule.max_epoch}]")
    return schedule.init_lr * (1.0 - epoch / schedule.max_epoch) ** schedule.power


def poly_lr(epoch: float, lam: float, schedule: Schedule) -> float:
    """Group learning rate: lambda_g * poly_base(e)."""
    return lam * poly_base(epoch, schedule)


class SgdOptimizer:
    """Momentum SGD over named parameters with per-group lambda scaling."""

    def __init__(self, named_params: list[tuple[str, ParamInfo]],
                 momentum: float = 0.99, weight_decay: float = 3e-5,
                 nesterov: bool = False, lambda_cnn: float = 1.0,
                 lambda_trans: float = 0.1):
        self.entries = list(named_params)
        seen = set()
        for name, _ in self.entries:
            if name in seen:
                raise SpecError(f"duplicate parameter name {name!r}")
            seen.add(name)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.lambdas = {"cnn": lambda_cnn, "trans": lambda_trans}
        for _, info in self.entries:
            if info.group not in self.lambdas:
                raise SpecError(f"parameter group {info.group!r} has no lambda")
        self.velocity = {name: np.zeros_like(info.tensor.data)
                         for name, info in self.entries}

    def zero_grads(self) -> None:
        for _, info in self.entries:
            info.tensor.grad = None

    def step(self, base_lr: float) -> None:
        """One update; base_lr is the shared poly_base(e) factor."""
        for name, info in self.entries:
            p = info.tensor
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in parameter {name!r}")
            if self.weight_decay and info.decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            update = g + self.momentum * v if self.nesterov else v
            p.data = p.data - (self.lambdas[info.group] * base_lr) * update

    def audit(self) -> list[dict]:
        """Every parameter with its group/decay assignment (must be total)."""
        return [{"name": name, "group": info.group, "decay": info.decay,
                 "shape": tuple(info.tensor.shape),
                 "size": int(info.tensor.size)} for name, info in self.entries]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: v.copy() for name, v in self.velocity.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.velocity:
            if name not in arrays:
                raise SpecError(f"optimizer state missing buffer {name!r}")
            if arrays[name].shape != self.velocity[name].shape:
                raise SpecError(f"optimizer buffer {name!r} shape mismatch")
            self.velocity[name] = arrays[name].copy()
