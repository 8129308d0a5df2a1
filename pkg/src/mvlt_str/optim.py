"""
Parameter storage, AdamW and learning-rate schedules.
"""

import logging
import math
import re
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor


logger = logging.getLogger(__name__)

# Parameters whose names end with one of these are never weight-decayed.
NO_DECAY_SUFFIXES = ("pos_embed", "char_embed", "mask_token")

_ENCODER_BLOCK = re.compile(r"^encoder\.blocks\.(\d+)\.")


class ParameterStore:
    """Named trainable tensors in insertion order."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        tensor = Tensor(data, requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._params.items())

    def tensors(self) -> List[Tensor]:
        return list(self._params.values())

    def num_parameters(self, prefix: str = "") -> int:
        return sum(p.size for name, p in self._params.items() if name.startswith(prefix))

    def zero_grad(self) -> None:
        """Allocate zero gradients so every parameter has a grad after backward."""
        for tensor in self._params.values():
            tensor.zero_grad()

    def clear_grad(self) -> None:
        for tensor in self._params.values():
            tensor.grad = None

    def global_grad_norm(self) -> float:
        total = 0.0
        for tensor in self._params.values():
            if tensor.grad is not None:
                total += float(np.sum(tensor.grad * tensor.grad))
        return math.sqrt(total)

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self._params.items())

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        """Copy arrays into the stored tensors; names and shapes must match exactly."""
        missing = [name for name in self._params if name not in arrays]
        unknown = [name for name in arrays if name not in self._params]
        if missing or unknown:
            raise ContractError(f"parameter names differ (missing={missing[:3]}, unknown={unknown[:3]})")
        for name, tensor in self._params.items():
            source = np.asarray(arrays[name], dtype=np.float64)
            if source.shape != tensor.shape:
                raise ContractError(f"parameter {name}: expected shape {tensor.shape}, got {source.shape}")
        for name, tensor in self._params.items():
            tensor.data = np.array(arrays[name], dtype=np.float64)


def uses_weight_decay(name: str, tensor: Tensor) -> bool:
    """Matrices decay; biases, norm scales and embedding tables do not."""
    if tensor.ndim < 2:
        return False
    return not name.endswith(NO_DECAY_SUFFIXES)


@dataclass
class LrSchedule:
    """Optimizer and schedule hyperparameters."""

    base_lr: float
    warmup_steps: int
    total_steps: int
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: Optional[float] = None
    layer_decay: Optional[float] = None
    eps: float = 1e-8

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(
                f"warmup_steps must lie in [0, total_steps], got {self.warmup_steps} / {self.total_steps}"
            )
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError(f"grad_clip must be positive, got {self.grad_clip}")
        if self.layer_decay is not None and not 0 < self.layer_decay <= 1:
            raise ConfigError(f"layer_decay must lie in (0, 1], got {self.layer_decay}")


@dataclass
class AdamWState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_store(cls, store: ParameterStore) -> "AdamWState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in store.items()},
            v={name: np.zeros_like(p.data) for name, p in store.items()},
        )


def lr_at(step: int, schedule: LrSchedule) -> float:
    """Linear warmup to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if step < schedule.warmup_steps:
        return schedule.base_lr * step / schedule.warmup_steps
    span = max(1, schedule.total_steps - schedule.warmup_steps)
    progress = min(1.0, (step - schedule.warmup_steps) / span)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(store: ParameterStore, max_norm: float = 2.0) -> float:
    """Scale all grads so their joint L2 norm is at most ``max_norm``; return the scale."""
    norm = store.global_grad_norm()
    if norm <= max_norm or norm == 0.0:
        return 1.0
    scale = max_norm / norm
    for tensor in store.tensors():
        if tensor.grad is not None:
            tensor.grad = tensor.grad * scale
    logger.debug(f"Clipped gradient norm {norm:.4f} -> {max_norm}")
    return scale


def adamw_step(store: ParameterStore, state: AdamWState, lr_t: float, schedule: LrSchedule,
               lr_scales: Optional[Mapping[str, float]] = None) -> None:
    """One decoupled-weight-decay Adam update; grads are cleared afterwards."""
    missing = [name for name, p in store.items() if p.grad is None]
    if missing:
        raise ContractError(f"parameter {missing[0]} has no gradient; call zero_grad() before backward()")

    state.t += 1
    bias1 = 1.0 - schedule.beta1 ** state.t
    bias2 = 1.0 - schedule.beta2 ** state.t
    for name, param in store.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        grad = param.grad
        lr = lr_t * (lr_scales.get(name, 1.0) if lr_scales else 1.0)
        if schedule.weight_decay and uses_weight_decay(name, param):
            param.data *= 1.0 - lr * schedule.weight_decay
        m, v = state.m[name], state.v[name]
        m *= schedule.beta1
        m += (1.0 - schedule.beta1) * grad
        v *= schedule.beta2
        v += (1.0 - schedule.beta2) * grad * grad
        param.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + schedule.eps)
        param.grad = None


def layer_id(name: str, depth: int) -> int:
    """Depth index for layer-wise decay: 0 for the patch embedding, i+1 for block i."""
    if name.startswith(("encoder.patch_embed", "encoder.pos_embed")):
        return 0
    match = _ENCODER_BLOCK.match(name)
    if match:
        return int(match.group(1)) + 1
    return depth + 1


def layer_decay_scales(names: Iterable[str], depth: int, decay: float) -> Dict[str, float]:
    """
    Learning-rate multipliers for fine-tuning.

    The patch embedding gets ``decay ** (depth + 1)``, encoder block ``i`` gets
    ``decay ** (depth - i)``; the encoder's final norm, the decoder and the
    heads keep the full rate.
    """
    return {name: decay ** (depth + 1 - layer_id(name, depth)) for name in names}
