"""
Finite-difference check of every parameter gradient of the pretraining loss.
"""

import logging
import time
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .config import LossToggles, ModelConfig, micro_model_config
from .errors import NumericError
from .model import MvltModel
from .objectives import MixedBatch, build_mixed_batch, mixed_batch_loss
from .tensor import no_grad
from .utils import ProgressTracker
from .vision import ImageSample


logger = logging.getLogger(__name__)

# Central differences at h=1e-5 carry ~1e-11 of rounding noise; below this
# magnitude the relative error is taken against the floor.
GRADIENT_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_parameter: str
    worst_index: Tuple[int, ...]
    analytic: float
    numeric: float
    checked: int
    elapsed: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def random_batch(model: MvltModel, rng: np.random.Generator, n_labeled: int = 2,
                 n_unlabeled: int = 1) -> MixedBatch:
    """Uniform-noise images with random words, mask plans drawn from ``rng``."""
    cfg = model.config
    symbols = model.charset.symbols

    def image(i: int, labeled: bool) -> ImageSample:
        pixels = rng.uniform(0.0, 1.0, size=cfg.canvas)
        if not labeled:
            return ImageSample(pixels, None, f"u{i}")
        length = int(rng.integers(1, cfg.max_len))
        word = "".join(symbols[c] for c in rng.integers(0, len(symbols), size=length))
        return ImageSample(pixels, word, f"l{i}")

    labeled = [image(i, True) for i in range(n_labeled)]
    unlabeled = [image(i, False) for i in range(n_unlabeled)]
    return build_mixed_batch(labeled, unlabeled, cfg, rng, model.charset)


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(GRADIENT_FLOOR, abs(analytic), abs(numeric))


def run_gradcheck(config: Optional[ModelConfig] = None, seed: int = 0, step_size: float = 1e-5,
                  tolerance: float = 1e-4, toggles: LossToggles = LossToggles()) -> GradCheckResult:
    """
    Compare backprop with central differences ``(f(p+h) - f(p-h)) / 2h``.

    The relative error of one entry is ``|a - n| / max(GRADIENT_FLOOR, |a|, |n|)``.
    """
    config = config or micro_model_config(init_std=0.2)
    started = time.time()
    model = MvltModel(config, seed=seed)
    batch = random_batch(model, np.random.default_rng([seed, 1]))

    model.store.zero_grad()
    loss, report = mixed_batch_loss(batch, model, toggles)
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in model.store.items()}
    logger.info(f"Gradient check on {model.num_parameters()} parameters, loss {report.total:.6f}")

    def loss_value() -> float:
        with no_grad():
            return mixed_batch_loss(batch, model, toggles)[0].item()

    worst = (0.0, "", (), 0.0, 0.0)
    progress = ProgressTracker(total=model.num_parameters(), description="Checking gradients")
    for name, param in model.store.items():
        flat = param.data.reshape(-1)
        grads = analytic[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step_size
            plus = loss_value()
            flat[i] = original - step_size
            minus = loss_value()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * step_size)
            rel = relative_error(float(grads[i]), numeric)
            if rel > worst[0]:
                worst = (rel, name, np.unravel_index(i, param.shape), float(grads[i]), numeric)
            progress.update()
    progress.finish()

    rel, name, index, a, n = worst
    result = GradCheckResult(rel, name, tuple(int(j) for j in index), a, n, model.num_parameters(),
                             time.time() - started, tolerance)
    logger.info(
        f"Worst relative error {rel:.3e} at {name}{list(result.worst_index)}: analytic {a:.6e}, numeric {n:.6e}"
    )
    return result


def check_or_raise(result: GradCheckResult) -> GradCheckResult:
    if not result.passed:
        raise NumericError(
            f"gradient check failed: relative error {result.max_rel_error:.3e} exceeds "
            f"{result.tolerance:.1e} at {result.worst_parameter}{list(result.worst_index)}"
        )
    return result
