"""
Finite-difference check of the mixture backward pass.

Random small expert banks produce per-expert logits for a random sample; the
analytic gradient of the mixture cross-entropy w.r.t. those logits is compared
with central differences of the loss. Draws where some expert's two largest
logits are within ``min_margin`` are resampled (the max is not differentiable
there).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mixture import ExpertBank, mixture_backward, mixture_forward, mix_logits, occupation_weights
from .numerics import Network, log_softmax

STEP = 1e-5
TOLERANCE = 1e-5


def mixture_loss(per_expert_logits: np.ndarray, label: int, alpha: np.ndarray | None = None) -> float:
    """Cross-entropy of the mixed prediction; ``alpha`` fixed when given, else derived from the logits."""
    z = np.asarray(per_expert_logits, dtype=float)
    if alpha is None:
        alpha = occupation_weights(z.max(axis=-1))
    return float(-log_softmax(mix_logits(z, alpha))[label])


def numeric_gradient(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        grad[i] = (f(xp) - f(xm)) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - f| scaled by the largest gradient magnitude of either."""
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def has_tie(per_expert_logits: np.ndarray, min_margin: float) -> bool:
    z = np.sort(per_expert_logits, axis=-1)
    return z.shape[-1] > 1 and bool(np.any(z[..., -1] - z[..., -2] <= min_margin))


@dataclass
class GradcheckResult:
    mode: str
    triples: int
    resampled: int
    max_relative_error: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= TOLERANCE


def random_triple(rng: np.random.Generator, max_experts: int = 4, max_classes: int = 6, input_dim: int = 5):
    K = int(rng.integers(1, max_experts + 1))
    N = int(rng.integers(2, max_classes + 1))
    bank = ExpertBank([Network.mlp((input_dim, 6, N), rng) for _ in range(K)])
    for p in bank.parameters():
        # spread the logits so experts disagree noticeably
        p.value += rng.normal(scale=0.5, size=p.value.shape)
    x = rng.standard_normal(input_dim)
    label = int(rng.integers(N))
    return bank, x, label


def run_gradcheck(seed: int = 0, triples: int = 200, mode: str = "full", max_experts: int = 4,
                  max_classes: int = 6, min_margin: float = 1e-3, corrupt: bool = False) -> GradcheckResult:
    """``corrupt`` perturbs the analytic gradient; the check must then fail."""
    rng = np.random.default_rng(seed)
    worst, resampled, done = 0.0, 0, 0
    while done < triples:
        bank, x, label = random_triple(rng, max_experts, max_classes)
        trace = mixture_forward(bank, x)
        z = trace.per_expert_logits
        if has_tie(z, min_margin):
            resampled += 1
            continue
        analytic = mixture_backward(trace, label, mode)
        if corrupt:
            analytic = analytic * 1.01
        fixed = trace.occupation if mode == "stopped" else None
        numeric = numeric_gradient(lambda v: mixture_loss(v, label, fixed), z)
        worst = max(worst, relative_error(analytic, numeric))
        done += 1
    return GradcheckResult(mode, triples, resampled, worst)
