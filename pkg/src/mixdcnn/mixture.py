"""
Confidence-weighted mixing of K expert networks.

Shapes: per-expert logits are (..., K, N); occupation weights and confidences
are (..., K); mixed logits and class probabilities are (..., N). A leading
batch axis is optional everywhere. Expert and class indices are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Network, as_tensor, softmax

ALPHA_MODES = ("full", "stopped")


class ExpertBank:
    """K expert networks sharing input shape and output arity N."""

    def __init__(self, experts):
        self.experts: list[Network] = list(experts)
        if not self.experts:
            raise ValueError("an expert bank needs K >= 1 experts")
        first = self.experts[0]
        for k, e in enumerate(self.experts):
            if e.output_dim != first.output_dim or e.input_shape != first.input_shape:
                raise ValueError(f"expert {k} does not match expert 0 in input shape / output arity")

    @property
    def K(self) -> int:
        return len(self.experts)

    @property
    def output_dim(self) -> int:
        return self.experts[0].output_dim

    @property
    def input_shape(self) -> tuple:
        return self.experts[0].input_shape

    def __len__(self):
        return len(self.experts)

    def __getitem__(self, k) -> Network:
        return self.experts[k]

    def __iter__(self):
        return iter(self.experts)

    def parameters(self):
        return [p for e in self.experts for p in e.parameters()]

    def copy(self) -> "ExpertBank":
        return ExpertBank([e.copy() for e in self.experts])

    def logits(self, x) -> np.ndarray:
        """(B, K, N) per-expert logits for a batch."""
        return np.stack([e(x) for e in self.experts], axis=1)


class GateNetwork:
    """Separately trained network whose softmax output is a K-way occupation distribution."""

    def __init__(self, network: Network):
        self.network = network

    @property
    def K(self) -> int:
        return self.network.output_dim

    def alpha(self, x) -> np.ndarray:
        return softmax(self.network(x))


@dataclass
class MixtureTrace:
    per_expert_logits: np.ndarray  # (..., K, N)
    confidences: np.ndarray  # (..., K)
    argmax_index: np.ndarray  # (..., K)
    occupation: np.ndarray  # (..., K)
    mixed_logits: np.ndarray  # (..., N)
    class_probs: np.ndarray  # (..., N)
    alpha_forced: bool = False

    @property
    def prediction(self) -> np.ndarray:
        return self.class_probs.argmax(axis=-1)

    def __len__(self):
        return 1 if self.mixed_logits.ndim == 1 else self.mixed_logits.shape[0]


def expert_confidence(logits):
    """Best raw class score of each expert and the (lowest) class index attaining it."""
    z = as_tensor(logits)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise ValueError("confidence of an empty logit vector")
    idx = z.argmax(axis=-1)
    conf = np.take_along_axis(z, idx[..., None], axis=-1)[..., 0]
    if z.ndim == 1:
        return float(conf), int(idx)
    return conf, idx


def occupation_weights(confidences) -> np.ndarray:
    c = as_tensor(confidences)
    if c.ndim == 0 or c.shape[-1] == 0:
        raise ValueError("need K >= 1 confidences")
    if not np.all(np.isfinite(c)):
        raise ValueError("confidences must be finite")
    return softmax(c)


def mix_logits(per_expert_logits, alpha) -> np.ndarray:
    """mixed[n] = sum_k alpha[k] * z[k, n], accumulated in expert order."""
    z = as_tensor(per_expert_logits)
    a = as_tensor(alpha)
    if z.ndim < 2 or a.shape != z.shape[:-1]:
        raise ValueError(f"logits {z.shape} and weights {a.shape} disagree")
    mixed = a[..., 0, None] * z[..., 0, :]
    for k in range(1, z.shape[-2]):
        mixed = mixed + a[..., k, None] * z[..., k, :]
    return mixed


def trace_from_logits(per_expert_logits, forced_alpha=None) -> MixtureTrace:
    """Build the full forward record from already computed expert logits.

    ``forced_alpha`` replaces the confidence-derived weights (diagnostic mode).
    """
    z = as_tensor(per_expert_logits)
    conf, idx = expert_confidence(z)
    conf, idx = np.asarray(conf, dtype=float), np.asarray(idx)
    if forced_alpha is None:
        alpha = occupation_weights(conf)
    else:
        alpha = np.broadcast_to(as_tensor(forced_alpha), conf.shape).copy()
    mixed = mix_logits(z, alpha)
    return MixtureTrace(z, conf, idx, alpha, mixed, softmax(mixed), forced_alpha is not None)


def mixture_forward(bank: ExpertBank, sample, forced_alpha=None) -> MixtureTrace:
    """Forward a single sample (shape == input_shape) or a batch through the mixture."""
    x = as_tensor(sample)
    single = x.shape == bank.input_shape
    z = bank.logits(x[None] if single else x)
    return trace_from_logits(z[0] if single else z, forced_alpha)


def mixture_backward(trace: MixtureTrace, label, mode: str = "full") -> np.ndarray:
    """dL/dz[k, n] of the cross-entropy of ``trace.class_probs`` against ``label``.

    In ``full`` mode the gradient also flows through the occupation weights into
    each expert's max logit; ``stopped`` treats the weights as constants.
    Per-sample gradients; no batch averaging.
    """
    if mode not in ALPHA_MODES:
        raise ValueError(f"alpha mode must be one of {ALPHA_MODES}, got {mode!r}")
    z, alpha = trace.per_expert_logits, trace.occupation
    n_cls = z.shape[-1]
    y = np.asarray(label, dtype=np.int64)
    if y.shape != trace.mixed_logits.shape[:-1]:
        raise ValueError(f"label shape {y.shape} does not match trace batch shape")
    if np.any(y < 0) or np.any(y >= n_cls):
        raise ValueError(f"label out of range [0, {n_cls})")

    g = trace.class_probs.copy()
    np.put_along_axis(g, y[..., None], np.take_along_axis(g, y[..., None], axis=-1) - 1.0, axis=-1)
    dz = alpha[..., :, None] * g[..., None, :]
    if mode == "stopped" or trace.alpha_forced:
        return dz

    d_alpha = np.einsum("...n,...kn->...k", g, z)
    # softmax Jacobian: dC_k = alpha_k * (d_alpha_k - sum_j alpha_j d_alpha_j)
    d_conf = alpha * (d_alpha - (alpha * d_alpha).sum(axis=-1, keepdims=True))
    idx = trace.argmax_index[..., None]
    np.put_along_axis(dz, idx, np.take_along_axis(dz, idx, axis=-1) + d_conf[..., None], axis=-1)
    return dz


def gated_combine(per_expert_probs, gate_alpha) -> np.ndarray:
    """c[n] = sum_k c[k, n] * alpha[k] over per-expert posteriors."""
    return mix_logits(per_expert_probs, gate_alpha)


def ensemble_combine(per_expert_probs) -> np.ndarray:
    p = as_tensor(per_expert_probs)
    if p.ndim < 2:
        raise ValueError(f"expected (..., K, N) posteriors, got {p.shape}")
    K = p.shape[-2]
    return gated_combine(p, np.full(p.shape[:-1], 1.0 / K))


def assign_subset_labels(bank: ExpertBank, samples) -> np.ndarray:
    """Per-sample index of the expert with the highest confidence (lowest index on ties)."""
    conf, _ = expert_confidence(bank.logits(as_tensor(samples)))
    return conf.argmax(axis=-1)


def entropy(p, axis: int = -1) -> np.ndarray:
    p = as_tensor(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=axis)


# -----------------------------------------------------------------------------
# Diagnostic text format
# -----------------------------------------------------------------------------


def _fmt(v) -> str:
    return " ".join(repr(float(x)) for x in np.ravel(v))


def format_trace(trace: MixtureTrace, sample_ids=None) -> list[str]:
    """One record per sample: ``id<TAB>C=...<TAB>alpha=...<TAB>mixed=...<TAB>pred=n``."""
    conf = np.atleast_2d(trace.confidences)
    alpha = np.atleast_2d(trace.occupation)
    mixed = np.atleast_2d(trace.mixed_logits)
    pred = np.atleast_1d(trace.prediction)
    ids = range(len(pred)) if sample_ids is None else sample_ids
    return [
        f"{sid}\tC={_fmt(c)}\talpha={_fmt(a)}\tmixed={_fmt(m)}\tpred={int(p)}"
        for sid, c, a, m, p in zip(ids, conf, alpha, mixed, pred)
    ]


def parse_trace_line(line: str) -> dict:
    sid, *fields = line.rstrip("\n").split("\t")
    rec = {"id": int(sid)}
    for f in fields:
        key, _, val = f.partition("=")
        rec[key] = int(val) if key == "pred" else np.array([float(v) for v in val.split()])
    return rec
