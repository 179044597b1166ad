"""
Training procedures for the single, mixture, gated and bagged-ensemble models.

Stage schedule: pretrain a base network on the whole training set, partition
the data with it, copy the base into K experts, fine-tune each expert on its
own subset, then train the experts jointly through the mixture. Baselines get
the same number of passes over the data per network.

Batch order depends only on (seed, global epoch, index set), so a K=1 mixture
replays single-network training exactly.
"""

from __future__ import annotations

import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import BatchIterator, Dataset
from .mixture import (
    ALPHA_MODES,
    ExpertBank,
    GateNetwork,
    assign_subset_labels,
    ensemble_combine,
    entropy,
    gated_combine,
    mixture_backward,
    trace_from_logits,
)
from .numerics import LayerSpec, Linear, Network, NonFiniteError, cross_entropy, sgd_step, softmax
from .partition import DatasetPartition, partition_dataset

ARCHITECTURES = ("single", "mix", "gated", "ensemble")


@dataclass
class TrainSpec:
    architecture: str = "mix"
    K: int = 2
    hidden: tuple = (8,)
    conv_channels: int = 0
    learning_rate: float = 0.1
    batch_size: int = 32
    pretrain_epochs: int = 10
    expert_epochs: int = 10
    joint_epochs: int = 20
    seed: int = 0
    alpha_gradient_mode: str = "full"
    gated_procedure: int = 1
    lda_dim: int | None = None
    bag_fraction: float = 0.8

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not self.learning_rate > 0 or self.batch_size < 1:
            raise ValueError("learning_rate and batch_size must be positive")
        if min(self.pretrain_epochs, self.expert_epochs, self.joint_epochs) < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.alpha_gradient_mode not in ALPHA_MODES:
            raise ValueError(f"alpha_gradient_mode must be one of {ALPHA_MODES}")
        if self.gated_procedure not in (1, 2):
            raise ValueError("gated_procedure must be 1 or 2")
        if not 0 < self.bag_fraction <= 1:
            raise ValueError("bag_fraction must lie in (0, 1]")
        if self.lda_dim is not None and self.lda_dim < 1:
            raise ValueError("lda_dim must be >= 1")
        if any(h < 1 for h in self.hidden) or self.conv_channels < 0:
            raise ValueError("layer sizes must be positive")

    @property
    def total_epochs(self) -> int:
        return self.pretrain_epochs + self.expert_epochs + self.joint_epochs


@dataclass
class EpochStat:
    epoch: int
    stage: str
    loss: float
    accuracy: float


@dataclass
class RunReport:
    architecture: str = ""
    dataset: str = ""
    seed: int = 0
    K: int = 1
    epochs: list[EpochStat] = field(default_factory=list)
    gate_epochs: list[EpochStat] = field(default_factory=list)
    expert_grad_norms: list[list[float]] = field(default_factory=list)
    test_accuracy: float = float("nan")
    per_class_accuracy: list[float] = field(default_factory=list)
    subset_sizes: list[int] = field(default_factory=list)
    alpha_entropy_mean: float = 0.0
    alpha_entropy_max: float = 0.0
    wall_clock_seconds: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def to_rows(self) -> list[tuple]:
        rows = []
        for e in self.epochs:
            rows += [(e.epoch, "train", "loss", e.loss), (e.epoch, "train", "accuracy", e.accuracy)]
        for e in self.gate_epochs:
            rows += [(e.epoch, "train", "gate_loss", e.loss), (e.epoch, "train", "gate_accuracy", e.accuracy)]
        rows.append(("final", "test", "accuracy", self.test_accuracy))
        rows += [("final", "test", f"accuracy_class_{n}", a) for n, a in enumerate(self.per_class_accuracy)]
        rows += [("final", "test", "alpha_entropy_mean", self.alpha_entropy_mean),
                 ("final", "test", "alpha_entropy_max", self.alpha_entropy_max)]
        rows += [("final", "train", f"subset_size_{k + 1}", s) for k, s in enumerate(self.subset_sizes)]
        return rows

    def to_csv(self) -> str:
        stages: dict[str, int] = {}
        for e in self.epochs:
            stages[e.stage] = stages.get(e.stage, 0) + 1
        out = io.StringIO()
        out.write(f"# architecture={self.architecture}\n# dataset={self.dataset}\n# seed={self.seed}\n# K={self.K}\n")
        out.write("# stages=" + ",".join(f"{s}:{n}" for s, n in stages.items()) + "\n")
        out.write("epoch,split,metric,value\n")
        for epoch, split, metric, value in self.to_rows():
            out.write(f"{epoch},{split},{metric},{value!r}\n")
        return out.getvalue()

    def to_text(self) -> str:
        lines = [f"architecture: {self.architecture}", f"dataset: {self.dataset}", f"seed: {self.seed}", f"K: {self.K}"]
        for e in self.epochs:
            lines.append(f"epoch {e.epoch:4d} [{e.stage:8s}] loss {e.loss:.6f} acc {e.accuracy:.4f}")
        for e in self.gate_epochs:
            lines.append(f"epoch {e.epoch:4d} [gate    ] loss {e.loss:.6f} acc {e.accuracy:.4f}")
        lines.append(f"test accuracy: {self.test_accuracy:.4f}")
        if self.subset_sizes:
            lines.append("subset sizes: " + " ".join(map(str, self.subset_sizes)))
        lines.append(f"alpha entropy: mean {self.alpha_entropy_mean:.4f} max {self.alpha_entropy_max:.4f}")
        lines.append(f"wall clock: {self.wall_clock_seconds:.2f} s")
        return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> dict:
    """Header fields plus the (epoch, split, metric, value) rows of a report CSV."""
    meta, rows = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            meta[key] = val
        elif line and line != "epoch,split,metric,value":
            epoch, split, metric, value = line.split(",")
            rows.append((epoch, split, metric, float(value)))
    return {"meta": meta, "rows": rows}


# -----------------------------------------------------------------------------
# Models
# -----------------------------------------------------------------------------


def build_network(input_shape, num_outputs: int, spec: TrainSpec, rng: np.random.Generator) -> Network:
    """MLP for vector inputs; one conv + pool block in front of it for image inputs."""
    input_shape = tuple(input_shape)
    layers: list[LayerSpec] = []
    width = int(np.prod(input_shape))
    if len(input_shape) == 3:
        c, h, w = input_shape
        if spec.conv_channels:
            k = min(3, h, w)
            layers += [LayerSpec("conv2d", (c, spec.conv_channels, k, 1)), LayerSpec("relu")]
            h, w = h - k + 1, w - k + 1
            if min(h, w) >= 2:
                layers.append(LayerSpec("maxpool2d", (2,)))
                h, w = h // 2, w // 2
            c = spec.conv_channels
        layers.append(LayerSpec("flatten"))
        width = c * h * w
    for h in spec.hidden:
        layers += [LayerSpec("linear", (width, h)), LayerSpec("relu")]
        width = h
    layers.append(LayerSpec("linear", (width, num_outputs)))
    return Network(layers, input_shape, rng)


class SingleModel:
    architecture = "single"

    def __init__(self, network: Network):
        self.network = network

    def predict_proba(self, x):
        return softmax(self.network(x))

    def alpha(self, x):
        return np.ones((len(x), 1))

    def networks(self) -> dict[str, Network]:
        return {"model": self.network}


class MixModel:
    architecture = "mix"

    def __init__(self, bank: ExpertBank):
        self.bank = bank

    def trace(self, x):
        return trace_from_logits(self.bank.logits(x))

    def predict_proba(self, x):
        return self.trace(x).class_probs

    def alpha(self, x):
        return self.trace(x).occupation

    def networks(self):
        return {f"expert{k}": e for k, e in enumerate(self.bank)}


class GatedModel:
    architecture = "gated"

    def __init__(self, bank: ExpertBank, gate: GateNetwork):
        self.bank, self.gate = bank, gate

    def predict_proba(self, x):
        return gated_combine(softmax(self.bank.logits(x)), self.gate.alpha(x))

    def alpha(self, x):
        return self.gate.alpha(x)

    def networks(self):
        return {**{f"expert{k}": e for k, e in enumerate(self.bank)}, "gate": self.gate.network}


class EnsembleModel:
    architecture = "ensemble"

    def __init__(self, bank: ExpertBank):
        self.bank = bank

    def predict_proba(self, x):
        return ensemble_combine(softmax(self.bank.logits(x)))

    def alpha(self, x):
        return np.full((len(x), self.bank.K), 1.0 / self.bank.K)

    def networks(self):
        return {f"expert{k}": e for k, e in enumerate(self.bank)}


def model_from_networks(architecture: str, networks: dict[str, Network]):
    if architecture == "single":
        return SingleModel(networks["model"])
    experts = ExpertBank([networks[f"expert{k}"] for k in range(sum(n.startswith("expert") for n in networks))])
    if architecture == "mix":
        return MixModel(experts)
    if architecture == "gated":
        return GatedModel(experts, GateNetwork(networks["gate"]))
    if architecture == "ensemble":
        return EnsembleModel(experts)
    raise ValueError(f"unknown architecture {architecture!r}")


def evaluate(model, dataset: Dataset, batch_size: int = 1024):
    """Overall accuracy and per-class accuracy (nan for classes absent from ``dataset``)."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = np.concatenate([
        model.predict_proba(dataset.features[i : i + batch_size]).argmax(axis=-1)
        for i in range(0, len(dataset), batch_size)
    ])
    correct = preds == dataset.labels
    per_class = np.full(dataset.num_classes, np.nan)
    for n in range(dataset.num_classes):
        mask = dataset.labels == n
        if mask.any():
            per_class[n] = correct[mask].mean()
    return float(correct.mean()), per_class


# -----------------------------------------------------------------------------
# Training loops
# -----------------------------------------------------------------------------


class _EpochMeter:
    def __init__(self):
        self.loss = 0.0
        self.correct = 0
        self.count = 0

    def add(self, losses: np.ndarray, scores: np.ndarray, labels: np.ndarray):
        # scores: logits or probabilities, only the argmax is used
        self.loss += float(losses.sum())
        self.correct += int((scores.argmax(axis=-1) == labels).sum())
        self.count += len(labels)

    def stat(self, epoch: int, stage: str) -> EpochStat:
        if not self.count:
            return EpochStat(epoch, stage, float("nan"), float("nan"))
        return EpochStat(epoch, stage, self.loss / self.count, self.correct / self.count)


def _check_finite(losses, where: str):
    if not np.all(np.isfinite(losses)):
        raise NonFiniteError(f"non-finite loss during {where}")


def _sgd_epoch(net: Network, dataset: Dataset, it: BatchIterator, epoch: int, lr: float, meter: _EpochMeter,
               stage: str, targets: np.ndarray | None = None) -> None:
    """One pass of plain softmax-cross-entropy SGD; ``targets`` overrides the class labels."""
    for xb, yb, idx in it.batches(epoch):
        if targets is not None:
            yb = targets[idx]
        logits, caches = net.forward(xb)
        losses, grad = cross_entropy(logits, yb)
        _check_finite(losses, f"{stage} epoch {epoch + 1}")
        net.backward(caches, grad / len(yb))
        sgd_step(net.parameters(), lr)
        meter.add(losses, logits, yb)


def train_network(net: Network, dataset: Dataset, spec: TrainSpec, epochs: int, epoch_offset: int = 0,
                  indices=None, stage: str = "train", seed: int | None = None) -> list[EpochStat]:
    it = BatchIterator(dataset, spec.batch_size, spec.seed if seed is None else seed, indices)
    stats = []
    for e in range(epoch_offset, epoch_offset + epochs):
        meter = _EpochMeter()
        _sgd_epoch(net, dataset, it, e, spec.learning_rate, meter, stage)
        stats.append(meter.stat(e + 1, stage))
    return stats


def pretrain_base(dataset: Dataset, spec: TrainSpec, network: Network | None = None):
    """Train one network on the full training set; returns (network, epoch stats)."""
    if network is None:
        network = build_network(dataset.feature_shape, dataset.num_classes, spec,
                                np.random.default_rng([spec.seed, 100]))
    stats = train_network(network, dataset, spec, spec.pretrain_epochs, 0, stage="pretrain")
    return network, stats


def init_experts_from_base(base: Network, K: int) -> ExpertBank:
    return ExpertBank([base.copy() for _ in range(K)])


def warmstart_experts(bank: ExpertBank, dataset: Dataset, partition: DatasetPartition, spec: TrainSpec,
                      epoch_offset: int | None = None) -> list[EpochStat]:
    """Fine-tune expert k on subset k only; per-epoch stats pool all experts."""
    if partition.K != bank.K:
        raise ValueError(f"partition has K={partition.K}, bank has K={bank.K}")
    partition.verify(len(dataset))
    offset = spec.pretrain_epochs if epoch_offset is None else epoch_offset
    iters = [BatchIterator(dataset, spec.batch_size, spec.seed, partition.members(k)) for k in range(bank.K)]
    stats = []
    for e in range(offset, offset + spec.expert_epochs):
        meter = _EpochMeter()
        for expert, it in zip(bank, iters):
            _sgd_epoch(expert, dataset, it, e, spec.learning_rate, meter, "expert")
        stats.append(meter.stat(e + 1, "expert"))
    return stats


def train_mixdcnn(bank: ExpertBank, dataset: Dataset, spec: TrainSpec, epoch_offset: int | None = None):
    """Joint SGD of all experts through the confidence-weighted mixture."""
    offset = spec.pretrain_epochs + spec.expert_epochs if epoch_offset is None else epoch_offset
    it = BatchIterator(dataset, spec.batch_size, spec.seed)
    report = RunReport(architecture="mix", seed=spec.seed, K=bank.K)
    params = bank.parameters()
    for e in range(offset, offset + spec.joint_epochs):
        meter = _EpochMeter()
        norms = np.zeros(bank.K)
        for xb, yb, _ in it.batches(e):
            outs = [expert.forward(xb) for expert in bank]
            trace = trace_from_logits(np.stack([o[0] for o in outs], axis=1))
            losses, _ = cross_entropy(trace.mixed_logits, yb)
            _check_finite(losses, f"joint epoch {e + 1}")
            dz = mixture_backward(trace, yb, spec.alpha_gradient_mode) / len(yb)
            for k, (expert, (_, caches)) in enumerate(zip(bank, outs)):
                expert.backward(caches, dz[:, k, :])
                norms[k] += math.sqrt(sum(float((p.grad ** 2).sum()) for p in expert.parameters()))
            sgd_step(params, spec.learning_rate)
            meter.add(losses, trace.mixed_logits, yb)
        report.epochs.append(meter.stat(e + 1, "joint"))
        report.expert_grad_norms.append(norms.tolist())
    return bank, report


def make_gate(base: Network, K: int, seed: int) -> GateNetwork:
    """Copy of the base network with its classifier replaced by a fresh K-way layer."""
    gate = base.copy()
    last = gate.layers[-1]
    spec = LayerSpec("linear", (last.spec.dims[0], K))
    gate.layers[-1] = Linear(spec, np.random.default_rng([seed, 200]), f"layer{len(gate.layers) - 1}")
    gate.specs[-1] = spec
    gate.output_dim = K
    return GateNetwork(gate)


def train_gated(bank: ExpertBank, gate: GateNetwork, dataset: Dataset, partition: DatasetPartition,
                spec: TrainSpec, epoch_offset: int | None = None):
    """Gated training after the experts were warm-started on their subsets.

    Procedure 1: the gate learns the partition labels for expert+joint epochs;
    experts continue on their own subsets for the joint epochs.
    Procedure 2: the gate is first trained for the expert epochs, then each of
    the joint epochs alternates (a) experts on gate-assigned samples with the
    gate fixed, (b) relabelling by most confident expert and one gate epoch.
    """
    if gate.K != bank.K:
        raise ValueError(f"gate outputs {gate.K} weights for {bank.K} experts")
    partition.verify(len(dataset))
    offset = spec.pretrain_epochs + spec.expert_epochs if epoch_offset is None else epoch_offset
    report = RunReport(architecture="gated", seed=spec.seed, K=bank.K)
    gate_it = BatchIterator(dataset, spec.batch_size, spec.seed)
    gate_offset = spec.pretrain_epochs
    labels = partition.assignment.copy()

    def gate_epoch(e):
        meter = _EpochMeter()
        _sgd_epoch(gate.network, dataset, gate_it, e, spec.learning_rate, meter, "gate", targets=labels)
        report.gate_epochs.append(meter.stat(e + 1, "gate"))

    if spec.gated_procedure == 1:
        for e in range(gate_offset, offset + spec.joint_epochs):
            gate_epoch(e)
        iters = [BatchIterator(dataset, spec.batch_size, spec.seed, partition.members(k)) for k in range(bank.K)]
        for e in range(offset, offset + spec.joint_epochs):
            meter = _EpochMeter()
            for expert, it in zip(bank, iters):
                _sgd_epoch(expert, dataset, it, e, spec.learning_rate, meter, "expert")
            report.epochs.append(meter.stat(e + 1, "expert"))
        return bank, gate, report

    for e in range(gate_offset, offset):
        gate_epoch(e)
    for e in range(offset, offset + spec.joint_epochs):
        assigned = gate.alpha(dataset.features).argmax(axis=-1)
        meter = _EpochMeter()
        for k, expert in enumerate(bank):
            members = np.nonzero(assigned == k)[0]
            if len(members):
                it = BatchIterator(dataset, spec.batch_size, spec.seed, members)
                _sgd_epoch(expert, dataset, it, e, spec.learning_rate, meter, "expert")
        report.epochs.append(meter.stat(e + 1, "expert"))
        labels = assign_subset_labels(bank, dataset.features)
        gate_epoch(e)
    return bank, gate, report


def bag_indices(T: int, fraction: float, seed: int, member: int) -> np.ndarray:
    """Sorted sample of round(fraction * T) distinct indices (all of them when fraction == 1)."""
    size = max(1, int(round(fraction * T)))
    if size >= T:
        return np.arange(T)
    rng = np.random.default_rng([seed, 300, member])
    return np.sort(rng.choice(T, size=size, replace=False))


def train_ensemble(dataset: Dataset, spec: TrainSpec, base: Network | None = None):
    """Bagging: each member fine-tunes a copy of the base on its own random subset."""
    report = RunReport(architecture="ensemble", seed=spec.seed, K=spec.K)
    if base is None:
        base, report.epochs = pretrain_base(dataset, spec)
    bank = init_experts_from_base(base, spec.K)
    bags = [bag_indices(len(dataset), spec.bag_fraction, spec.seed, k) for k in range(spec.K)]
    iters = [BatchIterator(dataset, spec.batch_size, spec.seed + k, bag) for k, bag in enumerate(bags)]
    start = spec.pretrain_epochs
    for e in range(start, start + spec.expert_epochs + spec.joint_epochs):
        meter = _EpochMeter()
        for expert, it in zip(bank, iters):
            _sgd_epoch(expert, dataset, it, e, spec.learning_rate, meter, "finetune")
        report.epochs.append(meter.stat(e + 1, "finetune"))
    report.subset_sizes = [len(b) for b in bags]
    return bank, report


def train_single(dataset: Dataset, spec: TrainSpec, base: Network | None = None):
    """Baseline: the base network trained for all stages' epochs on the full set."""
    report = RunReport(architecture="single", seed=spec.seed, K=1)
    if base is None:
        base, report.epochs = pretrain_base(dataset, spec)
    net = base.copy()
    report.epochs += train_network(net, dataset, spec, spec.expert_epochs + spec.joint_epochs,
                                   spec.pretrain_epochs, stage="finetune")
    report.subset_sizes = [len(dataset)]
    return net, report


# -----------------------------------------------------------------------------
# Full runs
# -----------------------------------------------------------------------------


def run(architecture: str, train: Dataset, test: Dataset | None, spec: TrainSpec,
        partition: DatasetPartition | None = None, base: Network | None = None, dataset_name: str = ""):
    """Execute the stage schedule for ``architecture``; returns (model, RunReport)."""
    t0 = time.perf_counter()
    pre_stats: list[EpochStat] = []
    if base is None:
        base, pre_stats = pretrain_base(train, spec)
    else:
        base = base.copy()

    if architecture == "single":
        net, report = train_single(train, spec, base)
        model = SingleModel(net)
    elif architecture == "ensemble":
        bank, report = train_ensemble(train, spec, base)
        model = EnsembleModel(bank)
    elif architecture in ("mix", "gated"):
        if partition is None:
            partition = partition_dataset(base, train, spec.K, spec.lda_dim, spec.seed)
        bank = init_experts_from_base(base, spec.K)
        warm = warmstart_experts(bank, train, partition, spec)
        if architecture == "mix":
            bank, report = train_mixdcnn(bank, train, spec)
            model = MixModel(bank)
        else:
            gate = make_gate(base, spec.K, spec.seed)
            bank, gate, report = train_gated(bank, gate, train, partition, spec)
            model = GatedModel(bank, gate)
        report.epochs = warm + report.epochs
        report.subset_sizes = partition.sizes().tolist()
    else:
        raise ValueError(f"unknown architecture {architecture!r}")

    report.epochs = pre_stats + report.epochs
    report.architecture, report.dataset, report.seed = architecture, dataset_name, spec.seed
    if test is not None:
        report.test_accuracy, per_class = evaluate(model, test)
        report.per_class_accuracy = per_class.tolist()
        h = entropy(model.alpha(test.features))
        report.alpha_entropy_mean, report.alpha_entropy_max = float(h.mean()), float(h.max())
    report.wall_clock_seconds = time.perf_counter() - t0
    return model, report
