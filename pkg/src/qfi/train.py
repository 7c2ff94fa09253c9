"""Conventional and fault-aware training of the quantized model, plus
faulted evaluation with deterministic per-sample fault streams.

Training is plain SGD with momentum over shuffled mini-batches. When
faults_per_forward > 0 one fault plan is drawn per mini-batch forward over
the unprotected bit population (fault-aware training); weights are never
permanently corrupted because flips act on quantized copies. Evaluation
draws one plan per test sample, so results are independent of batch size
and thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset, batches
from .faults import (
    EMPTY_PLAN,
    BitBudget,
    FaultSite,
    count_vulnerable_bits,
    draw_fault_plan,
    stream,
)
from .layers import ModelGraph

EVAL_CHUNK = 256  # fixed so results never depend on the thread count


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 1
    faults_per_forward: int = 0
    protected_sites: frozenset[FaultSite] = field(default_factory=frozenset)
    # learning-rate factor for the faulted epochs of fault-aware training;
    # injection adds heavy gradient noise whose floor scales with the rate
    fat_lr_scale: float = 0.2

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.fat_lr_scale <= 1:
            raise ValueError(f"fat_lr_scale must be in (0, 1], got {self.fat_lr_scale}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.faults_per_forward < 0:
            raise ValueError("faults_per_forward must be nonnegative")

    def describe(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "seed": self.seed,
            "faults_per_forward": self.faults_per_forward,
            "protected_sites": sorted(s.value for s in self.protected_sites),
            "fat_lr_scale": self.fat_lr_scale,
        }


@dataclass
class Checkpoint:
    model: ModelGraph
    metadata: dict


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its logits gradient (softmax - onehot)/N.

    Math runs in float64; the gradient is returned float32 for backprop.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range 0..{k - 1}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    softmax = exp / exp.sum(axis=1, keepdims=True)
    loss = float(-np.mean(shifted[np.arange(n), labels] - np.log(exp.sum(axis=1))))
    grad = softmax
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(np.float32)


def init_parameters(model: ModelGraph, seed: int) -> None:
    """He-normal weights, zero biases, drawn from the deterministic init stream."""
    rng = stream(seed, "init")
    for _, layer in model.quantized_layers():
        fan_in = layer.weights[0].size
        std = np.sqrt(2.0 / fan_in)
        layer.weights[...] = rng.normal(0.0, std, size=layer.weights.shape).astype(np.float32)
        layer.bias[...] = 0.0


CALIBRATION_EPOCHS = 1  # fault-free epochs before injection starts in FAT runs


def train(
    model: ModelGraph,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    test_dataset: LabeledDataset | None = None,
    log_every: int = 100,
) -> Checkpoint:
    """SGD training; freezes observers into the returned checkpoint.

    With faults_per_forward = n > 0, training runs in two phases: the first
    epoch is fault-free while the activation range observers calibrate;
    they then freeze and the remaining epochs inject faults, so the flips
    cannot feed back into the scale factors (absmax observers otherwise
    inflate without bound under dense fault injection). Each faulted
    mini-batch forward draws one plan of n * batch faults over the
    batched-tensor population (activation sites scale with the batch,
    weights and biases are shared), giving every training inference the
    same fault count as a test inference.
    """
    init_parameters(model, cfg.seed)
    single_budget = None
    if cfg.faults_per_forward > 0:
        if cfg.epochs < CALIBRATION_EPOCHS + 1:
            raise ValueError(
                "fault-aware training needs at least one calibration epoch plus "
                f"one faulted epoch; got epochs={cfg.epochs}"
            )
        single_budget = count_vulnerable_bits(model, model.input_shape).restricted(
            cfg.protected_sites
        )
        batched = single_budget.batched(cfg.batch_size)
        if cfg.faults_per_forward * cfg.batch_size > batched.total:
            raise ValueError(
                f"{cfg.faults_per_forward} faults per inference exceed the unprotected "
                f"population ({batched.total} bits per batched forward)"
            )

    velocity = {name: np.zeros_like(arr) for name, arr in model.parameters()}
    mu = np.float32(cfg.momentum)
    final_train_acc = 0.0

    for epoch in range(cfg.epochs):
        inject = single_budget is not None and epoch >= CALIBRATION_EPOCHS
        if inject and epoch == CALIBRATION_EPOCHS:
            for _, layer in model.quantized_layers():
                layer.in_obs.freeze()
                layer.out_obs.freeze()
        lr = np.float32(cfg.learning_rate * (cfg.fat_lr_scale if inject else 1.0))
        correct = 0
        seen = 0
        n_batches = (len(dataset) + cfg.batch_size - 1) // cfg.batch_size
        for step, (images, labels) in enumerate(batches(dataset, cfg.batch_size, cfg.seed, epoch)):
            if inject:
                plan_rng = stream(cfg.seed, "train-plan", epoch, step)
                batch_budget = single_budget.batched(images.shape[0])
                plan = draw_fault_plan(
                    batch_budget, cfg.faults_per_forward * images.shape[0], plan_rng
                )
            else:
                plan = EMPTY_PLAN
            dropout_rng = stream(cfg.seed, "dropout", epoch, step)
            try:
                logits, trace = model.forward_train(images, plan, dropout_rng)
            except ValueError as exc:
                if "non-finite" in str(exc):  # activations overflowed float32
                    raise RuntimeError(
                        f"training diverged: {exc} at epoch {epoch} step {step}"
                    ) from exc
                raise
            loss, grad_logits = cross_entropy(logits, labels)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: loss={loss} at epoch {epoch} step {step}"
                )
            grads = model.backward(trace, grad_logits)
            for name, arr in model.parameters():
                v = velocity[name]
                v *= mu
                v -= lr * grads[name]
                arr += v
                if not np.isfinite(arr).all():
                    raise RuntimeError(
                        f"training diverged: non-finite values in {name} "
                        f"at epoch {epoch} step {step}"
                    )

            correct += int(np.sum(np.argmax(logits, axis=1) == labels))
            seen += len(labels)
            if log_every and (step % log_every == 0 or step == n_batches - 1):
                print(f"{epoch},{step},{loss:.6f},{correct / seen:.4f}", flush=True)
        final_train_acc = correct / seen

    model.freeze()
    metadata = {
        "model": model.name,
        "config": cfg.describe(),
        "seed": cfg.seed,
        "final_train_acc": final_train_acc,
        "final_test_acc": None,
    }
    if test_dataset is not None:
        metadata["final_test_acc"] = evaluate(model, test_dataset, n_faults=0)
    return Checkpoint(model=model, metadata=metadata)


def _eval_chunk_clean(model: ModelGraph, images: np.ndarray, labels: np.ndarray) -> int:
    logits = model.forward_eval(images)
    return int(np.sum(np.argmax(logits, axis=1) == labels))


def _eval_chunk_faulted(
    model: ModelGraph,
    images: np.ndarray,
    labels: np.ndarray,
    sample_offset: int,
    budget: BitBudget,
    n_faults: int,
    master_seed: int,
    repeat: int,
) -> int:
    correct = 0
    for j in range(images.shape[0]):
        rng = stream(master_seed, "eval-plan", repeat, sample_offset + j)
        plan = draw_fault_plan(budget, n_faults, rng)
        logits = model.forward_eval(images[j], plan)
        if int(np.argmax(logits[0])) == int(labels[j]):
            correct += 1
    return correct


def evaluate(
    model: ModelGraph,
    dataset: LabeledDataset,
    n_faults: int,
    protected_sites: frozenset[FaultSite] = frozenset(),
    master_seed: int = 0,
    repeat: int = 0,
    site_filter: FaultSite | None = None,
    threads: int = 1,
    limit: int | None = None,
) -> float:
    """Fraction of test samples classified correctly under per-sample plans."""
    if limit is not None:
        dataset = dataset.subset(limit)
    n_samples = len(dataset)
    if n_samples == 0:
        raise ValueError("cannot evaluate on an empty dataset")

    budget = count_vulnerable_bits(model, model.input_shape).restricted(
        protected_sites, site_filter
    )
    if n_faults > budget.total:
        raise ValueError(
            f"{n_faults} faults exceed the applicable population of {budget.total} bits"
        )

    chunks = [
        (start, min(start + EVAL_CHUNK, n_samples)) for start in range(0, n_samples, EVAL_CHUNK)
    ]

    def run_chunk(bounds: tuple[int, int]) -> int:
        lo, hi = bounds
        if n_faults == 0:
            return _eval_chunk_clean(model, dataset.images[lo:hi], dataset.labels[lo:hi])
        return _eval_chunk_faulted(
            model,
            dataset.images[lo:hi],
            dataset.labels[lo:hi],
            lo,
            budget,
            n_faults,
            master_seed,
            repeat,
        )

    if threads <= 1:
        correct = sum(run_chunk(c) for c in chunks)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            correct = sum(pool.map(run_chunk, chunks))
    return correct / n_samples
