# src/train_eval.py

import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from src import tensor_autodiff as ad
from src.backbone import Backbone, param_census
from src.errors import ContractError, InputError, ShapeError
from src.metrics import EvalRow, MetricsReport, accuracy, auroc, f1_macro, f1_macro_multilabel
from src.missing_sim import Sample, apply_missing, derive_seed
from src.models import ExperimentConfig, LossMode, MissingSpec, MissingType, TrainingConfig
from src.prompt_engine import PromptBank, route
from src.tensor_autodiff import Tensor

logger = logging.getLogger(__name__)


# --- Schedule and optimizer ---

def warmup_steps(total_steps: int, warmup_fraction: float = 0.1) -> int:
    return math.ceil(round(warmup_fraction * total_steps, 9))


def lr_at(step: int, total_steps: int, lr_max: float, warmup_fraction: float = 0.1) -> float:
    """Linear warmup from 0 to ``lr_max``, then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_steps(total_steps, warmup_fraction)
    if step < warmup:
        return lr_max * step / warmup
    if total_steps == warmup:
        return lr_max if step < total_steps else 0.0
    return lr_max * (total_steps - step) / (total_steps - warmup)


@dataclass
class OptimState:
    """Adam moments of the trainable set only, plus the schedule position."""
    params: Dict[str, Tensor]
    total_steps: int
    lr_max: float = 1e-2
    weight_decay: float = 2e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_fraction: float = 0.1
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Mapping[str, Tensor], config: TrainingConfig, total_steps: int) -> "OptimState":
        frozen = [name for name, t in params.items() if not t.requires_grad]
        if frozen:
            raise ContractError(f"optimizer was given frozen parameters: {frozen[:5]}")
        return cls(
            params=dict(params),
            total_steps=total_steps,
            lr_max=config.lr_max,
            weight_decay=config.weight_decay,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.adam_eps,
            warmup_fraction=config.warmup_fraction,
        )

    @property
    def lr(self) -> float:
        """Rate of the next update; update k (counting from 1) uses lr_at(k)."""
        return lr_at(min(self.step + 1, self.total_steps), self.total_steps, self.lr_max, self.warmup_fraction)


def adam_step(state: OptimState, params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]]) -> None:
    """
    One bias-corrected Adam update with decoupled weight decay. A parameter
    whose gradient is None took no part in the loss and is left untouched.
    """
    lr = state.lr
    for name, grad in grads.items():
        if name not in state.params or params.get(name) is not state.params[name]:
            raise ContractError(f"'{name}' is not in the optimizer's trainable set")
        if grad is None:
            continue
        theta = state.params[name]
        if grad.shape != theta.shape:
            raise ContractError(f"gradient for '{name}' has shape {grad.shape}, parameter has {theta.shape}")

        t = state.counts.get(name, 0) + 1
        state.counts[name] = t
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - state.beta1) * grad if m is None else state.beta1 * m + (1 - state.beta1) * grad
        v = (1 - state.beta2) * grad * grad if v is None else state.beta2 * v + (1 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v

        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        theta.data = theta.data - lr * state.weight_decay * theta.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.step += 1


# --- Loss ---

def label_array(samples: Sequence[Sample], mode: LossMode, n_classes: int) -> np.ndarray:
    if mode is LossMode.BCE_MULTILABEL:
        return np.stack([s.label_vector(n_classes) for s in samples])
    return np.asarray([s.label for s in samples], dtype=np.int64)


def loss(logits: Tensor, label: np.ndarray, mode: LossMode) -> Tensor:
    """Batch-mean loss of ``logits`` [B x C]."""
    label = np.asarray(label)
    n_classes = logits.shape[-1]
    if mode is LossMode.CROSS_ENTROPY:
        if label.shape != logits.shape[:1]:
            raise ShapeError(f"labels {label.shape} do not match logits {logits.shape}")
        if label.size and (label.min() < 0 or label.max() >= n_classes):
            raise InputError(f"label outside [0, {n_classes})")
        return ad.cross_entropy(logits, label)
    if label.shape != logits.shape:
        raise ShapeError(f"label bits {label.shape} do not match logits {logits.shape}")
    if not np.all((label == 0) | (label == 1)):
        raise InputError("multi-label targets must be 0 or 1")
    return ad.bce_with_logits(logits, label)


def group_by_missing_type(samples: Sequence[Sample]) -> Dict[MissingType, List[Sample]]:
    groups: Dict[MissingType, List[Sample]] = defaultdict(list)
    for sample in samples:
        groups[route(sample)].append(sample)
    return {m: groups[m] for m in MissingType if groups.get(m)}


class FeatureCache:
    """
    Fused task tokens of an unprompted frozen backbone, keyed by (sample index,
    missing type). Only valid while the prompt bank is empty.
    """

    def __init__(self, model: Backbone) -> None:
        self.model = model
        self.rows: Dict[Tuple[int, MissingType], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.rows)

    def fused(self, group: Sequence[Sample], m: MissingType) -> Tensor:
        todo = [s for s in group if (s.index, m) not in self.rows]
        if todo:
            for sample, row in zip(todo, self.model.fused_tokens(todo, m).numpy()):
                self.rows[(sample.index, m)] = row
        return Tensor(np.stack([self.rows[(s.index, m)] for s in group]))


def batch_loss(
    model: Backbone,
    bank: PromptBank,
    batch: Sequence[Sample],
    mode: LossMode,
    n_classes: int,
    cache: Optional[FeatureCache] = None,
) -> Tensor:
    """Mean loss over ``batch``, one forward pass per missing type present."""
    total: Optional[Tensor] = None
    for m, group in group_by_missing_type(batch).items():
        if cache is not None:
            logits = model.classify(cache.fused(group, m))
        else:
            logits = model.forward_batch(group, m, bank)
        part = loss(logits, label_array(group, mode, n_classes), mode) * (len(group) / len(batch))
        total = part if total is None else total + part
    if total is None:
        raise InputError("cannot compute the loss of an empty batch")
    return total


# --- Evaluation ---

@dataclass(frozen=True)
class EvalSlice:
    name: str  # e.g. "test/both"
    eta: float
    samples: List[Sample]
    every_epoch: bool = True  # otherwise only the first and last epochs


@dataclass(frozen=True)
class EvalResult:
    loss: float
    accuracy: float
    f1_macro: float
    auroc: Optional[float]


def _chunk_logits(
    model: Backbone, bank: PromptBank, chunk: Sequence[Sample], m: MissingType, mode: LossMode, n_classes: int
) -> Tuple[np.ndarray, np.ndarray, float]:
    logits = model.forward_batch(chunk, m, bank)
    labels = label_array(chunk, mode, n_classes)
    return logits.numpy(), labels, loss(logits, labels, mode).item() * len(chunk)


def evaluate(
    model: Backbone,
    bank: PromptBank,
    samples: Sequence[Sample],
    mode: LossMode,
    n_classes: int,
    chunk_size: int = 256,
    threads: int = 1,
) -> EvalResult:
    """Loss and metrics over ``samples``; chunks fan out across ``threads`` threads."""
    if not samples:
        raise InputError("cannot evaluate an empty slice")
    jobs = []
    for m, group in group_by_missing_type(samples).items():
        for start in range(0, len(group), chunk_size):
            jobs.append((group[start:start + chunk_size], m))

    if threads > 1 and len(jobs) > 1:
        parts = Parallel(n_jobs=threads, prefer="threads")(
            delayed(_chunk_logits)(model, bank, chunk, m, mode, n_classes) for chunk, m in jobs
        )
    else:
        parts = [_chunk_logits(model, bank, chunk, m, mode, n_classes) for chunk, m in jobs]

    logits = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    mean_loss = sum(p[2] for p in parts) / len(samples)

    if mode is LossMode.BCE_MULTILABEL:
        bits = (logits > 0).astype(np.int64)
        return EvalResult(mean_loss, accuracy(bits, labels.astype(np.int64)), f1_macro_multilabel(bits, labels), None)

    preds = np.argmax(logits, axis=1)
    roc = None
    if n_classes == 2:
        if len(np.unique(labels)) == 2:
            roc = auroc(logits[:, 1] - logits[:, 0], labels)
        else:
            logger.debug("Skipping AUROC: slice holds a single class.")
    return EvalResult(mean_loss, accuracy(preds, labels), f1_macro(preds, labels, n_classes), roc)


# --- Training ---

@dataclass
class RunData:
    """Training split plus the slices evaluated after every epoch."""
    train: List[Sample]
    slices: List[EvalSlice]
    complete_train: Optional[List[Sample]] = None
    missing: Optional[MissingSpec] = None


def trainable_set(model: Backbone, bank: PromptBank) -> Dict[str, Tensor]:
    params = {f"prompt.{name}": t for name, t in bank.trainable_params().items()}
    params.update(model.trainable_params())
    return params


def train_run(
    model: Backbone, bank: PromptBank, data: RunData, config: ExperimentConfig, seed: int = 0, threads: int = 1
) -> MetricsReport:
    """
    Trains the prompt bank and fc head; everything else stays frozen. Epoch 0
    of the report is the evaluation before any update.
    """
    training = config.training
    mode, n_classes = config.loss_mode, config.data.n_classes
    if not data.train:
        raise InputError("training split is empty")

    steps_per_epoch = math.ceil(len(data.train) / training.batch_size)
    total_steps = training.epochs * steps_per_epoch
    params = trainable_set(model, bank)
    state = OptimState.create(params, training, total_steps)
    trainable, total, fraction = param_census(model, bank)
    report = MetricsReport(trainable_params=trainable, total_params=total)
    logger.info(f"Training {trainable} of {total} parameters ({fraction:.2%}) for {total_steps} steps.")
    cache = FeatureCache(model) if bank.config.total_length == 0 else None

    def run_evaluation(epoch: int) -> None:
        for eval_slice in data.slices:
            if not eval_slice.every_epoch and epoch not in (0, training.epochs):
                continue
            started = time.perf_counter()
            result = evaluate(model, bank, eval_slice.samples, mode, n_classes, training.eval_chunk, threads)
            report.add(EvalRow(
                epoch=epoch,
                slice_case=eval_slice.name,
                eta=eval_slice.eta,
                loss=result.loss,
                accuracy=result.accuracy,
                f1_macro=result.f1_macro,
                auroc=result.auroc,
                seconds=time.perf_counter() - started,
            ))
            logger.info(
                f"epoch {epoch} {eval_slice.name}: loss={result.loss:.4f} acc={result.accuracy:.4f} "
                f"f1={result.f1_macro:.4f}" + (f" auroc={result.auroc:.4f}" if result.auroc is not None else "")
            )

    run_evaluation(0)
    train = data.train
    for epoch in range(1, training.epochs + 1):
        if training.reassign_missing_each_epoch and data.complete_train is not None and data.missing is not None:
            train = apply_missing(data.complete_train, data.missing, derive_seed(seed, 3, epoch))
        order = np.random.default_rng([seed, 2, epoch]).permutation(len(train))
        for start in range(0, len(train), training.batch_size):
            batch = [train[i] for i in order[start:start + training.batch_size]]
            with ad.Graph() as graph:
                batch_value = batch_loss(model, bank, batch, mode, n_classes, cache)
                graph.backward(batch_value)
            grads = {name: t.grad for name, t in params.items()}
            adam_step(state, params, grads)
            for t in params.values():
                t.zero_grad()
        run_evaluation(epoch)
    return report
