"""SGD, learning-rate schedules and the two-phase fine-tuning workflow."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .data import BatchSpec, make_batches, prefetch
from .errors import ContractError, NumericError, TrainingDivergenceError
from .functional import cross_entropy, softmax
from .imaging import IMAGENET_MEAN, IMAGENET_STD, AugmentConfig
from .nn import BatchNorm2d, Linear, Module, ResNet
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


# optimizer


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-2
    velocity: Dict[int, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: OptimizerState,
             lr_scales: Optional[Sequence[float]] = None) -> None:
    """``v <- momentum * v + grad + wd * param``; ``param <- param - lr * v``.

    Parameters with ``requires_grad`` false are skipped and get no state.
    """
    if lr_scales is None:
        lr_scales = [1.0] * len(params)
    for p, g, scale in zip(params, grads, lr_scales):
        if not p.requires_grad:
            continue
        if g is None:
            raise ContractError(f"trainable parameter of shape {p.shape} has no gradient")
        g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=p.dtype)
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        v = state.velocity.get(id(p))
        if v is None:
            v = state.velocity[id(p)] = np.zeros_like(p.data)
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p.data
        step = state.lr * scale
        if step != 0.0:
            p.data -= p.dtype.type(step) * v


class SGD:
    """Momentum SGD over parameter groups.

    ``params`` is either a list of tensors or a list of dicts with keys
    ``params`` and ``lr_scale`` (multiplier on the scheduled learning rate).
    """

    def __init__(self, params, lr: float = 1e-2, momentum: float = 0.9, weight_decay: float = 1e-2):
        params = list(params)
        if params and isinstance(params[0], dict):
            groups = [{"params": list(g["params"]), "lr_scale": float(g.get("lr_scale", 1.0))} for g in params]
        else:
            groups = [{"params": params, "lr_scale": 1.0}]
        self.groups = groups
        self.state = OptimizerState(lr, momentum, weight_decay)
        for p in self.params:
            if p.requires_grad:
                self.state.velocity[id(p)] = np.zeros_like(p.data)

    @property
    def params(self) -> List[Tensor]:
        return [p for g in self.groups for p in g["params"]]

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        params, scales = [], []
        for g in self.groups:
            params += g["params"]
            scales += [g["lr_scale"]] * len(g["params"])
        sgd_step(params, [p.grad for p in params], self.state, scales)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# schedules


@dataclass(frozen=True)
class ScheduleSpec:
    """``one_cycle``: cosine rise from ``max_lr / div_start`` to ``max_lr`` over the
    first ``warmup_frac`` of ``total_steps``, then cosine decay to ``max_lr / div_end``.
    ``constant`` always returns ``max_lr``."""

    policy: str = "one_cycle"
    max_lr: float = 1e-2
    total_steps: int = 100
    warmup_frac: float = 0.25
    div_start: float = 25.0
    div_end: float = 1e4


def _cos_interp(start: float, end: float, pos: float) -> float:
    return end + (start - end) * (1.0 + math.cos(math.pi * pos)) / 2.0


def schedule_lr(spec: ScheduleSpec, step: int) -> float:
    if step < 0 or step > spec.total_steps:
        raise ContractError(f"step {step} outside [0, {spec.total_steps}]")
    if spec.policy == "constant":
        return spec.max_lr
    if spec.policy != "one_cycle":
        raise ContractError(f"unknown schedule policy {spec.policy!r}")
    warm = spec.warmup_frac * spec.total_steps
    low, high, final = spec.max_lr / spec.div_start, spec.max_lr, spec.max_lr / spec.div_end
    if step <= warm:
        return high if warm == 0 else _cos_interp(low, high, step / warm)
    return _cos_interp(high, final, (step - warm) / (spec.total_steps - warm))


# transfer learning


def head_parameter_names(model: ResNet) -> List[str]:
    return [n for n, _ in model.named_parameters() if n.startswith("head.")]


def freeze_backbone(model: ResNet) -> None:
    """Make every non-head parameter non-trainable and pin backbone batch norms to
    their running statistics, so a frozen backbone is left untouched by training."""
    for name, p in model.named_parameters():
        p.requires_grad = name.startswith("head.")
    for name, m in model.named_modules():
        if isinstance(m, BatchNorm2d) and not name.startswith("head"):
            m.frozen = True


def unfreeze(model: ResNet) -> None:
    for p in model.parameters():
        p.requires_grad = True
    for m in model.modules():
        if isinstance(m, BatchNorm2d):
            m.frozen = False


def replace_head(model: ResNet, num_classes: int, seed=None) -> None:
    """Swap in a freshly initialised ``features -> num_classes`` linear layer."""
    if num_classes < 2:
        raise ContractError(f"num_classes must be >= 2, got {num_classes}")
    old = model.head
    model.head = Linear(old.in_features, num_classes, rng=seed, dtype=old.weight.dtype)


# evaluation


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    scores: np.ndarray
    labels: np.ndarray

    @property
    def predictions(self) -> np.ndarray:
        return self.scores.argmax(axis=1)


def evaluate(model: Module, batches: Iterable) -> EvalResult:
    """Mean cross-entropy, top-1 accuracy and softmax scores over ``batches``.

    Runs in eval mode without recording a tape; the model's previous mode is
    restored afterwards. Argmax ties resolve to the lowest class index.
    """
    was_training = [(m, m.training) for m in model.modules()]
    model.eval()
    total_loss, scores, labels = 0.0, [], []
    try:
        with no_grad():
            for x, y in batches:
                logits = model(x)
                total_loss += cross_entropy(logits, y).item() * len(y)
                scores.append(softmax(logits, axis=1).data.astype(np.float64))
                labels.append(np.asarray(y, dtype=np.int64))
    finally:
        for m, flag in was_training:
            object.__setattr__(m, "training", flag)
    if not labels:
        raise ContractError("evaluate() received no samples")
    scores_arr, labels_arr = np.concatenate(scores), np.concatenate(labels)
    n = len(labels_arr)
    if n == 0:
        raise ContractError("evaluate() received no samples")
    accuracy = float((scores_arr.argmax(axis=1) == labels_arr).mean())
    return EvalResult(total_loss / n, accuracy, scores_arr, labels_arr)


# fitting


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-2
    policy: str = "one_cycle"
    warmup_frac: float = 0.25
    div_start: float = 25.0
    div_end: float = 1e4
    backbone_lr_ratio: float = 0.1
    phase2_lr_scale: float = 0.5
    seed: int = 0
    augment: AugmentConfig = AugmentConfig()
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD
    prefetch: int = 0

    def batch_spec(self, shuffle: bool = True) -> BatchSpec:
        return BatchSpec(self.batch_size, shuffle, self.augment, tuple(self.mean), tuple(self.std))


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    train_loss: float
    test_loss: float
    test_accuracy: float
    seconds: float


@dataclass
class FitReport:
    epochs: List[EpochRecord] = field(default_factory=list)
    final: Optional[EvalResult] = None

    @property
    def final_accuracy(self) -> float:
        return self.epochs[-1].test_accuracy

    def to_csv(self) -> str:
        """``epoch,train_loss,test_loss,test_accuracy``; wall-clock time is left out so reruns are byte-identical."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "test_loss", "test_accuracy"])
        for r in self.epochs:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.test_loss), repr(r.test_accuracy)])
        return buf.getvalue()


def _eval_batches(dataset, config: TrainConfig):
    return make_batches(dataset, config.batch_spec(shuffle=False), training=False)


def _record(model, train_ds, test_ds, config, epoch, phase, train_loss, started) -> EpochRecord:
    test = evaluate(model, _eval_batches(test_ds, config))
    if train_loss is None:
        train_loss = evaluate(model, _eval_batches(train_ds, config)).loss
    rec = EpochRecord(epoch, phase, float(train_loss), test.loss, test.accuracy, time.perf_counter() - started)
    logger.info(
        "epoch %d [%s] train_loss %.4f test_loss %.4f test_acc %.4f (%.1fs)",
        rec.epoch, phase, rec.train_loss, rec.test_loss, rec.test_accuracy, rec.seconds,
    )
    return rec


def _run_phase(
    model: Module,
    optimizer: SGD,
    train_ds,
    test_ds,
    epochs: int,
    config: TrainConfig,
    rng: np.random.Generator,
    report: FitReport,
    phase: str,
    max_lr: float,
    on_step=None,
) -> None:
    if epochs <= 0:
        return
    steps_per_epoch = math.ceil(len(train_ds) / config.batch_size)
    schedule = ScheduleSpec(config.policy, max_lr, epochs * steps_per_epoch, config.warmup_frac,
                            config.div_start, config.div_end)
    spec = config.batch_spec(shuffle=True)
    step = 0
    first_epoch = report.epochs[-1].epoch + 1 if report.epochs else 1
    for e in range(epochs):
        epoch = first_epoch + e
        started = time.perf_counter()
        model.train()
        batches = make_batches(train_ds, spec, rng, training=True)
        if config.prefetch:
            batches = prefetch(batches, config.prefetch)
        seen, loss_sum = 0, 0.0
        for x, y in batches:
            optimizer.lr = schedule_lr(schedule, step)
            try:
                loss = cross_entropy(model(x), y)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError("loss is not finite")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            except NumericError as exc:
                raise TrainingDivergenceError(f"training diverged: {exc}", epoch, step) from exc
            if on_step is not None:
                on_step(step, value)
            seen += len(y)
            loss_sum += value * len(y)
            step += 1
        report.epochs.append(_record(model, train_ds, test_ds, config, epoch, phase, loss_sum / seen, started))


def fit(model: Module, train_ds, test_ds, epochs: int, config: TrainConfig = TrainConfig(),
        on_step=None) -> FitReport:
    """Train every parameter for ``epochs`` with one learning-rate cycle.

    The report's first row (epoch 0) evaluates the untouched model.
    """
    rng = np.random.default_rng(config.seed)
    report = FitReport()
    report.epochs.append(_record(model, train_ds, test_ds, config, 0, "initial", None, time.perf_counter()))
    opt = SGD(model.parameters(), config.max_lr, config.momentum, config.weight_decay)
    _run_phase(model, opt, train_ds, test_ds, epochs, config, rng, report, "full", config.max_lr, on_step)
    report.final = evaluate(model, _eval_batches(test_ds, config))
    return report


def fine_tune(
    model: ResNet,
    train_ds,
    test_ds,
    phase1_epochs: int,
    phase2_epochs: int,
    config: TrainConfig = TrainConfig(),
    require_pretrained: bool = True,
    on_step=None,
) -> FitReport:
    """Head-only training on a frozen backbone, then full training.

    Phase 2 runs at ``max_lr * phase2_lr_scale`` for the head and
    ``backbone_lr_ratio`` times that for the backbone. The test partition is
    evaluated before training and after every epoch.
    """
    if require_pretrained and model.weights_source is None:
        raise ContractError(
            "fine_tune() expects pretrained weights; load or import them first, "
            "or pass require_pretrained=False for a from-scratch run"
        )
    rng = np.random.default_rng(config.seed)
    report = FitReport()
    report.epochs.append(_record(model, train_ds, test_ds, config, 0, "initial", None, time.perf_counter()))

    if phase1_epochs > 0:
        freeze_backbone(model)
        try:
            head = [p for n, p in model.named_parameters() if n.startswith("head.")]
            opt = SGD(head, config.max_lr, config.momentum, config.weight_decay)
            _run_phase(model, opt, train_ds, test_ds, phase1_epochs, config, rng, report,
                       "frozen", config.max_lr, on_step)
        finally:
            unfreeze(model)

    if phase2_epochs > 0:
        unfreeze(model)
        named = list(model.named_parameters())
        groups = [
            {"params": [p for n, p in named if not n.startswith("head.")], "lr_scale": config.backbone_lr_ratio},
            {"params": [p for n, p in named if n.startswith("head.")], "lr_scale": 1.0},
        ]
        opt = SGD(groups, config.max_lr, config.momentum, config.weight_decay)
        _run_phase(model, opt, train_ds, test_ds, phase2_epochs, config, rng, report,
                   "unfrozen", config.max_lr * config.phase2_lr_scale, on_step)

    report.final = evaluate(model, _eval_batches(test_ds, config))
    return report
