"""Feature-map distillation with a residual-learning assistant.

The student mimics the teacher's feature taps; the assistant is then trained
on what the student got wrong, ``f_T - f_S``, and inference adds the two.
Three schedules are provided:

``plain``
    student on the last tap, then assistant on the last-tap residual.
``progressive``
    block by block; at each level the student block, then the assistant
    block, and the fused feature feeds the next block of both.
``integrated``
    student end to end on the last tap, then assistant end to end on the
    residuals of every tap at once.

Frozen models (the teacher always, the student during assistant phases) are
run once over the training set in eval mode and their features cached; this
is equivalent to recomputing them per batch and much cheaper.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional, Sequence, TextIO, Union

import numpy as np

from . import tensor as T
from .data import Dataset, batch_iterator
from .network import Adapter, Linear, Network, build_network
from .netspec import NetworkSpec
from .optim import SGD, StepSchedule
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

VARIANTS = ("plain", "progressive", "integrated")

# The mimic losses sum over every feature element, so their gradients are
# orders of magnitude larger than a cross-entropy's; step sizes shrink to match.
DISTILL_SCHEDULE = StepSchedule(1e-4, 30, 0.1, 100)
# Fresh linear readout over pooled features (cross-entropy scale again).
CLASSIFIER_SCHEDULE = StepSchedule(0.1, 6, 0.1, 10)


# ---------------------------------------------------------------------------
# losses


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _sq_l2(diff: Tensor) -> Tensor:
    """Mean over the batch of the per-sample sum of squares."""
    return T.mul(T.tsum(T.square(diff)), Tensor(np.asarray(1.0 / diff.shape[0], dtype=diff.dtype)))


def student_mimic_loss(f_T, f_S_adapted) -> Tensor:
    """``mean_n sum (f_T - f_S)^2`` over channel and spatial elements."""
    f_T, f_S_adapted = _t(f_T), _t(f_S_adapted)
    if f_T.shape != f_S_adapted.shape:
        raise ValueError(f"teacher feature {f_T.shape} and student feature {f_S_adapted.shape} differ in shape")
    return _sq_l2(T.sub(f_T, f_S_adapted))


def _level_list(taps, k: int) -> list:
    if isinstance(taps, dict):
        return [taps.get(lv) for lv in range(1, k + 1)]
    return list(taps)


def assistant_residual_loss(taps_T, taps_S_adapted, taps_A_adapted, levels: Iterable[int]) -> Tensor:
    """Sum over ``levels`` (1-based) of ``mean_n ||(f_T - f_S) - f_A||^2``.

    Student taps are detached, so no gradient reaches the student.
    ``levels={K}`` is the last-tap objective; ``levels={1..K}`` the
    multi-level one. Tap collections may be lists (index = level - 1) or
    dicts keyed by level.
    """
    levels = sorted(set(levels))
    if not levels:
        raise ValueError("at least one level is required")
    k = max(levels)
    t_list = _level_list(taps_T, k)
    s_list = _level_list(taps_S_adapted, k)
    a_list = _level_list(taps_A_adapted, k)
    total = None
    for lv in levels:
        if lv < 1 or lv > min(len(t_list), len(s_list), len(a_list)):
            raise ValueError(f"level {lv} is not available in the given taps")
        f_t, f_s, f_a = _t(t_list[lv - 1]), _t(s_list[lv - 1]), _t(a_list[lv - 1])
        if not f_t.shape == f_s.shape == f_a.shape:
            raise ValueError(
                f"level {lv}: teacher {f_t.shape}, student {f_s.shape}, assistant {f_a.shape} shapes differ"
            )
        residual = Tensor(f_t.data - f_s.data)
        term = _sq_l2(T.sub(residual, f_a))
        total = term if total is None else T.add(total, term)
    return total


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    epoch: int
    phase: str
    top1: Optional[float]
    top5: Optional[float]
    feature_l2: Optional[float]
    train_loss: Optional[float]
    level: Optional[int] = None

    def __post_init__(self):
        if self.top1 is not None:
            if not (0.0 <= self.top1 <= self.top5 <= 100.0):
                raise ValueError(f"inconsistent accuracies top1={self.top1} top5={self.top5}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)


class MetricsStream:
    """Ordered, append-only metrics; optionally mirrored to a JSON-lines file."""

    def __init__(self, sink: Optional[TextIO] = None):
        self.records: list[MetricsRecord] = []
        self.sink = sink

    def append(self, record: MetricsRecord) -> None:
        self.records.append(record)
        log.info("%s", record.to_json())
        if self.sink is not None:
            self.sink.write(record.to_json() + "\n")
            self.sink.flush()

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


# ---------------------------------------------------------------------------
# fused inference


def _adapt(adapter: Optional[Adapter], tap: Tensor, level: int) -> Tensor:
    return tap if adapter is None else adapter(tap, level)


@dataclass
class DistilledModel:
    """Student plus optional assistant, read out in the teacher's feature space.

    ``classifier`` is the (frozen) teacher classifier applied to the pooled
    fused feature.
    """

    student: Network
    assistant: Optional[Network]
    adapter_S: Optional[Adapter]
    adapter_A: Optional[Adapter]
    classifier: Linear
    variant: str = "integrated"

    @property
    def num_levels(self) -> int:
        return self.student.num_blocks

    def fused_taps(self, batch, use_assistant: bool = True, stop: Optional[int] = None) -> list[Tensor]:
        """Fused features ``adapt(f_S) + adapt(f_A)`` for levels 1..stop."""
        stop = self.num_levels if stop is None else stop
        with_a = use_assistant and self.assistant is not None
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=self.student.dtype))
        if self.variant == "progressive":
            out = []
            for i in range(stop):
                f = _adapt(self.adapter_S, self.student.forward_block(i, x, "eval"), i + 1)
                if with_a:
                    f = T.add(f, _adapt(self.adapter_A, self.assistant.forward_block(i, x, "eval"), i + 1))
                out.append(f)
                x = f
            return out
        s_taps = self.student.features(x, "eval", stop)
        out = [_adapt(self.adapter_S, t, i + 1) for i, t in enumerate(s_taps)]
        if with_a:
            a_taps = self.assistant.features(x, "eval", stop)
            out = [T.add(f, _adapt(self.adapter_A, t, i + 1)) for i, (f, t) in enumerate(zip(out, a_taps))]
        return out

    def predict(self, batch, use_assistant: bool = True) -> tuple[np.ndarray, np.ndarray]:
        with no_grad():
            feat = self.fused_taps(batch, use_assistant)[-1]
            logits = self.classifier.forward(T.global_avg_pool(feat), False)
        return T.softmax_array(logits.data.astype(np.float64)), feat.data


def fused_inference(student: Network, assistant: Optional[Network], adapters, classifier: Linear, batch,
                    variant: str = "integrated") -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities from the pooled ``f_K^S + f_K^A``, and that fused feature.

    ``adapters`` is a ``(student_adapter, assistant_adapter)`` pair; with no
    assistant the student's adapted feature is classified alone.
    """
    adapter_S, adapter_A = adapters
    return DistilledModel(student, assistant, adapter_S, adapter_A, classifier, variant).predict(batch)


# ---------------------------------------------------------------------------
# evaluation


def _topk(probs: np.ndarray, labels: np.ndarray, k: int) -> int:
    k = min(k, probs.shape[1])
    # stable argsort keeps ties deterministic
    top = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return int((top == labels[:, None]).any(axis=1).sum())


def evaluate(model: Union[DistilledModel, Network], data: Dataset, teacher: Optional[Network] = None,
             batch_size: int = 256, use_assistant: bool = True, epoch: int = 0, phase: str = "eval",
             train_loss: Optional[float] = None, teacher_final: Optional[np.ndarray] = None) -> MetricsRecord:
    """Top-1/top-5 accuracy and mean squared l2 distance to the teacher's last tap.

    ``teacher_final`` may carry precomputed teacher features for ``data``.
    """
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    hit1 = hit5 = 0
    dist = 0.0
    for x, y, idx in batch_iterator(data, batch_size, shuffle=False):
        if isinstance(model, Network):
            with no_grad():
                taps, logits = model.forward_with_taps(x, "eval")
            probs, feat = T.softmax_array(logits.data.astype(np.float64)), taps[-1].data
        else:
            probs, feat = model.predict(x, use_assistant)
        hit1 += _topk(probs, y, 1)
        hit5 += _topk(probs, y, 5)
        if teacher_final is not None:
            ref = teacher_final[idx]
        elif teacher is not None:
            with no_grad():
                ref = teacher.features(x, "eval")[-1].data
        else:
            ref = None
        if ref is not None:
            diff = ref.astype(np.float64) - feat.astype(np.float64)
            dist += float((diff * diff).sum())
    n = len(data)
    return MetricsRecord(
        epoch=epoch,
        phase=phase,
        top1=100.0 * hit1 / n,
        top5=100.0 * hit5 / n,
        feature_l2=dist / n if (teacher is not None or teacher_final is not None) else None,
        train_loss=train_loss,
    )


# ---------------------------------------------------------------------------
# training loops


def _collect(fn: Callable[[np.ndarray], Sequence[np.ndarray]], images: np.ndarray, batch_size: int = 256):
    """Apply ``fn`` batchwise (no grad) and concatenate each output."""
    parts: Optional[list[list[np.ndarray]]] = None
    with no_grad():
        for start in range(0, len(images), batch_size):
            outs = fn(images[start : start + batch_size])
            if parts is None:
                parts = [[] for _ in outs]
            for bucket, o in zip(parts, outs):
                bucket.append(o)
    return [np.concatenate(b) for b in parts]


def _fit(params: list[Tensor], schedule: StepSchedule, data_len: int, batch_size: int, epoch_seed: int,
         loss_fn: Callable[[np.ndarray], Tensor], on_epoch: Callable[[int, float], None], momentum: float = 0.9,
         clip_norm: Optional[float] = None):
    """Generic SGD loop over index batches; ``loss_fn`` receives sample indices."""
    opt = SGD(params, schedule.base_lr, momentum, clip_norm)
    order_ds = _IndexSet(data_len)
    for epoch in range(schedule.epochs):
        opt.lr = schedule.lr_at(epoch)
        total, count = 0.0, 0
        for _, _, idx in batch_iterator(order_ds, batch_size, epoch_seed, shuffle=True, epoch=epoch):
            opt.zero_grad()
            loss = loss_fn(idx)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        on_epoch(epoch, total / count)


class _IndexSet:
    """Minimal dataset stand-in so ``batch_iterator`` can shuffle bare indices."""

    def __init__(self, n: int):
        self.n = n
        self.images = np.arange(n)
        self.labels = np.arange(n)

    def __len__(self):
        return self.n


def train_teacher(spec: NetworkSpec, data: Dataset, schedule: StepSchedule = StepSchedule(), seed: int = 0,
                  batch_size: int = 64, batchnorm: bool = True, eval_data: Optional[Dataset] = None,
                  metrics: Optional[MetricsStream] = None, hflip: bool = False) -> Network:
    """Train ``spec`` from scratch with softmax cross-entropy and momentum SGD."""
    if data.classes != spec.classes:
        raise ValueError(f"dataset has {data.classes} classes but the spec expects {spec.classes}")
    if tuple(data.shape) != tuple(spec.input_shape):
        raise ValueError(f"dataset images {data.shape} do not match spec input {spec.input_shape}")
    net = build_network(spec, seed)
    metrics = metrics if metrics is not None else MetricsStream()
    opt = SGD(net.parameters(), schedule.base_lr, 0.9)
    for epoch in range(schedule.epochs):
        opt.lr = schedule.lr_at(epoch)
        total, count = 0.0, 0
        for x, y, _ in batch_iterator(data, batch_size, seed, shuffle=True, epoch=epoch, hflip=hflip):
            opt.zero_grad()
            _, logits = net.forward_with_taps(x, "train")
            loss = T.softmax_cross_entropy(logits, T.one_hot(y, spec.classes, net.dtype))
            loss.backward()
            opt.step()
            total += loss.item() * len(y)
            count += len(y)
        rec = evaluate(net, eval_data if eval_data is not None else data, epoch=epoch, phase="teacher",
                       train_loss=total / count)
        rec.feature_l2 = 0.0
        metrics.append(rec)
    return net


@dataclass
class DistillationRun:
    teacher: Network
    student: Network
    assistant: Optional[Network] = None
    adapter_S: Optional[Adapter] = None
    adapter_A: Optional[Adapter] = None
    variant: str = "integrated"
    schedule: StepSchedule = field(default_factory=lambda: DISTILL_SCHEDULE)
    seed: int = 0
    batch_size: int = 64
    assistant_schedule: Optional[StepSchedule] = None
    clip_norm: Optional[float] = None  # assistant phases only

    @property
    def schedule_A(self) -> StepSchedule:
        return self.assistant_schedule if self.assistant_schedule is not None else self.schedule


@dataclass
class DistillationResult:
    model: DistilledModel
    metrics: MetricsStream


def make_run(teacher: Network, spec_S: NetworkSpec, spec_A: Optional[NetworkSpec], variant: str = "integrated",
             schedule: Optional[StepSchedule] = None, seed: int = 0, batch_size: int = 64,
             batchnorm: bool = True, assistant_schedule: Optional[StepSchedule] = None,
             clip_norm: Optional[float] = None) -> DistillationRun:
    """Build student, assistant and adapters for ``variant``.

    In progressive mode blocks 2..K of both models take teacher-width input,
    since each block consumes the fused feature of the previous level.
    The assistant's adapter starts at zero, so fused features initially
    equal the student's.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    k = teacher.num_blocks
    for name, spec in (("student", spec_S), ("assistant", spec_A)):
        if spec is not None and spec.num_blocks != k:
            raise ValueError(f"{name} has {spec.num_blocks} blocks but the teacher has {k}")
    widths = teacher.tap_channels
    overrides = [None] + widths[:-1] if variant == "progressive" else None
    student = build_network(spec_S, seed, teacher.dtype, batchnorm, overrides)
    assistant = build_network(spec_A, seed + 1, teacher.dtype, batchnorm, overrides) if spec_A is not None else None
    adapter_S = Adapter.between(student, teacher, seed + 2)
    adapter_A = Adapter.between(assistant, teacher, seed + 3, zero_init=True) if assistant is not None else None
    return DistillationRun(teacher, student, assistant, adapter_S, adapter_A, variant,
                           schedule or DISTILL_SCHEDULE, seed, batch_size, assistant_schedule, clip_norm)


def run_distillation(run: DistillationRun, data: Dataset, eval_data: Optional[Dataset] = None,
                     metrics: Optional[MetricsStream] = None) -> DistillationResult:
    """Train student then assistant according to ``run.variant``.

    Only one of student/assistant is updated at any time; the teacher is
    never updated.
    """
    if run.variant not in VARIANTS:
        raise ValueError(f"unknown variant {run.variant!r}")
    k = run.teacher.num_blocks
    for name, net in (("student", run.student), ("assistant", run.assistant)):
        if net is not None and net.num_blocks != k:
            raise ValueError(f"{name} has {net.num_blocks} blocks but the teacher has {k}")
    if run.variant == "progressive":
        want = [None] + run.teacher.tap_channels[:-1]
        for name, net in (("student", run.student), ("assistant", run.assistant)):
            if net is not None and (net.block_in_channels or [None] * k)[1:] != want[1:]:
                raise ValueError(f"progressive {name} blocks must take teacher-width inputs; build it with make_run")
    if tuple(data.shape) != tuple(run.teacher.spec.input_shape):
        raise ValueError(f"dataset images {data.shape} do not match teacher input {run.teacher.spec.input_shape}")
    metrics = metrics if metrics is not None else MetricsStream()
    eval_data = eval_data if eval_data is not None else data
    trainer = _Trainer(run, data, eval_data, metrics)
    if run.variant == "progressive":
        trainer.progressive()
    else:
        trainer.two_phase(levels=[k] if run.variant == "plain" else list(range(1, k + 1)))
    return DistillationResult(trainer.model(), metrics)


class _Trainer:
    def __init__(self, run: DistillationRun, data: Dataset, eval_data: Dataset, metrics: MetricsStream):
        self.run = run
        self.data = data
        self.eval_data = eval_data
        self.metrics = metrics
        self.k = run.teacher.num_blocks
        teacher = run.teacher
        self.teacher_taps = _collect(lambda x: [t.data for t in teacher.features(x, "eval")], data.images)
        self.eval_teacher_final = _collect(lambda x: [teacher.features(x, "eval")[-1].data], eval_data.images)[0]
        self.dtype = teacher.dtype

    def model(self) -> DistilledModel:
        r = self.run
        return DistilledModel(r.student, r.assistant, r.adapter_S, r.adapter_A, r.teacher.classifier, r.variant)

    def _record(self, epoch: int, phase: str, loss: float, use_assistant: bool):
        rec = evaluate(self.model(), self.eval_data, use_assistant=use_assistant, epoch=epoch, phase=phase,
                       train_loss=loss, teacher_final=self.eval_teacher_final)
        self.metrics.append(rec)

    def _tensor(self, arr: np.ndarray) -> Tensor:
        return Tensor(arr.astype(self.dtype, copy=False))

    # plain / integrated

    def two_phase(self, levels: list[int]) -> None:
        self.student_phase(levels)
        if self.run.assistant is not None:
            self.assistant_phase(levels)

    def student_phase(self, levels: list[int]) -> None:
        r = self.run
        k = self.k
        t_taps = self.teacher_taps
        images = self.data.images
        # student on the last tap; adapters at other supervised levels are fitted
        # on detached student features so residual targets live in teacher space
        extra = [lv for lv in levels if lv != k]
        params = r.student.parameters(include_classifier=False) + r.adapter_S.parameters([k] + extra)

        def student_loss(idx):
            taps = r.student.features(self._tensor(images[idx]), "train")
            loss = student_mimic_loss(self._tensor(t_taps[k - 1][idx]), r.adapter_S(taps[k - 1], k))
            for lv in extra:
                fit = student_mimic_loss(self._tensor(t_taps[lv - 1][idx]), r.adapter_S(taps[lv - 1].detach(), lv))
                loss = T.add(loss, fit)
            return loss

        _fit(params, r.schedule, len(images), r.batch_size, r.seed * 100 + 1, student_loss,
             lambda e, loss: self._record(e, "student", loss, use_assistant=False))

    def assistant_phase(self, levels: list[int]) -> None:
        r = self.run
        t_taps = self.teacher_taps
        images = self.data.images

        def adapted_student(x):
            taps = r.student.features(self._tensor(x), "eval")
            return [r.adapter_S(taps[lv - 1], lv).data for lv in levels]

        s_bank = dict(zip(levels, _collect(adapted_student, images)))
        a_params = r.assistant.parameters(include_classifier=False) + r.adapter_A.parameters(levels)

        def assistant_loss(idx):
            taps = r.assistant.features(self._tensor(images[idx]), "train", max(levels))
            return assistant_residual_loss(
                {lv: self._tensor(t_taps[lv - 1][idx]) for lv in levels},
                {lv: self._tensor(s_bank[lv][idx]) for lv in levels},
                {lv: r.adapter_A(taps[lv - 1], lv) for lv in levels},
                levels,
            )

        _fit(a_params, r.schedule_A, len(images), r.batch_size, r.seed * 100 + 2, assistant_loss,
             lambda e, loss: self._record(e, "assistant", loss, use_assistant=True), clip_norm=r.clip_norm)

    # progressive

    def progressive(self) -> None:
        r = self.run
        t_taps = self.teacher_taps
        x_bank = self.data.images
        for level in range(1, self.k + 1):
            bi = level - 1
            target = t_taps[bi]
            inputs = x_bank
            params = [p for _, p in r.student.block_parameters(bi)] + r.adapter_S.parameters([level])

            def student_loss(idx, bi=bi, level=level, inputs=inputs, target=target):
                f = r.student.forward_block(bi, self._tensor(inputs[idx]), "train")
                return student_mimic_loss(self._tensor(target[idx]), r.adapter_S(f, level))

            _fit(params, r.schedule, len(inputs), r.batch_size, r.seed * 100 + 10 + level, student_loss,
                 lambda e, loss, lv=level: self._record_level(e, f"student{lv}", loss, lv, False))
            s_out = _collect(lambda x: [r.adapter_S(r.student.forward_block(bi, self._tensor(x), "eval"), level).data],
                             inputs)[0]
            if r.assistant is None:
                x_bank = s_out
                continue
            a_params = [p for _, p in r.assistant.block_parameters(bi)] + r.adapter_A.parameters([level])

            def assistant_loss(idx, bi=bi, level=level, inputs=inputs, target=target, s_out=s_out):
                f = r.assistant.forward_block(bi, self._tensor(inputs[idx]), "train")
                return assistant_residual_loss({level: self._tensor(target[idx])}, {level: self._tensor(s_out[idx])},
                                               {level: r.adapter_A(f, level)}, [level])

            _fit(a_params, r.schedule_A, len(inputs), r.batch_size, r.seed * 100 + 20 + level, assistant_loss,
                 lambda e, loss, lv=level: self._record_level(e, f"assistant{lv}", loss, lv, True),
                 clip_norm=r.clip_norm)
            a_out = _collect(
                lambda x: [r.adapter_A(r.assistant.forward_block(bi, self._tensor(x), "eval"), level).data], inputs
            )[0]
            x_bank = s_out + a_out

    def _record_level(self, epoch: int, phase: str, loss: float, level: int, use_assistant: bool):
        if level == self.k:
            self._record(epoch, phase, loss, use_assistant)
            self.metrics.records[-1].level = level
            return
        self.metrics.append(MetricsRecord(epoch, phase, None, None, None, loss, level))


# ---------------------------------------------------------------------------
# optional classifier fine-tuning


def finetune_classifier(model: DistilledModel, data: Dataset, schedule: StepSchedule = CLASSIFIER_SCHEDULE,
                        seed: int = 0, batch_size: int = 64) -> Linear:
    """Fit a fresh linear classifier on pooled fused features with cross-entropy.

    Feature extractors stay frozen; the returned classifier replaces the
    teacher's on ``model``.
    """
    pooled = _collect(lambda x: [T.global_avg_pool(model.fused_taps(x)[-1]).data], data.images)[0]
    rng = np.random.default_rng(seed)
    clf = Linear(pooled.shape[1], data.classes, rng, model.student.dtype)
    labels = data.labels

    def loss_fn(idx):
        logits = clf.forward(Tensor(pooled[idx]), True)
        return T.softmax_cross_entropy(logits, T.one_hot(labels[idx], data.classes, model.student.dtype))

    _fit([clf.weight, clf.bias], schedule, len(labels), batch_size, seed * 100 + 5, loss_fn, lambda e, loss: None)
    model.classifier = clf
    return clf
