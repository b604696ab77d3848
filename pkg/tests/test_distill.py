import dataclasses
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rkd import tensor as T
from rkd.data import make_synthetic
from rkd.distill import (
    DistilledModel,
    MetricsRecord,
    MetricsStream,
    _Trainer,
    assistant_residual_loss,
    evaluate,
    fused_inference,
    make_run,
    run_distillation,
    student_mimic_loss,
    train_teacher,
)
from rkd.network import build_network, checksum
from rkd.optim import StepSchedule

from oracles import sq_l2_batch_mean
from tiny import SHORT, tiny_data, tiny_plan, tiny_spec, tiny_teacher

# -- losses ---------------------------------------------------------------------


def test_mimic_identity_is_zero():
    f = np.random.default_rng(0).standard_normal((3, 2, 4, 4))
    assert student_mimic_loss(f, f).item() == 0.0


def test_mimic_ones_against_zeros():
    assert student_mimic_loss(np.ones((1, 1, 2, 2)), np.zeros((1, 1, 2, 2))).item() == 4.0


def test_mimic_matches_elementwise_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((4, 3, 5, 5)), rng.standard_normal((4, 3, 5, 5))
    assert student_mimic_loss(a, b).item() == pytest.approx(sq_l2_batch_mean(a, b), abs=1e-6, rel=1e-9)


def test_mimic_shape_mismatch():
    with pytest.raises(ValueError, match="differ in shape"):
        student_mimic_loss(np.zeros((1, 2, 3, 3)), np.zeros((1, 3, 3, 3)))


def test_perfect_residual_is_zero():
    rng = np.random.default_rng(2)
    t = [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 5, 2, 2))]
    s = [rng.standard_normal(x.shape) for x in t]
    a = [x - y for x, y in zip(t, s)]
    assert assistant_residual_loss(t, s, a, [1, 2]).item() == pytest.approx(0.0, abs=1e-12)


def test_two_level_residual_against_oracle():
    rng = np.random.default_rng(3)
    t = [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 5, 2, 2))]
    s = [rng.standard_normal(x.shape) for x in t]
    a = [rng.standard_normal(x.shape) for x in t]
    want = sum(sq_l2_batch_mean(ti - si, ai) for ti, si, ai in zip(t, s, a))
    assert assistant_residual_loss(t, s, a, [1, 2]).item() == pytest.approx(want, abs=1e-6, rel=1e-9)
    only_last = assistant_residual_loss({2: t[1]}, {2: s[1]}, {2: a[1]}, [2]).item()
    assert only_last == pytest.approx(sq_l2_batch_mean(t[1] - s[1], a[1]), abs=1e-6, rel=1e-9)


def test_residual_shape_mismatch_names_level():
    good = np.zeros((1, 2, 2, 2))
    with pytest.raises(ValueError, match="level 2"):
        assistant_residual_loss([good, good], [good, good], [good, np.zeros((1, 3, 2, 2))], [1, 2])


def test_residual_needs_levels():
    with pytest.raises(ValueError):
        assistant_residual_loss([], [], [], [])


def test_residual_loss_blocks_student_gradient():
    rng = np.random.default_rng(4)
    t = T.Tensor(rng.standard_normal((2, 3, 2, 2)))
    s = T.Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
    a = T.Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
    assistant_residual_loss([t], [s], [a], [1]).backward()
    assert s.grad is None and a.grad is not None


_arrays = hnp.arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3),
                                           st.integers(1, 3)),
                     elements=st.floats(-100, 100, allow_nan=False, width=64))


@settings(max_examples=120, deadline=None)
@given(st.data())
def test_residual_equals_mimic_of_sum(data):
    t = data.draw(_arrays)
    s = data.draw(hnp.arrays(np.float64, t.shape, elements=st.floats(-100, 100, width=64)))
    a = data.draw(hnp.arrays(np.float64, t.shape, elements=st.floats(-100, 100, width=64)))
    lhs = assistant_residual_loss([t], [s], [a], [1]).item()
    rhs = student_mimic_loss(t, s + a).item()
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(rhs))


# -- metrics --------------------------------------------------------------------


def test_metrics_record_validates_accuracies():
    MetricsRecord(0, "eval", 40.0, 90.0, 1.0, None)
    for top1, top5 in ((95.0, 90.0), (-1.0, 10.0), (50.0, 101.0)):
        with pytest.raises(ValueError):
            MetricsRecord(0, "eval", top1, top5, 1.0, None)


def test_metrics_stream_writes_json_lines():
    buf = io.StringIO()
    stream = MetricsStream(buf)
    stream.append(MetricsRecord(0, "student", 50.0, 100.0, 2.5, 3.0))
    stream.append(MetricsRecord(1, "student", 60.0, 100.0, 2.0, 2.5))
    rows = [json.loads(line) for line in buf.getvalue().splitlines()]
    assert [r["epoch"] for r in rows] == [0, 1] and len(stream) == 2
    assert set(rows[0]) == {"epoch", "phase", "top1", "top5", "feature_l2", "train_loss", "level"}


# -- evaluation -----------------------------------------------------------------


def test_five_classes_top5_is_total():
    data = make_synthetic(0, 5, 4, size=(1, 8, 8))
    net = build_network(tiny_spec().__class__((1, 8, 8), tiny_spec().blocks, 5), seed=0)
    assert evaluate(net, data).top5 == 100.0


def test_all_correct_and_self_distance():
    teacher = tiny_teacher()
    train, _ = tiny_data()
    with T.no_grad():
        pred = teacher.forward_with_taps(train.images, "eval")[1].data.argmax(1)
    rec = evaluate(teacher, dataclasses.replace(train, labels=pred), teacher=teacher)
    assert rec.top1 == 100.0 and rec.feature_l2 == 0.0


def test_empty_eval_set():
    data = make_synthetic(0, 3, 2, size=(1, 8, 8))
    with pytest.raises(ValueError, match="at least one sample"):
        dataclasses.replace(data, images=data.images[:0], labels=data.labels[:0], raw=data.raw[:0])
    with pytest.raises(ValueError, match="empty"):
        evaluate(tiny_teacher(), _Empty())


class _Empty:
    images = np.zeros((0, 1, 8, 8), dtype=np.float32)
    labels = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return 0


def test_zero_assistant_reduces_to_student():
    teacher = tiny_teacher()
    plan = tiny_plan()
    run = make_run(teacher, plan.spec_S, plan.spec_A, "integrated", SHORT)
    x = tiny_data()[1].images
    probs, feat = fused_inference(run.student, run.assistant, (run.adapter_S, run.adapter_A), teacher.classifier, x)
    alone, feat_s = fused_inference(run.student, None, (run.adapter_S, None), teacher.classifier, x)
    np.testing.assert_array_equal(probs, alone)
    np.testing.assert_array_equal(feat, feat_s)
    assert np.all(probs >= 0) and np.allclose(probs.sum(1), 1.0, atol=1e-6)


# -- training -------------------------------------------------------------------


def test_teacher_class_count_checked():
    train, _ = tiny_data()
    spec = tiny_spec().__class__((1, 8, 8), tiny_spec().blocks, 4)
    with pytest.raises(ValueError, match="classes"):
        train_teacher(spec, train, SHORT)


def test_teacher_zero_lr_is_null_update():
    train, _ = tiny_data()
    net = train_teacher(tiny_spec(), train, StepSchedule(0.0, 1, 0.1, 1), seed=3, batch_size=16)
    assert checksum(net.parameters()) == checksum(build_network(tiny_spec(), 3).parameters())


def test_teacher_loss_decreases():
    train, _ = tiny_data()
    stream = MetricsStream()
    train_teacher(tiny_spec(), train, StepSchedule(0.05, 20, 0.1, 20), seed=0, batch_size=16, metrics=stream)
    losses = [r.train_loss for r in stream]
    assert losses[19] < losses[0]


class _Probe(MetricsStream):
    """Records teacher/student checksums whenever a record is emitted."""

    def __init__(self, run):
        super().__init__()
        self.run = run
        self.sums = []

    def append(self, record):
        super().append(record)
        self.sums.append((record.phase, checksum(self.run.teacher), checksum(self.run.student)))


@pytest.mark.parametrize("variant", ["plain", "progressive", "integrated"])
def test_freeze_contracts(variant):
    teacher = tiny_teacher()
    train, test = tiny_data()
    plan = tiny_plan()
    run = make_run(teacher, plan.spec_S, plan.spec_A, variant, SHORT)
    before = checksum(teacher)
    probe = _Probe(run)
    run_distillation(run, train, test, probe)
    assert checksum(teacher) == before
    assert {t for _, t, _ in probe.sums} == {before}
    phases = [p for p, _, _ in probe.sums]
    assert any(p.startswith("assistant") for p in phases)
    if variant == "progressive":
        # each level's student block is frozen once its assistant block starts
        last_student = {}
        for phase, _, s in probe.sums:
            if phase.startswith("student"):
                last_student = s
            else:
                assert s == last_student
    else:
        start = phases.index("assistant")
        student_sums = {s for _, _, s in probe.sums[start - 1:]}
        assert len(student_sums) == 1


def test_assistant_phase_sends_no_gradient_to_frozen_models():
    teacher = tiny_teacher()
    train, test = tiny_data()
    plan = tiny_plan()
    run = make_run(teacher, plan.spec_S, plan.spec_A, "integrated", SHORT)
    trainer = _Trainer(run, train, test, MetricsStream())
    trainer.student_phase([1, 2])
    for p in run.student.parameters() + run.adapter_S.parameters() + teacher.parameters():
        p.grad = None
    trainer.assistant_phase([1, 2])
    frozen = run.student.parameters() + run.adapter_S.parameters() + teacher.parameters()
    assert all(p.grad is None for p in frozen)
    assert all(p.grad is not None for p in run.assistant.parameters(include_classifier=False))


def test_disabled_assistant_matches_student_only_run():
    teacher = tiny_teacher()
    train, test = tiny_data()
    plan = tiny_plan()
    full = run_distillation(make_run(teacher, plan.spec_S, plan.spec_A, "integrated", SHORT), train, test)
    alone = run_distillation(make_run(teacher, plan.spec_S, None, "integrated", SHORT), train, test)
    student_rows = [r.to_json() for r in full.metrics if r.phase == "student"]
    assert student_rows == [r.to_json() for r in alone.metrics]
    np.testing.assert_array_equal(full.model.predict(test.images, use_assistant=False)[0],
                                  alone.model.predict(test.images)[0])


def test_runs_are_deterministic():
    teacher = tiny_teacher()
    train, test = tiny_data()
    plan = tiny_plan()
    rows = []
    for _ in range(2):
        res = run_distillation(make_run(teacher, plan.spec_S, plan.spec_A, "plain", SHORT, seed=4), train, test)
        rows.append([r.to_json() for r in res.metrics])
    assert rows[0] == rows[1]


@pytest.mark.parametrize("variant", ["integrated", "progressive"])
def test_clip_norm_touches_only_assistant_phases(variant):
    teacher = tiny_teacher()
    train, test = tiny_data()
    plan = tiny_plan()
    runs = [run_distillation(make_run(teacher, plan.spec_S, plan.spec_A, variant, SHORT, clip_norm=c), train, test)
            for c in (None, 1e-3)]
    # later progressive levels consume the fused output, so only the first student phase must match
    student = [[r.to_json() for r in res.metrics if r.phase in ("student", "student1")] for res in runs]
    assistant = [[r.to_json() for r in res.metrics if r.phase.startswith("assistant")] for res in runs]
    assert student[0] == student[1]
    assert assistant[0] != assistant[1]


def test_run_rejects_bad_configuration():
    teacher = tiny_teacher()
    plan = tiny_plan()
    with pytest.raises(ValueError, match="unknown variant"):
        make_run(teacher, plan.spec_S, plan.spec_A, "cascade")
    one_block = tiny_spec().__class__((1, 8, 8), tiny_spec().blocks[:1], 3)
    with pytest.raises(ValueError, match="blocks"):
        make_run(teacher, one_block, None, "integrated")
    run = make_run(teacher, plan.spec_S, plan.spec_A, "integrated", SHORT)
    run.variant = "progressive"
    with pytest.raises(ValueError, match="teacher-width"):
        run_distillation(run, tiny_data()[0])


def test_distilled_model_reads_teacher_space():
    teacher = tiny_teacher()
    plan = tiny_plan()
    run = make_run(teacher, plan.spec_S, plan.spec_A, "progressive", SHORT)
    model = DistilledModel(run.student, run.assistant, run.adapter_S, run.adapter_A, teacher.classifier,
                           "progressive")
    taps = model.fused_taps(tiny_data()[1].images[:2])
    assert [t.shape[1:] for t in taps] == teacher.tap_shapes
