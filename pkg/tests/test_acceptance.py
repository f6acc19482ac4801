"""Acceptance criteria, one test each, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (about 15 minutes on
one CPU core, almost all of it in criterion 6).
"""

import dataclasses
import statistics
from pathlib import Path

import numpy as np
import pytest
import torch

from distillkit.data import SynthSpec, cycle_batches, generate_synthetic
from distillkit.engine import DistillConfig, build_distill_aux, build_optimizer, distill_step, train
from distillkit.experiment import ExperimentConfig, load_teacher, run_efficacy, run_student
from distillkit.fusion import FusionStack, sk_gate
from distillkit.gradcheck import gradcheck
from distillkit.losses import LossWeights, PeaParams, PyramidSpec, hcl_loss
from distillkit.metrics import ConfusionMatrix, miou
from distillkit.models import (
    DESK_STUDENT,
    DESK_TEACHER,
    SEGFORMER_STUDENT,
    SEGFORMER_TEACHER,
    build_encoder,
    freeze,
)


@pytest.fixture
def report(capsys):
    def _report(n: int, title: str, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail
    return _report


def test_criterion_1_hcl_constant_offset(report):
    worst = 0.0
    for c in (0.5, 1.0, -2.0, 3.7):
        for shape in ((2, 3, 8, 8), (1, 5, 4, 4), (3, 2, 12, 16)):
            t = torch.randn(*shape, dtype=torch.float64)
            got = hcl_loss(t + c, t, PyramidSpec((4, 2, 1))).item()
            want = 7.0 / 15.0 * c * c
            worst = max(worst, abs(got - want) / want)
    report(1, "HCL constant offset = 7/15 c^2", worst < 1e-6, f"max relative error {worst:.2e} (tol 1e-6)")


def test_criterion_2_gate_partition_of_unity(report):
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(1000):
        c, d = int(torch.randint(1, 65, (1,), generator=g)), int(torch.randint(1, 33, (1,), generator=g))
        scale = float(10 ** torch.empty(1).uniform_(-2, 2, generator=g))
        z = torch.randn(2, d, generator=g).relu() * scale
        a, b = sk_gate(z, torch.randn(c, d, generator=g), torch.randn(c, d, generator=g))
        worst = max(worst, (a + b - 1).abs().max().item())
    report(2, "gate partition of unity over 1000 draws", worst < 1e-6, f"max |a+b-1| = {worst:.2e} (tol 1e-6)")


def test_criterion_3_gradient_checks(report):
    reps = [gradcheck(c) for c in ("pea", "skf", "hcl", "full")]
    worst = max(r.max_rel_error for r in reps)
    detail = "; ".join(f"{r.component} {r.max_rel_error:.1e} at {r.worst}" for r in reps)
    report(3, "finite-difference gradient checks", all(r.passed for r in reps) and worst < 1e-4, detail)


@pytest.fixture(scope="module")
def desk_data():
    return generate_synthetic(SynthSpec(seed=0, num_samples=64))


def test_criterion_4_frozen_teacher(report, desk_data):
    teacher = freeze(build_encoder(DESK_TEACHER, seed=1))
    before = {k: v.clone() for k, v in teacher.state_dict().items()}
    cfg = DistillConfig()
    student = build_encoder(DESK_STUDENT, seed=0)
    stack, pea = build_distill_aux(cfg, DESK_STUDENT, DESK_TEACHER)
    opt = build_optimizer({"student": student, "fusion": stack, "pea": pea}, cfg.optimizer)
    batches = cycle_batches(desk_data, cfg.batch_size, seed=0)
    s_before = [p.clone() for p in student.parameters()]
    for i in range(50):
        distill_step(next(batches), teacher, student, stack, pea, opt, cfg, i)
    changed = [k for k, v in teacher.state_dict().items() if not torch.equal(v, before[k])]
    moved = any(not torch.equal(a, b) for a, b in zip(s_before, student.parameters()))
    report(4, "teacher bitwise unchanged after 50 distill steps", not changed and moved,
           f"{len(changed)} teacher tensors changed, student updated: {moved}")


def test_criterion_5_zero_weights_equal_plain_ce(report, desk_data):
    base = DistillConfig(schedule=dataclasses.replace(DistillConfig().schedule, total_iters=20))
    zero = dataclasses.replace(base, weights=LossWeights((0.0,) * 4, (0.0,) * 4))
    teacher = freeze(build_encoder(DESK_TEACHER, seed=1))
    a = train(zero, desk_data, "distill", DESK_STUDENT, teacher=teacher)
    b = train(base, desk_data, "student-plain", DESK_STUDENT)
    steps_a = [r for r in a.history if "total" in r]
    steps_b = [r for r in b.history if "total" in r]
    diffs = [abs(x["total"] - y["total"]) for x, y in zip(steps_a, steps_b)]
    w_diff = max((p - q).abs().max().item() for p, q in zip(a.model.parameters(), b.model.parameters()))
    ok = len(diffs) == 20 and max(diffs) <= 1e-6 and w_diff <= 1e-6
    report(5, "alpha=beta=0 reproduces plain CE training", ok,
           f"{len(diffs)} steps, max |loss diff| {max(diffs):.2e}, max |weight diff| {w_diff:.2e} (tol 1e-6)")


@pytest.fixture(scope="module")
def efficacy(tmp_path_factory):
    out = tmp_path_factory.mktemp("efficacy")
    cfg = ExperimentConfig(out_dir=str(out))
    res = run_efficacy(cfg, progress=print)
    return cfg, res


def test_criterion_6_desk_efficacy(report, efficacy):
    cfg, res = efficacy
    ok_teacher = res.teacher_miou >= 85.0
    ok_gain = res.gain >= 2.0
    ok_pea = res.pea_wins >= 2
    ok_time = res.seconds <= 15 * 60
    detail = (f"teacher {res.teacher_miou:.2f} (>=85), plain {_fmt(res.plain)}, SKR {_fmt(res.skr)}, "
              f"SKR+PEA {_fmt(res.skr_pea)}; median gain {res.gain:+.2f} (>=2.0), "
              f"SKR+PEA>=SKR in {res.pea_wins}/3 seeds (>=2), {res.seconds:.0f} s (<=900)")
    report(6, "desk-scale efficacy", ok_teacher and ok_gain and ok_pea and ok_time, detail)


def _fmt(xs):
    return "[" + ", ".join(f"{x:.2f}" for x in xs) + f"] median {statistics.median(xs):.2f}"


def test_criterion_7_segformer_channel_contract(report):
    torch.manual_seed(0)
    s_cfg, t_cfg = SEGFORMER_STUDENT, SEGFORMER_TEACHER
    x = torch.randn(1, 3, 64, 128)
    with torch.no_grad():
        s_taps = build_encoder(s_cfg)(x)
        t_taps = build_encoder(t_cfg)(x)
        outs = FusionStack(s_cfg.stage_channels, t_cfg.stage_channels, width=64)(s_taps.feature_maps)
    pea = PeaParams(s_cfg.stage_channels, t_cfg.stage_channels, (1, 2, 3, 4))
    shapes_ok = all(o.shape == t.shape for o, t in zip(outs, t_taps.feature_maps))
    w_ok = all(tuple(pea.matrix(m).shape) == (cs, ct)
               for m, (cs, ct) in enumerate(zip(s_cfg.stage_channels, t_cfg.stage_channels), start=1))
    ch_ok = s_cfg.stage_channels == (32, 64, 160, 256) and t_cfg.stage_channels == (64, 128, 320, 512)
    detail = ", ".join(f"{tuple(o.shape[1:])}" for o in outs) + "; W_e " + ", ".join(
        f"{tuple(pea.matrix(m).shape)}" for m in range(1, 5))
    report(7, "SegFormer pairing shapes", shapes_ok and w_ok and ch_ok, detail)


def _brute_force(pred, label, k):
    coords = [(i, j) for i in range(8) for j in range(8) if label[i, j] != 255]
    per = []
    for c in range(k):
        p = {xy for xy in coords if pred[xy] == c}
        g = {xy for xy in coords if label[xy] == c}
        per.append(100.0 * len(p & g) / len(p | g) if p | g else None)
    defined = [v for v in per if v is not None]
    return (sum(defined) / len(defined) if defined else None), per


def test_criterion_8_miou_oracle(report):
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(100):
        k = int(rng.integers(2, 8))
        pred = rng.integers(0, k, (8, 8))
        label = rng.integers(0, k, (8, 8))
        label[rng.random((8, 8)) < 0.15] = 255
        rep = miou(ConfusionMatrix(k).update(pred, label))
        ref_m, ref_per = _brute_force(pred, label, k)
        mismatches += (rep.miou != ref_m) or (rep.per_class != ref_per)
    report(8, "mIoU equals brute-force set intersection", mismatches == 0,
           f"{mismatches}/100 pairs differ (exact comparison)")


def test_criterion_9_determinism(report, efficacy, tmp_path):
    cfg, _ = efficacy
    seed = cfg.train.seeds[0]
    ref_dir = Path(cfg.out_dir) / "distill" / f"seed{seed}"
    again = run_student(cfg, "distill", tmp_path / "rerun", dataclasses.replace(cfg.distill, seed=seed),
                        load_teacher(cfg))
    a = ref_dir.joinpath("metrics.jsonl").read_text()
    b = again.log_path.read_text()
    n = len(a.splitlines())
    report(9, "identical-seed distill runs give identical metrics logs", a == b and n > 0,
           f"{n} records compared, identical: {a == b}")

