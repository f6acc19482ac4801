import dataclasses
import json

import pytest
import torch

from distillkit import engine
from distillkit.config import to_dict
from distillkit.data import SynthSpec, generate_synthetic, make_batches
from distillkit.engine import (
    DistillConfig,
    FusionConfig,
    OptimizerConfig,
    ScheduleConfig,
    CachedTeacher,
    build_distill_aux,
    build_optimizer,
    compute_losses,
    distill_step,
    load_checkpoint,
    load_model,
    plain_step,
    poly_lr,
    save_checkpoint,
    train,
)
from distillkit.errors import ConfigError, NumericError
from distillkit.losses import LossWeights
from distillkit.models import EncoderConfig, build_encoder, freeze

STUDENT = EncoderConfig(stage_channels=(8, 8, 16, 16), heads=(1, 1, 2, 2), decoder_dim=8, num_classes=4)
TEACHER = EncoderConfig(stage_channels=(16, 16, 32, 32), heads=(1, 2, 2, 4), decoder_dim=8, num_classes=4)
FUSION = FusionConfig(width=8, reduction=2, min_dim=4)


def small_cfg(**kw):
    base = dict(fusion=FUSION, optimizer=OptimizerConfig(base_lr=1e-3),
                schedule=ScheduleConfig(total_iters=6))
    base.update(kw)
    return DistillConfig(**base)


@pytest.fixture(scope="module")
def data():
    spec = SynthSpec(seed=0, num_samples=8, image_size=32, num_classes=4, grid=4)
    return generate_synthetic(spec), generate_synthetic(dataclasses.replace(spec, seed=1, num_samples=4))


@pytest.fixture(scope="module")
def teacher():
    return freeze(build_encoder(TEACHER, seed=11))


def test_poly_lr_boundaries():
    assert poly_lr(0, 6e-5, 2000) == 6e-5
    assert poly_lr(2000, 6e-5, 2000) == 0.0
    assert poly_lr(1000, 6e-5, 2000) == pytest.approx(3e-5)
    assert poly_lr(5000, 6e-5, 2000) == 0.0
    lrs = [poly_lr(i, 1.0, 50, p) for p in (0.0, 0.5, 1.0, 2.0) for i in range(51)]
    for p in range(4):
        seq = lrs[p * 51:(p + 1) * 51]
        assert all(a >= b for a, b in zip(seq, seq[1:]))


def test_defaults_follow_the_recipe():
    cfg = DistillConfig()
    assert cfg.weights.alpha == (0.1, 0.1, 0.5, 1.0) and cfg.weights.beta == (1.0, 1.0, 1.0, 1.0)
    assert cfg.fusion.width == 64 and cfg.pyramid.pool_sizes == (4, 2, 1)
    assert cfg.optimizer.base_lr == 6e-5 and cfg.schedule.poly_power == 1.0 and cfg.batch_size == 2


@pytest.mark.parametrize("kw", [{"baseline_mode": "x"}, {"loss_mode": "l2"}, {"batch_size": 0},
                                {"pea_stages": (True,)}, {"kl_temperature": 0.0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        DistillConfig(**kw)


def test_with_pea_only():
    cfg = DistillConfig().with_pea_only([4])
    assert cfg.pea_stages == (False, False, False, True)
    assert cfg.weights.alpha == (0.0, 0.0, 0.0, 1.0)
    assert cfg.enabled_pea_stages() == [4]
    assert DistillConfig().with_pea_only([]).enabled_pea_stages() == []


def test_weight_decay_groups():
    stack, pea = build_distill_aux(small_cfg(), STUDENT, TEACHER)
    opt = build_optimizer({"student": build_encoder(STUDENT), "fusion": stack, "pea": pea}, OptimizerConfig())
    decay, no_decay = opt.param_groups
    assert decay["weight_decay"] == 0.01 and no_decay["weight_decay"] == 0.0
    no_ids = {id(p) for p in no_decay["params"]}
    assert id(stack[0].gate_a) in no_ids and id(stack[0].gate_b) in no_ids
    assert all(p.ndim > 1 for p in decay["params"])
    assert id(pea.matrix(1)) not in no_ids


def _batch(ds):
    return next(iter(make_batches(ds, 2, seed=0)))


def test_first_step_components_finite_and_non_negative(data, teacher):
    cfg = small_cfg()
    student = build_encoder(STUDENT)
    stack, pea = build_distill_aux(cfg, STUDENT, TEACHER)
    opt = build_optimizer({"s": student, "f": stack, "p": pea}, cfg.optimizer)
    rep = distill_step(_batch(data[0]), teacher, student, stack, pea, opt, cfg, 0)
    vals = [rep.ce, rep.total] + rep.embd + rep.fm
    assert all(v is not None and v >= 0 and v == v for v in vals)
    assert rep.lr == cfg.optimizer.base_lr
    assert set(rep.grad_norm) == {"student", "fusion", "pea"} and rep.grad_norm["pea"] > 0


@pytest.mark.parametrize("loss_mode", ["hcl", "channel_kl", "spatial_kl"])
def test_total_is_recombination_of_components(data, teacher, loss_mode):
    cfg = small_cfg(loss_mode=loss_mode, pea_stages=(True, False, True, True))
    student = build_encoder(STUDENT)
    stack, pea = build_distill_aux(cfg, STUDENT, TEACHER)
    images, labels = _batch(data[0])
    total, comps = compute_losses(images, labels, teacher, student, stack, pea, cfg)
    assert comps["embd"][1] is None
    w = cfg.weights
    again = comps["ce"].item()
    again += sum(a * e.item() for a, e in zip(w.alpha, comps["embd"]) if e is not None)
    again += sum(b * f.item() for b, f in zip(w.beta, comps["fm"]))
    assert total.item() == pytest.approx(again, rel=1e-6)


def test_teacher_is_bitwise_frozen(data, teacher):
    cfg = small_cfg()
    before = {k: v.clone() for k, v in teacher.state_dict().items()}
    student = build_encoder(STUDENT)
    stack, pea = build_distill_aux(cfg, STUDENT, TEACHER)
    opt = build_optimizer({"s": student, "f": stack, "p": pea}, cfg.optimizer)
    for i, batch in enumerate(make_batches(data[0], 2, seed=0)):
        distill_step(batch, teacher, student, stack, pea, opt, cfg, i)
    for k, v in teacher.state_dict().items():
        assert torch.equal(v, before[k]), k
    assert not teacher.training


def test_zero_weights_reduce_to_plain_training(data, teacher):
    zero = small_cfg(weights=LossWeights((0.0,) * 4, (0.0,) * 4))
    a, b = build_encoder(STUDENT, 3), build_encoder(STUDENT, 3)
    stack, pea = build_distill_aux(zero, STUDENT, TEACHER)
    opt_a = build_optimizer({"s": a, "f": stack, "p": pea}, zero.optimizer)
    opt_b = build_optimizer({"s": b}, zero.optimizer)
    for i, batch in enumerate(make_batches(data[0], 2, seed=0)):
        ra = distill_step(batch, teacher, a, stack, pea, opt_a, zero, i)
        rb = plain_step(batch, b, opt_b, zero, i)
        assert ra.total == pytest.approx(rb.total, abs=1e-6)
        assert all(v is None for v in ra.embd + ra.fm)


def test_non_finite_component_is_named(data):
    cfg = small_cfg()
    bad = freeze(build_encoder(TEACHER))
    with torch.no_grad():
        bad.stages[0].embed.norm.weight.fill_(float("nan"))
    student = build_encoder(STUDENT)
    stack, pea = build_distill_aux(cfg, STUDENT, TEACHER)
    opt = build_optimizer({"s": student, "f": stack, "p": pea}, cfg.optimizer)
    with pytest.raises(NumericError, match="stage 1"):
        distill_step(_batch(data[0]), bad, student, stack, pea, opt, cfg, 0)


def test_checkpoint_round_trip(tmp_path):
    model = build_encoder(STUDENT, 2)
    opt = build_optimizer({"s": model}, OptimizerConfig())
    save_checkpoint(tmp_path / "m.pt", model, opt, {"model_config": to_dict(STUDENT), "seed": 2}, 7)
    blob = load_checkpoint(tmp_path / "m.pt")
    assert blob["version"] == engine.CHECKPOINT_VERSION and blob["iteration"] == 7 and blob["seed"] == 2
    back = load_model(tmp_path / "m.pt")
    x = torch.randn(1, 3, 32, 32)
    assert torch.equal(back(x).logits, model.eval()(x).logits)
    torch.save({"model": {}}, tmp_path / "bad.pt")
    with pytest.raises(ConfigError, match="version"):
        load_checkpoint(tmp_path / "bad.pt")


def _log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_train_writes_logs_and_is_deterministic(tmp_path, data, teacher):
    cfg = small_cfg()
    runs = [train(cfg, data[0], "distill", STUDENT, teacher=teacher, val_dataset=data[1],
                  out_dir=tmp_path / f"r{i}", eval_interval=3) for i in range(2)]
    a, b = (_log(r.log_path) for r in runs)
    assert a == b
    steps = [r for r in a if r["kind"] == "step"]
    evals = [r for r in a if r["kind"] == "eval"]
    assert [r["iter"] for r in steps] == list(range(6)) and [r["iter"] for r in evals] == [3, 6]
    assert set(steps[0]) >= {"iter", "lr", "ce", "embd", "fm", "total"}
    assert set(evals[0]) == {"kind", "iter", "miou", "per_class"}
    for name in ("model.pt", "distill_aux.pt", "metrics.jsonl"):
        assert (tmp_path / "r0" / name).exists()
    # the student checkpoint carries no distillation parameters
    keys = load_checkpoint(tmp_path / "r0" / "model.pt")["model"].keys()
    assert not any("gate" in k or "w_e" in k for k in keys)


def test_rerun_resumes_with_identical_metrics(tmp_path, data, teacher):
    cfg = small_cfg()
    first = train(cfg, data[0], "distill", STUDENT, teacher=teacher, val_dataset=data[1], out_dir=tmp_path)
    again = train(cfg, data[0], "distill", STUDENT, teacher=teacher, val_dataset=data[1], out_dir=tmp_path)
    assert again.final_eval == first.final_eval
    assert _log(tmp_path / "metrics.jsonl") == first.history


def test_interrupted_run_resumes_to_the_same_log(tmp_path, data, teacher, monkeypatch):
    cfg = small_cfg()
    kw = dict(teacher=teacher, val_dataset=data[1], checkpoint_interval=2)
    ref = train(cfg, data[0], "distill", STUDENT, out_dir=tmp_path / "ref", **kw)

    real = engine.distill_step

    def crash(batch, *args):
        if args[-1] == 3:
            raise KeyboardInterrupt
        return real(batch, *args)

    monkeypatch.setattr(engine, "distill_step", crash)
    with pytest.raises(KeyboardInterrupt):
        train(cfg, data[0], "distill", STUDENT, out_dir=tmp_path / "cut", **kw)
    monkeypatch.setattr(engine, "distill_step", real)
    resumed = train(cfg, data[0], "distill", STUDENT, out_dir=tmp_path / "cut", **kw)
    assert _log(tmp_path / "cut" / "metrics.jsonl") == _log(ref.log_path)
    assert resumed.final_eval == ref.final_eval


def test_changed_config_is_refused_with_diff(tmp_path, data):
    train(small_cfg(), data[0], "student-plain", STUDENT, out_dir=tmp_path)
    changed = small_cfg(optimizer=OptimizerConfig(base_lr=5e-4))
    with pytest.raises(ConfigError, match=r"distill.optimizer.base_lr: 0.001 -> 0.0005"):
        train(changed, data[0], "student-plain", STUDENT, out_dir=tmp_path)


def test_distill_needs_teacher(data):
    with pytest.raises(ConfigError, match="teacher"):
        train(small_cfg(), data[0], "distill", STUDENT)
    with pytest.raises(ConfigError, match="mode"):
        train(small_cfg(), data[0], "nope", STUDENT)


def test_cached_teacher_matches_teacher(data, teacher):
    cached = CachedTeacher(teacher)
    images = torch.stack([data[0][i].image for i in range(3)])
    ref = teacher(images)
    for _ in range(2):
        got = cached(images)
        assert torch.allclose(got.logits, ref.logits, atol=1e-5)
        for a, b in zip(got.feature_maps + got.embeddings, ref.feature_maps + ref.embeddings):
            assert torch.allclose(a, b, atol=1e-5)
    assert (cached.misses, cached.hits) == (3, 3)
    cached.train()
    assert not cached.training and not teacher.training


def test_cached_training_tracks_uncached(data, teacher):
    cfg = small_cfg()
    plain = train(cfg, data[0], "distill", STUDENT, teacher=teacher)
    cached = train(cfg, data[0], "distill", STUDENT, teacher=teacher, cache_teacher=True)
    for a, b in zip(plain.history, cached.history):
        assert a["total"] == pytest.approx(b["total"], rel=1e-4)
