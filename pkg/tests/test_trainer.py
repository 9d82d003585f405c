import json
import os
import shutil

import numpy as np
import pytest
import torch

from slimgan.core import ConfigError, CorruptionError, HyperParams, ParameterSet, ValidationError, parameter_digest
from slimgan.data import DatasetSpec, gen_paired_dataset
from slimgan.trainer import (
    StepOptions,
    TrainState,
    build_models,
    fit,
    frozen_group_digests,
    latest_checkpoint,
    load_checkpoint,
    lr_at_epoch,
    make_optimizers,
    restore_from_checkpoint,
    save_checkpoint,
    train_step,
)

from helpers import tiny_config


def test_lr_schedule_values():
    hp = HyperParams(epochs=100, lr_initial=2e-4)
    assert lr_at_epoch(0, hp) == 2e-4
    assert lr_at_epoch(50, hp) == 2e-4
    assert abs(lr_at_epoch(75, hp) - 1e-4) < 1e-18
    assert lr_at_epoch(100, hp) == 0.0
    with pytest.raises(ValidationError):
        lr_at_epoch(101, hp)
    with pytest.raises(ValidationError):
        lr_at_epoch(-1, hp)


def test_lr_schedule_monotone_nonincreasing():
    hp = HyperParams(epochs=7, lr_initial=1e-3)
    lrs = [lr_at_epoch(e, hp) for e in range(8)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == 0.0


def _step_setup(cfg):
    models = build_models(cfg)
    hp = cfg.effective().hyper()
    ot, os_, od = make_optimizers(models, hp)
    state = TrainState(opt_teacher=ot, opt_student=os_, opt_disc=od)
    x, y = gen_paired_dataset(DatasetSpec.from_config(cfg))
    xb = torch.from_numpy(x[: cfg.batch_size])
    yb = torch.from_numpy(y[: cfg.batch_size])
    return models, hp, state, xb, yb


def test_zero_objective_leaves_student_unchanged():
    cfg = tiny_config(lambda_stu=0.0, lambda_dcd=0.0, lambda_fea=0.0, lambda_sty=0.0)
    models, hp, state, xb, yb = _step_setup(cfg)
    before = ParameterSet.of_module(models.student_gen).digest()
    bank_before = ParameterSet.of_module(models.student_bank).digest()
    train_step(state, models, xb, yb, hp, StepOptions())
    assert ParameterSet.of_module(models.student_gen).digest() == before
    assert ParameterSet.of_module(models.student_bank).digest() == bank_before


def test_teacher_bank_frozen_through_step():
    cfg = tiny_config()
    models, hp, state, xb, yb = _step_setup(cfg)
    before = frozen_group_digests(models)
    train_step(state, models, xb, yb, hp, StepOptions())
    assert frozen_group_digests(models) == before
    assert state.step == 1


def test_step_determinism():
    digests = []
    for _ in range(2):
        cfg = tiny_config()
        models, hp, state, xb, yb = _step_setup(cfg)
        train_step(state, models, xb, yb, hp, StepOptions())
        digests.append(parameter_digest(models.parameter_arrays()))
    assert digests[0] == digests[1]


def test_student_learns_without_adversarial_term():
    # lambda_stu=0: no student adversarial gradient, but distillation still teaches
    cfg = tiny_config(lambda_stu=0.0)
    models, hp, state, xb, yb = _step_setup(cfg)
    before = ParameterSet.of_module(models.student_gen).digest()
    rep = train_step(state, models, xb, yb, hp, StepOptions())
    assert ParameterSet.of_module(models.student_gen).digest() != before
    assert rep.total == pytest.approx(rep.per + hp.lambda_dcd * rep.dcd, rel=1e-9)


def test_alternation_discriminator_constant_during_g_phase():
    cfg = tiny_config()
    # full step
    models, hp, state, xb, yb = _step_setup(cfg)
    train_step(state, models, xb, yb, hp, StepOptions())
    full_digest = ParameterSet.of_module(models.disc).digest()
    # independent replay of the discriminator phase alone
    from slimgan.losses import adversarial_d_loss

    models2, hp2, state2, xb2, yb2 = _step_setup(cfg)
    with torch.no_grad():
        fake_t = models2.teacher_gen(xb2)
        fake_s = models2.student_gen(xb2)
    d_real = models2.disc(yb2)
    d_ft = models2.disc(fake_t)
    d_fs = models2.disc(fake_s)
    d_loss = adversarial_d_loss(d_real, [(d_ft, 1.0), (d_fs, hp2.lambda_stu)], "least_squares")
    state2.opt_disc.zero_grad()
    d_loss.backward()
    state2.opt_disc.step()
    # the generator phase of the full step moved nothing in D
    assert ParameterSet.of_module(models2.disc).digest() == full_digest


def test_report_is_consistent_and_finite():
    cfg = tiny_config()
    models, hp, state, xb, yb = _step_setup(cfg)
    rep = train_step(state, models, xb, yb, hp, StepOptions())
    from slimgan.losses import check_report_consistency

    assert check_report_consistency(rep, hp)
    assert rep.nonfinite_terms() == []


def test_sequential_teacher_update_mode():
    cfg = tiny_config(teacher_update="sequential")
    models, hp, state, xb, yb = _step_setup(cfg)
    t_before = ParameterSet.of_module(models.teacher_gen).digest()
    train_step(state, models, xb, yb, hp, StepOptions.from_config(cfg))
    assert ParameterSet.of_module(models.teacher_gen).digest() != t_before


def test_fit_step_count_and_metrics_schema(tmp_path):
    cfg = tiny_config(n_train=8, epochs=1)
    res = fit(cfg, str(tmp_path / "run"))
    lines = [json.loads(l) for l in open(res.metrics_path)]
    assert len(lines) == 2  # 8 items, batch 4, 1 epoch
    want_keys = {"step", "epoch", "lr", "gan_d", "gan_g_teacher", "gan_g_student",
                 "fea", "sty", "per", "dcd", "total_student"}
    assert set(lines[0]) == want_keys
    assert [l["step"] for l in lines] == [1, 2]
    evals = [json.loads(l) for l in open(res.evals_path)]
    assert evals and {"step", "desk_fid", "n_samples", "embedder_digest", "note"} <= set(evals[0])


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny_config(n_train=8, epochs=1)
    models, hp, state, xb, yb = _step_setup(cfg)
    train_step(state, models, xb, yb, hp, StepOptions())
    before = parameter_digest(models.parameter_arrays())
    ck = str(tmp_path / "ck")
    save_checkpoint(ck, state, models, cfg)
    cfg2, info, arrays = load_checkpoint(ck)
    assert cfg2 == cfg  # self-describing config echo
    models2 = build_models(cfg2)
    ot, os_, od = make_optimizers(models2, hp)
    state2 = TrainState(opt_teacher=ot, opt_student=os_, opt_disc=od)
    restore_from_checkpoint(models2, state2, arrays, info, cfg2.torch_dtype())
    assert parameter_digest(models2.parameter_arrays()) == before
    assert state2.step == state.step and state2.epoch == state.epoch


def test_checkpoint_missing_entry_is_corruption(tmp_path):
    cfg = tiny_config(n_train=8, epochs=1)
    models, hp, state, xb, yb = _step_setup(cfg)
    ck = str(tmp_path / "ck")
    save_checkpoint(ck, state, models, cfg)
    # drop one parameter's line from the manifest
    manifest = os.path.join(ck, "manifest.txt")
    lines = open(manifest).read().splitlines()
    victim = next(l for l in lines if l.startswith("student_gen."))
    open(manifest, "w").write("\n".join(l for l in lines if l != victim) + "\n")
    with pytest.raises(CorruptionError):
        cfg2, info, arrays = load_checkpoint(ck)
        models2 = build_models(cfg2)
        restore_from_checkpoint(models2, TrainState(), arrays, info, cfg2.torch_dtype())


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = tiny_config(n_train=16, epochs=3, checkpoint_interval=4, eval_interval=100)
    full = fit(cfg, str(tmp_path / "full"))
    _, info_full, _ = load_checkpoint(full.final_checkpoint)

    part_dir = str(tmp_path / "part")
    shutil.copytree(str(tmp_path / "full"), part_dir)
    cks = sorted(os.listdir(os.path.join(part_dir, "checkpoints")))
    for c in cks[1:]:
        shutil.rmtree(os.path.join(part_dir, "checkpoints", c))
    resumed = fit(cfg, part_dir, resume_from=os.path.join(part_dir, "checkpoints", cks[0]))
    _, info_res, _ = load_checkpoint(resumed.final_checkpoint)
    assert info_res["set_digest"] == info_full["set_digest"]


def test_latest_checkpoint_discovery(tmp_path):
    cfg = tiny_config(n_train=8, epochs=1, checkpoint_interval=1)
    res = fit(cfg, str(tmp_path / "run"))
    assert latest_checkpoint(str(tmp_path / "run")) == res.final_checkpoint
    with pytest.raises(CorruptionError):
        latest_checkpoint(str(tmp_path / "nope"))


def test_fit_rejects_oversized_batch(tmp_path):
    cfg = tiny_config(n_train=16, batch_size=32)
    with pytest.raises(ConfigError):
        fit(cfg, str(tmp_path / "run"))
    assert not (tmp_path / "run").exists()


def test_pretrained_frozen_teacher(tmp_path):
    cfg = tiny_config(n_train=8, epochs=1)
    models, hp, state, xb, yb = _step_setup(cfg)
    ck = str(tmp_path / "teacher_ck")
    save_checkpoint(ck, state, models, cfg)
    cfg2 = tiny_config(n_train=8, epochs=1, teacher_checkpoint=ck)
    models2 = build_models(cfg2)
    assert models2.teacher_frozen
    t_digest = ParameterSet.of_module(models2.teacher_gen).digest()
    assert t_digest == ParameterSet.of_module(models.teacher_gen).digest()
    res = fit(cfg2, str(tmp_path / "run2"))
    _, _, arrays = load_checkpoint(res.final_checkpoint)
    frozen_now = parameter_digest({k[len("teacher_gen."):]: v for k, v in arrays.items() if k.startswith("teacher_gen.")})
    assert frozen_now == t_digest
