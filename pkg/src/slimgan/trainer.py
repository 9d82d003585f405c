"""Collaborative three-player training loop.

One step updates, in order:
  1. the teacher discriminator on reals, teacher fakes and lambda_stu-weighted
     student fakes (both fakes detached);
  2. the generators: the teacher minimizes its adversarial term, the student
     (plus its downsampler bank) minimizes the weighted adversarial +
     perceptual + discriminator-cooperated objective, with the whole teacher
     branch treated as constant in the distillation terms.

Exactly one discriminator step runs per generator step, and during each
phase the other side's parameters are constant.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import data as data_mod
from .core import (
    ConfigError,
    CorruptionError,
    DivergenceError,
    HyperParams,
    ParameterSet,
    RunConfig,
    TapSpec,
    ValidationError,
    check_taps_in_range,
    load_config,
    parameter_digest,
    seeded_rng,
)
from .evaluation import desk_fid, dump_feature_images, dump_samples
from .losses import (
    LossReport,
    adversarial_d_loss,
    adversarial_g_loss,
    dcd_loss,
    per_pixel_distill,
    perceptual_loss,
    total_objective,
)
from .nets import (
    DiscriminatorSpec,
    FeatureExtractorSpec,
    GeneratorSpec,
    assign_parameters,
    build_channel_adapter,
    build_discriminator,
    build_downsampler_bank,
    build_feature_extractor,
    build_generator,
    default_discriminator_taps,
    default_extractor_taps,
    default_generator_taps,
    load_array_store,
    save_array_store,
)

ADAM_BETAS = (0.5, 0.999)


@dataclass
class Models:
    teacher_gen: object
    student_gen: object
    disc: object
    teacher_bank: object
    student_bank: object
    extractor: object
    embedder: object
    taps: TapSpec
    adapter: object = None
    teacher_frozen: bool = False

    def parameter_arrays(self):
        """All checkpointable parameters keyed by a stable prefixed path."""
        out = {}
        groups = [
            ("teacher_gen", self.teacher_gen),
            ("student_gen", self.student_gen),
            ("disc", self.disc),
            ("teacher_bank", self.teacher_bank),
            ("student_bank", self.student_bank),
        ]
        if self.adapter is not None:
            groups.append(("adapter", self.adapter))
        for prefix, module in groups:
            for name, p in module.named_parameters():
                out[f"{prefix}.{name}"] = p
        return out


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    opt_teacher: object = None
    opt_student: object = None
    opt_disc: object = None
    frozen_digests: dict = field(default_factory=dict)


@dataclass
class StepOptions:
    distill_teacher_grad: bool = False
    sequential: bool = False
    lambda_fitnet: float = 0.0

    @classmethod
    def from_config(cls, cfg: RunConfig):
        return cls(
            distill_teacher_grad=cfg.distill_teacher_grad,
            sequential=cfg.teacher_update == "sequential",
            lambda_fitnet=cfg.lambda_fitnet,
        )


@dataclass
class FitResult:
    run_dir: str
    final_checkpoint: str
    metrics_path: str
    evals_path: str
    final_desk_fid: float


def lr_at_epoch(epoch, hp: HyperParams) -> float:
    """Constant for the first half of training, then linear to exactly 0."""
    if not 0 <= epoch <= hp.epochs:
        raise ValidationError(f"epoch {epoch} out of range [0, {hp.epochs}]")
    half = hp.epochs / 2.0
    if epoch <= half:
        return hp.lr_initial
    return hp.lr_initial * (hp.epochs - epoch) / (hp.epochs - half)


# ---------------------------------------------------------------------------
# Wiring


def build_models(cfg: RunConfig, dtype=None) -> Models:
    dtype = dtype or cfg.torch_dtype()
    t_spec = GeneratorSpec(
        base_width=cfg.base_width,
        n_resblocks=cfg.n_resblocks,
        width_factor=1.0,
        in_channels=cfg.in_channels,
        out_channels=cfg.out_channels,
    )
    s_spec = GeneratorSpec(
        base_width=cfg.base_width,
        n_resblocks=cfg.n_resblocks,
        width_factor=cfg.width_factor,
        in_channels=cfg.in_channels,
        out_channels=cfg.out_channels,
    )
    teacher_gen, _ = build_generator(t_spec, seeded_rng(cfg.seed, "init/teacher_gen"), dtype)
    student_gen, _ = build_generator(s_spec, seeded_rng(cfg.seed, "init/student_gen"), dtype)
    d_spec = DiscriminatorSpec(widths=tuple(cfg.disc_widths))
    disc, _ = build_discriminator(d_spec, seeded_rng(cfg.seed, "init/disc"), dtype)
    e_spec = FeatureExtractorSpec(widths=tuple(cfg.extractor_widths))
    extractor = build_feature_extractor(
        e_spec,
        rng=seeded_rng(cfg.extractor_seed, "init/extractor"),
        weights_dir=cfg.extractor_weights or None,
        dtype=dtype,
    )
    # the embedder stays float64 so desk-FID values do not depend on training dtype
    embedder = build_feature_extractor(
        FeatureExtractorSpec(widths=tuple(cfg.embedder_widths)),
        rng=seeded_rng(cfg.embedder_seed, "init/embedder"),
        dtype=torch.float64,
    )
    taps = TapSpec(
        generator_taps=tuple(cfg.generator_taps) or default_generator_taps(t_spec),
        discriminator_taps=tuple(cfg.discriminator_taps) or default_discriminator_taps(d_spec),
        extractor_taps=tuple(cfg.extractor_taps) or default_extractor_taps(e_spec),
    )
    t_channels = teacher_gen.tap_channels(taps.generator_taps)
    s_channels = student_gen.tap_channels(taps.generator_taps)
    teacher_bank = build_downsampler_bank(
        t_channels, seeded_rng(cfg.seed, "init/teacher_bank"), frozen=True, dtype=dtype
    )
    student_bank = build_downsampler_bank(
        s_channels, seeded_rng(cfg.seed, "init/student_bank"), frozen=False, dtype=dtype
    )
    adapter = None
    if cfg.lambda_fitnet > 0:
        adapter = build_channel_adapter(
            s_channels, t_channels, seeded_rng(cfg.seed, "init/adapter"), dtype=dtype
        )
    teacher_frozen = False
    if cfg.teacher_checkpoint:
        arrays = load_array_store(cfg.teacher_checkpoint)
        assign_parameters(teacher_gen, arrays, prefix="teacher_gen.")
        for p in teacher_gen.parameters():
            p.requires_grad_(False)
        teacher_frozen = True
    check_taps_in_range(taps.discriminator_taps, disc.n_blocks, "discriminator")
    check_taps_in_range(taps.extractor_taps, extractor.n_blocks, "extractor")
    return Models(
        teacher_gen=teacher_gen,
        student_gen=student_gen,
        disc=disc,
        teacher_bank=teacher_bank,
        student_bank=student_bank,
        extractor=extractor,
        embedder=embedder,
        taps=taps,
        adapter=adapter,
        teacher_frozen=teacher_frozen,
    )


def make_optimizers(models: Models, hp: HyperParams):
    teacher_params = [p for p in models.teacher_gen.parameters() if p.requires_grad]
    student_params = list(models.student_gen.parameters()) + [
        p for p in models.student_bank.parameters() if p.requires_grad
    ]
    if models.adapter is not None:
        student_params += list(models.adapter.parameters())
    disc_params = list(models.disc.parameters())
    opt_teacher = (
        torch.optim.Adam(teacher_params, lr=hp.lr_initial, betas=ADAM_BETAS) if teacher_params else None
    )
    opt_student = torch.optim.Adam(student_params, lr=hp.lr_initial, betas=ADAM_BETAS)
    opt_disc = torch.optim.Adam(disc_params, lr=hp.lr_initial, betas=ADAM_BETAS)
    return opt_teacher, opt_student, opt_disc


def frozen_group_digests(models: Models) -> dict:
    out = {
        "teacher_bank": ParameterSet.of_module(models.teacher_bank).digest(),
        "extractor": ParameterSet.of_module(models.extractor).digest(),
        "embedder": ParameterSet.of_module(models.embedder).digest(),
    }
    if models.teacher_frozen:
        out["teacher_gen"] = ParameterSet.of_module(models.teacher_gen).digest()
    return out


# ---------------------------------------------------------------------------
# One training step


def _to_scores(raw, variant):
    return raw if variant == "least_squares" else torch.sigmoid(raw)


def _ensure_finite(term, value):
    if isinstance(value, torch.Tensor):
        if not torch.isfinite(value).all():
            raise DivergenceError(term, float(value.detach().reshape(-1)[0]))
    return value


def train_step(state: TrainState, models: Models, batch_x, batch_y, hp: HyperParams, opts: StepOptions = None) -> LossReport:
    """Run one discriminator update followed by one combined generator update.

    batch_x / batch_y are torch tensors (source inputs and real targets).
    Returns the step's LossReport with plain float entries; mutates state.
    """
    opts = opts or StepOptions()
    variant = hp.gan_variant
    taps = models.taps
    x, y = batch_x, batch_y

    # -- phase 1: discriminator (generators constant, fakes detached)
    with torch.no_grad():
        fake_t = models.teacher_gen(x)
        fake_s = models.student_gen(x)
    d_real = _to_scores(models.disc(y), variant)
    d_fake_t = _to_scores(models.disc(fake_t), variant)
    d_fake_s = _to_scores(models.disc(fake_s), variant)
    d_loss = adversarial_d_loss(d_real, [(d_fake_t, 1.0), (d_fake_s, hp.lambda_stu)], variant)
    _ensure_finite("gan_d", d_loss)
    state.opt_disc.zero_grad()
    d_loss.backward()
    state.opt_disc.step()

    # -- phase 2: generators (discriminator constant; its weights get no grads)
    d_params = list(models.disc.parameters())
    saved_flags = [p.requires_grad for p in d_params]
    for p in d_params:
        p.requires_grad_(False)
    try:
        teacher_trainable = not models.teacher_frozen and state.opt_teacher is not None
        g_t = None
        if opts.sequential and teacher_trainable:
            out_t = models.teacher_gen(x)
            g_t = adversarial_g_loss(_to_scores(models.disc(out_t), variant), variant)
            _ensure_finite("gan_g_teacher", g_t)
            state.opt_teacher.zero_grad()
            g_t.backward()
            state.opt_teacher.step()
            g_t = g_t.detach()

        out_t, t_feats = models.teacher_gen.forward_with_taps(x, taps.generator_taps)
        out_s, s_feats = models.student_gen.forward_with_taps(x, taps.generator_taps)
        if g_t is None:
            g_t = adversarial_g_loss(_to_scores(models.disc(out_t), variant), variant)
        g_s = adversarial_g_loss(_to_scores(models.disc(out_s), variant), variant)

        teacher_ref = out_t if opts.distill_teacher_grad else out_t.detach()
        per_combined, pieces = perceptual_loss(
            teacher_ref, out_s, models.extractor, taps.extractor_taps, hp.lambda_fea, hp.lambda_sty
        )
        if hp.lambda_dcd > 0:
            dcd = dcd_loss(
                t_feats,
                s_feats,
                models.teacher_bank,
                models.student_bank,
                models.disc,
                taps.discriminator_taps,
                distance=hp.distance_variant,
                target_hw=(int(x.shape[2]), int(x.shape[3])),
                teacher_grad=opts.distill_teacher_grad,
            )
        else:
            dcd = x.new_zeros(())
        if opts.lambda_fitnet > 0 and models.adapter is not None:
            projected = [models.adapter.project(i, s) for i, s in enumerate(s_feats)]
            fea_dis = per_pixel_distill([t.detach() for t in t_feats], projected, hp.distance_variant)
        else:
            fea_dis = x.new_zeros(())

        parts = {
            "gan_d": d_loss.detach(),
            "gan_g_teacher": g_t,
            "gan_g_student": g_s,
            "fea": pieces["fea"],
            "sty": pieces["sty"],
            "dcd": dcd,
            "fea_dis": fea_dis,
        }
        report = total_objective(parts, hp, lambda_fitnet=opts.lambda_fitnet)
        for term in ("gan_g_teacher", "gan_g_student", "fea", "sty", "dcd", "fea_dis", "total"):
            _ensure_finite(term, getattr(report, term))

        objective = report.total
        if teacher_trainable and not opts.sequential:
            objective = objective + g_t
        if state.opt_teacher is not None and not opts.sequential:
            state.opt_teacher.zero_grad()
        state.opt_student.zero_grad()
        objective.backward()
        if state.opt_teacher is not None and not opts.sequential:
            state.opt_teacher.step()
        state.opt_student.step()
    finally:
        for p, flag in zip(d_params, saved_flags):
            p.requires_grad_(flag)

    state.step += 1
    return LossReport(**report.as_floats())


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, state: TrainState, models: Models, cfg: RunConfig, extras: dict = None) -> str:
    arrays = dict(models.parameter_arrays())
    for gname, opt in (
        ("teacher", state.opt_teacher),
        ("student", state.opt_student),
        ("disc", state.opt_disc),
    ):
        if opt is None:
            continue
        sd = opt.state_dict()
        for i, entry in sd["state"].items():
            for key in ("step", "exp_avg", "exp_avg_sq"):
                v = entry[key]
                arrays[f"opt.{gname}.{i}.{key}"] = (
                    v.detach().to(torch.float64) if isinstance(v, torch.Tensor) else np.float64(v)
                )
    os.makedirs(path, exist_ok=True)
    digest = save_array_store(path, arrays, dtype="float64")
    with open(os.path.join(path, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    info = {"step": state.step, "epoch": state.epoch, "set_digest": digest}
    info.update(extras or {})
    with open(os.path.join(path, "state.json"), "w", encoding="utf-8") as fh:
        json.dump(info, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return digest


def load_checkpoint(path):
    """Read a checkpoint directory: (config, state info, verified arrays)."""
    cfg_path = os.path.join(path, "config.txt")
    info_path = os.path.join(path, "state.json")
    if not os.path.exists(cfg_path) or not os.path.exists(info_path):
        raise CorruptionError(f"checkpoint at {path} is missing config.txt or state.json")
    cfg = load_config(cfg_path)
    with open(info_path, "r", encoding="utf-8") as fh:
        info = json.load(fh)
    arrays = load_array_store(path)
    return cfg, info, arrays


def _restore_optimizer(opt, arrays, gname, dtype):
    if opt is None:
        return
    sd = opt.state_dict()
    n = sum(len(g["params"]) for g in sd["param_groups"])
    new_state = {}
    for i in range(n):
        key = f"opt.{gname}.{i}.exp_avg"
        if key not in arrays:
            continue
        step_val = float(np.asarray(arrays[f"opt.{gname}.{i}.step"]).reshape(-1)[0])
        new_state[i] = {
            "step": torch.tensor(step_val),
            "exp_avg": torch.from_numpy(np.ascontiguousarray(arrays[f"opt.{gname}.{i}.exp_avg"])).to(dtype),
            "exp_avg_sq": torch.from_numpy(
                np.ascontiguousarray(arrays[f"opt.{gname}.{i}.exp_avg_sq"])
            ).to(dtype),
        }
    sd["state"] = new_state
    opt.load_state_dict(sd)


def restore_from_checkpoint(models: Models, state: TrainState, arrays, info, dtype):
    pairs = [
        ("teacher_gen", models.teacher_gen),
        ("student_gen", models.student_gen),
        ("disc", models.disc),
        ("teacher_bank", models.teacher_bank),
        ("student_bank", models.student_bank),
    ]
    if models.adapter is not None:
        pairs.append(("adapter", models.adapter))
    for prefix, module in pairs:
        assign_parameters(module, arrays, prefix=prefix + ".")
    _restore_optimizer(state.opt_teacher, arrays, "teacher", dtype)
    _restore_optimizer(state.opt_student, arrays, "student", dtype)
    _restore_optimizer(state.opt_disc, arrays, "disc", dtype)
    state.step = int(info["step"])
    state.epoch = int(info["epoch"])


def latest_checkpoint(run_dir):
    ckpt_root = os.path.join(run_dir, "checkpoints")
    if not os.path.isdir(ckpt_root):
        raise CorruptionError(f"no checkpoints directory under {run_dir}")
    steps = sorted(d for d in os.listdir(ckpt_root) if d.startswith("step_"))
    if not steps:
        raise CorruptionError(f"no checkpoints under {ckpt_root}")
    return os.path.join(ckpt_root, steps[-1])


# ---------------------------------------------------------------------------
# Full training run


def _load_datasets(cfg: RunConfig):
    spec = data_mod.DatasetSpec.from_config(cfg)
    if cfg.task == "folder":
        return data_mod.load_folder_dataset(cfg.data_dir, cfg.resolution, cfg.paired)
    arrays = data_mod.dataset_arrays(spec)
    return (arrays["train_a"], arrays["train_b"]), (arrays["eval_a"], arrays["eval_b"])


def fit(cfg: RunConfig, run_dir, resume_from=None) -> FitResult:
    """Train for cfg.epochs, logging per-step losses and periodic desk-FID.

    Writes metrics.jsonl, evals.jsonl, sample dumps and checkpoints under
    run_dir; returns the final checkpoint path and final desk-FID.
    """
    cfg.validate()
    eff = cfg.effective()
    hp = eff.hyper()
    dtype = cfg.torch_dtype()
    opts = StepOptions.from_config(eff)

    (train_a, train_b), (eval_a, eval_b) = _load_datasets(cfg)
    if hp.batch_size > len(train_a):
        raise ConfigError(f"batch_size {hp.batch_size} exceeds dataset size {len(train_a)}")
    paired = cfg.task == "paired_edges2blobs" or (cfg.task == "folder" and cfg.paired)

    models = build_models(cfg, dtype)
    opt_teacher, opt_student, opt_disc = make_optimizers(models, hp)
    state = TrainState(opt_teacher=opt_teacher, opt_student=opt_student, opt_disc=opt_disc)
    state.frozen_digests = frozen_group_digests(models)

    os.makedirs(run_dir, exist_ok=True)
    if resume_from:
        _, info, arrays = load_checkpoint(resume_from)
        restore_from_checkpoint(models, state, arrays, info, dtype)

    ds_digest = parameter_digest(
        {"train_a": train_a, "train_b": train_b, "eval_a": eval_a, "eval_b": eval_b}
    )
    with open(os.path.join(run_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    run_info = {
        "dataset_digest": ds_digest,
        "embedder_digest": state.frozen_digests["embedder"],
        "extractor_digest": state.frozen_digests["extractor"],
        "initial_digest": parameter_digest(models.parameter_arrays()) if state.step == 0 else None,
    }
    with open(os.path.join(run_dir, "run.json"), "w", encoding="utf-8") as fh:
        json.dump(run_info, fh, indent=2, sort_keys=True)
        fh.write("\n")

    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    evals_path = os.path.join(run_dir, "evals.jsonl")
    mode = "a" if resume_from else "w"
    metrics_fh = open(metrics_path, mode, encoding="utf-8")
    evals_fh = open(evals_path, mode, encoding="utf-8")

    steps_per_epoch = data_mod.batches_per_epoch(len(train_a), hp.batch_size)
    if steps_per_epoch == 0:
        raise ConfigError("batch_size larger than the training set")
    total_steps = steps_per_epoch * hp.epochs
    n_fid = min(cfg.n_eval, len(eval_a), len(eval_b))
    final_fid = float("nan")
    last_ckpt = resume_from or ""

    def check_frozen():
        now = frozen_group_digests(models)
        for k, v in state.frozen_digests.items():
            if now[k] != v:
                raise RuntimeError(f"frozen parameter group '{k}' changed during training")

    def run_eval(step):
        nonlocal final_fid
        rep = desk_fid(models.student_gen, eval_a, eval_b, models.embedder, n_samples=n_fid)
        final_fid = rep.value
        evals_fh.write(
            json.dumps(
                {
                    "step": step,
                    "desk_fid": rep.value,
                    "n_samples": rep.n_samples,
                    "embedder_digest": rep.embedder_digest,
                    "note": rep.note,
                }
            )
            + "\n"
        )
        evals_fh.flush()
        dump_samples(models.student_gen, eval_a[: min(4, len(eval_a))], os.path.join(run_dir, "samples"), step=step)
        if cfg.dump_features:
            xb = torch.from_numpy(np.ascontiguousarray(eval_a[:1])).to(dtype)
            with torch.no_grad():
                _, t_feats = models.teacher_gen.forward_with_taps(xb, models.taps.generator_taps)
                _, s_feats = models.student_gen.forward_with_taps(xb, models.taps.generator_taps)
            hw = (cfg.resolution, cfg.resolution)
            dump_feature_images(models.teacher_bank, t_feats, os.path.join(run_dir, "features", "teacher"), step=step, target_hw=hw)
            dump_feature_images(models.student_bank, s_feats, os.path.join(run_dir, "features", "student"), step=step, target_hw=hw)

    def write_checkpoint(step):
        nonlocal last_ckpt
        check_frozen()
        path = os.path.join(run_dir, "checkpoints", f"step_{step:06d}")
        save_checkpoint(path, state, models, cfg, extras={"dataset_digest": ds_digest})
        last_ckpt = path

    try:
        for epoch in range(state.epoch, hp.epochs):
            state.epoch = epoch
            lr = lr_at_epoch(epoch, hp)
            for opt in (opt_teacher, opt_student, opt_disc):
                if opt is not None:
                    for g in opt.param_groups:
                        g["lr"] = lr
            if paired:
                batches = data_mod.batch_iterator(
                    (train_a, train_b), hp.batch_size, cfg.seed, epoch
                )
            else:
                batches = zip(
                    data_mod.batch_iterator(train_a, hp.batch_size, cfg.seed, epoch, stream="a"),
                    data_mod.batch_iterator(train_b, hp.batch_size, cfg.seed, epoch, stream="b"),
                )
            for bi, (bx, by) in enumerate(batches):
                if epoch * steps_per_epoch + bi < state.step:
                    continue  # resume fast-forward: order is derived, not stateful
                x = torch.from_numpy(np.ascontiguousarray(bx)).to(dtype)
                y = torch.from_numpy(np.ascontiguousarray(by)).to(dtype)
                report = train_step(state, models, x, y, hp, opts)
                line = {
                    "step": state.step,
                    "epoch": epoch,
                    "lr": lr,
                    "gan_d": report.gan_d,
                    "gan_g_teacher": report.gan_g_teacher,
                    "gan_g_student": report.gan_g_student,
                    "fea": report.fea,
                    "sty": report.sty,
                    "per": report.per,
                    "dcd": report.dcd,
                    "total_student": report.total,
                }
                if opts.lambda_fitnet > 0:
                    line["fea_dis"] = report.fea_dis
                metrics_fh.write(json.dumps(line) + "\n")
                metrics_fh.flush()
                if state.step % cfg.eval_interval == 0 and state.step < total_steps:
                    run_eval(state.step)
                if state.step % cfg.checkpoint_interval == 0 and state.step < total_steps:
                    write_checkpoint(state.step)
        state.epoch = hp.epochs
        run_eval(state.step)
        write_checkpoint(state.step)
    finally:
        metrics_fh.close()
        evals_fh.close()

    return FitResult(
        run_dir=run_dir,
        final_checkpoint=last_ckpt,
        metrics_path=metrics_path,
        evals_path=evals_path,
        final_desk_fid=final_fid,
    )
