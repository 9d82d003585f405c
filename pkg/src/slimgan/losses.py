"""Training objectives, each a pure differentiable scalar-valued function.

Conventions shared by every distance-style loss here:
  * tap dimensions are summed, never averaged;
  * the batch dimension is averaged;
  * "l1" means mean absolute difference, "l2" mean squared difference.

The discriminator-cooperated loss compares the discriminator's intermediate
responses to teacher vs student feature-images.  Its teacher branch (features
and bank output) is treated as constant and the discriminator's own weights
never receive gradient from it; only the student generator and the student
bank learn from this term.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

from .core import ConfigError, HyperParams, ValidationError
from .nets import downsample_to_image

PROB_EPS = 1e-7  # probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before logs


def _check_finite(t, what):
    if isinstance(t, torch.Tensor) and not torch.isfinite(t).all():
        raise ValidationError(f"{what} contains non-finite values")


def _elementwise(a, b, distance):
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if distance == "l1":
        return (a - b).abs().mean()
    if distance == "l2":
        return (a - b).pow(2).mean()
    raise ConfigError(f"unknown distance variant {distance!r}")


def _log(p):
    return torch.log(p.clamp(PROB_EPS, 1.0 - PROB_EPS))


# ---------------------------------------------------------------------------
# Adversarial losses


def adversarial_d_loss(d_real, d_fakes, variant):
    """Discriminator objective (negated maximization), to minimize.

    d_fakes is a list of (scores, weight) pairs; with [(teacher, 1),
    (student, lambda_stu)] this is the collaborative discriminator loss, with
    a single unit-weight fake the plain two-player one.  Vanilla and
    non-saturating variants consume probabilities (sigmoid applied upstream),
    least_squares consumes raw scores.
    """
    _check_finite(d_real, "d_real scores")
    for s, w in d_fakes:
        _check_finite(s, "d_fake scores")
        if w < 0:
            raise ConfigError("fake weights must be >= 0")
    if variant in ("vanilla", "nonsaturating"):
        loss = -_log(d_real).mean()
        for s, w in d_fakes:
            loss = loss - w * _log(1.0 - s).mean()
        return loss
    if variant == "least_squares":
        loss = (d_real - 1.0).pow(2).mean()
        for s, w in d_fakes:
            loss = loss + w * s.pow(2).mean()
        return loss
    raise ConfigError(f"unknown gan variant {variant!r}")


def adversarial_g_loss(d_fake, variant):
    """Generator objective.

    vanilla:       E log(1 - D(G(x)))   (saturates when D is confident)
    nonsaturating: -E log D(G(x))
    least_squares: E (D(G(x)) - 1)^2
    """
    _check_finite(d_fake, "d_fake scores")
    if variant == "vanilla":
        return _log(1.0 - d_fake).mean()
    if variant == "nonsaturating":
        return -_log(d_fake).mean()
    if variant == "least_squares":
        return (d_fake - 1.0).pow(2).mean()
    raise ConfigError(f"unknown gan variant {variant!r}")


# ---------------------------------------------------------------------------
# Feature-map distillation


def per_pixel_distill(teacher_feats, student_feats, distance="l1"):
    """Per-pixel feature matching over aligned tap lists (FitNet-style baseline).

    Student features must already be projected to the teacher's channel
    counts; the result is the tap-wise sum of mean elementwise distances.
    """
    if len(teacher_feats) != len(student_feats):
        raise ConfigError(f"tap count mismatch: {len(teacher_feats)} vs {len(student_feats)}")
    total = 0.0
    for i, (t, s) in enumerate(zip(teacher_feats, student_feats)):
        if t.shape != s.shape:
            raise ConfigError(f"tap {i}: shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
        total = total + _elementwise(t, s, distance)
    return total if isinstance(total, torch.Tensor) else torch.tensor(total, dtype=torch.float64)


def gram(feat):
    """Per-sample channel Gram matrix, normalized by C*H*W.

    (N, C, H, W) -> (N, C, C); symmetric positive semidefinite and invariant
    to any permutation of spatial positions.
    """
    n, c, h, w = feat.shape
    x = feat.reshape(n, c, h * w)
    return x @ x.transpose(1, 2) / (c * h * w)


def style_loss(teacher_feats, student_feats):
    """Sum over taps of the entrywise L1 difference between Gram matrices, batch-averaged."""
    if len(teacher_feats) != len(student_feats):
        raise ConfigError(f"tap count mismatch: {len(teacher_feats)} vs {len(student_feats)}")
    total = 0.0
    for i, (t, s) in enumerate(zip(teacher_feats, student_feats)):
        if t.shape != s.shape:
            raise ConfigError(f"tap {i}: shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
        total = total + (gram(t) - gram(s)).abs().sum(dim=(1, 2)).mean()
    return total


def feature_reconstruction_loss(teacher_feats, student_feats):
    """Sum over taps of the (1 / C*H*W)-normalized L1 difference, batch-averaged."""
    if len(teacher_feats) != len(student_feats):
        raise ConfigError(f"tap count mismatch: {len(teacher_feats)} vs {len(student_feats)}")
    total = 0.0
    for i, (t, s) in enumerate(zip(teacher_feats, student_feats)):
        if t.shape != s.shape:
            raise ConfigError(f"tap {i}: shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
        _, c, h, w = t.shape
        total = total + (t - s).abs().sum(dim=(1, 2, 3)).mean() / (c * h * w)
    return total


def perceptual_loss(teacher_img, student_img, extractor, taps, lambda_fea, lambda_sty):
    """Weighted feature-reconstruction + style loss on the frozen extractor's taps.

    Returns (combined, {"fea": ..., "sty": ...}) with the raw unweighted parts.
    """
    if teacher_img.shape != student_img.shape:
        raise ConfigError(
            f"image shape mismatch {tuple(teacher_img.shape)} vs {tuple(student_img.shape)}"
        )
    zero = teacher_img.new_zeros(())
    if lambda_fea == 0.0 and lambda_sty == 0.0:
        return zero, {"fea": zero, "sty": zero}
    _, t_feats = extractor.forward_with_taps(teacher_img, taps)
    _, s_feats = extractor.forward_with_taps(student_img, taps)
    fea = feature_reconstruction_loss(t_feats, s_feats)
    sty = style_loss(t_feats, s_feats)
    return lambda_fea * fea + lambda_sty * sty, {"fea": fea, "sty": sty}


def dcd_loss(
    teacher_feats,
    student_feats,
    teacher_bank,
    student_bank,
    discriminator,
    d_taps,
    distance="l1",
    target_hw=None,
    teacher_grad=False,
):
    """Distance between the discriminator's tap responses to teacher vs student
    feature-images, summed over discriminator taps and generator taps.

    The teacher branch is a constant (no gradient reaches teacher features or
    the frozen teacher bank) unless teacher_grad is set, and the
    discriminator's parameters never receive gradient from this loss.
    """
    if len(teacher_feats) != len(student_feats):
        raise ConfigError(f"tap count mismatch: {len(teacher_feats)} vs {len(student_feats)}")
    if len(teacher_bank) != len(teacher_feats) or len(student_bank) != len(student_feats):
        raise ConfigError(
            f"bank/tap mismatch: banks of size {len(teacher_bank)}/{len(student_bank)} "
            f"for {len(teacher_feats)} taps"
        )
    if target_hw is None:
        target_hw = (
            max(int(t.shape[2]) for t in teacher_feats),
            max(int(t.shape[3]) for t in teacher_feats),
        )
    d_params = [p for p in discriminator.parameters()]
    saved = [p.requires_grad for p in d_params]
    for p in d_params:
        p.requires_grad_(False)
    try:
        total = 0.0
        for i, (t_feat, s_feat) in enumerate(zip(teacher_feats, student_feats)):
            if teacher_grad:
                t_img = downsample_to_image(teacher_bank, i, t_feat, target_hw)
                _, t_resp = discriminator.forward_with_taps(t_img, d_taps)
            else:
                with torch.no_grad():
                    t_img = downsample_to_image(teacher_bank, i, t_feat.detach(), target_hw)
                    _, t_resp = discriminator.forward_with_taps(t_img, d_taps)
            s_img = downsample_to_image(student_bank, i, s_feat, target_hw)
            _, s_resp = discriminator.forward_with_taps(s_img, d_taps)
            for k, (tr, sr) in enumerate(zip(t_resp, s_resp)):
                if tr.shape != sr.shape:
                    raise ConfigError(
                        f"generator tap {i}, discriminator tap {k}: "
                        f"shape mismatch {tuple(tr.shape)} vs {tuple(sr.shape)}"
                    )
                total = total + _elementwise(tr if teacher_grad else tr.detach(), sr, distance)
    finally:
        for p, flag in zip(d_params, saved):
            p.requires_grad_(flag)
    return total


# ---------------------------------------------------------------------------
# Objective assembly


@dataclass
class LossReport:
    """Named scalar loss terms of one training step.

    Values may be 0-dim tensors (differentiable, before a step) or plain
    floats (after logging conversion).
    """

    gan_d: object = 0.0
    gan_g_teacher: object = 0.0
    gan_g_student: object = 0.0
    fea_dis: object = 0.0
    fea: object = 0.0
    sty: object = 0.0
    per: object = 0.0
    dcd: object = 0.0
    total: object = 0.0

    def as_floats(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out

    def nonfinite_terms(self):
        import math

        return [k for k, v in self.as_floats().items() if not math.isfinite(v)]


_REQUIRED_PARTS = ("gan_d", "gan_g_teacher", "gan_g_student", "fea", "sty", "dcd")


def total_objective(parts, hp: HyperParams, lambda_fitnet: float = 0.0) -> LossReport:
    """Assemble the overall objective from raw components.

    The student-generator total is lambda_stu-weighted adversarial loss plus
    the weighted perceptual combination plus lambda_dcd times the
    discriminator-cooperated term (plus the optional per-pixel baseline); the
    teacher generator keeps only its adversarial term, and the discriminator
    total is the collaborative loss passed in as gan_d.
    """
    missing = [k for k in _REQUIRED_PARTS if k not in parts]
    if missing:
        raise ConfigError(f"missing loss components: {missing}")
    fea_dis = parts.get("fea_dis", 0.0)
    per = hp.lambda_fea * parts["fea"] + hp.lambda_sty * parts["sty"]
    total = (
        hp.lambda_stu * parts["gan_g_student"]
        + per
        + hp.lambda_dcd * parts["dcd"]
        + lambda_fitnet * fea_dis
    )
    return LossReport(
        gan_d=parts["gan_d"],
        gan_g_teacher=parts["gan_g_teacher"],
        gan_g_student=parts["gan_g_student"],
        fea_dis=fea_dis,
        fea=parts["fea"],
        sty=parts["sty"],
        per=per,
        dcd=parts["dcd"],
        total=total,
    )


def check_report_consistency(report: LossReport, hp: HyperParams, lambda_fitnet: float = 0.0, rel: float = 1e-6):
    """Verify total (and per) recombine from the components under hp."""
    vals = report.as_floats()
    per = hp.lambda_fea * vals["fea"] + hp.lambda_sty * vals["sty"]
    total = hp.lambda_stu * vals["gan_g_student"] + per + hp.lambda_dcd * vals["dcd"] + lambda_fitnet * vals["fea_dis"]
    for name, want, got in (("per", per, vals["per"]), ("total", total, vals["total"])):
        if abs(want - got) > rel * max(1.0, abs(want)):
            raise ValidationError(f"loss report inconsistent: {name} is {got}, recombination gives {want}")
    return True
