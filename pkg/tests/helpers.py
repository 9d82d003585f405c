"""Shared test machinery: tiny nets, explicit-loop oracles, FD gradient checks.

The oracles here recompute losses with plain Python loops over numpy arrays
and never touch autograd, so they stay independent of the implementations
they check.
"""

import numpy as np
import torch

from slimgan.core import RunConfig, seeded_rng
from slimgan.nets import (
    DiscriminatorSpec,
    FeatureExtractorSpec,
    GeneratorSpec,
    build_channel_adapter,
    build_discriminator,
    build_downsampler_bank,
    build_feature_extractor,
    build_generator,
    default_generator_taps,
)


def tiny_config(**overrides):
    base = dict(
        resolution=32,
        n_train=16,
        n_eval=4,
        base_width=4,
        n_resblocks=2,
        disc_widths=(4, 8),
        extractor_widths=(4, 8),
        embedder_widths=(4, 8),
        epochs=2,
        batch_size=4,
        eval_interval=1000,
        checkpoint_interval=1000,
        gan_variant="least_squares",
        seed=0,
    )
    base.update(overrides)
    return RunConfig(**base)


def tiny_nets(seed=0, dtype=torch.float64, base_width=2, n_resblocks=0, res=16):
    """A <=2k-parameter cast for gradient checks: teacher/student G, D, banks, extractor."""
    t_spec = GeneratorSpec(base_width=base_width, n_resblocks=n_resblocks, width_factor=1.0)
    s_spec = GeneratorSpec(base_width=base_width, n_resblocks=n_resblocks, width_factor=0.5)
    teacher, _ = build_generator(t_spec, seeded_rng(seed, "t"), dtype)
    student, _ = build_generator(s_spec, seeded_rng(seed, "s"), dtype)
    d_spec = DiscriminatorSpec(widths=(3, 4))
    disc, _ = build_discriminator(d_spec, seeded_rng(seed, "d"), dtype)
    phi = build_feature_extractor(FeatureExtractorSpec(widths=(3, 4)), seeded_rng(seed, "phi"), dtype=dtype)
    taps = default_generator_taps(t_spec)
    t_bank = build_downsampler_bank(teacher.tap_channels(taps), seeded_rng(seed, "tb"), frozen=True, dtype=dtype)
    s_bank = build_downsampler_bank(student.tap_channels(taps), seeded_rng(seed, "sb"), frozen=False, dtype=dtype)
    adapter = build_channel_adapter(
        student.tap_channels(taps), teacher.tap_channels(taps), seeded_rng(seed, "ad"), dtype=dtype
    )
    x = torch.from_numpy(seeded_rng(seed, "x").uniform(-1, 1, size=(2, 3, res, res))).to(dtype)
    y = torch.from_numpy(seeded_rng(seed, "y").uniform(-1, 1, size=(2, 3, res, res))).to(dtype)
    return dict(
        teacher=teacher, student=student, disc=disc, phi=phi,
        t_bank=t_bank, s_bank=s_bank, adapter=adapter, taps=taps, x=x, y=y,
    )


def rand_feat(rng, shape):
    return torch.from_numpy(rng.normal(0, 1, size=shape))


# ---------------------------------------------------------------------------
# Explicit-loop oracles


def loop_mean_dist(a, b, distance):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    acc = 0.0
    for i in range(a.size):
        d = a[i] - b[i]
        acc += abs(d) if distance == "l1" else d * d
    return acc / a.size


def loop_per_pixel(t_list, s_list, distance):
    return sum(loop_mean_dist(t, s, distance) for t, s in zip(t_list, s_list))


def loop_gram(feat):
    f = np.asarray(feat, dtype=np.float64)
    n, c, h, w = f.shape
    out = np.zeros((n, c, c))
    for b in range(n):
        for i in range(c):
            for j in range(c):
                acc = 0.0
                for yy in range(h):
                    for xx in range(w):
                        acc += f[b, i, yy, xx] * f[b, j, yy, xx]
                out[b, i, j] = acc / (c * h * w)
    return out


def loop_style(t_list, s_list):
    total = 0.0
    for t, s in zip(t_list, s_list):
        gt, gs = loop_gram(t), loop_gram(s)
        n = gt.shape[0]
        per_sample = 0.0
        for b in range(n):
            per_sample += np.abs(gt[b] - gs[b]).sum()
        total += per_sample / n
    return total


def loop_fea(t_list, s_list):
    total = 0.0
    for t, s in zip(t_list, s_list):
        t = np.asarray(t, dtype=np.float64)
        s = np.asarray(s, dtype=np.float64)
        n, c, h, w = t.shape
        per_sample = 0.0
        for b in range(n):
            per_sample += np.abs(t[b] - s[b]).sum() / (c * h * w)
        total += per_sample / n
    return total


def loop_mean_cov(vectors):
    v = np.asarray(vectors, dtype=np.float64)
    n, d = v.shape
    mean = np.zeros(d)
    for i in range(n):
        mean += v[i]
    mean /= n
    cov = np.zeros((d, d))
    for i in range(n):
        xc = v[i] - mean
        cov += np.outer(xc, xc)
    cov /= n - 1
    return mean, cov


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def sample_coords(params, n, rng):
    sizes = [p.numel() for p in params]
    total = sum(sizes)
    picks = rng.choice(total, size=min(n, total), replace=False)
    coords = []
    for flat in sorted(int(v) for v in picks):
        pi = 0
        while flat >= sizes[pi]:
            flat -= sizes[pi]
            pi += 1
        coords.append((pi, flat))
    return coords


def fd_check(build_loss, params, n_coords=200, seed=0, eps=1e-6, rel_tol=1e-3):
    """Central finite differences vs autograd on sampled coordinates.

    Returns the fraction of sampled coordinates whose relative error is
    within rel_tol (denominator floored at 1e-6 to absorb near-zero pairs).
    """
    loss = build_loss()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [
        g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)
    ]
    rng = np.random.default_rng(seed)
    coords = sample_coords(params, n_coords, rng)
    ok = 0
    for pi, ei in coords:
        p = params[pi]
        with torch.no_grad():
            orig = p.reshape(-1)[ei].item()
            p.reshape(-1)[ei] = orig + eps
            f_plus = float(build_loss())
            p.reshape(-1)[ei] = orig - eps
            f_minus = float(build_loss())
            p.reshape(-1)[ei] = orig
        fd = (f_plus - f_minus) / (2 * eps)
        an = float(analytic[pi].reshape(-1)[ei])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
        if rel <= rel_tol:
            ok += 1
    return ok / len(coords)


def gradient_cases(seed=0):
    """(name, build_loss, params) for every differentiable objective.

    Built over sub-2k-parameter float64 nets; closures rebuild the full
    forward pass so in-place parameter perturbations take effect.
    """
    from slimgan.core import HyperParams
    from slimgan.losses import (
        adversarial_d_loss,
        adversarial_g_loss,
        dcd_loss,
        feature_reconstruction_loss,
        per_pixel_distill,
        perceptual_loss,
        style_loss,
        total_objective,
    )

    nets = tiny_nets(seed=seed)
    teacher, student, disc, phi = nets["teacher"], nets["student"], nets["disc"], nets["phi"]
    t_bank, s_bank, adapter = nets["t_bank"], nets["s_bank"], nets["adapter"]
    taps, x, y = nets["taps"], nets["x"], nets["y"]
    d_taps = (0, 1)
    hw = (int(x.shape[2]), int(x.shape[3]))
    with torch.no_grad():
        fake_t_const = teacher(x)
        fake_s_const = student(x)
        t_img_const = fake_t_const.clone()
        _, t_feats_const = teacher.forward_with_taps(x, taps)

    def to_p(raw, variant):
        return raw if variant == "least_squares" else torch.sigmoid(raw)

    d_params = list(disc.parameters())
    s_params = list(student.parameters())
    t_params = [p for p in teacher.parameters()]
    sbank_params = list(s_bank.parameters())
    adapter_params = list(adapter.parameters())

    cases = []
    for variant in ("vanilla", "nonsaturating", "least_squares"):
        def build_d(variant=variant):
            return adversarial_d_loss(
                to_p(disc(y), variant),
                [(to_p(disc(fake_t_const), variant), 1.0), (to_p(disc(fake_s_const), variant), 0.7)],
                variant,
            )

        def build_g(variant=variant):
            return adversarial_g_loss(to_p(disc(student(x)), variant), variant)

        cases.append((f"adversarial_d_{variant}", build_d, d_params))
        cases.append((f"adversarial_g_{variant}", build_g, s_params))

    def build_per_pixel():
        _, s_feats = student.forward_with_taps(x, taps)
        projected = [adapter.project(i, f) for i, f in enumerate(s_feats)]
        return per_pixel_distill(t_feats_const, projected, "l1")

    cases.append(("per_pixel_distill", build_per_pixel, s_params + adapter_params))

    def build_fea():
        _, tf = phi.forward_with_taps(t_img_const, (0, 1))
        _, sf = phi.forward_with_taps(student(x), (0, 1))
        return feature_reconstruction_loss(tf, sf)

    cases.append(("feature_reconstruction", build_fea, s_params))

    def build_sty():
        _, tf = phi.forward_with_taps(t_img_const, (0, 1))
        _, sf = phi.forward_with_taps(student(x), (0, 1))
        return style_loss(tf, sf)

    cases.append(("style", build_sty, s_params))

    def build_perceptual():
        return perceptual_loss(t_img_const, student(x), phi, (0, 1), 10.0, 100.0)[0]

    cases.append(("perceptual", build_perceptual, s_params))

    def build_dcd():
        _, tf = teacher.forward_with_taps(x, taps)
        _, sf = student.forward_with_taps(x, taps)
        return dcd_loss(tf, sf, t_bank, s_bank, disc, d_taps, "l1", target_hw=hw)

    cases.append(("dcd", build_dcd, s_params + sbank_params))

    hp = HyperParams(
        lambda_dcd=0.8, lambda_fea=2.0, lambda_sty=30.0, lambda_stu=0.6,
        gan_variant="least_squares",
    )

    def build_total():
        # student-side objective; the teacher branch is a stop-gradded constant,
        # so only the student group is differentiable here by design
        _, tf = teacher.forward_with_taps(x, taps)
        out_s, sf = student.forward_with_taps(x, taps)
        g_s = adversarial_g_loss(disc(out_s), "least_squares")
        _, pieces = perceptual_loss(t_img_const, out_s, phi, (0, 1), hp.lambda_fea, hp.lambda_sty)
        dcd = dcd_loss(tf, sf, t_bank, s_bank, disc, d_taps, "l1", target_hw=hw)
        parts = {
            "gan_d": 0.0, "gan_g_teacher": 0.0, "gan_g_student": g_s,
            "fea": pieces["fea"], "sty": pieces["sty"], "dcd": dcd,
        }
        return total_objective(parts, hp).total

    cases.append(("total_objective", build_total, s_params + sbank_params))

    def build_total_teacher_grad():
        # literal reading: the teacher also minimizes the distillation terms
        out_t, tf = teacher.forward_with_taps(x, taps)
        out_s, sf = student.forward_with_taps(x, taps)
        g_t = adversarial_g_loss(disc(out_t), "least_squares")
        g_s = adversarial_g_loss(disc(out_s), "least_squares")
        _, pieces = perceptual_loss(out_t, out_s, phi, (0, 1), hp.lambda_fea, hp.lambda_sty)
        tg_bank = build_downsampler_bank(
            t_bank.channel_counts, seeded_rng(0, "tb"), frozen=False
        )
        dcd = dcd_loss(tf, sf, tg_bank, s_bank, disc, d_taps, "l1", target_hw=hw, teacher_grad=True)
        parts = {
            "gan_d": 0.0, "gan_g_teacher": g_t, "gan_g_student": g_s,
            "fea": pieces["fea"], "sty": pieces["sty"], "dcd": dcd,
        }
        return total_objective(parts, hp).total + g_t

    cases.append(
        ("total_objective_teacher_grad", build_total_teacher_grad, t_params + s_params + sbank_params)
    )
    return cases
