import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vesselxfer.objectives import (
    LossWeights,
    NonFiniteLossError,
    gan_loss_discriminator,
    gan_loss_generator,
    seg_loss,
    shape_loss,
    total_loss,
)

LN2 = math.log(2.0)


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


# -- literal per-element oracles ---------------------------------------------------------


def literal_seg(z, y):
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    terms = []
    for zi, yi in zip(z.ravel(), y.ravel()):
        e = math.exp(zi)
        terms.append(-(yi * math.log(e / (1 + e)) + (1 - yi) * math.log(1 / (1 + e))))
    return sum(terms) / len(terms)


def literal_gan_d(real, fake):
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    r = [math.log(sig(v)) for v in np.ravel(real)]
    f = [math.log(1.0 - sig(v)) for v in np.ravel(fake)]
    return -sum(r) / len(r) - sum(f) / len(f)


def literal_gan_g(fake):
    vals = [math.log(1.0 / (1.0 + math.exp(-v))) for v in np.ravel(fake)]
    return -sum(vals) / len(vals)


def central_difference(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


def autograd(f, x: np.ndarray) -> np.ndarray:
    xt = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    f(xt).backward()
    return xt.grad.numpy()


def max_rel_err(a, n, floor=1e-6):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


# -- exact values ------------------------------------------------------------------------


def test_shape_loss_values():
    rng = np.random.default_rng(0)
    img = rng.random((8, 8))
    lab = (rng.random((8, 8)) > 0.5).astype(float)
    assert float(shape_loss(t(img), t(img), t(lab))) == 0.0
    assert float(shape_loss(t(img), t(rng.random((8, 8))), t(np.zeros((8, 8))))) == 0.0
    full = np.ones((8, 8))
    assert float(shape_loss(t(img + 0.25), t(img), t(full))) == pytest.approx(0.25, abs=1e-12)


def test_shape_loss_mask_area_normalisation():
    img = np.zeros((4, 4))
    lab = np.zeros((4, 4))
    lab[0, :2] = 1
    fake = img + 0.5
    assert float(shape_loss(t(fake), t(img), t(lab))) == pytest.approx(1.0 / 16)
    assert float(shape_loss(t(fake), t(img), t(lab), normalize_by_mask_area=True)) == pytest.approx(0.5)


def test_shape_loss_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        shape_loss(t(np.zeros((3, 3))), t(np.zeros((3, 4))), t(np.zeros((3, 3))))


def test_gan_losses_at_zero_logits():
    z = t(np.zeros((5, 5)))
    assert float(gan_loss_discriminator(z, z)) == pytest.approx(2 * LN2, abs=1e-12)
    assert float(gan_loss_generator(z)) == pytest.approx(LN2, abs=1e-12)


def test_gan_losses_saturated_limits():
    big = t(np.full((3, 3), 60.0))
    assert float(gan_loss_discriminator(big, -big)) < 1e-20
    assert float(gan_loss_generator(big)) < 1e-20
    # stable in the opposite saturation too
    assert math.isfinite(float(gan_loss_discriminator(-t(np.full((3, 3), 1e4)), t(np.full((3, 3), 1e4)))))


@pytest.mark.parametrize("seed", range(5))
def test_gan_losses_match_literal_formula(seed):
    rng = np.random.default_rng(seed)
    real, fake = rng.normal(0, 2, (4, 4)), rng.normal(0, 2, (4, 4))
    assert float(gan_loss_discriminator(t(real), t(fake))) == pytest.approx(literal_gan_d(real, fake), abs=1e-6)
    assert float(gan_loss_generator(t(fake))) == pytest.approx(literal_gan_g(fake), abs=1e-6)


def test_seg_loss_values():
    y = (np.random.default_rng(1).random((6, 6)) > 0.5).astype(float)
    assert float(seg_loss(t(np.zeros((6, 6))), t(y))) == pytest.approx(LN2, abs=1e-12)
    z = np.where(y > 0, 20.0, -20.0)
    assert float(seg_loss(t(z), t(y))) < 1e-8


@pytest.mark.parametrize("seed", range(5))
def test_seg_loss_matches_literal_formula(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 3, (8, 8))
    y = (rng.random((8, 8)) > 0.5).astype(float)
    assert float(seg_loss(t(z), t(y))) == pytest.approx(literal_seg(z, y), abs=1e-9)


def test_seg_loss_rejects_nonbinary_target():
    with pytest.raises(ValueError):
        seg_loss(t(np.zeros((2, 2))), t(np.full((2, 2), 0.5)))


def test_total_loss_arithmetic():
    zero = {"gan": 0.0, "seg": 0.0, "shape_a": 0.0, "shape_b": 0.0}
    assert total_loss(zero)[0] == 0.0
    ones = {"gan": 1.0, "seg": 1.0, "shape_a": 1.0, "shape_b": 1.0}
    total, breakdown = total_loss(ones, LossWeights(100, 50))
    assert total == 152
    assert breakdown == {"gan": 1.0, "seg": 1.0, "shape_a": 1.0, "shape_b": 1.0, "total": 152.0}
    rng = np.random.default_rng(2)
    comps = dict(zip(("gan", "seg", "shape_a", "shape_b"), rng.random(4)))
    assert total_loss(comps, LossWeights(0, 0))[0] == pytest.approx(comps["gan"] + comps["seg"])


def test_total_loss_names_non_finite_term():
    bad = {"gan": 0.0, "seg": float("nan"), "shape_a": 0.0, "shape_b": 0.0}
    with pytest.raises(NonFiniteLossError, match="seg"):
        total_loss(bad)


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(-1, 0)


# -- gradients ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_central_differences(seed):
    rng = np.random.default_rng(100 + seed)
    n = (6, 6)
    source = rng.random(n)
    # keep |fake - source| away from the kink of |.|
    fake = source + rng.choice([-1, 1], n) * rng.uniform(0.01, 0.5, n)
    label = (rng.random(n) > 0.5).astype(float)
    y = (rng.random(n) > 0.5).astype(float)
    real_logits, fake_logits = rng.normal(0, 2, n), rng.normal(0, 2, n)

    cases = {
        "shape_fake": (lambda x: shape_loss(x, t(source), t(label)), fake),
        "shape_source": (lambda x: shape_loss(t(fake), x, t(label)), source),
        "gan_d_real": (lambda x: gan_loss_discriminator(x, t(fake_logits)), real_logits),
        "gan_d_fake": (lambda x: gan_loss_discriminator(t(real_logits), x), fake_logits),
        "gan_g": (gan_loss_generator, fake_logits),
        "seg": (lambda x: seg_loss(x, t(y)), rng.normal(0, 2, n)),
        "total": (
            lambda x: total_loss({"gan": x[0], "seg": x[1], "shape_a": x[2], "shape_b": x[3]})[0],
            rng.random(4),
        ),
    }
    for name, (f, x0) in cases.items():
        a = autograd(f, x0)
        num = central_difference(lambda v: float(f(t(v))), x0)
        assert max_rel_err(a, num) < 1e-4, name


# -- properties --------------------------------------------------------------------------

grids = arrays(np.float64, (4, 4), elements=st.floats(-30, 30))
unit = arrays(np.float64, (4, 4), elements=st.floats(0, 1))
masks = arrays(np.float64, (4, 4), elements=st.sampled_from([0.0, 1.0]))


@settings(max_examples=60, deadline=None)
@given(grids, grids, masks, unit, unit)
def test_losses_non_negative_and_finite(z1, z2, y, a, b):
    vals = [
        gan_loss_discriminator(t(z1), t(z2)),
        gan_loss_generator(t(z1)),
        seg_loss(t(z1), t(y)),
        shape_loss(t(a), t(b), t(y)),
    ]
    for v in vals:
        assert math.isfinite(float(v)) and float(v) >= 0


@settings(max_examples=60, deadline=None)
@given(unit, unit, masks)
def test_shape_loss_symmetric(a, b, y):
    assert float(shape_loss(t(a), t(b), t(y))) == float(shape_loss(t(b), t(a), t(y)))


@settings(max_examples=60, deadline=None)
@given(st.floats(-20, 20), st.floats(0.01, 5))
def test_seg_loss_monotone_in_logit(z, dz):
    one, zero = t([[1.0]]), t([[0.0]])
    lo, hi = t([[z]]), t([[z + dz]])
    assert float(seg_loss(hi, one)) < float(seg_loss(lo, one))
    assert float(seg_loss(hi, zero)) > float(seg_loss(lo, zero))


@settings(max_examples=60, deadline=None)
@given(grids)
def test_discriminator_no_information_bound(z):
    # identical real and fake grids cannot beat chance
    assert float(gan_loss_discriminator(t(z), t(z))) >= 2 * LN2 - 1e-12
