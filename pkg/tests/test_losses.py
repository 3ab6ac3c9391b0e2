import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from semcycle.errors import NonFiniteLossError
from semcycle.losses import (
    EPS,
    LossBreakdown,
    LossWeights,
    adversarial_loss_pair,
    adversarial_value,
    compose_losses,
    semantic_loss,
    weighted_cycle_loss,
)



@pytest.fixture(autouse=True)
def float64_default():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def const(v, shape=(2, 1, 4, 4)):
    return torch.full(shape, float(v))


# ------------------------------------------------------------- adversarial


def test_saddle_value():
    d_obj, g_obj = adversarial_loss_pair(const(0.5), const(0.5), saturating=True)
    assert float(adversarial_value(const(0.5), const(0.5))) == pytest.approx(2 * math.log(0.5), abs=1e-12)
    assert float(d_obj) == pytest.approx(1.3862943611198906, abs=1e-6)
    assert float(g_obj) == pytest.approx(-0.6931471805599453, abs=1e-6)


def test_non_saturating_generator():
    _, g_obj = adversarial_loss_pair(const(0.5), const(0.5))
    assert float(g_obj) == pytest.approx(math.log(2), abs=1e-12)


def test_supremum_limit():
    v = adversarial_value(const(1 - 1e-9), const(1e-9))
    assert -1e-6 < float(v) <= 0


def test_exact_zero_and_one_are_clamped():
    v = adversarial_value(const(1.0), const(0.0))
    assert math.isfinite(float(v))
    assert float(v) == pytest.approx(2 * math.log(1 - EPS), rel=1e-9)


@pytest.mark.parametrize("bad", [1.5, -0.1, float("nan")])
def test_invalid_scores(bad):
    with pytest.raises(ValueError):
        adversarial_value(const(bad), const(0.5))


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_adversarial_value_nonpositive(r, f):
    assert float(adversarial_value(const(r), const(f))) <= 0


# ---------------------------------------------------------------- semantic


@pytest.mark.parametrize("c", [2, 5, 19])
def test_uniform_logits_per_head(c):
    labels = torch.randint(0, c, (2, 6, 6), generator=torch.Generator().manual_seed(c))
    logits = torch.zeros(2, c, 6, 6)
    assert float(semantic_loss(logits, None, labels)) == pytest.approx(math.log(c), abs=1e-6)
    assert float(semantic_loss(logits, logits, labels)) == pytest.approx(2 * math.log(c), abs=1e-6)


def test_uniform_five_classes_both_heads():
    labels = torch.zeros(1, 3, 3, dtype=torch.long)
    assert float(semantic_loss(torch.zeros(1, 5, 3, 3), torch.zeros(1, 5, 3, 3), labels)) == pytest.approx(3.2188758248682006, abs=1e-6)


def test_confident_correct_is_zero():
    labels = torch.tensor([[[0, 1], [2, 1]]])
    logits = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).double() * 100.0
    assert float(semantic_loss(logits, logits, labels)) < 1e-12


def softmax_ce_oracle(logits, labels):
    n, c, h, w = logits.shape
    total = 0.0
    for b in range(n):
        for i in range(h):
            for j in range(w):
                z = [float(logits[b, k, i, j]) for k in range(c)]
                m = max(z)
                lse = m + math.log(sum(math.exp(v - m) for v in z))
                total += lse - z[int(labels[b, i, j])]
    return total / (n * h * w)


def test_random_logits_match_oracle():
    g = torch.Generator().manual_seed(0)
    a = torch.randn(1, 3, 8, 8, generator=g) * 3
    b = torch.randn(1, 3, 8, 8, generator=g) * 3
    y = torch.randint(0, 3, (1, 8, 8), generator=g)
    expected = softmax_ce_oracle(a, y) + softmax_ce_oracle(b, y)
    assert float(semantic_loss(a, b, y)) == pytest.approx(expected, abs=1e-6)


def test_semantic_shape_mismatch():
    with pytest.raises(ValueError):
        semantic_loss(torch.zeros(1, 3, 4, 4), None, torch.zeros(1, 5, 4, dtype=torch.long))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 50))
def test_semantic_nonnegative(seed, scale):
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(2, 4, 3, 3, generator=g) * scale
    y = torch.randint(0, 4, (2, 3, 3), generator=g)
    assert float(semantic_loss(a, a, y)) >= 0


# ------------------------------------------------------------ reconstruction


def test_identity_generators_zero():
    g = torch.Generator().manual_seed(1)
    x_s, x_t = torch.rand(2, 3, 5, 5, generator=g), torch.rand(2, 3, 5, 5, generator=g)
    w = torch.rand(2, 5, 5, generator=g)
    assert float(weighted_cycle_loss(x_t.clone(), x_t, x_s.clone(), x_s, w)) == 0.0


def test_full_weight_leaves_target_term():
    g = torch.Generator().manual_seed(2)
    x_s, x_t = torch.rand(1, 3, 4, 4, generator=g), torch.rand(1, 3, 4, 4, generator=g)
    cyc_s, cyc_t = torch.rand(1, 3, 4, 4, generator=g), torch.rand(1, 3, 4, 4, generator=g)
    loss = weighted_cycle_loss(cyc_t, x_t, cyc_s, x_s, torch.ones(1, 4, 4))
    assert float(loss) == pytest.approx(float((cyc_t - x_t).abs().mean()), abs=1e-15)


def test_one_pixel_arithmetic():
    x_s = torch.full((1, 3, 1, 1), 0.2)
    cyc_s = torch.full((1, 3, 1, 1), 0.5)
    x_t = torch.zeros(1, 3, 1, 1)
    loss = weighted_cycle_loss(x_t.clone(), x_t, cyc_s, x_s, torch.full((1, 1, 1), 0.75))
    assert float(loss) == pytest.approx(0.075, abs=1e-12)


def test_cycle_shape_mismatch():
    with pytest.raises(ValueError):
        weighted_cycle_loss(None, None, torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5), torch.zeros(1, 4, 4))
    with pytest.raises(ValueError):
        weighted_cycle_loss(None, None, torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), torch.zeros(1, 4, 3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_cycle_nonnegative(seed):
    g = torch.Generator().manual_seed(seed)
    t = [torch.rand(2, 3, 3, 3, generator=g) * 2 - 1 for _ in range(4)]
    assert float(weighted_cycle_loss(t[0], t[1], t[2], t[3], torch.rand(2, 3, 3, generator=g))) >= 0


# ------------------------------------------------------------------ compose


def test_compose_example():
    l_d, l_g = compose_losses(-1.3863, 3.2189, 0.5, LossWeights(1.0, 3.0))
    assert l_g == pytest.approx(3.3326, abs=1e-9)
    assert l_d == pytest.approx(1.3863 + 3.2189, abs=1e-9)


def test_compose_plain_adversarial():
    l_d, l_g = compose_losses(-0.7, 2.0, 5.0, LossWeights(0.0, 0.0))
    assert (l_d, l_g) == (0.7, -0.7)


def test_compose_at_optimum():
    l_d, _ = compose_losses(0.0, 2.5, 1.0, LossWeights(1.0, 3.0))
    assert l_d == 2.5


def test_compose_linear_in_rec():
    w = LossWeights(1.0, 3.0)
    _, base = compose_losses(-1.0, 1.0, 0.0, w)
    _, one = compose_losses(-1.0, 1.0, 0.25, w)
    _, two = compose_losses(-1.0, 1.0, 0.5, w)
    assert two - base == 2 * (one - base)


def test_compose_names_bad_part():
    with pytest.raises(NonFiniteLossError, match="sem"):
        compose_losses(0.0, float("nan"), 0.0, LossWeights())
    with pytest.raises(NonFiniteLossError, match="rec"):
        compose_losses(0.0, 0.0, torch.tensor(float("inf")), LossWeights())


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(-1.0, 3.0)


def test_breakdown_recompose():
    bd = LossBreakdown(adv_st=-0.6, adv_ts=-0.7, sem_st=1.2, sem_ts=0.9, rec=0.3)
    bd.total_d, bd.total_g = bd.recomposed(LossWeights())
    assert bd.total_g == pytest.approx(-1.3 + 2.1 + 0.9)
    assert LossBreakdown.from_dict(bd.to_dict()) == bd


def test_logit_forms_match_probability_forms():
    g = torch.Generator().manual_seed(0)
    real, fake = torch.randn(2, 1, 4, 4, generator=g) * 3, torch.randn(2, 1, 4, 4, generator=g) * 3
    from semcycle.losses import adversarial_value_logits, generator_adversarial, generator_adversarial_logits

    assert float(adversarial_value_logits(real, fake)) == pytest.approx(float(adversarial_value(torch.sigmoid(real), torch.sigmoid(fake))), abs=1e-9)
    for sat in (True, False):
        assert float(generator_adversarial_logits(fake, sat)) == pytest.approx(float(generator_adversarial(torch.sigmoid(fake), sat)), abs=1e-9)


def test_logit_form_keeps_gradient_when_confident():
    from semcycle.losses import generator_adversarial_logits

    fake = torch.full((1, 1, 2, 2), -40.0, requires_grad=True)
    loss = generator_adversarial_logits(fake)
    loss.backward()
    assert math.isfinite(loss.item()) and float(fake.grad.abs().min()) > 0.2
