import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from rccyclegan.config import LossWeights
from rccyclegan.errors import ConfigError, NumericError
from rccyclegan.losses import (
    LossBreakdown,
    TERMS,
    cycle_loss,
    discriminator_adv_loss,
    feature_identity_loss,
    generator_adv_loss,
    mask_identity_loss,
    total_loss,
)

from toy_graph import ToyGraph, autograd_grad, finite_difference_grad, max_relative_error, trainable

SHAPES = [(1, 1, 16, 16), (1, 1, 8, 8), (1, 1, 4, 4)]


def const_set(p, n=1):
    return [torch.full((n, *s[1:]), float(p)) for s in SHAPES]


def rand_batch(n=2, c=3, h=8, w=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, c, h, w, generator=g) * 2 - 1


def test_default_weights():
    w = LossWeights()
    assert (w.lambda_d, w.lambda_g, w.lambda_cycle, w.lambda_im, w.lambda_if) == (1, 1, 10, 0.1, 10)
    with pytest.raises(ConfigError):
        LossWeights(lambda_d=-1)


@pytest.mark.parametrize("p,expected", [(1.0, 0.0), (0.0, 1.0), (0.5, 0.25)])
def test_generator_adv_constant(p, expected):
    assert generator_adv_loss(const_set(p)).item() == expected


@pytest.mark.parametrize("real,fake,expected", [(1, 0, 0.0), (0, 1, 2.0), (0.5, 0.5, 0.5)])
def test_discriminator_adv_constant(real, fake, expected):
    assert discriminator_adv_loss(const_set(real), const_set(fake)).item() == expected


def test_adv_list_of_sets_matches_batched():
    sets = [[torch.rand(1, *s[1:]) for s in SHAPES] for _ in range(3)]
    batched = [torch.cat([s[i] for s in sets]) for i in range(3)]
    unbatched = [[m[0] for m in s] for s in sets]
    a = generator_adv_loss(sets)
    torch.testing.assert_close(a, generator_adv_loss(batched), rtol=0, atol=1e-7)
    torch.testing.assert_close(a, generator_adv_loss(unbatched), rtol=0, atol=1e-7)


def test_adv_argument_errors():
    with pytest.raises(ValueError):
        generator_adv_loss([])
    with pytest.raises(ValueError):
        discriminator_adv_loss(const_set(1, n=2), const_set(0, n=1))
    with pytest.raises(ValueError):
        generator_adv_loss(const_set(1)[:2])


@settings(max_examples=50, deadline=None)
@given(p=st.floats(0, 1))
def test_generator_adv_is_squared_gap(p):
    assert generator_adv_loss(const_set(p, n=2)).item() == pytest.approx((p - 1) ** 2, rel=1e-6, abs=1e-7)


def test_scale_averaging_one_third():
    g = torch.Generator().manual_seed(1)
    maps = [torch.rand(2, *s[1:], generator=g, dtype=torch.float64) for s in SHAPES]
    base = generator_adv_loss(maps).item()
    for i in range(3):
        zeroed = list(maps)
        zeroed[i] = torch.zeros_like(maps[i])
        contrib = ((maps[i] - 1) ** 2).mean().item()
        changed = generator_adv_loss(zeroed).item()
        assert changed - base == pytest.approx((1.0 - contrib) / 3, abs=1e-12)


def test_cycle_closed_forms():
    r, n = rand_batch(seed=1), rand_batch(seed=2)
    ident = lambda x: x  # noqa: E731
    assert cycle_loss(r, n, ident, ident).item() == 0.0
    shift = lambda x: x + 0.05  # noqa: E731
    # each composite adds 0.1 to every element
    assert cycle_loss(r, n, shift, shift).item() == pytest.approx(0.2, abs=1e-6)


def test_cycle_one_side_off():
    r, n = rand_batch(seed=1, n=1), rand_batch(seed=2, n=1)
    calls = {"g_r": 0}

    def g_n(x):
        return x

    def g_r(x):
        calls["g_r"] += 1
        # first call closes the rain cycle exactly; second offsets the sunny cycle
        return x if calls["g_r"] == 1 else x + 0.3

    assert cycle_loss(r, n, g_n, g_r).item() == pytest.approx(0.3, abs=1e-6)


def test_cycle_empty_batch():
    with pytest.raises(ValueError):
        cycle_loss(torch.zeros(0, 3, 4, 4), torch.zeros(0, 3, 4, 4), lambda x: x, lambda x: x)


def test_feature_identity_closed_forms():
    r = rand_batch(seed=3)
    # G_n(r) = r - 0.2 and mask = 0.2 -> exact decomposition
    g_n = lambda x: x - 0.2  # noqa: E731
    assert feature_identity_loss(r, lambda x: torch.full_like(x[:, :1], 0.2), g_n).item() == pytest.approx(
        0.0, abs=1e-12)
    assert feature_identity_loss(r, lambda x: torch.zeros_like(x[:, :1]), lambda x: x).item() == 0.0
    zero_mask = lambda x: torch.zeros_like(x[:, :1])  # noqa: E731
    assert feature_identity_loss(r, zero_mask, g_n).item() == pytest.approx(0.04, rel=1e-5)
    with pytest.raises(ConfigError):
        feature_identity_loss(r, zero_mask, g_n, mode="vgg")


def test_feature_identity_mask_equals_residual():
    r = rand_batch(seed=4, c=3)
    derained = rand_batch(seed=5, c=3)
    # single-channel mask broadcast: choose a derained image whose residual is channel-constant
    mask = (r - derained)[:, :1]
    derained = r - mask
    loss = feature_identity_loss(r, lambda x: mask, lambda x: derained)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_feature_identity_feature_mode():
    graph = ToyGraph(0)
    r = graph.rain
    zero = lambda x: torch.zeros_like(x[:, :1])  # noqa: E731
    assert feature_identity_loss(r, zero, lambda x: x, graph.feat, "feature").item() == 0.0
    assert feature_identity_loss(r, zero, lambda x: x - 0.2, graph.feat, "feature").item() > 0


def test_mask_identity_closed_forms():
    n = rand_batch(seed=6)
    zero_mask = lambda x: torch.zeros_like(x[:, :1])  # noqa: E731
    assert mask_identity_loss(n, zero_mask, lambda x: x).item() == 0.0
    assert mask_identity_loss(n, lambda x: torch.full_like(x[:, :1], 0.1), lambda x: x + 0.1).item() == \
        pytest.approx(0.01, rel=1e-5)

    def rmi(x):
        # zero on the sunny batch, exactly the added 0.5 on the simulated rain
        return torch.zeros_like(x[:, :1]) if x is n else torch.full_like(x[:, :1], 0.5)

    assert mask_identity_loss(n, rmi, lambda x: x + 0.5).item() == pytest.approx(0.0, abs=1e-12)


def test_total_loss_closed_forms():
    w = LossWeights()
    ones = dict.fromkeys(TERMS, 1.0)
    assert total_loss(ones, w) == pytest.approx(22.1, abs=1e-12)
    assert total_loss(dict.fromkeys(TERMS, 0.0), w) == 0.0
    assert total_loss(ones, LossWeights(0, 0, 0, 0, 0)) == 0.0
    bd = LossBreakdown.from_terms(ones, w)
    assert bd.total == pytest.approx(22.1, abs=1e-12)


def test_total_loss_nan_names_term():
    terms = dict.fromkeys(TERMS, 1.0)
    terms["cycle"] = math.nan
    with pytest.raises(NumericError, match="cycle"):
        total_loss(terms, LossWeights())


@settings(max_examples=50, deadline=None)
@given(vals=st.lists(st.floats(0, 100), min_size=5, max_size=5), k=st.floats(0, 50))
def test_total_loss_linear_in_cycle_weight(vals, k):
    terms = dict(zip(TERMS, vals))
    base = LossWeights(lambda_cycle=k)
    doubled = LossWeights(lambda_cycle=2 * k)
    contrib = total_loss(terms, base) - total_loss({**terms, "cycle": 0.0}, base)
    contrib2 = total_loss(terms, doubled) - total_loss({**terms, "cycle": 0.0}, doubled)
    assert contrib2 == pytest.approx(2 * contrib, rel=1e-12, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_losses_non_negative(seed):
    g = torch.Generator().manual_seed(seed)
    real = [torch.rand(2, *s[1:], generator=g) for s in SHAPES]
    fake = [torch.rand(2, *s[1:], generator=g) for s in SHAPES]
    assert generator_adv_loss(fake) >= 0
    assert discriminator_adv_loss(real, fake) >= 0
    r, n = torch.rand(2, 3, 8, 8, generator=g), torch.rand(2, 3, 8, 8, generator=g)
    m = torch.rand(2, 1, 8, 8, generator=g)
    assert cycle_loss(r, n, lambda x: x * 0.5, torch.tanh) >= 0
    assert feature_identity_loss(r, lambda x: m, torch.tanh) >= 0
    assert mask_identity_loss(n, lambda x: m, torch.sin) >= 0


def _to(graph, dtype):
    graph = graph.to(dtype)
    for attr in ("sunny", "rain", "lab_r", "lab_n"):
        setattr(graph, attr, getattr(graph, attr).to(dtype))
    return graph


TERMS_CHECKED = ["gen", "dis", "cycle", "ident_m", "ident_f", "ident_f_feature"]


def test_toy_graph_size():
    assert sum(p.numel() for p in trainable(ToyGraph(0))) <= 500


@pytest.mark.parametrize("name", TERMS_CHECKED)
def test_gradients_float64(name):
    graph = _to(ToyGraph(0), torch.float64)
    err = max_relative_error(autograd_grad(graph, name), finite_difference_grad(graph, name, h=1e-3))
    assert err < 1e-6


@pytest.mark.parametrize("name", TERMS_CHECKED)
def test_gradients_float32(name):
    # h=1e-3 drowns in float32 rounding noise; 3e-2 balances truncation
    graph = _to(ToyGraph(0), torch.float32)
    err = max_relative_error(autograd_grad(graph, name), finite_difference_grad(graph, name, h=3e-2))
    assert err < 1e-3
