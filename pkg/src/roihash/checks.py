"""Finite-difference verification suite: every differentiable component is
checked against central differences on small fixed-seed instances. Used by
the gradcheck CLI command and the test suite.

Relative error is |analytic - numeric| / max(1, |analytic|, |numeric|), so
the 1e-4 threshold is meaningful for both tiny and large gradients.
"""

from __future__ import annotations

import numpy as np

from . import losses
from .kanhash import KanLayer, kan_forward
from .model import BackboneConfig, Model
from .numerics import (
    Tensor,
    batch_stats_norm,
    conv2d,
    finite_difference_check,
    maxpool2d,
    relu,
    seeded_rng,
    tsum,
)

GRAD_TOLERANCE = 1e-4


def _weighted_sum(t: Tensor, rng: np.random.Generator) -> Tensor:
    """Project a tensor output to a scalar with fixed random weights, so the
    check exercises mixed-sign upstream gradients."""
    w = rng.normal(size=t.data.shape)
    from .numerics import mul
    return tsum(mul(Tensor(w), t))


def check_kan_layer() -> float:
    rng = seeded_rng(11, 0x6B)
    layer = KanLayer(in_dim=4, out_bits=3)
    layer.init_params(11, scale=0.5)
    x = Tensor(rng.normal(0.0, 1.0, size=(3, 4)), requires_grad=True, name="x")
    params = {"coeffs": layer.coeffs, "x": x}

    def f(p):
        return _weighted_sum(kan_forward(p["x"], layer), np.random.default_rng(5))

    return finite_difference_check(f, params)


def check_channel_attention() -> float:
    model = Model(BackboneConfig(), bits=4, seed=13)
    rng = seeded_rng(13, 0xCA)
    x = Tensor(rng.normal(0.0, 0.7, size=(2, 32, 4, 4)), requires_grad=True, name="x")
    prefix = "shallow0.expert1.ca"
    params = {n: model.params[n] for n in model.params if n.startswith(prefix)}
    params["x"] = x

    def f(p):
        return _weighted_sum(model.expert1_forward(p["x"], prefix),
                             np.random.default_rng(7))

    return finite_difference_check(f, params)


def check_conv_block() -> float:
    rng = seeded_rng(17, 0xC0)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True, name="x")
    w1 = Tensor(rng.normal(0.0, 0.4, size=(4, 3, 3, 3)), requires_grad=True, name="w1")
    b1 = Tensor(np.zeros(4), requires_grad=True, name="b1")
    gamma = Tensor(np.ones(4), requires_grad=True, name="gamma")
    beta = Tensor(np.zeros(4), requires_grad=True, name="beta")
    w2 = Tensor(rng.normal(0.0, 0.4, size=(4, 4, 3, 3)), requires_grad=True, name="w2")
    params = {"x": x, "w1": w1, "b1": b1, "gamma": gamma, "beta": beta, "w2": w2}

    def f(p):
        h = conv2d(p["x"], p["w1"], p["b1"], stride=1, padding=1)
        h = batch_stats_norm(h, p["gamma"], p["beta"], training=True)
        h = relu(h)
        h = conv2d(h, p["w2"], stride=2, padding=1)
        h = maxpool2d(h, 3)
        return _weighted_sum(h, np.random.default_rng(3))

    return finite_difference_check(f, params)


def _random_codes(rng: np.random.Generator, n: int, q: int) -> Tensor:
    # tanh keeps codes strictly inside (-1, 1) as in the real head
    return Tensor(np.tanh(rng.normal(0.0, 0.8, size=(n, q))))


def check_contrastive() -> float:
    rng = seeded_rng(19, 0xC7)
    codes = _random_codes(rng, 5, 6)
    codes.requires_grad = True
    codes.name = "codes"
    labels = np.array([0, 1, 0, 2, 1])
    sim = np.clip(rng.uniform(0.2, 0.9, size=(5, 5)), 0, 1)
    sim = (sim + sim.T) / 2

    def f(p):
        return losses.contrastive_batch(p["codes"], labels, sim)

    return finite_difference_check(f, {"codes": codes})


def check_quantization() -> float:
    rng = seeded_rng(23, 0x9A)
    u = _random_codes(rng, 4, 6)
    u.requires_grad = True
    u.name = "u"

    def f(p):
        return losses.quantization_loss(p["u"])

    return finite_difference_check(f, {"u": u})


def check_cross_entropy() -> float:
    rng = seeded_rng(29, 0xCE)
    logits = Tensor(rng.normal(size=(5, 4)), requires_grad=True, name="logits")
    labels = np.array([0, 3, 1, 2, 2])

    def f(p):
        return losses.cross_entropy(p["logits"], labels)

    return finite_difference_check(f, {"logits": logits})


def check_consistency() -> float:
    rng = seeded_rng(31, 0xC5)
    a = _random_codes(rng, 4, 6)
    b = _random_codes(rng, 4, 6)
    a.requires_grad = True
    a.name = "a"
    b.requires_grad = True
    b.name = "b"

    def f(p):
        return losses.consistency_loss(p["a"], p["b"])

    return finite_difference_check(f, {"a": a, "b": b})


def check_diversity() -> float:
    rng = seeded_rng(37, 0xD1)
    codes = _random_codes(rng, 5, 6)
    codes.requires_grad = True
    codes.name = "codes"

    def f(p):
        return losses.diversity_regularizer(p["codes"])

    return finite_difference_check(f, {"codes": codes})


def gradcheck_suite() -> dict[str, float]:
    """Max relative finite-difference error per component."""
    return {
        "kan_layer": check_kan_layer(),
        "channel_attention": check_channel_attention(),
        "conv_block": check_conv_block(),
        "contrastive_loss": check_contrastive(),
        "quantization_loss": check_quantization(),
        "cross_entropy": check_cross_entropy(),
        "consistency_loss": check_consistency(),
        "diversity_regularizer": check_diversity(),
    }
