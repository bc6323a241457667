"""Finite-difference verification of every differentiable operation.

Each registered op contributes one case: a set of (scalar function, point)
checks that together cover all of the op's differentiable inputs. Non-scalar
outputs are reduced through a fixed random linear probe so that coordinate
shuffles in a pullback cannot cancel out. Model-scope cases check the full
composed network (and its ablated variant) against finite differences, one
parameter tensor at a time plus the input image, on a deliberately tiny
configuration so that every coordinate can be perturbed.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from . import model as md
from .autodiff import Tensor, finite_difference_check
from .scenes import category_difference_vector

Check = tuple[Callable[[Tensor], Tensor], np.ndarray]

TOLERANCE = 1e-4
EPS = 1e-5


def _probe(rng: np.random.Generator, op: Callable[[Tensor], Tensor],
           point: np.ndarray) -> Check:
    coeffs = rng.normal(size=op(Tensor(point)).data.shape)
    return (lambda t: ad.weighted_sum(op(t), coeffs)), point


def _away_from_kink(x: np.ndarray, gap: float = 0.1) -> np.ndarray:
    return np.where(np.abs(x) < gap, gap * np.where(x >= 0, 1.0, -1.0), x)


def _distinct(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    # Evenly spaced shuffled values: in-window gaps far exceed 2*eps, so the
    # pooling argmax cannot flip during a finite-difference perturbation.
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) / n).reshape(shape)


def _case_relu(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    return [_probe(rng, ad.relu, _away_from_kink(rng.normal(size=(3, 4))))]


def _case_sigmoid(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    return [_probe(rng, ad.sigmoid, rng.normal(size=(3, 4)))]


def _case_scale_channels(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 4, 3))
    gate = rng.normal(size=(2, 3))
    return [
        _probe(rng, lambda t: ad.scale_channels(t, Tensor(gate)), x),
        _probe(rng, lambda t: ad.scale_channels(Tensor(x), t), gate),
    ]


def _case_fully_connected(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 5))
    b = rng.normal(size=5)
    return [
        _probe(rng, lambda t: ad.fully_connected(t, Tensor(w), Tensor(b)), x),
        _probe(rng, lambda t: ad.fully_connected(Tensor(x), t, Tensor(b)), w),
        _probe(rng, lambda t: ad.fully_connected(Tensor(x), Tensor(w), t), b),
    ]


def _case_conv2d(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 6, 6, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)

    def conv(xs, ks, bs):
        return ad.conv2d(xs, ks, bs, stride=2, padding=1)

    return [
        _probe(rng, lambda t: conv(t, Tensor(k), Tensor(b)), x),
        _probe(rng, lambda t: conv(Tensor(x), t, Tensor(b)), k),
        _probe(rng, lambda t: conv(Tensor(x), Tensor(k), t), b),
    ]


def _case_maxpool2(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    return [_probe(rng, ad.maxpool2, _distinct(rng, (2, 4, 6, 3)))]


def _case_global_avg_pool(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    return [_probe(rng, ad.global_avg_pool, rng.normal(size=(2, 3, 4, 5)))]


def _case_concat_channels(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(2, 3, 3, 2))
    b = rng.normal(size=(2, 3, 3, 4))
    return [
        _probe(rng, lambda t: ad.concat_channels(t, Tensor(b)), a),
        _probe(rng, lambda t: ad.concat_channels(Tensor(a), t), b),
    ]


def _case_flatten_map(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    return [_probe(rng, ad.flatten_map, rng.normal(size=(2, 3, 4, 2)))]


def _case_tile_vector(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    return [_probe(rng, lambda t: ad.tile_vector(t, 3), rng.normal(size=(2, 5)))]


def _case_dropout(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    op = lambda t: ad.dropout(t, 0.4, "train", seed)  # noqa: E731
    return [_probe(rng, op, rng.normal(size=(4, 6)))]


def _case_softmax_cross_entropy(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 7, size=3)
    return [((lambda t: ad.softmax_cross_entropy(t, labels)),
             rng.normal(size=(3, 7)))]


def _case_weighted_sum(seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    coeffs = rng.normal(size=(4, 3))
    return [((lambda t: ad.weighted_sum(t, coeffs)), rng.normal(size=(4, 3)))]


OP_CASES: dict[str, Callable[[int], list[Check]]] = {
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "scale_channels": _case_scale_channels,
    "fully_connected": _case_fully_connected,
    "conv2d": _case_conv2d,
    "maxpool2": _case_maxpool2,
    "global_avg_pool": _case_global_avg_pool,
    "concat_channels": _case_concat_channels,
    "flatten_map": _case_flatten_map,
    "tile_vector": _case_tile_vector,
    "dropout": _case_dropout,
    "softmax_cross_entropy": _case_softmax_cross_entropy,
    "weighted_sum": _case_weighted_sum,
}


# ---------------------------------------------------------------------------
# composed-model checks

TINY_CONFIG = md.ModelConfig(
    input_resolution=8, vin_channels=(2, 2, 2), oln_hidden=3, oln_out=1,
    reduction=2, classifier_hidden=(4, 3), dropout_rate=0.5,
    num_predicates=3, num_categories=4)


def model_checks(seed: int, ablate_sil: bool) -> list[Check]:
    """Loss gradient checks for every parameter tensor and the input image.

    Eval-mode forward so dropout cannot perturb the finite differences.
    Parameters are nudged into general position (zero-initialized biases
    would park relu pre-activations exactly on the kink, where central
    differences are meaningless); pooling argmaxes are then stable for the
    pinned seeds too.
    """
    cfg = TINY_CONFIG
    rng = np.random.default_rng(seed)
    params = md.init_params(cfg, seed, ablate_sil)
    for t in params.values():
        t.data = t.data + rng.normal(0.0, 0.3, size=t.data.shape)
    x0 = rng.normal(size=(cfg.input_resolution, cfg.input_resolution, 5))
    diff = category_difference_vector(1, 3, cfg.num_categories)
    label = 1

    def loss_with(name: str | None):
        def f(t: Tensor) -> Tensor:
            p = dict(params)
            if name is None:
                x = t
            else:
                x = Tensor(x0)
                p = {**params, name: t}
            if ablate_sil:
                logits = md.ablated_forward(x, p, cfg, "eval")
            else:
                logits = md.full_forward(x, Tensor(diff), p, cfg, "eval")
            return ad.softmax_cross_entropy(logits, label)
        return f

    checks: list[Check] = [(loss_with(None), x0)]
    for name, tensor in params.items():
        checks.append((loss_with(name), tensor.data))
    return checks


MODEL_CASES: dict[str, Callable[[int], list[Check]]] = {
    "full_model": lambda seed: model_checks(seed, ablate_sil=False),
    "cf_model": lambda seed: model_checks(seed, ablate_sil=True),
}


def run_cases(cases: dict[str, Callable[[int], list[Check]]],
              seeds: int = 10, eps: float = EPS,
              base_seed: int = 0) -> list[tuple[str, float]]:
    """Max relative error per case across the given number of random seeds."""
    results = []
    for name, builder in cases.items():
        worst = 0.0
        for seed in range(base_seed, base_seed + seeds):
            for f, point in builder(seed):
                worst = max(worst, finite_difference_check(f, point, eps))
        results.append((name, worst))
    return results
