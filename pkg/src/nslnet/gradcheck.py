"""Central finite-difference checks of every backward pass (double precision)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import layers as L
from .nn.graph import build_digit_net
from .nsl import NslConfig, nsl_backward, nsl_forward, square_neighborhood

H = 1e-5
TOLERANCE = 1e-4
SCOPES = ("nsl", "conv", "fc", "softmax", "full-net")


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = H, index=None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place (restored afterwards)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if index is None else index:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


@dataclass
class CheckResult:
    scope: str
    trials: int
    max_rel_error: float
    resampled: int = 0  # probes that needed a smaller step or a redraw to avoid a ReLU or max-pool switch

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def check_nsl(trials: int = 100, seed: int = 0, corrupt: bool = False) -> CheckResult:
    """Random shapes up to 2x4x8x8 and 3x3 / 5x5 neighborhoods, both kernels."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        cfg = NslConfig(square_neighborhood(int(rng.choice([3, 5]))))
        method = ("gram", "sweep")[t % 2]
        phi = rng.normal(size=shape)
        up = rng.normal(size=(shape[0], cfg.neighborhood.m) + shape[2:])
        _, cache = nsl_forward(phi, cfg, method=method)
        analytic = nsl_backward(up, cache, cfg)
        if corrupt:
            analytic = analytic * 1.01
        numeric = numeric_grad(lambda: float(np.sum(nsl_forward(phi, cfg, method=method)[0] * up)), phi)
        worst = max(worst, rel_error(analytic, numeric))
    return CheckResult("nsl", trials, worst)


def _check_layer(name, make, in_shape, trials, seed, corrupt, n_inputs=1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        layer = make(rng)
        layer.init_params(rng, np.float64)
        for k in layer.params:
            layer.params[k] = layer.params[k] + rng.normal(scale=0.1, size=layer.params[k].shape)
        x = rng.normal(size=in_shape)
        y = layer.forward(x)
        up = rng.normal(size=y.shape)
        dx = layer.backward(up)
        if corrupt:
            dx = dx * 1.01

        def loss():
            return float(np.sum(layer.forward(x) * up))

        worst = max(worst, rel_error(dx, numeric_grad(loss, x)))
        for k, p in layer.params.items():
            worst = max(worst, rel_error(layer.grads[k], numeric_grad(loss, p)))
    return CheckResult(name, trials, worst)


def check_conv(trials: int = 5, seed: int = 0, corrupt: bool = False) -> CheckResult:
    return _check_layer("conv", lambda rng: L.Conv2D(2, 3, 3), (2, 2, 6, 5), trials, seed, corrupt)


def check_fc(trials: int = 5, seed: int = 0, corrupt: bool = False) -> CheckResult:
    return _check_layer("fc", lambda rng: L.Dense(7, 4), (3, 7), trials, seed, corrupt)


def check_softmax(trials: int = 20, seed: int = 0, corrupt: bool = False) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        logits = rng.normal(scale=3, size=(5, 10))
        labels = rng.integers(0, 10, size=5)
        _, grad = L.softmax_nll_loss(logits, labels)
        if corrupt:
            grad = grad * 1.01
        numeric = numeric_grad(lambda: L.softmax_nll_loss(logits, labels)[0], logits)
        worst = max(worst, rel_error(grad, numeric))
    return CheckResult("softmax", trials, worst)


KINK_STEPS = (H, 1e-6, 1e-7, 1e-8)


def check_full_net(trials: int = 2, seed: int = 0, corrupt: bool = False, with_nin: bool = False,
                   coords_per_block: int = 8, max_redraws: int = 20) -> CheckResult:
    """Digit net with the similarity layer on one 1x28x28 input, double precision.

    Each trial compares a random directional derivative for every parameter
    block and for the input, plus ``coords_per_block`` single coordinates per block.
    A probe whose +h or -h evaluation selects a different ReLU or max-pool branch
    than the unperturbed point measures a kink, not the derivative: the step is
    shrunk through ``KINK_STEPS`` and, failing that, the probe is redrawn.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    resampled = 0
    for t in range(trials):
        net = build_digit_net(with_nsl=True, with_nin=with_nin, precision="double", seed=seed + t)
        x = rng.random((1, 1, 28, 28))
        label = rng.integers(0, 10, size=1)
        relu_ids = [s.id for s in net.specs if s.kind == "relu"]
        pools = [l for l in net.layers if l.kind == "maxpool"]

        def evaluate():
            acts = net.activations(x, relu_ids)
            loss = L.softmax_nll_loss(net.logits(x), label)[0]
            return loss, [acts[i] > 0 for i in relu_ids] + [p._arg.copy() for p in pools]

        _, base = evaluate()

        def probe(p, direction):
            """Central difference along ``direction``, or None if every step straddles a switch."""
            nonlocal resampled
            for k, h in enumerate(KINK_STEPS):
                resampled += k == 1
                p += h * direction
                fp, sp = evaluate()
                p -= 2 * h * direction
                fm, sm = evaluate()
                p += h * direction
                if all(np.array_equal(a, b) and np.array_equal(a, c) for a, b, c in zip(sp, sm, base)):
                    return (fp - fm) / (2 * h)
            return None

        _, d_logits = L.softmax_nll_loss(net.logits(x), label)
        dx = net.backward(d_logits)
        grads = {k: g.copy() for k, g in net.grads.items()}
        if corrupt:
            grads = {k: g * 1.01 for k, g in grads.items()}
            dx = dx * 1.01
        blocks = dict(net.params, input=x)
        grads["input"] = dx
        for name, p in blocks.items():
            g = grads[name].reshape(-1)
            for _ in range(max_redraws):
                d = rng.normal(size=p.shape)
                numeric = probe(p, d)
                if numeric is not None:
                    worst = max(worst, rel_error(float(np.sum(grads[name] * d)), numeric))
                    break
                resampled += 1
            else:
                worst = np.inf
            flat = p.reshape(-1)
            checked = 0
            for i in rng.permutation(p.size):
                if checked == min(coords_per_block, p.size):
                    break
                unit = np.zeros(p.size)
                unit[i] = 1.0
                numeric = probe(flat, unit)
                if numeric is None:
                    resampled += 1
                    continue
                worst = max(worst, rel_error(g[i], numeric))
                checked += 1
    return CheckResult("full-net", trials, worst, resampled)


CHECKS = {
    "nsl": check_nsl,
    "conv": check_conv,
    "fc": check_fc,
    "softmax": check_softmax,
    "full-net": check_full_net,
}
