import numpy as np
import pytest

from viptr.backbone import VariantConfig
from viptr.tensor import Tensor, no_grad

GRAD_SEEDS = list(range(20))


def randomize(module, rng, scale=0.3):
    """Replace every parameter with N(0, scale) noise (float64) so no path is trivially zero."""
    module.astype(np.float64)
    for p in module.parameters():
        p.data = rng.normal(0.0, scale, p.shape)
        p.grad = np.zeros_like(p.data)
    return module


def weighted_sum(y, weights):
    return (y * Tensor(weights)).sum()


def input_grad_error(fn, x, rng, eps=1e-5):
    """Relative error of d/dx sum(fn(x) * R) for a fixed random R."""
    from viptr.tensor import finite_diff_check
    with no_grad():
        shape = fn(Tensor(x)).shape
    R = rng.normal(size=shape)
    return finite_diff_check(lambda t: weighted_sum(fn(t), R), x, eps=eps)


def param_grad_error(module, fn, x, rng, per_param=3, eps=1e-5):
    """Relative error of parameter gradients, sampled ``per_param`` entries per tensor."""
    with no_grad():
        shape = fn(Tensor(x)).shape
    R = rng.normal(size=shape)
    module.zero_grad()
    weighted_sum(fn(Tensor(x)), R).backward()
    worst = 0.0
    # floor relative to the largest gradient anywhere in the module, as in finite_diff_check
    floor = 1e-6 * max(1.0, max(float(np.abs(p.grad).max()) for p in module.parameters()))
    for name, p in module.named_parameters():
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
            old = flat[i]
            with no_grad():
                flat[i] = old + eps
                fp = float(weighted_sum(fn(Tensor(x)), R).data)
                flat[i] = old - eps
                fm = float(weighted_sum(fn(Tensor(x)), R).data)
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            scale = max(abs(a), abs(num), floor)
            err = abs(a - num) / scale
            if err > worst:
                worst = err
    return worst


def toy_config(permutation="[L1][L1//G2][G1]", **kw):
    base = dict(channels=[16, 16, 32, 16], depths=[1, 1, 1, 1], heads=[2, 2, 2, 2],
                permutation=permutation, num_classes=11, ffn_ratio=2.0)
    base.update(kw)
    return VariantConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
