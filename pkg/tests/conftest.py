import numpy as np
import pytest

from ntldfkd import ntl
from ntldfkd.domains import ToySpec, make_toy_domains

# central-difference gradient checking used across the suite
FD_H = 1e-5
FD_TOL = 1e-4


def fd_max_rel_err(loss_fn, arrays, analytic_grads, h=FD_H):
    """Worst relative error between analytic gradients and central
    differences, perturbing every entry of every array in ``arrays``."""
    worst = 0.0
    for arr, grad in zip(arrays, analytic_grads):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            up = loss_fn()
            arr[idx] = old - h
            down = loss_fn()
            arr[idx] = old
            num = (up - down) / (2.0 * h)
            err = abs(num - grad[idx]) / max(1e-6, abs(num) + abs(grad[idx]))
            worst = max(worst, err)
    return worst


@pytest.fixture(scope="session")
def toy_pair():
    return make_toy_domains(ToySpec(seed=0))


@pytest.fixture(scope="session")
def teacher_cache(toy_pair):
    """Lazily trained teachers shared across test modules, keyed by
    (variant, use_bn, seed)."""
    cache = {}

    def get(variant, use_bn=True, seed=0, epochs=60):
        key = (str(variant), use_bn, seed)
        if key not in cache:
            cfg = ntl.NtlConfig(
                epochs=epochs,
                batch_size=128,
                eval_every=0,
                use_bn=use_bn,
                seed=seed,
            )
            cache[key] = ntl.train_teacher(variant, toy_pair, cfg)
        return cache[key]

    return get
