import numpy as np
import pytest

from sadtlab.nn import Model, ParamSet


def finite_diff_grads(loss_fn, params: ParamSet, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient oracle, independent of the tape."""
    out = {}
    for entry in params.entries:
        arr = entry.tensor.data
        grad = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            saved = arr[ix]
            arr[ix] = saved + h
            f_plus = loss_fn()
            arr[ix] = saved - h
            f_minus = loss_fn()
            arr[ix] = saved
            grad[ix] = (f_plus - f_minus) / (2 * h)
        out[entry.name] = grad
    return out


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_conv_model():
    """1-conv CNN (conv -> pool -> dense), small enough for exhaustive FD."""
    gen = np.random.default_rng(7)
    named = [
        ("conv1.weight", gen.uniform(-0.5, 0.5, (2, 1, 3, 3))),
        ("conv1.bias", gen.uniform(-0.5, 0.5, 2)),
        ("dense1.weight", gen.uniform(-0.5, 0.5, (2 * 4 * 4, 3))),
        ("dense1.bias", gen.uniform(-0.5, 0.5, 3)),
    ]
    return Model("simple_cnn", ParamSet.from_named_arrays(named), (1, 8, 8))
