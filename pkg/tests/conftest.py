import numpy as np
import pytest

from cfdl import gradcore as gc
from cfdl.config import AblationFlags, ModelConfig
from cfdl.dmf import CfdlModel


def numeric_grads(f, params, h=1e-5):
    """Central differences of scalar f() w.r.t. every entry of every param."""
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.data[idx]
            p.data[idx] = orig + h
            up = f().item()
            p.data[idx] = orig - h
            down = f().item()
            p.data[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def analytic_grads(f, params):
    gc.zero_grads(params)
    gc.backward(f())
    return [p.grad.copy() for p in params]


def rel_error(a_list, n_list) -> float:
    a = np.concatenate([x.ravel() for x in a_list])
    n = np.concatenate([x.ravel() for x in n_list])
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def grad_check(f, params, h=1e-5) -> float:
    return rel_error(analytic_grads(f, params), numeric_grads(f, params, h))


def tiny_model(M=3, in_dim=5, dim=4, num_cls=2, flags=AblationFlags(), dropout=0.5, seed=0, jitter=False):
    """``jitter`` gives biases small random values so no ReLU input sits exactly on the kink."""
    cfg = ModelConfig(num_modalities=M, in_dim=in_dim, dim=dim, num_cls=num_cls, dropout=dropout, flags=flags)
    rng = np.random.default_rng(seed)
    model = CfdlModel(cfg, rng)
    if jitter:
        for name, p in model.named_parameters().items():
            if name.endswith(".b"):
                p.data = rng.uniform(0.05, 0.3, size=p.data.shape) * rng.choice([-1, 1], size=p.data.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
