import numpy as np
import pytest

import tensor_core as tc
from config import load_config


def numeric_grad(fn, tensor, eps=1e-6):
    """Diferenças centrais (f64) de fn() em relação a tensor.data."""
    return tc.numeric_gradient(fn, tensor, eps)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(1e-3, np.max(np.abs(a)), np.max(np.abs(b))))


def analytic_grad(fn, tensors):
    """Roda fn() sob um Graph e devolve os gradientes dos tensores informados."""
    tc.zero_grad(tensors)
    with tc.Graph() as g:
        out = fn()
    g.backward(out)
    return [t.grad.copy() if t.grad is not None else np.zeros(t.shape) for t in tensors]


def check_grads(fn, tensors, tol=1e-5, eps=1e-6):
    """Compara o backward com diferenças finitas para cada tensor; devolve o pior erro relativo."""
    grads = analytic_grad(fn, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        num = numeric_grad(lambda: fn().item(), t, eps)
        worst = max(worst, rel_err(g, num))
    assert worst < tol, f"erro relativo {worst:.2e} >= {tol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg(tmp_path):
    """Configuração mínima: treina em segundos."""
    return load_config(overrides={
        "N": 1, "S": 2, "T": 8, "C": 8, "heads": 2, "k": 3, "s": 2, "crop": 16,
        "visual_widths": "4,4,4", "audio_widths": "2,2,4,4", "tcn_blocks": 1, "mlp_ratio": 2,
        "epochs": 1, "batch_size": 2, "lr": 1e-3, "n_train": 2, "n_val": 1, "scene_frames": 8,
        "num_people_min": 2, "num_people_max": 3, "off_screen_prob": 0.0, "workers": 2,
        "dataset": str(tmp_path / "data"), "out": str(tmp_path / "runs"),
        "checkpoint": str(tmp_path / "runs" / "model.lcnt"),
    })


def check_grads_sampled(fn, tensors, n=12, tol=1e-4, eps=1e-6, seed=0):
    """Como check_grads, mas só em n entradas sorteadas de cada tensor (modelos grandes)."""
    grads = analytic_grad(fn, tensors)
    pick = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        idx = pick.choice(flat.size, size=min(n, flat.size), replace=False)
        num = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + eps
            up = fn().item()
            flat[i] = old - eps
            down = fn().item()
            flat[i] = old
            num[j] = (up - down) / (2 * eps)
        worst = max(worst, rel_err(g.reshape(-1)[idx], num))
    assert worst < tol, f"erro relativo {worst:.2e} >= {tol}"
    return worst
