import warnings

import numpy as np
import pytest
import torch

from ibmea.mmkg import NoiseSpec, generate_synthetic_task
from ibmea.training import ModelConfig, TrainConfig

warnings.filterwarnings("ignore", message="Converting a tensor with requires_grad=True")


def finite_difference_check(loss_fn, params, h=1e-5, n_coords=12, seed=0):
    """Largest normwise relative error between autograd and central differences.

    For each named parameter, compares gradients on ``n_coords`` coordinates
    (the largest-magnitude ones plus random ones). Returns (max error, per-name errors).
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    errors = {}
    for name, p in params.items():
        grad = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        flat = grad.reshape(-1)
        k = min(n_coords, flat.numel())
        top = torch.topk(flat.abs(), k // 2).indices.tolist() if k // 2 else []
        rand = rng.choice(flat.numel(), size=k - len(top), replace=False).tolist()
        coords = sorted(set(top + rand))
        analytic, numeric = [], []
        data = p.data.view(-1)
        with torch.no_grad():
            for i in coords:
                old = data[i].item()
                data[i] = old + h
                up = loss_fn().item()
                data[i] = old - h
                down = loss_fn().item()
                data[i] = old
                numeric.append((up - down) / (2 * h))
                analytic.append(flat[i].item())
        a, n = np.array(analytic), np.array(numeric)
        scale = max(np.abs(a).max(), np.abs(n).max())
        errors[name] = 0.0 if scale < 1e-12 else float(np.abs(a - n).max() / scale)
    return max(errors.values()), errors


def tiny_model_config(**kw):
    base = dict(d_g=8, graph_hidden=8, graph_out=6, modal_out=5, fusion_dim=4, heads=2, d_a=6, d_r=4, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def task20():
    return generate_synthetic_task(20, 4, 8, 6, 0.15, NoiseSpec(0.1, 0.1, 0.3), 0.5, 3)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(epochs=5, model=tiny_model_config(), eval_every=1)


ACCEPTANCE_LINES = []


def report_criterion(number, name, ok, detail):
    line = f"[criterion {number}] {'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
