import numpy as np
import pytest
import torch

from rdft.autodiff import backward, finite_difference_gradient


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    # floor at finite-difference round-off level so exactly-zero gradients compare sanely
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-4)
    return float(np.linalg.norm(a - b) / scale)


def grad_check(fn, inputs, wrt, eps=1e-5):
    """Relative error between autograd and central differences of scalar ``fn``.

    ``inputs`` is a list of float64 numpy arrays, ``wrt`` the index checked.
    """
    tensors = [torch.tensor(x, dtype=torch.float64, requires_grad=(i == wrt))
               for i, x in enumerate(inputs)]
    (analytic,) = backward(fn(*tensors), [tensors[wrt]])

    def f(p):
        args = [torch.tensor(x, dtype=torch.float64) for x in inputs]
        args[wrt] = torch.tensor(p, dtype=torch.float64)
        with torch.no_grad():
            return float(fn(*args))

    numeric = finite_difference_gradient(f, inputs[wrt], eps)
    return rel_err(analytic.numpy(), numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def blob_dataset(n_classes=4, per_class=12, shape=(1, 16, 16), spread=0.3, seed=0):
    """Each class is a fixed random image plus isotropic Gaussian noise."""
    from rdft.episodes import FewShotDataset
    r = np.random.default_rng(seed)
    centers = r.standard_normal((n_classes, *shape))
    feats = np.concatenate([c + spread * r.standard_normal((per_class, *shape)) for c in centers])
    labels = tuple(f"b{i // per_class}" for i in range(n_classes * per_class))
    return FewShotDataset(feats.astype(np.float32), labels)


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Record one acceptance line (shown in the terminal summary) and fail if not ``ok``."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
