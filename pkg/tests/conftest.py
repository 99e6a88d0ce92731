import pytest
import torch

from cclnet.data import write_synthetic_corpus
from cclnet.losses import FeatureExtractor


def central_difference(fn, tensor: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn()`` w.r.t. every entry of ``tensor``."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    gflat = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            plus = float(fn())
            flat[i] = orig - eps
            minus = float(fn())
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / denom


def check_gradients(fn, tensors: dict, eps: float = 1e-6) -> dict:
    """Compare autograd against central differences; returns name -> rel. error."""
    for t in tensors.values():
        t.grad = None
    fn().backward()
    errors = {}
    for name, t in tensors.items():
        analytic = t.grad.detach().clone()
        numeric = central_difference(fn, t, eps)
        errors[name] = relative_error(analytic, numeric)
    return errors


@pytest.fixture(scope="session")
def extractor():
    return FeatureExtractor(seed=0, use_env=False)


@pytest.fixture(scope="session")
def extractor64():
    return FeatureExtractor(seed=0, use_env=False).double()


@pytest.fixture
def corpus(tmp_path):
    return write_synthetic_corpus(tmp_path / "corpus", 3, "greenish", seed=0, size=32)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request, capsys):
    """Print one PASS/FAIL line per acceptance criterion, also echoed in the summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(criterion: str, status, detail: str = "") -> None:
        if isinstance(status, bool):
            status = "PASS" if status else "FAIL"
        line = f"[acceptance] {criterion}: {status}" + (f" ({detail})" if detail else "")
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
