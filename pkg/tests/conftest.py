import numpy as np
import pytest

from snnse.model import ModelConfig

TINY = ModelConfig(
    bins=8,
    encoder=((3, 3, 1), (4, 3, 2)),
    decoder=((3, 3),),
    readout_kernel=3,
)

SMALL = ModelConfig(
    bins=33,
    encoder=((4, 3, 1), (6, 3, 2), (8, 3, 2)),
    decoder=((6, 3), (4, 3)),
    readout_kernel=3,
)


def central_diff(f, arr, eps=1e-6):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), np.linalg.norm(a), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def network_fd_errors(cfg: ModelConfig, T: int = 4, seed: int = 0, eps: float = 1e-6):
    """Relative error between tape gradients and central differences for every parameter tensor.

    Runs the whole network in float64 with the given config (which should set
    ``relax=True`` and ``detach_reset=False`` for the comparison to be exact).
    """
    from snnse.engine import Tape, lsd_loss
    from snnse.model import NormalizationStats, build_unet

    rng = np.random.default_rng(seed)
    model = build_unet(cfg, seed=seed, dtype=np.float64, norm=NormalizationStats(-2.0, 1.5))
    noisy = rng.normal(-2.0, 1.5, (T, 2, cfg.bins))
    clean = rng.normal(-2.0, 1.5, (T, 2, cfg.bins))
    with Tape() as tape:
        est, _ = model.forward(noisy)
        loss = lsd_loss(est, clean)
    grads = tape.backward(loss)

    def f():
        return float(lsd_loss(model.forward(noisy)[0], clean).data)

    errors = {}
    for name, t in model.named_params().items():
        errors[name] = rel_err(grads[t], central_diff(f, t.data, eps))
    return errors


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
