import numpy as np
import pytest

from groupclip.nn import mlp


def random_mlp(rng, depth=None, max_width=32, activation=None, d_in=None, d_out=None):
    depth = depth or int(rng.integers(1, 5))
    widths = [d_in or int(rng.integers(2, max_width + 1))]
    widths += [int(rng.integers(2, max_width + 1)) for _ in range(depth - 1)]
    widths.append(d_out or int(rng.integers(2, 6)))
    act = activation or ("relu", "tanh")[int(rng.integers(2))]
    model = mlp(widths, act, rng)
    for lin in model.linears:
        lin.b[...] = rng.standard_normal(lin.b.shape) * 0.1
    return model


def random_batch(rng, model, batch=None, seq=None):
    B = batch or int(rng.integers(1, 17))
    d_in = model.linears[0].in_features
    classes = model.linears[-1].out_features
    if seq:
        return rng.standard_normal((B, seq, d_in)), rng.integers(0, classes, (B, seq))
    return rng.standard_normal((B, d_in)), rng.integers(0, classes, B)


def random_partition(model, rng, K=None):
    """Random consecutive partition with at least one Linear layer per device."""
    n_lin = len(model.linears)
    K = K or int(rng.integers(1, n_lin + 1))
    cuts = sorted(rng.choice(np.arange(1, n_lin), size=K - 1, replace=False)) if K > 1 else []
    # cut right after Linear number c-1's activation, i.e. before Linear c
    bounds = [0] + [model.linear_positions[c] for c in cuts] + [len(model.layers)]
    return tuple(int(b - a) for a, b in zip(bounds, bounds[1:]))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    import test_acceptance as acc

    outcomes = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            name = getattr(rep, "nodeid", "").split("::")[-1]
            if rep.nodeid.startswith("tests/test_acceptance.py") or "test_acceptance.py::" in rep.nodeid:
                if rep.when == "call" or status != "passed":
                    outcomes[name] = "PASS" if status == "passed" else "FAIL"
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(outcomes):
        n = int(name.split("_")[2])
        terminalreporter.write_line(f"criterion {n:>2}: {outcomes[name]}  {acc.DETAILS.get(n, '')}")
