import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from idld.model import DynamicEncoder, ModelConfig, SelectorConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_model(task="classification", n_layers=3, selector=True, ee=False, seed=0, d_in=5, n_out=4,
                d_model=8, max_len=32):
    cfg = ModelConfig(n_layers=n_layers, d_model=d_model, num_heads=2, d_ff=12, d_in=d_in, n_out=n_out,
                      task=task, max_len=max_len,
                      selector=SelectorConfig(kernel_width=3, channels=4, pooled_len=2) if selector else None,
                      ee_enabled=ee)
    return DynamicEncoder(cfg, np.random.default_rng(seed))


def tiny_raw(mode="idld", seed=0, epochs=1, task="classification", **train):
    """Smallest experiment config that still exercises every code path."""
    synth = {"task": task, "num_train": 48, "num_dev": 16, "num_test": 24, "seed": 3}
    if task == "classification":
        synth.update({"d_in": 9, "seq_len": [8, 12], "span_len": [3, 5]})
    else:
        synth.update({"d_in": 8, "vocab_size": 4})
    return {
        "seed": seed,
        "model": {"n_layers": 3, "d_model": 8, "num_heads": 2, "d_ff": 12,
                  "selector": {"kernel_width": 3, "channels": 4, "pooled_len": 2}},
        "data": {"synth": synth},
        "train": {"mode": mode, "epochs": epochs, "batch_size": 16, **train},
        "optim": {"schedule": {"peak_lr": 1e-3, "warmup_steps": 2, "decay_every": 10, "decay_rate": 0.9}},
    }


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Final checkpoints of one tiny run per training mode."""
    from idld import harness
    from idld.config import config_from_dict

    out = {}
    for mode in ("idld", "rd", "ee", "static"):
        d = tmp_path_factory.mktemp(mode)
        out[mode] = harness.train(config_from_dict(tiny_raw(mode)), d).final_checkpoint
    return out


# ----------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run
# ----------------------------------------------------------------------

_CRITERIA = {}


def pytest_runtest_logreport(report):
    marker = dict(report.user_properties).get("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[marker] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
