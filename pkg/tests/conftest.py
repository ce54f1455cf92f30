import re

import pytest

from protoda.base_model import train_base
from protoda.config import BaseConfig, TrainConfig, resolve
from protoda.datasets import SyntheticSpec, TargetShift, generate_synthetic_pair
from protoda.inspection import fidelity_ablation
from protoda.trainer import run_protocol

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)")
_results = {}


def synthetic_config():
    return resolve(profile="synthetic")


def synthetic_pair_from(cfg):
    d = cfg.data
    shift = TargetShift(d.hue_degrees, d.noise_sigma, d.background_texture)
    return generate_synthetic_pair(SyntheticSpec(d.n_classes, d.per_class, d.seed, shift, d.image_size))


@pytest.fixture(scope="session")
def tiny_pair():
    return generate_synthetic_pair(SyntheticSpec(n_classes=3, per_class=6, seed=3, image_size=32))


SMALL = TrainConfig(K=2, batch_size=8, epochs=4, push_every=2, last_layer_iters=2, gamma=10.0)


@pytest.fixture(scope="session")
def tiny_base(tiny_pair):
    return train_base(tiny_pair, BaseConfig(epochs=3, batch_size=8))


@pytest.fixture(scope="session")
def tiny_model(tiny_base, tiny_pair):
    """A pushed interpretive model on the tiny pair (3 classes, K=2)."""
    return run_protocol(tiny_base, tiny_pair, SMALL)


@pytest.fixture(scope="session")
def synthetic_run(tmp_path_factory):
    """The seeded 5-class synthetic pipeline, trained once per session: base
    model plus the interpretive model with the configured fidelity weight and
    with it switched off."""
    cfg = synthetic_config()
    pair = synthetic_pair_from(cfg)
    base = train_base(pair, cfg.base)
    out = tmp_path_factory.mktemp("synthetic_run")
    ablation = fidelity_ablation(base, pair, cfg.interp, out_dir=out)
    return dict(cfg=cfg, pair=pair, base=base, out=out, full=ablation["full"],
                no_fidelity=ablation["no_fidelity"], model=ablation["full"]["model"])


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        prev = _results.get(n, ("PASS", m.group(2)))
        _results[n] = ("PASS" if report.passed and prev[0] == "PASS" else "FAIL", m.group(2))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, name = _results[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {name.replace('_', ' ')}")
