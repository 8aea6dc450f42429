"""Shared fixtures: toy networks, and a trained MNIST model when the IDX files exist."""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from deepfault.model_io import DATA_DIR_ENV, load_mnist, mnist_paths
from deepfault.network import Network

DEFAULT_DATA_DIRS = (Path("/root/data/mnist"), Path(__file__).resolve().parents[1] / "data" / "mnist")

# criterion id -> (description, passed, detail); printed after the run
ACCEPTANCE_RESULTS = {}


def find_mnist():
    candidates = []
    if os.environ.get(DATA_DIR_ENV):
        candidates.append(Path(os.environ[DATA_DIR_ENV]))
    candidates.extend(DEFAULT_DATA_DIRS)
    for root in candidates:
        try:
            mnist_paths(root, "train")
            mnist_paths(root, "test")
        except FileNotFoundError:
            continue
        return root
    return None


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_RESULTS):
        name, passed, detail = ACCEPTANCE_RESULTS[cid]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {cid:>2}. {name}: {detail}")


@pytest.fixture
def identity_net():
    """Two inputs, one hidden layer with identity weights, two outputs."""
    return Network([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)])


@pytest.fixture(scope="session")
def mnist_dir():
    root = find_mnist()
    if root is None:
        pytest.skip(f"MNIST IDX files not found; run scripts/fetch_mnist.py or set ${DATA_DIR_ENV}")
    return root


@pytest.fixture(scope="session")
def mnist_test(mnist_dir):
    return load_mnist(mnist_dir, "test")


@pytest.fixture(scope="session")
def mnist_train(mnist_dir):
    return load_mnist(mnist_dir, "train")


@pytest.fixture(scope="session")
def mnist_model(mnist_train, mnist_test):
    """The 8x20 model with default training settings, plus its loss history and accuracy."""
    from deepfault.trainer import LossHistory, TrainConfig, evaluate_accuracy, train

    history = LossHistory(mnist_train)
    t0 = time.perf_counter()
    net = train(mnist_train, TrainConfig(), num_classes=10, on_epoch=history)
    elapsed = time.perf_counter() - t0
    return {
        "net": net,
        "losses": history.losses,
        "regressions": history.regressions(),
        "test_accuracy": evaluate_accuracy(net, mnist_test),
        "train_seconds": elapsed,
    }


@pytest.fixture(scope="session")
def mnist_experiment(mnist_model, mnist_test):
    """Per-class synthesis with every measure and k, plus five stratified random runs at k=10."""
    from deepfault.spectrum import analyze
    from deepfault.suspiciousness import Measure, identify
    from deepfault.synthesis import SynthesisConfig, synthesize_batch

    net = mnist_model["net"]
    cfg = SynthesisConfig(step=1.0, d=0.1, per_class_count=10)
    t0 = time.perf_counter()
    tables = {c: analyze(net, mnist_test, c) for c in range(10)}
    measures = {"tarantula": Measure.tarantula(), "ochiai": Measure.ochiai(),
                "dstar": Measure.dstar()}
    runs, run_seconds = {}, {}

    def synthesize_all(m, k):
        start = time.perf_counter()
        results = []
        for c in range(10):
            report = identify(net, tables[c], m, k)
            results.extend(synthesize_batch(net, mnist_test, report, cfg))
        return results, time.perf_counter() - start

    for name, m in measures.items():
        for k in (1, 2, 3, 5, 10):
            runs[name, k], run_seconds[name, k] = synthesize_all(m, k)
    for seed in range(5):
        runs["random", seed], run_seconds["random", seed] = synthesize_all(Measure.random(seed=seed), 10)
    return {"runs": runs, "run_seconds": run_seconds, "tables": tables,
            "seconds": time.perf_counter() - t0}

