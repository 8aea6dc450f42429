"""Suspiciousness-guided input synthesis.

A correctly classified input is moved one step along the mean input-gradient
of the suspicious neurons. The step is scaled, clipped per dimension to an
L-infinity budget, and finally clamped to the input domain.

By default each neuron's gradient is divided by its root-mean-square before
averaging. Raw activation gradients of a trained MNIST network are mostly far
below the 0.1 budget, so without this the step barely moves the input;
``gradient_normalization="none"`` keeps the raw gradients.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from deepfault.errors import ArgumentError, PreconditionError, SynthesisError
from deepfault.network import (
    ForwardTrace,
    LabeledInput,
    Network,
    NeuronId,
    PROBABILITY_FLOOR,
    as_dataset,
    forward,
    input_gradient,
    neuron_value,
)
from deepfault.spectrum import ALL_CLASSES
from deepfault.suspiciousness import SuspiciousnessReport

NORMALIZATIONS = ("rms", "none")

SYNTH_CSV_HEADER = ("class", "index", "L1", "L2", "Linf", "original_pred", "synth_pred",
                    "original_loss", "synth_loss")


class SynthesisWarning(UserWarning):
    """A class had fewer correctly classified candidates than requested."""


@dataclass(frozen=True)
class SynthesisConfig:
    step: float = 1.0
    d: float = 0.1
    domain_min: object = 0.0
    domain_max: object = 1.0
    per_class_count: int = 10
    gradient_normalization: str = "rms"

    def __post_init__(self):
        if not self.step > 0:
            raise ArgumentError(f"step must be > 0, got {self.step}")
        if not 0 < self.d <= 1:
            raise ArgumentError(f"d must lie in (0, 1], got {self.d}")
        if np.any(np.asarray(self.domain_min) >= np.asarray(self.domain_max)):
            raise ArgumentError("domain_min must be below domain_max in every dimension")
        if self.per_class_count < 1:
            raise ArgumentError(f"per_class_count must be >= 1, got {self.per_class_count}")
        if self.gradient_normalization not in NORMALIZATIONS:
            raise ArgumentError(f"gradient_normalization must be one of {NORMALIZATIONS}")

    @property
    def max_perturbation(self):
        """Per-dimension L-infinity budget, ``d * (domain_max - domain_min)``."""
        return self.d * (np.asarray(self.domain_max, dtype=np.float64)
                         - np.asarray(self.domain_min, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class SynthesisResult:
    original: LabeledInput
    synthesized: np.ndarray
    original_trace: ForwardTrace
    synthesized_trace: ForwardTrace
    suspicious: tuple
    per_suspicious_neuron_delta: tuple
    distances: tuple
    index: Optional[int] = None

    @property
    def label(self):
        return self.original.label

    @property
    def still_correct(self):
        return self.synthesized_trace.predicted_class == self.original.label

    def loss(self, synthesized=True):
        trace = self.synthesized_trace if synthesized else self.original_trace
        p = trace.output_probabilities[self.original.label]
        return float(-np.log(max(p, PROBABILITY_FLOOR)))


def lp_distances(a, b):
    """``(L1, L2, Linf)`` norms of ``a - b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ArgumentError(f"vectors of shapes {a.shape} and {b.shape} cannot be compared")
    diff = np.abs(a - b)
    if diff.size == 0:
        return 0.0, 0.0, 0.0
    return float(diff.sum()), float(np.sqrt(np.sum(diff * diff))), float(diff.max())


def perturb(x, mean_gradient, cfg: SynthesisConfig):
    """Apply the step scale, the L-infinity clip and the domain clamp to one input."""
    budget = cfg.max_perturbation
    change = np.clip(cfg.step * np.asarray(mean_gradient), -budget, budget)
    return np.clip(x + change, cfg.domain_min, cfg.domain_max)


def rms_normalize(g):
    rms = np.sqrt(np.mean(g * g))
    return g / rms if rms > 0 else g


def mean_gradient(net: Network, x, sn: Sequence[NeuronId], normalization: str = "rms"):
    """Average of the suspicious neurons' input gradients (zero gradients included)."""
    grads = [input_gradient(net, x, n) for n in sn]
    if normalization == "rms":
        grads = [rms_normalize(g) for g in grads]
    return np.stack(grads).sum(axis=0) / len(sn)


def synthesize_one(net: Network, t: LabeledInput, sn: Sequence[NeuronId],
                   cfg: SynthesisConfig, index: Optional[int] = None) -> SynthesisResult:
    """Synthesize a new input from a correctly classified ``t``.

    Raises:
        PreconditionError: ``net`` misclassifies ``t``.
        ArgumentError: ``sn`` is empty.
    """
    sn = tuple(NeuronId(*n) for n in sn)
    if not sn:
        raise ArgumentError("no suspicious neurons to guide synthesis")
    x = np.asarray(t.features, dtype=np.float64)
    original_trace = forward(net, x, t.label)
    if not original_trace.passed:
        raise PreconditionError(
            f"input is misclassified (label {t.label}, predicted {original_trace.predicted_class})"
        )
    synthesized = perturb(x, mean_gradient(net, x, sn, cfg.gradient_normalization), cfg)
    synthesized_trace = forward(net, synthesized, t.label)
    deltas = tuple(
        (n, neuron_value(synthesized_trace, n) - neuron_value(original_trace, n)) for n in sn
    )
    return SynthesisResult(
        original=LabeledInput(x, int(t.label)),
        synthesized=synthesized,
        original_trace=original_trace,
        synthesized_trace=synthesized_trace,
        suspicious=sn,
        per_suspicious_neuron_delta=deltas,
        distances=lp_distances(synthesized, x),
        index=index,
    )


def select_candidates(net: Network, tests, class_id: int, count: int) -> list[int]:
    """Indices of the first ``count`` correctly classified inputs of ``class_id``, in test order."""
    data = as_dataset(tests)
    picked = []
    for i in np.flatnonzero(data.labels == class_id):
        if len(picked) == count:
            break
        # same single-input path synthesize_one uses for its precondition
        if forward(net, data.features[i]).predicted_class == class_id:
            picked.append(int(i))
    return picked


def synthesize_batch(net: Network, tests, report: SuspiciousnessReport, cfg: SynthesisConfig,
                     classes: Optional[Iterable[int]] = None) -> list[SynthesisResult]:
    """Synthesize up to ``cfg.per_class_count`` inputs per ground-truth class.

    Args:
        net: Network under test.
        tests: Test inputs; candidates are taken in this order.
        report: Supplies the suspicious neurons (``report.selected``).
        cfg: Synthesis parameters.
        classes: Classes to synthesize for. Defaults to the report's class,
            or every label present in ``tests`` for a whole-set report.

    Returns:
        Results grouped by class (ascending), test order within a class.
    """
    data = as_dataset(tests)
    sn = report.selected
    if not sn:
        raise ArgumentError("report selects no suspicious neurons")
    if classes is None:
        if report.class_id == ALL_CLASSES:
            classes = np.unique(data.labels).tolist()
        else:
            classes = [int(report.class_id)]
    results = []
    for c in sorted(int(c) for c in classes):
        picked = select_candidates(net, data, c, cfg.per_class_count)
        if len(picked) < cfg.per_class_count:
            warnings.warn(
                f"class {c}: only {len(picked)} correctly classified inputs, "
                f"wanted {cfg.per_class_count}",
                SynthesisWarning, stacklevel=2,
            )
        for i in picked:
            results.append(synthesize_one(net, data[i], sn, cfg, index=i))
    if not results:
        raise SynthesisError("no correctly classified input in any requested class")
    return results


def results_to_csv(results: Sequence[SynthesisResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SYNTH_CSV_HEADER)
    for r in results:
        writer.writerow([
            r.label, r.index, *(repr(v) for v in r.distances),
            r.original_trace.predicted_class, r.synthesized_trace.predicted_class,
            repr(r.loss(synthesized=False)), repr(r.loss()),
        ])
    return buf.getvalue()


def save_results(results: Sequence[SynthesisResult], directory, raw_vectors: bool = True):
    """Write ``synth.csv`` and, optionally, the raw input vectors.

    Raw vectors go to ``originals.f64`` and ``synthesized.f64`` as little-endian
    float64, one row per result, with the shape in ``vectors.json``.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "synth.csv").write_text(results_to_csv(results), encoding="utf-8", newline="\n")
    if not raw_vectors:
        return
    originals = np.stack([r.original.features for r in results]).astype("<f8")
    synthesized = np.stack([r.synthesized for r in results]).astype("<f8")
    (directory / "originals.f64").write_bytes(originals.tobytes(order="C"))
    (directory / "synthesized.f64").write_bytes(synthesized.tobytes(order="C"))
    sidecar = {
        "rows": int(originals.shape[0]),
        "dims": int(originals.shape[1]),
        "dtype": "float64",
        "byte_order": "little",
        "layout": "row-major",
        "classes": [r.label for r in results],
        "indices": [r.index for r in results],
    }
    (directory / "vectors.json").write_text(json.dumps(sidecar, indent=1) + "\n", encoding="utf-8")


def load_vectors(directory):
    """Read back ``(labels, indices, originals, synthesized)`` written by :func:`save_results`."""
    directory = Path(directory)
    meta = json.loads((directory / "vectors.json").read_text(encoding="utf-8"))
    shape = (meta["rows"], meta["dims"])
    originals = np.frombuffer((directory / "originals.f64").read_bytes(), dtype="<f8")
    synthesized = np.frombuffer((directory / "synthesized.f64").read_bytes(), dtype="<f8")
    if originals.size != shape[0] * shape[1] or synthesized.size != originals.size:
        raise ArgumentError(f"raw vector files in {directory} do not match shape {shape}")
    return (meta["classes"], meta["indices"],
            originals.reshape(shape).astype(np.float64), synthesized.reshape(shape).astype(np.float64))


def rebuild_results(net: Network, labels, indices, originals, synthesized,
                    sn: Sequence[NeuronId]) -> list[SynthesisResult]:
    """Reconstruct results (traces, deltas, distances) from stored vectors."""
    sn = tuple(NeuronId(*n) for n in sn)
    out = []
    for label, index, x, xs in zip(labels, indices, originals, synthesized):
        ot = forward(net, x, label)
        st = forward(net, xs, label)
        deltas = tuple((n, neuron_value(st, n) - neuron_value(ot, n)) for n in sn)
        out.append(SynthesisResult(LabeledInput(x, int(label)), xs, ot, st, sn, deltas,
                                   lp_distances(xs, x), index))
    return out
