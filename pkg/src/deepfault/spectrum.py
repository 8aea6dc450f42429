"""Hit spectra of hidden neurons over a labeled test set.

For every hidden neuron and every analyzed input we record whether the neuron
was active (post-activation value above a threshold) and whether the network
classified the input correctly. The four resulting counters form the hit
spectrum ``(as, af, ns, nf)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from deepfault.errors import AnalysisError, ArgumentError
from deepfault.network import Network, NeuronId, as_dataset, forward_batch

ALL_CLASSES = "all"
CSV_HEADER = ("layer", "neuron", "as", "af", "ns", "nf")


class HitSpectrum(NamedTuple):
    attr_as: int
    attr_af: int
    attr_ns: int
    attr_nf: int

    @property
    def total(self):
        return self.attr_as + self.attr_af + self.attr_ns + self.attr_nf


@dataclass(frozen=True, eq=False)
class SpectrumTable:
    """Hit spectra for every hidden neuron, rows in ``neurons`` order.

    ``counts`` has one ``[as, af, ns, nf]`` row per neuron.
    """

    neurons: tuple
    counts: np.ndarray
    class_id: object = ALL_CLASSES
    threshold: float = 0.0
    test_set_size: int = 0

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "neurons", tuple(NeuronId(*n) for n in self.neurons))
        if counts.shape != (len(self.neurons), 4):
            raise ArgumentError(f"counts must have shape ({len(self.neurons)}, 4), got {counts.shape}")
        if np.any(counts < 0):
            raise ArgumentError("hit spectrum counts must be non-negative")
        sums = counts.sum(axis=1)
        if np.any(sums != self.test_set_size):
            bad = self.neurons[int(np.argmax(sums != self.test_set_size))]
            raise ArgumentError(
                f"spectrum of {bad} sums to {sums[self.neurons.index(bad)]}, "
                f"expected test set size {self.test_set_size}"
            )
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    def __len__(self):
        return len(self.neurons)

    def __getitem__(self, n: NeuronId) -> HitSpectrum:
        row = self.counts[self._index()[NeuronId(*n)]]
        return HitSpectrum(*(int(v) for v in row))

    def _index(self):
        index = self.__dict__.get("_neuron_index")
        if index is None:
            index = {n: i for i, n in enumerate(self.neurons)}
            object.__setattr__(self, "_neuron_index", index)
        return index

    def items(self):
        for n, row in zip(self.neurons, self.counts):
            yield n, HitSpectrum(*(int(v) for v in row))

    def __eq__(self, other):
        if not isinstance(other, SpectrumTable):
            return NotImplemented
        return (self.neurons == other.neurons
                and np.array_equal(self.counts, other.counts)
                and self.class_id == other.class_id
                and self.threshold == other.threshold
                and self.test_set_size == other.test_set_size)

    def __add__(self, other: "SpectrumTable") -> "SpectrumTable":
        """Merge spectra computed over disjoint shards of the same test set."""
        if self.neurons != other.neurons:
            raise ArgumentError("cannot merge spectra over different neurons")
        if self.class_id != other.class_id or self.threshold != other.threshold:
            raise ArgumentError("cannot merge spectra with different class or threshold")
        return SpectrumTable(self.neurons, self.counts + other.counts, self.class_id,
                             self.threshold, self.test_set_size + other.test_set_size)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for (layer, j), row in sorted(zip(self.neurons, self.counts.tolist())):
            writer.writerow([layer, j, *row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, class_id=ALL_CLASSES, threshold: float = 0.0) -> "SpectrumTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise ArgumentError(f"spectrum CSV must start with header {','.join(CSV_HEADER)}")
        neurons, counts = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                layer, j, *vals = (int(v) for v in row)
            except ValueError as exc:
                raise ArgumentError(f"line {lineno}: {exc}") from exc
            if len(vals) != 4:
                raise ArgumentError(f"line {lineno}: expected 6 columns, got {len(row)}")
            neurons.append(NeuronId(layer, j))
            counts.append(vals)
        size = int(sum(counts[0])) if counts else 0
        return cls(tuple(neurons), np.array(counts, dtype=np.int64).reshape(-1, 4),
                   class_id, threshold, size)


def spectrum_counts(active: np.ndarray, success: np.ndarray) -> np.ndarray:
    """``(H, 4)`` counts from an ``(N, H)`` activity mask and an ``(N,)`` success mask."""
    active = active.astype(bool)
    success = success.astype(bool)[:, None]
    return np.stack([
        np.sum(active & success, axis=0),
        np.sum(active & ~success, axis=0),
        np.sum(~active & success, axis=0),
        np.sum(~active & ~success, axis=0),
    ], axis=1).astype(np.int64)


def analyze(net: Network, tests, class_id=ALL_CLASSES, threshold: float = 0.0) -> SpectrumTable:
    """Build the hit spectrum of every hidden neuron.

    Args:
        net: Network under analysis.
        tests: Labeled test inputs.
        class_id: Keep only inputs whose ground-truth label equals this class,
            or ``ALL_CLASSES`` to analyze the whole set.
        threshold: A neuron is active on an input when its post-activation
            value is strictly greater than this.

    Raises:
        AnalysisError: No inputs remain after class filtering.
    """
    data = as_dataset(tests)
    if class_id != ALL_CLASSES:
        data = data.of_class(int(class_id))
    if len(data) == 0:
        which = "the test set" if class_id == ALL_CLASSES else f"class {class_id}"
        raise AnalysisError(f"no test inputs to analyze for {which}")
    activations, probs = forward_batch(net, data.features)
    success = np.argmax(probs, axis=1) == data.labels
    counts = spectrum_counts(activations > threshold, success)
    return SpectrumTable(tuple(net.hidden_neurons()), counts, class_id, float(threshold), len(data))
