"""Suspiciousness measures over hit spectra and top-k neuron selection.

Degenerate counts follow one rule for every measure: a 0/0 term is 0, and
x/0 with x > 0 is +inf. Ties in score go to the deeper layer, then to the
lower neuron index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from deepfault.errors import ArgumentError, UsageError
from deepfault.network import Network, NeuronId
from deepfault.spectrum import ALL_CLASSES, HitSpectrum, SpectrumTable

TARANTULA = "tarantula"
OCHIAI = "ochiai"
DSTAR = "dstar"
RANDOM = "random"
MEASURES = (TARANTULA, OCHIAI, DSTAR, RANDOM)


@dataclass(frozen=True)
class Measure:
    name: str
    star: float = 3.0
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if self.name not in MEASURES:
            raise ArgumentError(f"unknown measure {self.name!r}; choose from {', '.join(MEASURES)}")
        if not self.star > 0:
            raise ArgumentError(f"D* exponent must be > 0, got {self.star}")

    @classmethod
    def tarantula(cls):
        return cls(TARANTULA)

    @classmethod
    def ochiai(cls):
        return cls(OCHIAI)

    @classmethod
    def dstar(cls, star=3.0):
        return cls(DSTAR, star=star)

    @classmethod
    def random(cls, seed=0, stratified=True):
        return cls(RANDOM, seed=seed, stratified=stratified)

    @property
    def is_random(self):
        return self.name == RANDOM

    def to_dict(self):
        if self.name == DSTAR:
            return {"name": self.name, "star": self.star}
        if self.name == RANDOM:
            return {"name": self.name, "seed": self.seed, "stratified": self.stratified}
        return {"name": self.name}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], star=d.get("star", 3.0), seed=d.get("seed", 0),
                   stratified=d.get("stratified", True))

    def __str__(self):
        if self.name == DSTAR:
            return f"dstar(*={self.star:g})"
        if self.name == RANDOM:
            return f"random(seed={self.seed}{', stratified' if self.stratified else ''})"
        return self.name


def _divide(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
    return np.where(den == 0, np.where(num > 0, np.inf, 0.0), out)


def score_counts(counts, m: Measure) -> np.ndarray:
    """Score every row of an ``(H, 4)`` ``[as, af, ns, nf]`` count matrix."""
    if m.is_random:
        raise UsageError("the random baseline has no per-neuron score")
    counts = np.asarray(counts, dtype=np.float64).reshape(-1, 4)
    a_s, a_f, n_s, n_f = counts.T
    if m.name == TARANTULA:
        fail_ratio = _divide(a_f, a_f + n_f)
        pass_ratio = _divide(a_s, a_s + n_s)
        return _divide(fail_ratio, fail_ratio + pass_ratio)
    if m.name == OCHIAI:
        return _divide(a_f, np.sqrt((a_f + n_f) * (a_f + a_s)))
    return _divide(np.power(a_f, m.star), a_s + n_f)


def score(hs: HitSpectrum, m: Measure) -> float:
    return float(score_counts([tuple(hs)], m)[0])


def rank_key(neuron: NeuronId, value: float):
    return (-value, -neuron.layer_index, neuron.neuron_index)


@dataclass(frozen=True, eq=False)
class SuspiciousnessReport:
    """Neurons in decreasing suspiciousness; ``selected`` is the first ``k``.

    ``scores`` is ``None`` for the random baseline.
    """

    measure: Measure
    ranking: tuple
    k: int
    class_id: object = ALL_CLASSES
    scores: Optional[dict] = None

    @property
    def selected(self) -> list:
        return list(self.ranking[:self.k])

    def with_k(self, k: int) -> "SuspiciousnessReport":
        _check_k(k, len(self.ranking))
        return SuspiciousnessReport(self.measure, self.ranking, k, self.class_id, self.scores)

    def to_dict(self):
        rows = []
        for n in self.ranking:
            value = None if self.scores is None else self.scores[n]
            if value is not None and math.isinf(value):
                value = "Infinity" if value > 0 else "-Infinity"
            rows.append({"layer": n.layer_index, "neuron": n.neuron_index, "score": value})
        return {"measure": self.measure.to_dict(), "class": self.class_id, "k": self.k,
                "ranking": rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d) -> "SuspiciousnessReport":
        measure = Measure.from_dict(d["measure"])
        ranking = tuple(NeuronId(r["layer"], r["neuron"]) for r in d["ranking"])
        scores = None
        if not measure.is_random:
            scores = {n: float(r["score"]) for n, r in zip(ranking, d["ranking"])}
        return cls(measure, ranking, int(d["k"]), d["class"], scores)

    @classmethod
    def from_json(cls, text: str) -> "SuspiciousnessReport":
        return cls.from_dict(json.loads(text))


def _check_k(k, total):
    if not 1 <= k <= total:
        raise ArgumentError(f"k must lie in 1..{total}, got {k}")


def stratified_quotas(widths: dict, k: int) -> dict:
    """Split ``k`` over layers proportionally to width (largest remainder).

    Remainder ties go to the deeper layer.
    """
    total = sum(widths.values())
    exact = {layer: k * w / total for layer, w in widths.items()}
    quotas = {layer: math.floor(q) for layer, q in exact.items()}
    left = k - sum(quotas.values())
    by_remainder = sorted(widths, key=lambda layer: (-(exact[layer] - quotas[layer]), -layer))
    for layer in by_remainder[:left]:
        quotas[layer] += 1
    return quotas


def _random_ranking(neurons, k, m: Measure):
    rng = np.random.default_rng(m.seed)
    if not m.stratified:
        order = rng.permutation(len(neurons))
        return tuple(neurons[i] for i in order)
    widths = {}
    for n in neurons:
        widths[n.layer_index] = widths.get(n.layer_index, 0) + 1
    quotas = stratified_quotas(widths, k)
    chosen = []
    for layer in sorted(widths):
        members = [n for n in neurons if n.layer_index == layer]
        picks = rng.choice(len(members), size=quotas[layer], replace=False)
        chosen.extend(members[i] for i in sorted(picks))
    chosen.sort(key=lambda n: (-n.layer_index, n.neuron_index))
    taken = set(chosen)
    rest = [n for n in neurons if n not in taken]
    rest = [rest[i] for i in rng.permutation(len(rest))]
    return tuple(chosen + rest)


def identify(net: Optional[Network], table: SpectrumTable, m: Measure, k: int) -> SuspiciousnessReport:
    """Rank hidden neurons by suspiciousness and select the top ``k``.

    Args:
        net: When given, the table must cover exactly its hidden neurons.
        table: Hit spectra to score.
        m: Measure, or the random baseline.
        k: Number of neurons to select.
    """
    neurons = list(table.neurons)
    if net is not None and sorted(neurons) != net.hidden_neurons():
        raise ArgumentError("spectrum table does not cover the network's hidden neurons")
    _check_k(k, len(neurons))
    if m.is_random:
        return SuspiciousnessReport(m, _random_ranking(neurons, k, m), k, table.class_id)
    values = score_counts(table.counts, m)
    scores = {n: float(v) for n, v in zip(neurons, values)}
    ranking = tuple(sorted(neurons, key=lambda n: rank_key(n, scores[n])))
    return SuspiciousnessReport(m, ranking, k, table.class_id, scores)
