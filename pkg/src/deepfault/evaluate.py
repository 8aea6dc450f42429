"""Metrics over synthesized inputs, and the Mann-Whitney U test."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from deepfault.errors import ArgumentError
from deepfault.network import Network, NeuronId, neuron_value
from deepfault.suspiciousness import SuspiciousnessReport
from deepfault.synthesis import SynthesisResult, lp_distances

# Exact enumeration is used when the smaller sample has at most this many items.
EXACT_MAX_SMALL = 8
# Past this pooled size the exact DP gets slow; fall back to the normal approximation.
EXACT_MAX_TOTAL = 200


def distances(a, b):
    return lp_distances(a, b)


@dataclass(frozen=True)
class DistanceStats:
    mean_L1: float
    mean_L2: float
    mean_Linf: float


@dataclass
class EvalSummary:
    loss: float
    accuracy: float
    distances: DistanceStats
    activation_increase_ratio: float
    per_layer_counts: dict
    runtime_seconds: Optional[float]
    n_results: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["per_layer_counts"] = {str(k): v for k, v in self.per_layer_counts.items()}
        extra = d.pop("extra")
        d.update(extra)
        return d


def activation_increase_ratio(results: Sequence[SynthesisResult],
                              sn_eval: Optional[Sequence[NeuronId]] = None) -> float:
    """Fraction of (result, neuron) pairs whose activation strictly rose.

    Args:
        results: Synthesis results.
        sn_eval: Neurons to check, e.g. the top-k' of a ranking. Defaults to
            each result's own suspicious neurons.
    """
    if not results:
        raise ArgumentError("activation_increase_ratio needs at least one result")
    hits = total = 0
    for r in results:
        neurons = r.suspicious if sn_eval is None else sn_eval
        for n in neurons:
            before = neuron_value(r.original_trace, n)
            after = neuron_value(r.synthesized_trace, n)
            hits += after > before
            total += 1
    if total == 0:
        raise ArgumentError("no neurons to evaluate")
    return hits / total


def midranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _rank_sum_distribution(doubled_ranks, n):
    """Counts of every doubled rank sum over all size-``n`` subsets of the pool.

    Returns:
        ``dist`` with ``dist[s]`` = number of subsets whose doubled ranks sum to ``s``.
    """
    top = int(sum(sorted(doubled_ranks)[-n:])) if n else 0
    table = np.zeros((n + 1, top + 1), dtype=object)
    table[0, 0] = 1
    for r in doubled_ranks:
        for j in range(n, 0, -1):
            table[j, r:] += table[j - 1, :top + 1 - r]
    return table[n]


def _exact_p(x, y, u2):
    n, m = len(x), len(y)
    pooled = np.concatenate([x, y])
    doubled = [int(round(2 * r)) for r in midranks(pooled)]
    # U of the smaller sample; same two-sided p by symmetry
    if n > m:
        n, m = m, n
        u2 = n * m * 2 - u2
    dist = _rank_sum_distribution(doubled, n)
    offset = n * (n + 1)
    observed = abs(u2 - n * m)
    extreme = sum(int(c) for s, c in enumerate(dist) if c and abs(s - offset - n * m) >= observed)
    return extreme / math.comb(n + m, n)


def _normal_p(pooled_ranks, n, m, u):
    big_n = n + m
    _, counts = np.unique(pooled_ranks, return_counts=True)
    tie_term = float(np.sum(counts ** 3 - counts)) / (big_n * (big_n - 1))
    variance = n * m / 12.0 * ((big_n + 1) - tie_term)
    if variance <= 0:
        return 1.0
    z = (abs(u - n * m / 2.0) - 0.5) / math.sqrt(variance)
    return min(1.0, math.erfc(max(z, 0.0) / math.sqrt(2.0)))


def mann_whitney_u(sample_a, sample_b, method: str = "auto"):
    """Two-sided Mann-Whitney U test.

    ``U`` counts pairs with ``a > b`` (ties count one half), so swapping the
    samples maps ``U`` to ``n*m - U``. With ``method="auto"`` the p-value is
    exact (full permutation distribution over midranks) when the smaller
    sample has at most 8 items, otherwise it uses the tie-corrected normal
    approximation with continuity correction. ``"exact"`` and ``"normal"``
    force one or the other.

    Returns:
        ``(U, p_two_sided)``
    """
    if method not in ("auto", "exact", "normal"):
        raise ArgumentError(f"unknown method {method!r}")
    x = np.asarray(sample_a, dtype=np.float64).ravel()
    y = np.asarray(sample_b, dtype=np.float64).ravel()
    if x.size == 0 or y.size == 0:
        raise ArgumentError("both samples must be non-empty")
    n, m = x.size, y.size
    ranks = midranks(np.concatenate([x, y]))
    u2 = int(round(2 * ranks[:n].sum())) - n * (n + 1)
    u = u2 / 2.0
    if method == "auto":
        small = min(n, m) <= EXACT_MAX_SMALL and n + m <= EXACT_MAX_TOTAL
        method = "exact" if small else "normal"
    if method == "exact":
        return u, _exact_p(x, y, u2)
    return u, _normal_p(ranks, n, m, u)


def per_layer_counts(net: Network, selected: Sequence[NeuronId]) -> dict:
    counts = {layer: 0 for layer in net.hidden_layers}
    for n in selected:
        counts[n.layer_index] += 1
    return counts


def summarize(net: Network, results: Sequence[SynthesisResult], report: SuspiciousnessReport,
              elapsed: Optional[float] = None) -> EvalSummary:
    """Loss, accuracy, distances and activation increase over one synthesized set.

    Loss and accuracy judge every synthesized input against its original's label.
    """
    if not results:
        raise ArgumentError("summarize needs at least one result")
    for n in report.selected:
        net.check_neuron(n)
    losses = [r.loss() for r in results]
    correct = [r.still_correct for r in results]
    dists = np.array([r.distances for r in results])
    return EvalSummary(
        loss=float(np.mean(losses)),
        accuracy=sum(correct) / len(correct),
        distances=DistanceStats(*(float(v) for v in dists.mean(axis=0))),
        activation_increase_ratio=activation_increase_ratio(results),
        per_layer_counts=per_layer_counts(net, report.selected),
        runtime_seconds=elapsed,
        n_results=len(results),
    )


def counts_to_csv(counts: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "count"])
    for layer in sorted(counts):
        writer.writerow([layer, counts[layer]])
    return buf.getvalue()


def bar_chart_svg(counts: dict, title: str = "Suspicious neurons per hidden layer") -> str:
    """Static SVG bar chart of ``layer -> count``."""
    layers = sorted(counts)
    width, height = 60 + 48 * max(len(layers), 1), 260
    left, bottom, top = 40, 40, 40
    plot_h = height - bottom - top
    peak = max([counts[layer] for layer in layers] + [1])
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<text x="{width / 2:g}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{height - bottom}" x2="{width - 10}" y2="{height - bottom}" '
        'stroke="black"/>',
    ]
    for i, layer in enumerate(layers):
        h = plot_h * counts[layer] / peak
        x = left + 10 + 48 * i
        y = height - bottom - h
        out.append(f'<rect x="{x}" y="{y:.2f}" width="32" height="{h:.2f}" fill="#4c72b0"/>')
        out.append(f'<text x="{x + 16}" y="{y - 4:.2f}" text-anchor="middle">{counts[layer]}</text>')
        out.append(f'<text x="{x + 16}" y="{height - bottom + 16}" text-anchor="middle">'
                   f'L{layer}</text>')
    out.append(f'<text x="{width / 2:g}" y="{height - 6}" text-anchor="middle">hidden layer</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
