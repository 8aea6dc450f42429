"""Dense leaky-ReLU classifiers: inference, activation tracing, input gradients.

Layers are numbered from 1, counting the input: layer 1 is the input,
layers ``2 .. l-1`` are hidden and layer ``l`` is the softmax output.
Neurons are 1-based within their layer. ``weights[i]`` maps layer
``i + 1`` to layer ``i + 2`` and has shape ``(out, in)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from deepfault.errors import AddressError, ArgumentError, DimensionError

DEFAULT_ALPHA = 0.01
PROBABILITY_FLOOR = 1e-12


class NeuronId(NamedTuple):
    """A hidden neuron, addressed as ``(layer_index, neuron_index)``, both 1-based."""

    layer_index: int
    neuron_index: int

    def __str__(self):
        return f"n[{self.layer_index},{self.neuron_index}]"


@dataclass(frozen=True)
class LabeledInput:
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """A batch of labeled inputs stored as one ``(N, D)`` matrix and ``(N,)`` labels."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise DimensionError(f"features must be 2-D, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise DimensionError(
                f"{features.shape[0]} feature rows but labels of shape {labels.shape}"
            )
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_inputs(cls, inputs: Iterable[LabeledInput]) -> "Dataset":
        inputs = list(inputs)
        if not inputs:
            return cls(np.zeros((0, 0)), np.zeros(0, dtype=np.int64))
        lengths = {np.shape(t.features) for t in inputs}
        if len(lengths) != 1:
            raise ArgumentError(f"inconsistent feature shapes: {sorted(lengths)}")
        return cls(np.stack([t.features for t in inputs]), [t.label for t in inputs])

    def __len__(self):
        return self.features.shape[0]

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return LabeledInput(self.features[i], int(self.labels[i]))
        return Dataset(self.features[i], self.labels[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def of_class(self, class_id: int) -> "Dataset":
        return self[self.labels == class_id]


def as_dataset(data) -> Dataset:
    if isinstance(data, Dataset):
        return data
    return Dataset.from_inputs(data)


def leaky_relu(z, alpha):
    return np.where(z > 0, z, alpha * z)


def leaky_relu_derivative(z, alpha):
    # kink (z == 0) takes the alpha branch
    return np.where(z > 0, 1.0, alpha)


def softmax(logits):
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


class Network:
    """Immutable dense classifier with leaky-ReLU hidden layers and a softmax head.

    Args:
        weights: One ``(out, in)`` matrix per trainable layer.
        biases: One ``(out,)`` vector per trainable layer.
        alpha: Leaky-ReLU slope for non-positive pre-activations.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                 alpha: float = DEFAULT_ALPHA):
        if len(weights) != len(biases):
            raise DimensionError(f"{len(weights)} weight matrices but {len(biases)} bias vectors")
        if len(weights) < 2:
            raise DimensionError("a network needs at least one hidden layer")
        if not alpha > 0:
            raise ArgumentError(f"alpha must be positive, got {alpha}")
        ws, bs = [], []
        for i, (w, b) in enumerate(zip(weights, biases)):
            w = np.array(w, dtype=np.float64, order="C")
            b = np.array(b, dtype=np.float64)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(
                    f"layer {i + 2}: weight shape {w.shape} and bias shape {b.shape} do not match"
                )
            if ws and w.shape[1] != ws[-1].shape[0]:
                raise DimensionError(
                    f"layer {i + 2}: expects {w.shape[1]} inputs but layer {i + 1} "
                    f"has {ws[-1].shape[0]} neurons"
                )
            w.flags.writeable = False
            b.flags.writeable = False
            ws.append(w)
            bs.append(b)
        self._weights = tuple(ws)
        self._biases = tuple(bs)
        self._alpha = float(alpha)

    @property
    def weights(self):
        return self._weights

    @property
    def biases(self):
        return self._biases

    @property
    def alpha(self):
        return self._alpha

    @property
    def layer_widths(self):
        return [self._weights[0].shape[1]] + [w.shape[0] for w in self._weights]

    @property
    def input_width(self):
        return self._weights[0].shape[1]

    @property
    def num_classes(self):
        return self._weights[-1].shape[0]

    @property
    def num_layers(self):
        return len(self._weights) + 1

    @property
    def total_neurons(self):
        return sum(self.layer_widths)

    @property
    def hidden_layers(self):
        """Indices of the hidden layers, ``2 .. l-1``."""
        return list(range(2, self.num_layers))

    def hidden_neurons(self) -> list[NeuronId]:
        """All hidden neurons, ascending by layer then neuron."""
        widths = self.layer_widths
        return [NeuronId(layer, j) for layer in self.hidden_layers
                for j in range(1, widths[layer - 1] + 1)]

    @property
    def num_hidden(self):
        return sum(self.layer_widths[1:-1])

    def flat_index(self, n: NeuronId) -> int:
        """Column of ``n`` in the ``(N, num_hidden)`` matrix from :func:`hidden_activations`."""
        self.check_neuron(n)
        widths = self.layer_widths
        return sum(widths[1:n.layer_index - 1]) + n.neuron_index - 1

    def check_neuron(self, n: NeuronId):
        layer, j = n
        if not 2 <= layer <= self.num_layers - 1:
            raise AddressError(
                f"layer {layer} is not a hidden layer (hidden layers are 2..{self.num_layers - 1})"
            )
        width = self.layer_widths[layer - 1]
        if not 1 <= j <= width:
            raise AddressError(f"neuron {j} out of range for layer {layer} of width {width}")

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        if np.float64(self._alpha).tobytes() != np.float64(other._alpha).tobytes():
            return False
        if len(self._weights) != len(other._weights):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._weights + self._biases, other._weights + other._biases)
        )

    __hash__ = None

    def __repr__(self):
        return f"Network(layer_widths={self.layer_widths}, alpha={self._alpha})"


@dataclass(frozen=True, eq=False)
class ForwardTrace:
    """Post-activation values of every hidden neuron for one input."""

    activations: tuple
    output_probabilities: np.ndarray
    predicted_class: int
    label: int | None = None

    @property
    def passed(self):
        if self.label is None:
            return None
        return self.predicted_class == self.label

    def flat_activations(self):
        return np.concatenate(self.activations)


def _check_input(net: Network, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (net.input_width,):
        raise DimensionError(f"input has shape {x.shape}, network expects width {net.input_width}")
    return x


def _propagate(net: Network, x):
    """Run the network, returning per-hidden-layer pre- and post-activations and logits."""
    pre, post = [], []
    a = x
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        z = a @ w.T + b
        a = leaky_relu(z, net.alpha)
        pre.append(z)
        post.append(a)
    logits = a @ net.weights[-1].T + net.biases[-1]
    return pre, post, logits


def forward(net: Network, x, label: int | None = None) -> ForwardTrace:
    x = _check_input(net, x)
    if x.ndim != 1:
        raise DimensionError(f"forward takes a single feature vector, got shape {x.shape}")
    _, post, logits = _propagate(net, x)
    probs = softmax(logits)
    return ForwardTrace(tuple(post), probs, int(np.argmax(probs)),
                        None if label is None else int(label))


def forward_batch(net: Network, features):
    """Vectorized forward pass.

    Returns:
        ``(activations, probabilities)`` where ``activations`` is ``(N, num_hidden)``
        in :meth:`Network.hidden_neurons` order and ``probabilities`` is ``(N, classes)``.
    """
    x = _check_input(net, features)
    if x.ndim != 2:
        raise DimensionError(f"forward_batch takes an (N, D) matrix, got shape {x.shape}")
    _, post, logits = _propagate(net, x)
    return np.concatenate(post, axis=1), softmax(logits)


def predict(net: Network, features):
    return np.argmax(forward_batch(net, features)[1], axis=1)


def neuron_value(trace: ForwardTrace, n: NeuronId) -> float:
    layer, j = n
    hidden = len(trace.activations)
    if not 2 <= layer <= hidden + 1:
        raise AddressError(f"layer {layer} is not a hidden layer (hidden layers are 2..{hidden + 1})")
    values = trace.activations[layer - 2]
    if not 1 <= j <= values.shape[0]:
        raise AddressError(f"neuron {j} out of range for layer {layer} of width {values.shape[0]}")
    return float(values[j - 1])


def input_gradient(net: Network, x, n: NeuronId):
    """Exact gradient of neuron ``n``'s post-activation value with respect to the input.

    Reverse-mode pass from ``n`` back to layer 1; layers after ``n`` play no role.
    """
    x = _check_input(net, x)
    if x.ndim != 1:
        raise DimensionError(f"input_gradient takes a single feature vector, got shape {x.shape}")
    net.check_neuron(n)
    layer, j = n
    pre, _, _ = _propagate_to(net, x, layer)
    grad = np.zeros(net.layer_widths[layer - 1])
    grad[j - 1] = 1.0
    for i in range(layer, 1, -1):
        grad = (grad * leaky_relu_derivative(pre[i - 2], net.alpha)) @ net.weights[i - 2]
    return grad


def _propagate_to(net: Network, x, layer):
    pre, post = [], []
    a = x
    for w, b in zip(net.weights[:layer - 1], net.biases[:layer - 1]):
        z = a @ w.T + b
        a = leaky_relu(z, net.alpha)
        pre.append(z)
        post.append(a)
    return pre, post, a


def cross_entropy_loss(net: Network, inputs) -> float:
    data = as_dataset(inputs)
    if len(data) == 0:
        raise ArgumentError("cross_entropy_loss needs at least one input")
    _, probs = forward_batch(net, data.features)
    if np.any((data.labels < 0) | (data.labels >= net.num_classes)):
        raise ArgumentError(f"labels must lie in 0..{net.num_classes - 1}")
    true = probs[np.arange(len(data)), data.labels]
    return float(np.mean(-np.log(np.maximum(true, PROBABILITY_FLOOR))))
