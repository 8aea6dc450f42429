"""Model persistence (JSON, bit-exact) and IDX dataset ingestion."""

from __future__ import annotations

import gzip
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from deepfault.errors import DimensionError, LoadError, ParseError
from deepfault.network import Dataset, Network

FORMAT_NAME = "deepfault-model"
FORMAT_VERSION = 1

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

DATA_DIR_ENV = "DEEPFAULT_DATA_DIR"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _encode(values):
    # repr() is the shortest string that parses back to the same double
    return [repr(float(v)) for v in values]


def model_to_dict(net: Network) -> dict:
    return {
        "format": FORMAT_NAME,
        "format_version": FORMAT_VERSION,
        "alpha": repr(net.alpha),
        "layer_widths": net.layer_widths,
        "weights": [[_encode(row) for row in w] for w in net.weights],
        "biases": [_encode(b) for b in net.biases],
    }


def write_atomic(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(net: Network, path):
    write_atomic(path, json.dumps(model_to_dict(net), indent=1) + "\n")


def _decode(value, field):
    if isinstance(value, bool):
        raise LoadError(f"expected a number, got {value!r}", field)
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        text = value.strip()
        try:
            if text.lower().lstrip("+-").startswith("0x"):
                return float.fromhex(text)
            return float(text)
        except ValueError:
            pass
    raise LoadError(f"expected a number, got {value!r}", field)


def _decode_vector(values, field):
    if not isinstance(values, list):
        raise LoadError(f"expected an array, got {type(values).__name__}", field)
    return np.array([_decode(v, f"{field}[{i}]") for i, v in enumerate(values)], dtype=np.float64)


def model_from_dict(doc) -> Network:
    if not isinstance(doc, dict):
        raise LoadError("top level must be a JSON object")
    version = doc.get("format_version")
    if version is None:
        raise LoadError("missing", "format_version")
    if version != FORMAT_VERSION:
        raise LoadError(f"unsupported version {version!r} (this build reads {FORMAT_VERSION})",
                        "format_version")
    for key in ("alpha", "layer_widths", "weights", "biases"):
        if key not in doc:
            raise LoadError("missing", key)
    alpha = _decode(doc["alpha"], "alpha")
    widths = doc["layer_widths"]
    if not isinstance(widths, list) or not all(isinstance(w, int) and w > 0 for w in widths):
        raise LoadError("expected a list of positive integers", "layer_widths")
    raw_w, raw_b = doc["weights"], doc["biases"]
    if not isinstance(raw_w, list) or len(raw_w) != len(widths) - 1:
        raise LoadError(f"expected {len(widths) - 1} matrices", "weights")
    if not isinstance(raw_b, list) or len(raw_b) != len(widths) - 1:
        raise LoadError(f"expected {len(widths) - 1} vectors", "biases")

    weights, biases = [], []
    for i, (w, b) in enumerate(zip(raw_w, raw_b)):
        rows_out, cols_in = widths[i + 1], widths[i]
        if not isinstance(w, list) or len(w) != rows_out:
            raise LoadError(f"expected {rows_out} rows", f"weights[{i}]")
        rows = []
        for r, row in enumerate(w):
            vec = _decode_vector(row, f"weights[{i}][{r}]")
            if vec.shape != (cols_in,):
                raise LoadError(f"expected {cols_in} columns, got {vec.shape[0]}",
                                f"weights[{i}][{r}]")
            rows.append(vec)
        bias = _decode_vector(b, f"biases[{i}]")
        if bias.shape != (rows_out,):
            raise LoadError(f"expected {rows_out} entries, got {bias.shape[0]}", f"biases[{i}]")
        weights.append(np.stack(rows))
        biases.append(bias)
    try:
        return Network(weights, biases, alpha)
    except (DimensionError, ValueError) as exc:
        raise LoadError(str(exc)) from exc


def load_model(path) -> Network:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise LoadError(f"{path} is not UTF-8 text: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LoadError(f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return model_from_dict(doc)


def _read_bytes(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int):
    """Parse an unsigned-byte IDX buffer.

    Returns:
        ``(dims, payload)`` with ``payload`` a flat ``uint8`` array.
    """
    if len(raw) < 4:
        raise ParseError("file too short for an IDX header", offset=len(raw))
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise ParseError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"header declares {ndim} dimensions but file ends early", offset=len(raw))
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    expected = int(np.prod(dims, dtype=np.int64))
    payload = len(raw) - header
    if payload != expected:
        raise ParseError(
            f"dimensions {dims} need {expected} payload bytes, found {payload}", offset=header
        )
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header)


def load_idx_images(path) -> np.ndarray:
    """Images as an ``(N, rows*cols)`` float64 matrix scaled to [0, 1]."""
    dims, payload = parse_idx(_read_bytes(path), IMAGE_MAGIC)
    return payload.reshape(dims[0], -1).astype(np.float64) / 255.0


def load_idx_labels(path) -> np.ndarray:
    _, payload = parse_idx(_read_bytes(path), LABEL_MAGIC)
    return payload.astype(np.int64)


def resolve_data_dir(data_dir=None) -> Path:
    if data_dir is None:
        data_dir = os.environ.get(DATA_DIR_ENV)
    if data_dir is None:
        raise FileNotFoundError(f"no dataset directory given and ${DATA_DIR_ENV} is unset")
    return Path(data_dir)


def mnist_paths(data_dir, split: str) -> tuple[Path, Path]:
    root = Path(data_dir)
    found = []
    for name in MNIST_FILES[split]:
        for candidate in (root / name, root / f"{name}.gz"):
            if candidate.exists():
                found.append(candidate)
                break
        else:
            raise FileNotFoundError(f"{name}[.gz] not found in {root}")
    return found[0], found[1]


def load_mnist(data_dir=None, split: str = "test", limit=None) -> Dataset:
    images_path, labels_path = mnist_paths(resolve_data_dir(data_dir), split)
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise ParseError(f"{len(images)} images but {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images, labels)
