"""On-disk formats for graph bundles and trained models.

A bundle directory holds::

    meta.json      {"format_version", "num_nodes", "num_classes", "feature_dim", ...}
    edges.tsv      one undirected edge per line, smaller id first
    features.tsv   one row of tab-separated reals per node
    labels.tsv     one class index per line
    splits.json    {"train": [...], "val": [...], "test": [...]}

Models are a single JSON document.  Reals are written with ``repr`` (the
shortest round-trip decimal form) so reloads are bit-exact.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, LoadError
from .graph import Graph, build_graph

FORMAT_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")


@dataclass(eq=False)
class GraphBundle:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    splits: dict
    num_classes: int
    meta: dict = field(default_factory=dict)

    @property
    def num_nodes(self):
        return self.graph.num_nodes

    @property
    def feature_dim(self):
        return int(self.features.shape[1])

    def validate(self):
        n = self.graph.num_nodes
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise InputError(f"features must have {n} rows, got shape {self.features.shape}")
        if self.labels.shape != (n,):
            raise InputError(f"labels must have length {n}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        seen = set()
        for name in SPLIT_NAMES:
            ids = np.asarray(self.splits.get(name, []), dtype=np.int64)
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise InputError(f"split {name!r} holds a node id outside [0, {n})")
            overlap = seen.intersection(ids.tolist())
            if overlap or len(set(ids.tolist())) != ids.size:
                raise InputError(f"split {name!r} overlaps another split or repeats ids")
            seen.update(ids.tolist())


def split_nodes(n, ratios=(0.3, 0.2, 0.5), seed=0):
    """Shuffle ``0..n-1`` and cut into train/val/test.

    Validation and test sizes are rounded half-up; train takes the remainder.
    """
    if n < 3:
        raise InputError("need at least 3 nodes to split")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise InputError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(math.floor(n * ratios[1] + 0.5))
    n_test = int(math.floor(n * ratios[2] + 0.5))
    n_train = n - n_val - n_test
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


# ---------------------------------------------------------------------------
# bundles


def _fmt(x):
    return repr(float(x))


def save_bundle(bundle, directory):
    bundle.validate()
    os.makedirs(directory, exist_ok=True)
    meta = dict(bundle.meta)
    meta.update(format_version=FORMAT_VERSION, num_nodes=bundle.num_nodes,
                num_classes=int(bundle.num_classes), feature_dim=bundle.feature_dim)
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, "edges.tsv"), "w") as fh:
        for u, v in bundle.graph.undirected_edges():
            fh.write(f"{u}\t{v}\n")
    with open(os.path.join(directory, "features.tsv"), "w") as fh:
        for row in bundle.features:
            fh.write("\t".join(_fmt(x) for x in row) + "\n")
    with open(os.path.join(directory, "labels.tsv"), "w") as fh:
        for y in bundle.labels:
            fh.write(f"{int(y)}\n")
    with open(os.path.join(directory, "splits.json"), "w") as fh:
        json.dump({k: [int(i) for i in bundle.splits[k]] for k in SPLIT_NAMES}, fh)
        fh.write("\n")


def _read_json(path):
    if not os.path.exists(path):
        raise LoadError("file not found", path)
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise LoadError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None


def _read_rows(path):
    if not os.path.exists(path):
        raise LoadError("file not found", path)
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                yield lineno, line.split()


def load_bundle(directory):
    """Read and validate a bundle directory; errors name the file and line."""
    meta_path = os.path.join(directory, "meta.json")
    meta = _read_json(meta_path)
    for key in ("num_nodes", "num_classes", "feature_dim"):
        if not isinstance(meta.get(key), int) or meta[key] < 0:
            raise LoadError(f"missing or invalid {key!r}", meta_path)
    version = meta.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise LoadError(f"unsupported format_version {version}", meta_path)
    n, c, d = meta["num_nodes"], meta["num_classes"], meta["feature_dim"]

    edges_path = os.path.join(directory, "edges.tsv")
    edges = []
    for lineno, parts in _read_rows(edges_path):
        try:
            u, v = (int(p) for p in parts)
        except ValueError:
            raise LoadError("expected two integer columns", edges_path, lineno) from None
        if u == v:
            raise LoadError(f"self-loop on node {u}", edges_path, lineno)
        if not (0 <= u < n and 0 <= v < n):
            raise LoadError(f"node id out of range [0, {n})", edges_path, lineno)
        edges.append((u, v))
    graph = build_graph(n, np.array(edges, dtype=np.int64).reshape(-1, 2))

    feat_path = os.path.join(directory, "features.tsv")
    rows = []
    for lineno, parts in _read_rows(feat_path):
        if len(parts) != d:
            raise LoadError(f"expected {d} columns, found {len(parts)}", feat_path, lineno)
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise LoadError("malformed real number", feat_path, lineno) from None
    if len(rows) != n:
        raise LoadError(f"expected {n} feature rows, found {len(rows)}", feat_path)
    features = np.array(rows, dtype=np.float64).reshape(n, d)

    label_path = os.path.join(directory, "labels.tsv")
    labels = []
    for lineno, parts in _read_rows(label_path):
        if len(parts) != 1:
            raise LoadError("expected one integer per line", label_path, lineno)
        try:
            y = int(parts[0])
        except ValueError:
            raise LoadError("malformed class index", label_path, lineno) from None
        if not (0 <= y < c):
            raise LoadError(f"class {y} out of range [0, {c})", label_path, lineno)
        labels.append(y)
    if len(labels) != n:
        raise LoadError(f"expected {n} labels, found {len(labels)}", label_path)

    split_path = os.path.join(directory, "splits.json")
    raw = _read_json(split_path)
    splits = {}
    for name in SPLIT_NAMES:
        if not isinstance(raw.get(name), list):
            raise LoadError(f"missing split {name!r}", split_path)
        splits[name] = np.array(raw[name], dtype=np.int64)

    extra = {k: v for k, v in meta.items()
             if k not in ("num_nodes", "num_classes", "feature_dim", "format_version")}
    bundle = GraphBundle(graph, features, np.array(labels, dtype=np.int64), splits, c, extra)
    try:
        bundle.validate()
    except InputError as exc:
        raise LoadError(str(exc), split_path) from None
    return bundle


# ---------------------------------------------------------------------------
# models


def save_model(params, config, path):
    doc = {
        "format_version": FORMAT_VERSION,
        "layers": [{"shape": list(w.shape), "weight": w.tolist(), "bias": b.tolist()}
                   for w, b in zip(params.weights, params.biases)],
        "log_coupling_raw": params.coupling_raw.tolist(),
        "config": config.to_dict(),
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_model(path):
    from .model import ModelConfig, ModelParams

    doc = _read_json(path)
    try:
        weights = [np.array(layer["weight"], dtype=np.float64) for layer in doc["layers"]]
        biases = [np.array(layer["bias"], dtype=np.float64) for layer in doc["layers"]]
        raw = np.array(doc["log_coupling_raw"], dtype=np.float64)
        config = ModelConfig.from_dict(doc.get("config", {}))
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"malformed model document ({exc})", path) from None
    if doc.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
        raise LoadError(f"unsupported format_version {doc['format_version']}", path)
    try:
        params = ModelParams(weights, biases, raw)
    except InputError as exc:
        raise LoadError(str(exc), path) from None
    return params, config
