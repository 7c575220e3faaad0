"""The trainable model: MLP self-potentials, learned coupling, BP forward, loss."""

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .bp import bp_step, init_state
from .errors import InputError

MODES = ("inductive", "transductive")
WEIGHTINGS = ("temper", "scale")


@dataclass
class ModelConfig:
    hidden_width: int = 256
    hidden_layers: int = 2
    bp_steps: int = 5
    keep_prob: float = 0.9
    beta: float = 0.5
    mode: str = "transductive"
    loss_weighting: str = "temper"

    def __post_init__(self):
        if self.bp_steps < 0:
            raise InputError("bp_steps must be >= 0")
        if self.beta < 0:
            raise InputError("beta must be >= 0")
        if not (0.0 < self.keep_prob <= 1.0):
            raise InputError("keep_prob must lie in (0, 1]")
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}")
        if self.loss_weighting not in WEIGHTINGS:
            raise InputError(f"loss_weighting must be one of {WEIGHTINGS}")
        if self.hidden_width < 1 or self.hidden_layers < 0:
            raise InputError("invalid hidden layer configuration")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class ModelParams:
    """MLP layers plus the unconstrained coupling matrix (log domain)."""

    def __init__(self, weights, biases, coupling_raw):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.coupling_raw = np.asarray(coupling_raw, dtype=np.float64)
        if not self.weights or len(self.weights) != len(self.biases):
            raise InputError("need matching, non-empty weight and bias lists")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise InputError(f"layer {k}: weight {w.shape} and bias {b.shape} do not match")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise InputError(f"layer {k}: input width {w.shape[0]} != previous output "
                                 f"{self.weights[k - 1].shape[1]}")
        c = self.weights[-1].shape[1]
        if self.coupling_raw.shape != (c, c):
            raise InputError(f"coupling must be {c}x{c}, got {self.coupling_raw.shape}")

    @property
    def feature_dim(self):
        return self.weights[0].shape[0]

    @property
    def num_classes(self):
        return self.weights[-1].shape[1]

    def as_dict(self):
        d = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            d[f"W{k}"] = w
            d[f"b{k}"] = b
        d["coupling_raw"] = self.coupling_raw
        return d

    @classmethod
    def from_dict(cls, d):
        n = sum(1 for k in d if k.startswith("W"))
        return cls([d[f"W{k}"] for k in range(n)], [d[f"b{k}"] for k in range(n)], d["coupling_raw"])

    def copy(self):
        return ModelParams.from_dict({k: v.copy() for k, v in self.as_dict().items()})


def init_params(feature_dim, num_classes, config=None, rng=None):
    """Uniform(+-sqrt(6 / fan_in)) weights, zero biases, zero coupling."""
    config = config or ModelConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    widths = [feature_dim] + [config.hidden_width] * config.hidden_layers + [num_classes]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights, biases, np.zeros((num_classes, num_classes)))


def watch(tape, params):
    return {k: tape.watch(v, k) for k, v in params.as_dict().items()}


def _tensors(params):
    if isinstance(params, ModelParams):
        return {k: ad.constant(v) for k, v in params.as_dict().items()}
    return params


def coupling(params):
    """Symmetrized log-coupling ``(raw + raw.T) / 2``."""
    raw = _tensors(params)["coupling_raw"]
    return ad.scale(ad.add(raw, ad.transpose(raw)), 0.5)


def self_log_beliefs(features, params, dropout_on=False, rng=None, keep_prob=0.9):
    p = _tensors(params)
    n_layers = sum(1 for k in p if k.startswith("W"))
    x = ad.as_tensor(features)
    if x.value.ndim != 2 or x.value.shape[1] != p["W0"].value.shape[0]:
        raise InputError(f"features of shape {x.value.shape} do not fit an MLP expecting "
                         f"{p['W0'].value.shape[0]} columns")
    for k in range(n_layers):
        x = ad.add_row(ad.matmul(x, p[f"W{k}"]), p[f"b{k}"])
        if k < n_layers - 1:
            x = ad.relu(x)
            if dropout_on:
                x = ad.dropout(x, keep_prob, rng)
    return ad.log_softmax_rows(x)


def forward(graph, features, params, config, conditioned=None, dropout_on=False, rng=None,
            keep_trajectory=False):
    """Log-beliefs after ``config.bp_steps`` BP steps.

    ``conditioned`` maps node ids to observed classes; those nodes are clamped
    (transductive inference).  With ``keep_trajectory`` returns
    ``(log_beliefs, trajectory)``.
    """
    if config.mode == "inductive" and conditioned:
        raise InputError("inductive inference does not condition on labels")
    p = _tensors(params)
    log_self = self_log_beliefs(features, p, dropout_on, rng, config.keep_prob)
    if log_self.value.shape[0] != graph.num_nodes:
        raise InputError("feature rows must match the number of nodes")
    L = coupling(p)
    state = init_state(graph, log_self, conditioned)
    trajectory = [state.log_beliefs.value.copy()] if keep_trajectory else None
    for _ in range(config.bp_steps):
        state = bp_step(state, L)
        if keep_trajectory:
            trajectory.append(state.log_beliefs.value.copy())
    if keep_trajectory:
        return state.log_beliefs, trajectory
    return state.log_beliefs


def degree_weights(degrees, beta):
    """``alpha = d ** -beta``, with ``alpha = 1`` for isolated nodes."""
    d = np.asarray(degrees, dtype=np.float64)
    return np.where(d > 0, np.power(np.maximum(d, 1.0), -beta), 1.0)


def loss(log_beliefs, labels, node_ids, graph, beta=0.5, weighting="temper"):
    """Degree-reweighted negative log marginal likelihood, averaged over ``node_ids``.

    ``temper`` renormalizes ``alpha * log p`` before reading off the label;
    ``scale`` uses ``-alpha * log p`` directly.
    """
    node_ids = np.asarray(node_ids, dtype=np.int64)
    if node_ids.size == 0:
        raise InputError("loss needs at least one labelled node")
    labels = np.asarray(labels, dtype=np.int64)
    alpha = degree_weights(graph.degrees[node_ids], beta)[:, None]
    lb = ad.gather_rows(log_beliefs, node_ids)
    if weighting == "temper":
        picked = ad.pick(ad.log_softmax_rows(ad.mul(lb, alpha)), labels[node_ids])
    elif weighting == "scale":
        picked = ad.mul(ad.pick(lb, labels[node_ids]), alpha[:, 0])
    else:
        raise InputError(f"unknown loss weighting {weighting!r}")
    return ad.scale(ad.total(picked), -1.0 / node_ids.size)


def predict(log_beliefs):
    """Row-wise argmax; ties go to the lowest class index."""
    v = log_beliefs.value if isinstance(log_beliefs, ad.Tensor) else np.asarray(log_beliefs)
    return np.argmax(v, axis=1)


def accuracy(log_beliefs, labels, node_ids):
    node_ids = np.asarray(node_ids, dtype=np.int64)
    if node_ids.size == 0:
        return float("nan")
    return float(np.mean(predict(log_beliefs)[node_ids] == np.asarray(labels)[node_ids]))
