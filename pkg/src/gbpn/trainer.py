"""AdamW and the full-batch / mini-batch training loops."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .bp import ComputationTree, run_bp, sample_forest, tree_bp
from .errors import InputError
from .model import (ModelConfig, ModelParams, accuracy, coupling, degree_weights, forward,
                    init_params, self_log_beliefs, watch)
from .sampling import Exp3Sampler, variance_snapshot

log = logging.getLogger(__name__)


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2.5e-4
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state):
    """One AdamW update of the ``{name: array}`` mapping ``params`` (in place).

    Weight decay is decoupled: ``p -= lr * wd * p`` before the Adam step.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise InputError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        p *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 500
    lr: float = 1e-3
    weight_decay: float = 2.5e-4
    batch_size: int = 0  # 0 = full batch
    fanout: int = 5
    sampling: str = "uniform"
    seed: int = 0
    condition_on_val: bool = False
    exp3_explore: float = 0.01
    exp3_clip: float = 1e4
    track_variance: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise InputError("epochs must be >= 1")
        if self.batch_size < 0 or self.fanout < 1:
            raise InputError("batch size must be >= 0 and fanout >= 1")
        if self.sampling not in ("uniform", "exp3"):
            raise InputError("sampling must be 'uniform' or 'exp3'")


@dataclass
class TrainResult:
    params: ModelParams
    history: list
    best_epoch: int
    sampler: Exp3Sampler = None
    variance: list = None

    @property
    def best(self):
        return self.history[self.best_epoch - 1]


def _label_map(nodes, labels):
    return {int(i): int(labels[i]) for i in nodes}


def eval_conditioning(bundle, model_config, include_val=False):
    if model_config.mode == "inductive":
        return None
    nodes = bundle.splits["train"]
    if include_val:
        nodes = np.concatenate([nodes, bundle.splits["val"]])
    return _label_map(nodes, bundle.labels)


def evaluate(bundle, params, model_config, include_val=False):
    """Full-graph inference; returns ``(log_beliefs, {split: accuracy})``."""
    logb = forward(bundle.graph, bundle.features, params, model_config,
                   conditioned=eval_conditioning(bundle, model_config, include_val))
    accs = {name: accuracy(logb, bundle.labels, bundle.splits[name])
            for name in ("train", "val", "test")}
    return logb, accs


def weighted_nll(log_beliefs, labels, degrees, beta, weighting="temper"):
    """Degree-reweighted NLL over the rows of ``log_beliefs``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InputError("loss needs at least one labelled node")
    alpha = degree_weights(degrees, beta)[:, None]
    if weighting == "temper":
        picked = ad.pick(ad.log_softmax_rows(ad.mul(log_beliefs, alpha)), labels)
    else:
        picked = ad.mul(ad.pick(log_beliefs, labels), alpha[:, 0])
    return ad.scale(ad.total(picked), -1.0 / labels.size)


def transductive_split(train, labels, rng):
    """Clamp a random half of ``train``; return ``(clamps, loss_targets)``."""
    perm = rng.permutation(train)
    half = perm.size // 2
    return _label_map(perm[:half], labels), np.sort(perm[half:])


def _check(bundle, model_config):
    if len(bundle.splits["train"]) == 0:
        raise InputError("training split is empty")
    if model_config.mode == "transductive" and len(bundle.splits["train"]) < 2:
        raise InputError("transductive training needs at least two training nodes")


def train_full_batch(bundle, model_config=None, train_config=None, params=None):
    """Optimize on the whole graph; keep the best-validation-accuracy parameters.

    Transductive steps clamp a random half of the training nodes and take
    the loss on the other half.  Evaluation clamps the full training split.
    """
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    _check(bundle, model_config)
    rng = np.random.default_rng(train_config.seed)
    if params is None:
        params = init_params(bundle.feature_dim, bundle.num_classes, model_config, rng)
    values = params.copy().as_dict()
    opt = OptimState(lr=train_config.lr, weight_decay=train_config.weight_decay)
    g, X, y = bundle.graph, bundle.features, bundle.labels
    train = np.asarray(bundle.splits["train"])

    history, best, best_acc, best_epoch = [], None, -1.0, 0
    for epoch in range(1, train_config.epochs + 1):
        tape = ad.Tape()
        pt = watch(tape, ModelParams.from_dict(values))
        cond, targets = None, train
        if model_config.mode == "transductive":
            cond, targets = transductive_split(train, y, rng)
        logb = forward(g, X, pt, model_config, conditioned=cond, dropout_on=True, rng=rng)
        loss = weighted_nll(ad.gather_rows(logb, targets), y[targets], g.degrees[targets],
                            model_config.beta, model_config.loss_weighting)
        grads = ad.backward(tape, loss)
        tape.release()
        adamw_step(values, grads, opt)

        current = ModelParams.from_dict(values)
        _, accs = evaluate(bundle, current, model_config, train_config.condition_on_val)
        history.append({"epoch": epoch, "loss": float(loss.value), "train_acc": accs["train"],
                        "val_acc": accs["val"], "test_acc": accs["test"]})
        if accs["val"] > best_acc:
            best_acc, best_epoch, best = accs["val"], epoch, current.copy()
        log.debug("epoch %d loss %.4f val %.4f", epoch, loss.value, accs["val"])
    return TrainResult(best, history, best_epoch)


def _localize(forest, clamped):
    """Re-index a forest onto its unique graph nodes for a compact MLP pass."""
    uniq, inv = np.unique(forest.orig, return_inverse=True)
    local = ComputationTree(inv.astype(np.int64), forest.parent, forest.weight, forest.level_offsets)
    pos = {int(u): k for k, u in enumerate(uniq)}
    local_clamps = {pos[i]: c for i, c in (clamped or {}).items() if i in pos}
    return uniq, local, local_clamps


def forest_root_beliefs(bundle, params, model_config, forest, clamped=None, dropout_on=False,
                        rng=None, return_messages=False):
    """Root log-beliefs of a sampled forest (one tree per root)."""
    uniq, local, local_clamps = _localize(forest, clamped)
    log_self = self_log_beliefs(bundle.features[uniq], params, dropout_on, rng, model_config.keep_prob)
    return tree_bp(local, log_self, coupling(params), clamped=local_clamps,
                   return_messages=return_messages)


def train_mini_batch(bundle, model_config=None, train_config=None, params=None):
    """Mini-batch training on sampled computation trees rooted at training nodes.

    Each epoch visits the training nodes once in shuffled batches.  Trees
    have depth ``bp_steps`` and at most ``fanout`` children per node.
    Evaluation runs full-neighbourhood BP on the whole graph.  With
    ``sampling='exp3'`` neighbours are drawn from per-node Exp3
    distributions that learn from the observed messages.
    """
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    _check(bundle, model_config)
    T = model_config.bp_steps
    if T < 1:
        raise InputError("mini-batch training needs bp_steps >= 1")
    rng = np.random.default_rng(train_config.seed)
    if params is None:
        params = init_params(bundle.feature_dim, bundle.num_classes, model_config, rng)
    values = params.copy().as_dict()
    opt = OptimState(lr=train_config.lr, weight_decay=train_config.weight_decay)
    g, y = bundle.graph, bundle.labels
    train = np.asarray(bundle.splits["train"])
    batch = train_config.batch_size or train.size
    sampler = None
    if train_config.sampling == "exp3":
        sampler = Exp3Sampler(g, train_config.exp3_explore, train_config.exp3_clip)

    history, variance, best, best_acc, best_epoch = [], [], None, -1.0, 0
    for epoch in range(1, train_config.epochs + 1):
        perm = rng.permutation(train)
        losses = []
        for start in range(0, perm.size, batch):
            roots = perm[start:start + batch]
            cond = None
            if model_config.mode == "transductive":
                rest = np.setdiff1d(train, roots)
                cond = _label_map(rng.permutation(rest)[:rest.size // 2], y)
            expansions = []
            forest = sample_forest(g, roots, T, train_config.fanout, rng, probs=sampler,
                                   on_expand=lambda k, node, kids: expansions.append((k, node)))
            tape = ad.Tape()
            pt = watch(tape, ModelParams.from_dict(values))
            root_b, messages = forest_root_beliefs(bundle, pt, model_config, forest, cond,
                                                   dropout_on=True, rng=rng, return_messages=True)
            loss = weighted_nll(root_b, y[roots], g.degrees[roots], model_config.beta,
                                model_config.loss_weighting)
            grads = ad.backward(tape, loss)
            tape.release()
            adamw_step(values, grads, opt)
            losses.append(float(loss.value))
            if sampler is not None:
                _feed_exp3(sampler, g, forest, messages, expansions)

        current = ModelParams.from_dict(values)
        logb, accs = evaluate(bundle, current, model_config, train_config.condition_on_val)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "train_acc": accs["train"],
                        "val_acc": accs["val"], "test_acc": accs["test"]})
        if train_config.track_variance:
            variance.append(variance_at(bundle, current, model_config, sampler,
                                        eval_conditioning(bundle, model_config)))
        if accs["val"] > best_acc:
            best_acc, best_epoch, best = accs["val"], epoch, current.copy()
    return TrainResult(best, history, best_epoch, sampler, variance if train_config.track_variance else None)


def _feed_exp3(sampler, graph, forest, messages, expansions):
    level_of = np.searchsorted(forest.level_offsets, np.arange(forest.num_nodes), side="right") - 1
    children = {}
    for k, par in enumerate(forest.parent):
        if par >= 0:
            children.setdefault(int(par), []).append(k)
    for k, node in expansions:
        kids = np.array(children.get(k, []), dtype=np.int64)
        if kids.size == 0:
            continue
        lvl = level_of[kids[0]]
        rows = messages[lvl].value[kids - forest.level_offsets[lvl]]
        parent_orig = forest.orig[forest.parent[k]] if forest.parent[k] >= 0 else -1
        cand = graph.neighbor_ids(node)
        cand = cand[cand != parent_orig]
        sampler.update(node, forest.orig[kids], cand, rows)


def variance_at(bundle, params, model_config, sampler, conditioned=None):
    """Variance ratios against full-graph messages after ``bp_steps`` steps."""
    log_self = self_log_beliefs(bundle.features, params)
    state, _ = run_bp(bundle.graph, log_self, coupling(params), max(model_config.bp_steps, 1),
                      clamped=conditioned)
    return variance_snapshot(bundle.graph, state.log_messages.value, sampler)
