"""Class-incremental experiment engine on a synthetic Gaussian-cluster stream."""
from __future__ import annotations

import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import moe, star
from .config import RunConfig
from .errors import InvalidStateError, InvariantViolation
from .prob import softmax
from .rng import SeededRng

VARIANTS = {
    "baseline": (False, False),
    "sara_only": (True, False),
    "acr_only": (False, True),
    "full": (True, True),
}
SWEEP_PARAMS = ("k", "gamma", "lambda_sara", "lambda_acr", "expand_start_layer")

# independent RNG streams derived from the seeds
_S_MEANS, _S_ORDER, _S_SAMPLES = 1, 2, 3
_S_INIT, _S_EXPAND, _S_SHUFFLE, _S_SARA, _S_DRIFT, _S_MASS = 11, 12, 13, 14, 15, 16


@dataclass
class ClassGenerator:
    class_id: int
    input_mean: np.ndarray
    input_scale: float
    seed_offset: int


@dataclass
class TaskSpec:
    index: int  # 1-based
    class_ids: list[int]  # classifier columns, in order of first appearance
    generator_ids: list[int]
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def train_count(self) -> int:
        return len(self.train_y) // len(self.class_ids)

    @property
    def test_count(self) -> int:
        return len(self.test_y) // len(self.class_ids)


@dataclass
class MethodState:
    """Everything carried across tasks besides the network itself."""
    anchors: list[list[star.RoutingAnchor]]  # per MoE layer, classes in order
    stats: list[list[star.RouterInputStats]]
    tasks_done: int = 0
    weights: star.SensitivityWeights | None = None
    loss_trace: list[dict] = field(default_factory=list)
    data_access: list[int] = field(default_factory=list)
    optimizer_state: dict = field(default_factory=dict)
    task_classes: list[list[int]] = field(default_factory=list)


@dataclass
class Metrics:
    accuracies: list[float]
    drift: list[star.DriftReport]
    loss_trace: list[dict] = field(default_factory=list)
    routing_mass: np.ndarray | None = None
    frozen_checks: list[bool] = field(default_factory=list)

    @property
    def average(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def last(self) -> float:
        return self.accuracies[-1]


# data ----------------------------------------------------------------------------------

def make_generators(config: RunConfig) -> list[ClassGenerator]:
    rng = SeededRng(config.data_seed).spawn(_S_MEANS)
    n = config.tasks * config.classes_per_task
    means = []
    for _ in range(100 * n):
        if len(means) == n:
            break
        cand = rng.normal(config.input_dim) * config.mean_scale
        if all(np.linalg.norm(cand - m) >= config.separation for m in means):
            means.append(cand)
    if len(means) < n:
        raise ValueError("could not place class means at the requested separation")
    return [ClassGenerator(i, m, config.input_scale, i) for i, m in enumerate(means)]


def generate_stream(config: RunConfig) -> list[TaskSpec]:
    config.validate()
    gens = make_generators(config)
    order = SeededRng(config.data_seed).spawn(_S_ORDER).permutation(len(gens))
    sample_rng = SeededRng(config.data_seed).spawn(_S_SAMPLES)
    tasks = []
    cpt = config.classes_per_task
    for t in range(config.tasks):
        gen_ids = [int(g) for g in order[t * cpt:(t + 1) * cpt]]
        labels = list(range(t * cpt, (t + 1) * cpt))
        parts = {"train": ([], []), "test": ([], [])}
        for label, gid in zip(labels, gen_ids):
            g = gens[gid]
            crng = sample_rng.spawn(g.seed_offset)
            for split, count in (("train", config.train_per_class), ("test", config.test_per_class)):
                x = g.input_mean + g.input_scale * crng.normal((count, config.input_dim))
                parts[split][0].append(x)
                parts[split][1].append(np.full(count, label))
        tasks.append(TaskSpec(t + 1, labels, gen_ids,
                              np.concatenate(parts["train"][0]), np.concatenate(parts["train"][1]),
                              np.concatenate(parts["test"][0]), np.concatenate(parts["test"][1])))
    return tasks


# model setup --------------------------------------------------------------------------

def build_network(config: RunConfig) -> moe.Network:
    rng = SeededRng(config.init_seed).spawn(_S_INIT)
    net = moe.init_network(config.input_dim, config.d, config.r, config.layers, config.k,
                           config.classes_per_task, rng, config.expand_start_layer)
    net.meta = {"init_seed": config.init_seed, "data_seed": config.data_seed}
    return net


def new_state(net: moe.Network) -> MethodState:
    n = len(net.moe_layers)
    return MethodState([[] for _ in range(n)], [[] for _ in range(n)])


def _class_mask(net: moe.Network, task: TaskSpec, config: RunConfig):
    if not config.mask_old_logits:
        return None
    mask = np.zeros(net.num_classes, dtype=bool)
    mask[task.class_ids] = True
    return mask


def _learning_rate(config: RunConfig, step: int, total_steps: int) -> float:
    if config.lr_schedule == "cosine":
        return 0.5 * config.lr * (1.0 + np.cos(np.pi * (step - 1) / total_steps))
    return config.lr


def _apply_update(net, grads, state, config, step, lr):
    """SGD or Adam (beta1=0.9, beta2=0.999); Adam moments live for one task."""
    current = moe.named_weights(net)
    for name, g in grads.items():
        w = current[name]
        if config.optimizer == "sgd":
            moe.set_weight(net, name, w - lr * g)
            continue
        m, v = state.optimizer_state.get(name, (np.zeros_like(w), np.zeros_like(w)))
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        state.optimizer_state[name] = (m, v)
        mhat = m / (1 - 0.9**step)
        vhat = v / (1 - 0.999**step)
        moe.set_weight(net, name, w - lr * mhat / (np.sqrt(vhat) + 1e-8))


def _batches(n: int, batch_size: int, rng: SeededRng):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def training_step(net, X, y, state: MethodState, config: RunConfig, task: TaskSpec, sara_rng,
                  step: int = 1, lr: float | None = None):
    """One gradient step on the total objective; returns the loss components."""
    tape = ad.Tape()
    trainable = moe.trainable_parameters(net)
    w = moe.bind(net, tape, trainable)
    logits, zs, _, _ = moe.forward_nodes(net, w, tape.const(X))
    l_cur = star.classification_loss(logits, y, _class_mask(net, task, config))
    l_sara = l_acr = None
    later = task.index > 1
    moe_layers = net.moe_layers
    if later and config.sara_on and config.lambda_sara > 0 and state.anchors and state.anchors[0]:
        per_layer = []
        for slot, i in enumerate(moe_layers):
            samples = star.draw_router_samples(state.stats[slot], config.samples_per_class, sara_rng)
            targets = star.padded_targets(state.anchors[slot], net.layers[i].router.e_total)
            per_layer.append(star.align_loss_node(w[f"layer{i}.router"], targets, samples))
        l_sara = star.sara_total(state.weights, per_layer)
    if later and config.acr_on and config.lambda_acr > 0 and moe_layers:
        terms = []
        for i in moe_layers:
            loads = star.batch_load_node(zs[i], w[f"layer{i}.router"], net.layers[i].k, config.sigma)
            terms.append(star.acr_loss_node(loads, config.epsilon))
        l_acr = terms[0]
        for t in terms[1:]:
            l_acr = ad.add(l_acr, t)
        l_acr = ad.scale(l_acr, 1.0 / len(terms))
    total = star.total_loss(l_cur, l_sara, l_acr, config.lambda_sara, config.lambda_acr, task.index)
    grads = ad.backward(tape, total)
    _apply_update(net, grads, state, config, step, config.lr if lr is None else lr)
    return {
        "task": task.index,
        "total": float(total.value),
        "cur": float(l_cur.value),
        "sara": 0.0 if l_sara is None else float(l_sara.value),
        "acr": 0.0 if l_acr is None else float(l_acr.value),
    }


def record_statistics(net: moe.Network, task: TaskSpec, state: MethodState) -> None:
    """Anchors and router-input Gaussians for the task's classes, current router state."""
    zs = moe.router_inputs(task.train_x, net)
    for slot, i in enumerate(net.moe_layers):
        router = net.layers[i].router
        for c in task.class_ids:
            Z = zs[i][task.train_y == c]
            state.anchors[slot].append(star.compute_anchor(Z, router, c, i))
            state.stats[slot].append(star.fit_router_input_stats(Z, c, i))


def train_task(net: moe.Network, task: TaskSpec, state: MethodState, config: RunConfig):
    """Expand (t > 1), weight layers, optimize, then record statistics for C_t."""
    if task.index != state.tasks_done + 1:
        raise InvalidStateError(f"task {task.index} presented after task {state.tasks_done}")
    state.data_access.append(task.index)
    seed = config.init_seed
    shuffle_rng = SeededRng(config.data_seed).spawn(_S_SHUFFLE).spawn(task.index)
    sara_rng = SeededRng(seed).spawn(_S_SARA).spawn(task.index)
    epochs = [_batches(len(task.train_y), config.batch_size, shuffle_rng) for _ in range(config.epochs)]
    n_moe = len(net.moe_layers)
    if task.index > 1:
        expand_rng = SeededRng(seed).spawn(_S_EXPAND).spawn(task.index)
        for layer in net.layers:
            if layer.expandable:
                moe.expand_layer(layer, expand_rng)
            else:
                moe.freeze_layer(layer)
        moe.expand_classifier(net, len(task.class_ids), expand_rng)
        proxy = epochs[0][0]
        if config.weighting == "sensitivity" and n_moe:
            scores = star.sensitivity_scores(net, task.train_x[proxy], task.train_y[proxy],
                                             _class_mask(net, task, config))
            state.weights = star.blend_weights(scores, config.gamma)
        else:
            state.weights = star.uniform_weights(n_moe)
    else:
        state.weights = star.uniform_weights(n_moe)
    state.optimizer_state = {}
    total_steps = sum(len(b) for b in epochs)
    step = 0
    for batches in epochs:
        for idx in batches:
            step += 1
            lr = _learning_rate(config, step, total_steps)
            rec = training_step(net, task.train_x[idx], task.train_y[idx], state, config, task, sara_rng, step, lr)
            state.loss_trace.append(rec)
    record_statistics(net, task, state)
    state.task_classes.append(list(task.class_ids))
    state.tasks_done = task.index
    return net, state


def evaluate(net: moe.Network, X, y) -> float:
    """Percent of samples whose argmax logit (lowest index on ties) equals the label."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty test set")
    logits, _ = moe.network_forward(np.atleast_2d(X), net)
    return 100.0 * float(np.mean(np.argmax(logits, axis=1) == y))


def drift_report(net: moe.Network, state: MethodState, config: RunConfig, old_count: int,
                 rng: SeededRng) -> star.DriftReport:
    layers = net.moe_layers
    weights = state.weights or star.uniform_weights(len(layers))
    return star.routing_drift([a[:old_count] for a in state.anchors],
                              [s[:old_count] for s in state.stats],
                              [net.layers[i].router for i in layers],
                              weights, config.drift_samples, rng)


def old_task_routing_mass(net: moe.Network, state: MethodState, samples_per_class: int = 32,
                          seed: int = 0) -> np.ndarray:
    """Rows: completed tasks; columns: experts.  Mean dense routing probability of
    synthetic old-class router inputs, averaged over MoE layers."""
    if not state.task_classes:
        raise InvalidStateError("no completed task")
    layers = net.moe_layers
    e_total = net.layers[layers[0]].router.e_total
    rng = SeededRng(seed).spawn(_S_MASS)
    mass = np.zeros((len(state.task_classes), e_total))
    offset = 0
    for t, classes in enumerate(state.task_classes):
        span = slice(offset, offset + len(classes))
        offset += len(classes)
        for slot, i in enumerate(layers):
            samples = star.draw_router_samples(state.stats[slot][span], samples_per_class, rng)
            P = softmax(samples.reshape(-1, samples.shape[-1]) @ net.layers[i].router.w_router)
            mass[t] += P.mean(axis=0)
        mass[t] /= len(layers)
    return mass


def later_expert_mass(mass: np.ndarray) -> float:
    """Summed mass of task i (0-based rows, excluding the last) on experts >= i + 1."""
    total = 0.0
    for i in range(mass.shape[0] - 1):
        total += float(mass[i, i + 1:].sum())
    return total


def count_learnable_parameters(net: moe.Network) -> int:
    weights = moe.named_weights(net)
    return int(sum(weights[n].size for n in moe.trainable_parameters(net)))


def run_experiment(config: RunConfig, keep_network: bool = False):
    """Train on every task in order; returns Metrics (and the net and state if asked)."""
    config.validate()
    stream = generate_stream(config)
    net = build_network(config)
    state = new_state(net)
    accs, reports, frozen_ok = [], [], []
    test_x, test_y = [], []
    for task in stream:
        before = moe.frozen_digest(net)
        old_count = sum(len(c) for c in state.task_classes)
        train_task(net, task, state, config)
        after = moe.frozen_digest(net)
        ok = all(after.get(k) == v for k, v in before.items())
        frozen_ok.append(ok)
        if not ok:
            raise InvariantViolation(f"frozen weights changed during task {task.index}")
        test_x.append(task.test_x)
        test_y.append(task.test_y)
        accs.append(evaluate(net, np.concatenate(test_x), np.concatenate(test_y)))
        rng = SeededRng(config.init_seed).spawn(_S_DRIFT).spawn(task.index)
        reports.append(drift_report(net, state, config, old_count, rng))
    metrics = Metrics(accs, reports, state.loss_trace,
                      old_task_routing_mass(net, state, seed=config.init_seed), frozen_ok)
    return (metrics, net, state) if keep_network else metrics


# ablations and sweeps ---------------------------------------------------------------------

@dataclass
class ResultRow:
    label: str  # variant name or sweep value
    seed: int
    weighting: str
    sara_on: bool
    acr_on: bool
    metrics: Metrics


def _run_one(args):
    return run_experiment(args)


def _run_many(configs: list[RunConfig], workers: int = 1) -> list[Metrics]:
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one, configs))  # map preserves input order
    return [run_experiment(c) for c in configs]


def variant_config(config: RunConfig, variant: str, weighting: str | None = None) -> RunConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    sara, acr = VARIANTS[variant]
    return replace(config, sara_on=sara, acr_on=acr, weighting=weighting or config.weighting)


def run_ablation(config: RunConfig, variants=tuple(VARIANTS), seeds=(0,), weightings=None,
                 workers: int = 1) -> list[ResultRow]:
    variants = list(variants)
    if not variants:
        raise ValueError("variant list is empty")
    if not seeds:
        raise ValueError("need at least one seed")
    weightings = list(weightings or [config.weighting])
    jobs = [(v, wt, s) for v in variants for wt in weightings for s in seeds]
    configs = [variant_config(config, v, wt).with_seed(s) for v, wt, s in jobs]
    results = _run_many(configs, workers)
    return [ResultRow(v, s, wt, VARIANTS[v][0], VARIANTS[v][1], m)
            for (v, wt, s), m in zip(jobs, results)]


def _sweep_value(parameter: str, value):
    if parameter in ("k", "expand_start_layer"):
        if float(value) != int(float(value)) or int(float(value)) < 1:
            raise ValueError(f"{parameter} needs integers >= 1, got {value!r}")
        return int(float(value))
    v = float(value)
    if parameter == "gamma" and not 0.0 <= v <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {value!r}")
    if v < 0:
        raise ValueError(f"{parameter} must be >= 0, got {value!r}")
    return v


def run_sweep(config: RunConfig, parameter: str, values, seeds=(0,), workers: int = 1) -> list[ResultRow]:
    if parameter not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {parameter!r}; valid: {', '.join(SWEEP_PARAMS)}")
    values = [_sweep_value(parameter, v) for v in values]
    if not values:
        raise ValueError("no sweep values given")
    if not seeds:
        raise ValueError("need at least one seed")
    jobs = [(v, s) for v in values for s in seeds]
    configs = [replace(config, **{parameter: v}).with_seed(s).validate() for v, s in jobs]
    results = _run_many(configs, workers)
    return [ResultRow(str(v), s, c.weighting, c.sara_on, c.acr_on, m)
            for (v, s), c, m in zip(jobs, configs, results)]


def medians(rows: list[ResultRow]) -> dict[tuple[str, str], dict[str, float]]:
    groups: dict[tuple[str, str], list[ResultRow]] = {}
    for row in rows:
        groups.setdefault((row.label, row.weighting), []).append(row)
    return {key: {"avg_acc": statistics.median(r.metrics.average for r in rs),
                  "last_acc": statistics.median(r.metrics.last for r in rs),
                  "later_expert_mass": statistics.median(later_expert_mass(r.metrics.routing_mass) for r in rs),
                  "seeds": len(rs)}
            for key, rs in groups.items()}
