"""Routing alignment, capacity regularization and drift measurement.

Functions ending in ``_node`` build autodiff graphs; their plain counterparts
return floats/arrays and are what the tests and reports use.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from .moe import Network, Router, bind, forward_nodes
from .prob import kl_from_logits, log_softmax, softmax
from .rng import SeededRng

DEFAULT_SIGMA = 0.1
DEFAULT_EPSILON = 1e-8
VAR_JITTER = 1e-6


def _readonly(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RoutingAnchor:
    class_id: int
    layer_index: int
    mean_logits: np.ndarray
    hist_dist: np.ndarray

    @property
    def e_at_learning(self) -> int:
        return self.mean_logits.shape[0]


@dataclass(frozen=True)
class RouterInputStats:
    class_id: int
    layer_index: int
    mean: np.ndarray
    diag_var: np.ndarray
    sample_count: int


@dataclass(frozen=True)
class SensitivityWeights:
    raw_scores: np.ndarray
    softmax_weights: np.ndarray
    blended_weights: np.ndarray
    gamma: float


@dataclass
class DriftReport:
    layer_drift: list[float]
    total_drift: float
    sara_loss: float
    old_class_count: int
    bound: float
    bound_holds: bool
    layer_align: list[float]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DriftReport":
        return cls(**d)


# anchors and statistics ------------------------------------------------------------

def compute_anchor(router_inputs, router: Router, class_id: int = 0, layer_index: int = 0) -> RoutingAnchor:
    Z = np.atleast_2d(np.asarray(router_inputs, dtype=np.float64))
    if Z.shape[0] == 0 or Z.size == 0:
        raise ValueError("anchor needs at least one router input")
    mean_logits = (Z @ router.w_router).mean(axis=0)
    return RoutingAnchor(class_id, layer_index, _readonly(mean_logits), _readonly(softmax(mean_logits)))


def pad_target(anchor: RoutingAnchor, e_total_now: int) -> np.ndarray:
    """Historical distribution with zeros for experts added afterwards."""
    if e_total_now < anchor.e_at_learning:
        raise ValueError("experts are never removed: e_total_now < e_at_learning")
    out = np.zeros(e_total_now)
    out[: anchor.e_at_learning] = anchor.hist_dist
    return out


def fit_router_input_stats(router_inputs, class_id: int = 0, layer_index: int = 0,
                           jitter: float = VAR_JITTER) -> RouterInputStats:
    Z = np.atleast_2d(np.asarray(router_inputs, dtype=np.float64))
    if Z.shape[0] < 2:
        raise ValueError("need at least two router inputs to estimate a variance")
    mu = Z.mean(axis=0)
    var = ((Z - mu) ** 2).mean(axis=0) + jitter
    return RouterInputStats(class_id, layer_index, _readonly(mu), _readonly(var), Z.shape[0])


# routing alignment ----------------------------------------------------------------------

def _check_classes(anchors, stats):
    if [a.class_id for a in anchors] != [s.class_id for s in stats]:
        raise ValueError("anchors and statistics cover different class sets")


def draw_router_samples(stats: list[RouterInputStats], samples_per_class: int, rng: SeededRng) -> np.ndarray:
    """Synthetic router inputs, shape (classes, samples_per_class, d)."""
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be >= 1")
    if not stats:
        return np.zeros((0, samples_per_class, 0))
    mu = np.stack([s.mean for s in stats])[:, None, :]
    sd = np.sqrt(np.stack([s.diag_var for s in stats]))[:, None, :]
    noise = rng.normal((len(stats), samples_per_class, mu.shape[-1]))
    return mu + sd * noise


def padded_targets(anchors: list[RoutingAnchor], e_total: int) -> np.ndarray:
    return np.stack([pad_target(a, e_total) for a in anchors])


def align_loss_node(w_router: ad.Node, targets: np.ndarray, samples: np.ndarray) -> ad.Node:
    """Sum over classes of the sample-mean KL(target_c || softmax(z @ W))."""
    n_cls, n_s, d = samples.shape
    tape = w_router.tape
    logq = ad.log_softmax(ad.matmul(tape.const(samples.reshape(n_cls * n_s, d)), w_router))
    rep = np.repeat(targets, n_s, axis=0)
    safe = np.where(rep > 0, rep, 1.0)
    neg_entropy = float(np.sum(np.where(rep > 0, rep * np.log(safe), 0.0)))
    cross = ad.sum(ad.mul(logq, tape.const(rep)))
    return ad.scale(ad.add(cross, -neg_entropy), -1.0 / n_s)


def align_loss_values(w_router: np.ndarray, targets: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """Per-class sample-mean KL, shape (classes,)."""
    n_cls, n_s, d = samples.shape
    logits = samples.reshape(n_cls * n_s, d) @ w_router
    kl = kl_from_logits(np.repeat(targets, n_s, axis=0), logits)
    return kl.reshape(n_cls, n_s).mean(axis=1)


def sara_layer_loss(anchors, stats, router: Router, samples_per_class: int, rng: SeededRng) -> float:
    _check_classes(anchors, stats)
    if not anchors:
        return 0.0
    samples = draw_router_samples(stats, samples_per_class, rng)
    targets = padded_targets(anchors, router.e_total)
    return float(align_loss_values(router.w_router, targets, samples).sum())


# sensitivity weighting ------------------------------------------------------------------

def classification_loss(logits: ad.Node, y: np.ndarray, class_mask: np.ndarray | None = None) -> ad.Node:
    """Mean cross-entropy; ``class_mask`` restricts the softmax to some classes."""
    if class_mask is not None:
        logits = ad.add(logits, np.where(class_mask, 0.0, -1e9))
    logp = ad.log_softmax(logits)
    picked = ad.gather(logp, np.asarray(y, dtype=np.int64)[:, None])
    return ad.scale(ad.sum(picked), -1.0 / len(y))


def sensitivity_scores(net: Network, X, y, class_mask=None) -> np.ndarray:
    """Frobenius norm of the classification-loss gradient on each MoE router."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0 or len(y) == 0:
        raise ValueError("proxy batch is empty")
    tape = ad.Tape()
    names = [f"layer{i}.router" for i in net.moe_layers]
    w = bind(net, tape, names)
    logits, _, _, _ = forward_nodes(net, w, tape.const(X))
    grads = ad.backward(tape, classification_loss(logits, y, class_mask))
    return np.array([np.linalg.norm(grads[n]) for n in names])


def blend_weights(scores, gamma: float) -> SensitivityWeights:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("need at least one layer score")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    alpha = softmax(s)
    blended = gamma * alpha + (1.0 - gamma) / s.size
    return SensitivityWeights(_readonly(s), _readonly(alpha), _readonly(blended), float(gamma))


def uniform_weights(n_layers: int) -> SensitivityWeights:
    return blend_weights(np.zeros(n_layers), 0.0)


def sara_total(weights: SensitivityWeights, layer_losses):
    alpha = weights.blended_weights
    if len(layer_losses) != alpha.size:
        raise ValueError("one alignment loss per MoE layer is required")
    if any(isinstance(l, ad.Node) for l in layer_losses):
        total = None
        for a, l in zip(alpha, layer_losses):
            if not isinstance(l, ad.Node):
                continue
            term = ad.scale(l, a)
            total = term if total is None else ad.add(total, term)
        return total
    return float(sum(a * l for a, l in zip(alpha, layer_losses)))


# capacity regularization -----------------------------------------------------------------------

def _competitor_index(g: np.ndarray, k: int) -> np.ndarray:
    """Index of the k-th highest logit among the other experts, per (row, j)."""
    order = np.argsort(-g, axis=-1, kind="stable")
    rank = np.argsort(order, axis=-1, kind="stable")  # position of each expert in order
    in_top = rank < k
    return np.where(in_top, order[:, [k]], order[:, [k - 1]])


def smooth_select_prob(g, j: int, k: int, sigma: float = DEFAULT_SIGMA) -> float:
    """Phi((g_j - tau_k) / sigma) with tau_k the k-th highest logit excluding j."""
    g = np.asarray(g, dtype=np.float64)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= g.size:
        return 1.0
    others = np.delete(g, j)
    tau = np.sort(others)[::-1][k - 1]
    return float(ndtr((g[j] - tau) / sigma))


def smooth_select_node(h: ad.Node, k: int, sigma: float) -> ad.Node:
    """Elementwise selection probabilities for a (B, E) logits node."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if k >= h.shape[-1]:
        return h.tape.const(np.ones(h.shape))
    tau = ad.gather(h, _competitor_index(h.value, k))
    return ad.norm_cdf(ad.scale(ad.add(h, ad.neg(tau)), 1.0 / sigma))


def batch_load_node(Z, w_router: ad.Node, k: int, sigma: float) -> ad.Node:
    """Summed smooth selection probabilities; ``Z`` may be an array or a node."""
    if not isinstance(Z, ad.Node):
        Z = w_router.tape.const(np.atleast_2d(np.asarray(Z, dtype=np.float64)))
    if Z.shape[0] == 0:
        raise ValueError("empty batch")
    h = ad.matmul(Z, w_router)
    return ad.sum(smooth_select_node(h, k, sigma), axis=0)


def batch_load(Z, router: Router, k: int, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    tape = ad.Tape()
    return batch_load_node(np.asarray(Z, dtype=np.float64), tape.const(router.w_router), k, sigma).value


def acr_loss_node(loads: ad.Node, epsilon: float = DEFAULT_EPSILON, mean: float | None = None) -> ad.Node:
    """One-sided overload penalty around the gradient-detached mean load.

    ``mean`` overrides the detached batch mean; finite-difference checks pass the
    value taken at the unperturbed point so both sides see the same constant.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if mean is None:
        mean = float(ad.stop_gradient(loads).value.mean())
    excess = ad.relu(ad.add(loads, -mean))
    return ad.scale(ad.sum(ad.square(excess)), 1.0 / (loads.value.size * (mean * mean + epsilon)))


def acr_loss(loads, epsilon: float = DEFAULT_EPSILON) -> float:
    L = np.asarray(loads, dtype=np.float64)
    if L.size < 1:
        raise ValueError("need at least one expert load")
    return acr_loss_fixed_mean(L, float(L.mean()), epsilon)


def acr_loss_fixed_mean(loads, mean: float, epsilon: float = DEFAULT_EPSILON) -> float:
    """ACR value with the reference mean supplied from outside (held constant)."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    L = np.asarray(loads, dtype=np.float64)
    return float(np.sum(np.maximum(L - mean, 0.0) ** 2) / (L.size * (mean * mean + epsilon)))


# drift -------------------------------------------------------------------------------------

def routing_drift(anchors: list[list[RoutingAnchor]], stats: list[list[RouterInputStats]],
                  routers: list[Router], weights: SensitivityWeights, samples_per_class: int,
                  rng: SeededRng) -> DriftReport:
    """Monte-Carlo drift per layer, its weighted total and the matching bound.

    The L1 drift and the alignment loss are evaluated on the same samples.
    """
    n_layers = len(routers)
    if not (len(anchors) == len(stats) == n_layers == weights.blended_weights.size):
        raise ValueError("anchors, statistics, routers and weights must cover the same layers")
    n_old = len(anchors[0]) if n_layers else 0
    if n_old == 0:
        zeros = [0.0] * n_layers
        return DriftReport(zeros, 0.0, 0.0, 0, 0.0, True, list(zeros))
    drift, align = [], []
    for layer_anchors, layer_stats, router in zip(anchors, stats, routers):
        _check_classes(layer_anchors, layer_stats)
        if len(layer_anchors) != n_old:
            raise ValueError("every layer must cover the same old classes")
        samples = draw_router_samples(layer_stats, samples_per_class, rng)
        targets = padded_targets(layer_anchors, router.e_total)
        n_cls, n_s, d = samples.shape
        logits = samples.reshape(n_cls * n_s, d) @ router.w_router
        rep = np.repeat(targets, n_s, axis=0)
        l1 = np.abs(rep - softmax(logits)).sum(axis=1).reshape(n_cls, n_s).mean(axis=1)
        kl = kl_from_logits(rep, logits).reshape(n_cls, n_s).mean(axis=1)
        drift.append(float(l1.sum()))
        align.append(float(kl.sum()))
    alpha = weights.blended_weights
    total = float(np.dot(alpha, drift))
    xi = float(np.dot(alpha, align))
    bound = math.sqrt(2.0 * n_old * xi)
    return DriftReport(drift, total, xi, n_old, bound, total <= bound + 1e-9, align)


def total_loss(l_cur, l_sara, l_acr, lambda_sara: float = 0.6, lambda_acr: float = 0.4,
               task_index: int | None = None):
    """Classification loss plus weighted regularizers; first task uses l_cur only."""
    if lambda_sara < 0 or lambda_acr < 0:
        raise ValueError("lambda weights must be non-negative")
    if task_index == 1:
        return l_cur
    terms = [(1.0, l_cur), (lambda_sara, l_sara), (lambda_acr, l_acr)]
    if any(isinstance(t, ad.Node) for _, t in terms):
        total = None
        for lam, t in terms:
            if t is None or (lam == 0.0 and total is not None):
                continue
            if isinstance(t, ad.Node):
                term = t if lam == 1.0 else ad.scale(t, lam)
            else:
                term = lam * float(t)
            total = term if total is None else ad.add(total, term)
        return total
    return float(sum(lam * float(t) for lam, t in terms if t is not None))
