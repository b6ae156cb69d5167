"""Self-contained property suites behind ``starmoe check``.

Each suite returns a :class:`SuiteResult`; a failing suite carries the seed of
the first failing case so it can be replayed.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from . import moe, prob, star
from .rng import SeededRng


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    detail: str
    seed: int | None = None
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        seed = "" if self.seed is None else f" (reproduce with seed {self.seed})"
        return f"{status} {self.name}: {self.cases} cases, {self.detail}{seed} [{self.seconds:.1f}s]"


def _timed(fn):
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        result = fn(*args, **kwargs)
        result.seconds = time.perf_counter() - start
        return result

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# drift bound ---------------------------------------------------------------------------------

def random_drift_config(rng: SeededRng, d: int | None = None):
    """Random anchors, statistics, routers and weights for the drift bound."""
    n_layers = int(rng.integers(2, 9, 1)[0])
    n_old = int(rng.integers(1, 21, 1)[0])
    d = d or int(rng.integers(2, 9, 1)[0])
    anchors, stats, routers = [], [], []
    for layer in range(n_layers):
        e_total = int(rng.integers(2, 17, 1)[0])
        scale = float(rng.uniform(1)[0]) * 3.0
        routers.append(moe.Router(rng.normal((d, e_total)) * scale))
        layer_anchors, layer_stats = [], []
        for c in range(n_old):
            e_learn = int(rng.integers(1, e_total + 1, 1)[0])
            logits = rng.normal(e_learn) * 2.0
            layer_anchors.append(star.RoutingAnchor(c, layer, logits, prob.softmax(logits)))
            var = rng.uniform(d) * 2.0
            layer_stats.append(star.RouterInputStats(c, layer, rng.normal(d), var, 10))
        anchors.append(layer_anchors)
        stats.append(layer_stats)
    weights = star.blend_weights(rng.normal(n_layers) * 2.0, float(rng.uniform(1)[0]))
    return anchors, stats, routers, weights


@_timed
def check_drift_bound(cases: int = 1000, seed: int = 0, samples_per_class: int = 8) -> SuiteResult:
    """Pinsker per pair, then the weighted drift bound on shared samples."""
    root = SeededRng(seed)
    worst = -np.inf
    for case in range(cases):
        rng = root.spawn(case)
        # Pinsker on one random pair
        e = int(rng.integers(2, 17, 1)[0])
        p = prob.softmax(rng.normal(e) * 3.0)
        if rng.uniform(1)[0] < 0.5:
            p[: int(rng.integers(1, e, 1)[0])] = 0.0
            p = p / p.sum() if p.sum() > 0 else np.eye(e)[-1]
        q = prob.softmax(rng.normal(e) * 3.0)
        tv = 0.5 * np.abs(p - q).sum()
        if tv * tv > 0.5 * prob.kl_divergence(p, q) + 1e-12:
            return SuiteResult("drift_bound (Pinsker)", False, case + 1,
                               f"Pinsker violated: tv^2={tv * tv:.3e} > kl/2", seed=case)
        anchors, stats, routers, weights = random_drift_config(rng)
        report = star.routing_drift(anchors, stats, routers, weights, samples_per_class, rng)
        worst = max(worst, report.total_drift - report.bound)
        if not report.bound_holds:
            return SuiteResult("drift_bound (Pinsker)", False, case + 1,
                               f"drift {report.total_drift:.6g} > bound {report.bound:.6g}", seed=case)
    return SuiteResult("drift_bound (Pinsker)", True, cases,
                       f"max(drift - bound) = {worst:.3e}")


# smooth load estimator ------------------------------------------------------------------------

@_timed
def check_smooth_estimator(cases: int = 200, draws: int = 100_000, seed: int = 1,
                           tol: float = 0.01) -> SuiteResult:
    """Phi-based selection probability against simulated noisy top-k membership."""
    root = SeededRng(seed)
    worst = 0.0
    for case in range(cases):
        rng = root.spawn(case)
        e = int(rng.integers(2, 17, 1)[0])
        g = rng.normal(e) * 0.5
        j = int(rng.integers(0, e, 1)[0])
        k = int(rng.integers(1, e, 1)[0])
        sigma = 0.05 + float(rng.uniform(1)[0]) * 0.95
        p = star.smooth_select_prob(g, j, k, sigma)
        tau = np.sort(np.delete(g, j))[::-1][k - 1]
        freq = float(np.mean(g[j] + sigma * rng.normal(draws) > tau))
        err = abs(p - freq)
        worst = max(worst, err)
        if err > tol:
            return SuiteResult("smooth_estimator", False, case + 1,
                               f"|Phi - MC| = {err:.4f} > {tol}", seed=case)
    return SuiteResult("smooth_estimator", True, cases, f"max |Phi - MC| = {worst:.4f}")


# gradients -------------------------------------------------------------------------------------

def random_small_problem(rng: SeededRng):
    """Small expanded network plus a batch, old-class statistics and anchors."""
    d = int(rng.integers(3, 9, 1)[0])
    r = int(rng.integers(1, 3, 1)[0])
    input_dim = int(rng.integers(3, 7, 1)[0])
    e_final = int(rng.integers(2, 5, 1)[0])
    k = int(rng.integers(1, e_final + 1, 1)[0])
    n_layers = int(rng.integers(1, 3, 1)[0])
    net = moe.init_network(input_dim, d, r, n_layers, k, 2, rng)
    for layer in net.layers:  # larger weights so every path carries signal
        layer.router.w_router = rng.normal(layer.router.w_router.shape) / np.sqrt(d)
        for e in layer.experts:
            e.w_down, e.w_up = rng.normal(e.w_down.shape), rng.normal(e.w_up.shape)
    net.classifier = rng.normal(net.classifier.shape)
    for _ in range(e_final - 1):
        for layer in net.layers:
            moe.expand_layer(layer, rng)
            e = layer.experts[-1]
            e.w_down, e.w_up = rng.normal(e.w_down.shape), rng.normal(e.w_up.shape)
            layer.router.w_router[:, -1] = rng.normal(d) / np.sqrt(d)
    moe.expand_classifier(net, 1, rng)
    X = rng.normal((6, input_dim))
    y = rng.integers(0, net.num_classes, 6)
    n_old = int(rng.integers(1, 4, 1)[0])
    anchors, samples = [], []
    for i, layer in enumerate(net.layers):
        e_learn = int(rng.integers(1, layer.router.e_total + 1, 1)[0])
        layer_anchors = []
        for c in range(n_old):
            logits = rng.normal(e_learn)
            layer_anchors.append(star.RoutingAnchor(c, i, logits, prob.softmax(logits)))
        anchors.append(layer_anchors)
        samples.append(rng.normal((n_old, 2, d)))
    weights = star.blend_weights(rng.normal(n_layers), 0.5)
    return net, X, y, anchors, samples, weights


def problem_losses(net, X, y, anchors, samples, weights, sigma=1.0, epsilon=1e-8):
    """Loss builders ``fn(tape, nodes)`` for each objective on one problem."""
    trainable = moe.trainable_parameters(net)

    def bound(tape, nodes):
        w = moe.bind(net, tape)
        w.update(nodes)
        return w

    def cur(tape, nodes):
        logits, _, _, _ = moe.forward_nodes(net, bound(tape, nodes), tape.const(X))
        return star.classification_loss(logits, y)

    def align(tape, nodes):
        w = bound(tape, nodes)
        per_layer = [star.align_loss_node(w[f"layer{i}.router"],
                                          star.padded_targets(anchors[i], net.layers[i].router.e_total),
                                          samples[i]) for i in range(len(net.layers))]
        return star.sara_total(weights, per_layer)

    def layer_loads(tape, nodes):
        w = bound(tape, nodes)
        _, zs, _, _ = moe.forward_nodes(net, w, tape.const(X))
        return [ad.sum(star.smooth_select_node(ad.matmul(zs[i], w[f"layer{i}.router"]), layer.k, sigma), axis=0)
                for i, layer in enumerate(net.layers)]

    # the mean load is detached, so the numerical side must hold it at the base point too
    held = [float(L.value.mean()) for L in layer_loads(ad.Tape(), {})]

    def acr(tape, nodes):
        terms = [star.acr_loss_node(L, epsilon, mean=m) for L, m in zip(layer_loads(tape, nodes), held)]
        out = terms[0]
        for t in terms[1:]:
            out = ad.add(out, t)
        return out

    def total(tape, nodes):
        return star.total_loss(cur(tape, nodes), align(tape, nodes), acr(tape, nodes), 0.6, 0.4, task_index=2)

    params = {n: moe.named_weights(net)[n] for n in trainable}
    return {"L_cur": cur, "L_align": align, "L_ACR": acr, "L_total": total}, params


def kink_margin(losses, params, net, X) -> float:
    """Distance of the evaluation point to the nearest non-differentiable switch.

    Covers every ReLU input on the loss tapes and every gap between sorted router
    logits (top-k membership and the competitor threshold both flip there).
    """
    margin = np.inf
    for fn in losses.values():
        tape = ad.Tape()
        fn(tape, {k: tape.param(v, k) for k, v in params.items()})
        for node in tape.nodes:
            if node.backward_fn is not None and node.backward_fn.__qualname__.startswith("relu."):
                margin = min(margin, float(np.min(np.abs(node.parents[0].value))))
    _, traces = moe.network_forward(X, net)
    for tr in traces:
        h = np.sort(np.atleast_2d(tr.h), axis=-1)
        if h.shape[-1] > 1:
            margin = min(margin, float(np.min(np.diff(h, axis=-1))))
    return margin


@_timed
def check_gradients(cases: int = 20, seed: int = 2, step: float = 1e-5, tol: float = 1e-4,
                    min_margin: float = 1e-3) -> SuiteResult:
    root = SeededRng(seed)
    worst, redraws = 0.0, 0
    for case in range(cases):
        rng = root.spawn(case)
        while True:  # finite differences are meaningless across a kink, so redraw such points
            problem = random_small_problem(rng)
            losses, params = problem_losses(*problem)
            if kink_margin(losses, params, problem[0], problem[1]) >= min_margin:
                break
            redraws += 1
        for name, fn in losses.items():
            report = ad.finite_diff_check(fn, params, step, tol)
            worst = max(worst, report.max_rel_error)
            if not report.passed:
                bad = max(report.rel_errors, key=report.rel_errors.get)
                return SuiteResult("gradients", False, case + 1,
                                   f"{name} wrt {bad}: rel err {report.rel_errors[bad]:.2e} > {tol}", seed=case)
    return SuiteResult("gradients", True, cases,
                       f"max rel err {worst:.2e} over L_cur, L_align, L_ACR, L_total ({redraws} kink redraws)")


# gating ---------------------------------------------------------------------------------------

def brute_topk(h, k) -> set[int]:
    ranked = sorted(range(len(h)), key=lambda j: (-h[j], j))
    return set(ranked[: min(k, len(h))])


@_timed
def check_gating(cases: int = 1000, seed: int = 3) -> SuiteResult:
    root = SeededRng(seed)
    worst = 0.0
    for case in range(cases):
        rng = root.spawn(case)
        d = int(rng.integers(2, 9, 1)[0])
        e = int(rng.integers(1, 9, 1)[0])
        router = moe.Router(rng.normal((d, e)))
        z = rng.normal(d)
        if case % 3 == 0:  # coarse logits so ties actually occur
            router.w_router = np.round(router.w_router)
            z = np.round(z)
        h = router.logits(z)
        _, dense_gate = moe.route_topk(z, router, e)
        gap = float(np.max(np.abs(dense_gate - prob.softmax(h))))
        worst = max(worst, gap)
        if gap > 1e-12:
            return SuiteResult("gating", False, case + 1, f"k=E gate differs from softmax by {gap:.2e}", seed=case)
        k = int(rng.integers(1, e + 1, 1)[0])
        K, gate = moe.route_topk(z, router, k)
        support = set(np.flatnonzero(gate > 0).tolist()) | set(K.tolist())
        if set(K.tolist()) != brute_topk(h, k) or support != set(K.tolist()):
            return SuiteResult("gating", False, case + 1, f"support {sorted(K)} != top-{k} oracle", seed=case)
        if abs(gate.sum() - 1.0) > 1e-9:
            return SuiteResult("gating", False, case + 1, "gate does not sum to 1", seed=case)
    return SuiteResult("gating", True, cases, f"max |G - P| at k=E: {worst:.1e}; top-k supports match oracle")


# ACR stop-gradient ------------------------------------------------------------------------------

@_timed
def check_acr_stop_gradient(cases: int = 200, seed: int = 4, step: float = 1e-6) -> SuiteResult:
    """Analytic ACR gradient equals the held-mean derivative, not the full one."""
    root = SeededRng(seed)
    for case in range(cases):
        rng = root.spawn(case)
        e = int(rng.integers(2, 17, 1)[0])
        L = rng.uniform(e) * 10.0 + 0.1
        tape = ad.Tape()
        node = tape.param(L, "L")
        grad = ad.backward(tape, star.acr_loss_node(node, 1e-8))["L"]
        mean = float(L.mean())
        held = np.array([(star.acr_loss_fixed_mean(L + step * np.eye(e)[j], mean)
                          - star.acr_loss_fixed_mean(L - step * np.eye(e)[j], mean)) / (2 * step)
                         for j in range(e)])
        err = np.max(np.abs(grad - held) / np.maximum(np.abs(held), 1e-8))
        if err > 1e-4:
            return SuiteResult("acr_stop_gradient", False, case + 1, f"held-mean mismatch {err:.2e}", seed=case)
        # one-sidedness: loads below the mean get exactly zero gradient
        if np.any(grad[L < mean] != 0.0):
            return SuiteResult("acr_stop_gradient", False, case + 1, "gradient on below-mean load", seed=case)
        # the mean path really is cut: gradients sum away from what the undetached loss would give
        full = np.array([(star.acr_loss(L + step * np.eye(e)[j]) - star.acr_loss(L - step * np.eye(e)[j]))
                         / (2 * step) for j in range(e)])
        if np.any(L > mean) and np.allclose(full, grad, rtol=1e-6, atol=1e-12):
            return SuiteResult("acr_stop_gradient", False, case + 1,
                               "gradient matches the undetached loss; mean is not detached", seed=case)
    return SuiteResult("acr_stop_gradient", True, cases, "gradient equals held-mean finite differences")


SUITES = {
    "drift_bound": check_drift_bound,
    "smooth_estimator": check_smooth_estimator,
    "gradients": check_gradients,
    "gating": check_gating,
    "acr_stop_gradient": check_acr_stop_gradient,
}


def run_all() -> list[SuiteResult]:
    return [fn() for fn in SUITES.values()]


def ndtr_reference(x):
    """Standard normal CDF used by the estimator (exposed for tests)."""
    return ndtr(x)
