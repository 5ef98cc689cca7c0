"""Shared builders for the test suite."""

import numpy as np

from reluverify import bab, model, relax
from reluverify.cli import generate_instance


def scalar_relu_net(out_weight=1.0, out_bias=0.0):
    """m(x) = out_weight * ReLU(x) + out_bias."""
    return model.make_network([
        (np.array([[1.0]]), np.array([0.0]), model.RELU),
        (np.array([[out_weight]]), np.array([out_bias]), model.LINEAR),
    ])


def scalar_task(net, lo=-1.0, hi=1.0, C=None, **kw):
    C = np.array([[1.0]]) if C is None else np.asarray(C)
    return model.VerificationTask(net, np.atleast_1d(lo).astype(float),
                                  np.atleast_1d(hi).astype(float), C, **kw)


def make_domain(net, lo, hi, splits=None):
    """A SubDomain over the given box with freshly propagated bounds."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    splits = dict(splits or {})
    bounds = relax.propagate_bounds(net, lo, hi, splits)
    return bab.SubDomain(lo, hi, splits, bounds, depth=len(splits), parent_lower_bound=float("-inf"))


def random_net(rng, n_inputs, widths, n_outputs, scale=1.5):
    defs = []
    prev = n_inputs
    for w in widths:
        defs.append((rng.normal(0, scale / np.sqrt(prev), (w, prev)),
                     rng.normal(0, 0.2, w), model.RELU))
        prev = w
    defs.append((rng.normal(0, scale / np.sqrt(prev), (n_outputs, prev)),
                 rng.normal(0, 0.2, n_outputs), model.LINEAR))
    return model.make_network(defs)


def random_task(rng, n_inputs=3, widths=(5, 4), n_outputs=2, eps=0.5, scale=2.0, **kw):
    net, lo, hi, C = generate_instance(rng, n_inputs, list(widths), n_outputs, eps, scale)
    return model.VerificationTask(net, lo, hi, C, **kw)


def oracle_sized_task(rng, margin_gap=1e-3, **kw):
    """A random task within the exact oracle's enumeration budget.

    Instances whose true minimum margin lies within margin_gap of zero are
    rejected: their verdict is a knife-edge coin flip that no finite-budget
    relaxation-based search can settle, so they make meaningless test cases.
    The well-posedness call is made by the independent oracle, never by the
    verifier under test.
    """
    from reluverify import oracle

    while True:
        n0 = int(rng.integers(2, 4))
        widths = [int(rng.integers(3, 6)) for _ in range(int(rng.integers(1, 3)))]
        task = random_task(rng, n0, widths, 2, eps=float(rng.uniform(0.1, 0.5)), **kw)
        lows, ups = oracle._interval_bounds(task.network, task.input_lower, task.input_upper)
        n_unstable = 0
        for k, layer in enumerate(task.network.layers[:-1]):
            if layer.activation == model.RELU:
                n_unstable += int(np.count_nonzero((lows[k] < 0.0) & (ups[k] > 0.0)))
        if n_unstable > oracle.MAX_ORACLE_UNSTABLE:
            continue
        if margin_gap > 0.0:
            min_value, _ = oracle.exact_min_margin(task)
            if abs(min_value) < margin_gap:
                continue
        return task


def naive_forward(net, x):
    """Pure-Python re-implementation of the forward pass (independent oracle)."""
    h = [float(v) for v in x]
    for layer in net.layers:
        W = layer.weights.tolist()
        b = layer.bias.tolist()
        z = []
        for i in range(len(W)):
            acc = b[i]
            for j in range(len(h)):
                acc += W[i][j] * h[j]
            z.append(acc)
        if layer.activation == model.RELU:
            h = [v if v > 0.0 else 0.0 for v in z]
        else:
            h = z
    return h
