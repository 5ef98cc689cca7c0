"""Symbolic linear lower bounds of the margin via backward propagation through
the ReLU triangle relaxation, with optimizable lower-bound slopes.

The backward pass walks the network output-to-input keeping a linear function
of the current layer's post-activations. At an unstable ReLU the coefficient
sign decides which side of the relaxation is substituted: a non-negative
coefficient takes the lower line alpha * z (slope in [0, 1]), a negative one
takes the upper chord through (l, 0) and (u, u) and its intercept folds into
the offset. The coefficient on each post-activation, captured just before the
layer's relaxation is traversed, is the per-neuron sensitivity used by the
branching heuristics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .model import Network, RELU

STABLE_ACTIVE = "stable-active"
STABLE_INACTIVE = "stable-inactive"
UNSTABLE = "unstable"

# Clamp-induced bound crossings larger than this prune a sub-domain as
# infeasible; smaller crossings are treated as floating-point slivers and
# collapsed to a point so that pruning never relies on rounding noise.
INFEASIBILITY_TOL = 1e-9


def stability_tag(l: float, u: float) -> str:
    """Stability of a neuron from its pre-activation interval (l = 0 counts as active)."""
    if l >= 0.0:
        return STABLE_ACTIVE
    if u <= 0.0:
        return STABLE_INACTIVE
    return UNSTABLE


@dataclass
class NeuronBounds:
    """Pre-activation intervals for every hidden layer (layer k = 0 .. L-2).

    lower[k] > upper[k] anywhere marks the sub-domain infeasible; that is a
    legitimate signal produced by split clamping, not an error.
    """

    lower: List[np.ndarray]
    upper: List[np.ndarray]
    infeasible_layer: Optional[int] = None

    def is_feasible(self) -> bool:
        if self.infeasible_layer is not None:
            return False
        return all(np.all(l <= u) for l, u in zip(self.lower, self.upper))

    def unstable_mask(self, k: int) -> np.ndarray:
        return (self.lower[k] < 0.0) & (self.upper[k] > 0.0)

    def n_unstable(self, net: Network) -> int:
        total = 0
        for k in range(len(self.lower)):
            if net.layers[k].activation == RELU:
                total += int(np.count_nonzero(self.unstable_mask(k)))
        return total

    def copy(self) -> "NeuronBounds":
        return NeuronBounds(
            [l.copy() for l in self.lower],
            [u.copy() for u in self.upper],
            self.infeasible_layer,
        )


@dataclass
class RelaxationParams:
    """Lower-bound slope per neuron for each ReLU layer; entries live in [0, 1].

    Only the entries at unstable neurons matter; stable neurons are substituted
    exactly regardless of the stored slope.
    """

    alpha: Dict[int, np.ndarray]

    def __post_init__(self):
        for k, arr in self.alpha.items():
            if np.any(arr < 0.0) or np.any(arr > 1.0):
                raise ValueError(f"alpha[{k}]: slopes must lie in [0, 1]")

    @classmethod
    def adaptive(cls, net: Network, bounds: NeuronBounds) -> "RelaxationParams":
        """Default slopes: 1 where u >= |l|, else 0 (good zero-iteration baseline)."""
        alpha = {}
        for k in range(len(bounds.lower)):
            if net.layers[k].activation == RELU:
                alpha[k] = np.where(bounds.upper[k] >= -bounds.lower[k], 1.0, 0.0)
        return cls(alpha)

    def copy(self) -> "RelaxationParams":
        return RelaxationParams({k: v.copy() for k, v in self.alpha.items()})


@dataclass
class BoundResult:
    """A sound linear lower bound w @ x + b of one margin row over a sub-domain.

    A[k] holds the backward coefficients on layer k's post-activations,
    recorded before that layer's relaxation was traversed; w is the same
    quantity at the input layer. neuron_bounds is the snapshot the pass used.
    """

    w: Optional[np.ndarray]
    b: float
    lower_bound: float
    A: Dict[int, np.ndarray]
    neuron_bounds: NeuronBounds
    feasible: bool = True

    @classmethod
    def infeasible_marker(cls, bounds: NeuronBounds) -> "BoundResult":
        return cls(None, float("nan"), float("inf"), {}, bounds, feasible=False)


def relu_relaxation(l: float, u: float, alpha: float) -> Tuple[float, float, float]:
    """Triangle relaxation lines for an unstable neuron.

    Returns (upper_slope, upper_intercept, lower_slope): the chord through
    (l, 0) and (u, u) above, and alpha * z below. Stable neurons must be
    substituted by the caller (identity or zero) and are rejected here.
    """
    if not (l < 0.0 < u):
        raise ValueError(f"relu_relaxation: neuron with bounds [{l}, {u}] is not unstable")
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"relu_relaxation: alpha {alpha} outside [0, 1]")
    denom = u - l
    return u / denom, -u * l / denom, alpha


def dot_ordered(w: np.ndarray, x: np.ndarray) -> float:
    """Dot product accumulated left-to-right over dimensions (fixed-order contract)."""
    total = 0.0
    for k in range(w.shape[0]):
        total += w[k] * x[k]
    return float(total)


def concretize_lower(w: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
    """Box minimum of w @ x, accumulated left-to-right like dot_ordered.

    Term-by-term this equals w @ x* for the corner x* picked by the witness
    sign rule, so the two agree bit-for-bit.
    """
    total = 0.0
    for k in range(w.shape[0]):
        total += min(w[k] * lo[k], w[k] * hi[k])
    return float(total)


def _alpha_for(params: Optional[RelaxationParams], bounds: NeuronBounds, k: int) -> np.ndarray:
    if params is not None and k in params.alpha:
        return params.alpha[k]
    return np.where(bounds.upper[k] >= -bounds.lower[k], 1.0, 0.0)


def _relu_backward(
    lam: np.ndarray, l: np.ndarray, u: np.ndarray, alpha: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Push backward coefficients through one ReLU layer's relaxation.

    lam has shape (m, n); returns the new coefficients on the pre-activations
    and the per-row offset contribution from upper-line intercepts.
    """
    act = l >= 0.0
    inact = (u <= 0.0) & ~act
    unst = ~(act | inact)
    denom = np.where(unst, u - l, 1.0)
    up_slope = np.where(unst, u / denom, 0.0)
    up_icpt = np.where(unst, -u * l / denom, 0.0)
    lo_slope = np.where(act, 1.0, np.where(unst, alpha, 0.0))

    pos = lam >= 0.0  # ties at exactly 0 take the lower relaxation
    slope_neg = np.where(unst, up_slope, lo_slope)
    slope = np.where(pos, lo_slope[None, :], slope_neg[None, :])
    off_delta = np.where(pos, 0.0, lam * up_icpt[None, :]).sum(axis=1)
    return lam * slope, off_delta


def _backward_from_layer(
    net: Network,
    obj_layer: int,
    c_mat: np.ndarray,
    bounds: NeuronBounds,
    params: Optional[RelaxationParams],
    record_A: bool,
) -> Tuple[np.ndarray, np.ndarray, Dict[int, np.ndarray]]:
    """Linear lower bounds of c_mat @ z^(obj_layer) as functions of the input.

    Returns (coeffs on x, offsets, A) where A maps each traversed ReLU layer
    to the coefficients recorded before its relaxation.
    """
    layer = net.layers[obj_layer]
    lam = c_mat @ layer.weights
    off = c_mat @ layer.bias
    A: Dict[int, np.ndarray] = {}
    for k in range(obj_layer - 1, -1, -1):
        lyr = net.layers[k]
        if lyr.activation == RELU:
            if record_A:
                A[k] = lam.copy()
            alpha = np.clip(_alpha_for(params, bounds, k), 0.0, 1.0)
            lam, delta = _relu_backward(lam, bounds.lower[k], bounds.upper[k], alpha)
            off = off + delta
        off = off + lam @ lyr.bias
        lam = lam @ lyr.weights
    return lam, off, A


def _concretize_rows(
    lam: np.ndarray, off: np.ndarray, lo: np.ndarray, hi: np.ndarray
) -> np.ndarray:
    return np.minimum(lam * lo[None, :], lam * hi[None, :]).sum(axis=1) + off


def compute_bounds(net: Network, c_row, domain, params: Optional[RelaxationParams] = None):
    """Sound linear lower bound of one margin row over a sub-domain.

    For every x in the sub-domain box that satisfies all split constraints,
    w @ x + b <= c_row @ f(x). Returns an infeasible marker instead of a bound
    when the domain's neuron bounds signal an empty region.
    """
    bounds = domain.neuron_bounds
    if not bounds.is_feasible():
        return BoundResult.infeasible_marker(bounds)
    c_row = np.asarray(c_row, dtype=np.float64)
    lam, off, A = _backward_from_layer(
        net, net.n_layers - 1, c_row[None, :], bounds, params, record_A=True
    )
    w = lam[0]
    b = float(off[0])
    lb = concretize_lower(w, domain.box_lower, domain.box_upper) + b
    return BoundResult(w, b, lb, {k: v[0] for k, v in A.items()}, bounds)


def propagate_bounds(
    net: Network,
    box_lower: np.ndarray,
    box_upper: np.ndarray,
    splits: Dict[Tuple[int, int], int],
    params: Optional[RelaxationParams] = None,
    base: Optional[NeuronBounds] = None,
    start_layer: int = 0,
) -> NeuronBounds:
    """Pre-activation bounds for every hidden layer, earlier layers first.

    Each layer is bounded by a backward pass using the layers already bounded,
    intersected with a plain interval-arithmetic pass (both enclose the true
    range, so the intersection does too and is never looser than either), then
    split clamps are applied: sign +1 lifts the lower bound to 0, sign -1 drops
    the upper bound to 0. With a base (the parent's bounds), layers below
    start_layer are copied instead of recomputed and recomputed layers are
    intersected with the base as well.
    """
    n_hidden = net.n_layers - 1
    out = NeuronBounds([None] * n_hidden, [None] * n_hidden)  # type: ignore[list-item]
    infeasible_at: Optional[int] = None
    post_lo = box_lower
    post_hi = box_upper
    for k in range(n_hidden):
        layer = net.layers[k]
        if k < start_layer or (infeasible_at is not None and base is not None):
            assert base is not None
            l = base.lower[k].copy()
            u = base.upper[k].copy()
        elif infeasible_at is not None:
            n_k = layer.out_dim
            l = np.zeros(n_k)
            u = np.zeros(n_k)
        else:
            n_k = layer.out_dim
            eye = np.eye(n_k)
            lam, off, _ = _backward_from_layer(
                net, k, np.vstack([eye, -eye]), out, params, record_A=False
            )
            vals = _concretize_rows(lam, off, box_lower, box_upper)
            l = vals[:n_k].copy()
            u = -vals[n_k:]
            Wp = np.maximum(layer.weights, 0.0)
            Wn = np.minimum(layer.weights, 0.0)
            l = np.maximum(l, Wp @ post_lo + Wn @ post_hi + layer.bias)
            u = np.minimum(u, Wp @ post_hi + Wn @ post_lo + layer.bias)
            if base is not None:
                l = np.maximum(l, base.lower[k])
                u = np.minimum(u, base.upper[k])
        for (sl, sj), sign in splits.items():
            if sl != k:
                continue
            if sign > 0:
                l[sj] = max(l[sj], 0.0)
            else:
                u[sj] = min(u[sj], 0.0)
        crossed = l > u
        if np.any(crossed):
            if infeasible_at is None and np.any(l - u > INFEASIBILITY_TOL):
                infeasible_at = k
            else:
                mid = 0.5 * (l + u)
                l = np.where(crossed, mid, l)
                u = np.where(crossed, mid, u)
        out.lower[k] = l
        out.upper[k] = u
        if layer.activation == RELU:
            post_lo, post_hi = np.maximum(l, 0.0), np.maximum(u, 0.0)
        else:
            post_lo, post_hi = l, u
    out.infeasible_layer = infeasible_at
    return out


def compute_intermediate_bounds(
    net: Network, domain, params: Optional[RelaxationParams] = None
) -> NeuronBounds:
    """Bounds for all hidden neurons of a sub-domain, honoring its split clamps."""
    return propagate_bounds(net, domain.box_lower, domain.box_upper, domain.splits, params)


def _relaxed_forward(
    net: Network,
    x_star: np.ndarray,
    bounds: NeuronBounds,
    A: Dict[int, np.ndarray],
    params: Optional[RelaxationParams],
) -> Dict[int, np.ndarray]:
    """Pre-activation values at x_star under the relaxation lines the backward
    pass chose. These equal the sensitivities of the concretized bound to the
    pre-activation coefficients, which is what the alpha gradient needs.
    """
    h = x_star
    pre: Dict[int, np.ndarray] = {}
    for k in range(net.n_layers - 1):
        layer = net.layers[k]
        z = layer.weights @ h + layer.bias
        if layer.activation == RELU:
            pre[k] = z
            l, u = bounds.lower[k], bounds.upper[k]
            act = l >= 0.0
            inact = (u <= 0.0) & ~act
            unst = ~(act | inact)
            alpha = np.clip(_alpha_for(params, bounds, k), 0.0, 1.0)
            denom = np.where(unst, u - l, 1.0)
            up_slope = np.where(unst, u / denom, 0.0)
            up_icpt = np.where(unst, -u * l / denom, 0.0)
            coeff = A.get(k, np.zeros_like(z))
            lower_branch = np.where(act, z, np.where(unst, alpha * z, 0.0))
            upper_branch = np.where(unst, up_slope * z + up_icpt, lower_branch)
            h = np.where(coeff >= 0.0, lower_branch, upper_branch)
        else:
            h = z
    return pre


def alpha_gradient(
    net: Network, c_row, domain, params: RelaxationParams
) -> Dict[int, np.ndarray]:
    """Analytic derivative of the concretized lower bound w.r.t. each slope.

    For an unstable neuron whose backward coefficient is non-negative the bound
    is locally linear in its slope with derivative A * z_tilde, where z_tilde is
    the neuron's pre-activation under the relaxed forward evaluation at the
    bound's box minimizer. All other neurons contribute zero.
    """
    res = compute_bounds(net, c_row, domain, params)
    if not res.feasible:
        return {k: np.zeros_like(v) for k, v in params.alpha.items()}
    x_star = np.where(res.w >= 0.0, domain.box_lower, domain.box_upper)
    pre = _relaxed_forward(net, x_star, res.neuron_bounds, res.A, params)
    grads: Dict[int, np.ndarray] = {}
    for k, alpha in params.alpha.items():
        coeff = res.A.get(k)
        if coeff is None:
            grads[k] = np.zeros_like(alpha)
            continue
        unst = res.neuron_bounds.unstable_mask(k)
        grads[k] = np.where(unst & (coeff >= 0.0), coeff * pre[k], 0.0)
    return grads


def optimize_alpha(net: Network, c_row, domain, iters: int, step: float) -> RelaxationParams:
    """Maximize the concretized lower bound over the slopes by projected
    gradient ascent with backtracking; always returns the best iterate seen.

    iters = 0 returns the adaptive initialization unchanged.
    """
    bounds = domain.neuron_bounds
    params = RelaxationParams.adaptive(net, bounds)
    if not bounds.is_feasible() or not params.alpha:
        return params
    best = params.copy()
    best_lb = compute_bounds(net, c_row, domain, params).lower_bound
    cur = params
    for _ in range(iters):
        grads = alpha_gradient(net, c_row, domain, cur)
        if all(np.all(g == 0.0) for g in grads.values()):
            break
        trial = step
        improved = False
        for _ in range(8):
            cand = RelaxationParams(
                {k: np.clip(cur.alpha[k] + trial * grads[k], 0.0, 1.0) for k in cur.alpha}
            )
            lb = compute_bounds(net, c_row, domain, cand).lower_bound
            if lb > best_lb:
                best_lb = lb
                best = cand.copy()
                cur = cand
                improved = True
                break
            trial *= 0.5
        if not improved:
            break
    return best
