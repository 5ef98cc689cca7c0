"""Worklist-driven branch-and-bound over ReLU sub-domains.

Each popped sub-domain goes through four phases: bound the margin with the
convex relaxation, prune if the bound clears zero, otherwise evaluate the
bound's box minimizer on the concrete network (a violation ends the search as
Unsafe), and finally split on the neuron the heuristic blames for the spurious
witness. Splits are enforced by clamping the neuron's pre-activation bounds;
input bisection restores completeness when no neuron split is available.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import heuristics, relax, witness as witness_mod
from .model import Network, RELU, VerificationTask
from .relax import BoundResult, NeuronBounds, RelaxationParams

SAFE = "Safe"
UNSAFE = "Unsafe"
UNKNOWN = "Unknown"

FALLBACK_BABSR = "babsr"
FALLBACK_BISECT = "bisect"


@dataclass(frozen=True)
class SplitConstraint:
    """Fixes the sign of one neuron: +1 active (z >= 0), -1 inactive (z < 0)."""

    layer: int
    neuron: int
    sign: int


@dataclass
class SubDomain:
    """A box plus split constraints, with cached pre-activation bounds.

    splits maps (layer, neuron) to a sign; at most one constraint per neuron.
    depth counts neuron splits plus input bisections. parent_lower_bound is the
    bound of the node that created this one (it stays valid here because the
    region only shrank) and doubles as the worklist priority.
    """

    box_lower: np.ndarray
    box_upper: np.ndarray
    splits: Dict[Tuple[int, int], int]
    neuron_bounds: NeuronBounds
    depth: int
    parent_lower_bound: float

    def split_list(self) -> List[SplitConstraint]:
        return [SplitConstraint(l, n, s) for (l, n), s in sorted(self.splits.items())]


@dataclass
class RunStats:
    """Outcome of one verification run."""

    verdict: str
    branches_visited: int = 0
    splits_made: int = 0
    wall_time_s: float = 0.0
    witness: Optional[witness_mod.Witness] = None
    per_node_trace: Optional[List[dict]] = None
    gap_clamp_events: int = 0
    unknown_reason: Optional[str] = None


@dataclass
class BabConfig:
    """Search knobs; verification budgets live on the task itself."""

    batch: int = 1
    alpha_iters: int = 20
    alpha_step: float = 0.25
    realpha_per_node: bool = False
    fallback: str = FALLBACK_BABSR
    trace: bool = False
    seed: int = 0
    full_recompute: bool = False

    def to_dict(self) -> dict:
        return {
            "batch": self.batch,
            "alpha_iters": self.alpha_iters,
            "alpha_step": self.alpha_step,
            "realpha_per_node": self.realpha_per_node,
            "fallback": self.fallback,
            "trace": self.trace,
            "seed": self.seed,
            "full_recompute": self.full_recompute,
        }


class Worklist:
    """Priority queue popping the lowest parent_lower_bound first
    (most-violated-first); insertion order breaks ties deterministically."""

    def __init__(self):
        self._heap: List[Tuple[float, int, SubDomain]] = []
        self._seq = 0

    def push(self, d: SubDomain) -> None:
        heapq.heappush(self._heap, (d.parent_lower_bound, self._seq, d))
        self._seq += 1

    def pop(self) -> Optional[SubDomain]:
        if not self._heap:
            return None
        return heapq.heappop(self._heap)[2]

    def __len__(self) -> int:
        return len(self._heap)


def make_root(task: VerificationTask) -> SubDomain:
    bounds = relax.propagate_bounds(task.network, task.input_lower, task.input_upper, {})
    return SubDomain(
        box_lower=np.asarray(task.input_lower, dtype=np.float64),
        box_upper=np.asarray(task.input_upper, dtype=np.float64),
        splits={},
        neuron_bounds=bounds,
        depth=0,
        parent_lower_bound=float("-inf"),
    )


def split_subdomain(
    net: Network,
    d: SubDomain,
    layer: int,
    neuron: int,
    full_recompute: bool = False,
) -> Tuple[SubDomain, SubDomain]:
    """Split a sub-domain on one unstable neuron.

    The +1 child takes z >= 0 (the boundary belongs to it), the -1 child
    z < 0. Earlier-layer bounds are reused with the new clamp applied; later
    layers are recomputed and intersected with the parent's. Children whose
    bounds cross are infeasible and should be pruned by the caller.
    """
    key = (layer, neuron)
    if key in d.splits:
        raise ValueError(f"split_subdomain: neuron {key} already split in this sub-domain")
    if net.layers[layer].activation != RELU:
        raise ValueError(f"split_subdomain: layer {layer} is not a ReLU layer")
    l = d.neuron_bounds.lower[layer][neuron]
    u = d.neuron_bounds.upper[layer][neuron]
    if not (l < 0.0 < u):
        raise ValueError(f"split_subdomain: neuron {key} with bounds [{l}, {u}] is not unstable")
    children = []
    for sign in (+1, -1):
        splits = dict(d.splits)
        splits[key] = sign
        start = 0 if full_recompute else layer + 1
        bounds = relax.propagate_bounds(
            net, d.box_lower, d.box_upper, splits, base=d.neuron_bounds, start_layer=start
        )
        children.append(
            SubDomain(
                box_lower=d.box_lower,
                box_upper=d.box_upper,
                splits=splits,
                neuron_bounds=bounds,
                depth=d.depth + 1,
                parent_lower_bound=d.parent_lower_bound,
            )
        )
    return children[0], children[1]


def input_bisect(net: Network, d: SubDomain) -> Optional[Tuple[SubDomain, SubDomain]]:
    """Bisect the widest input dimension at its midpoint (lowest index on ties).

    Completeness fallback for when no unstable neuron is splittable. Returns
    None when the box has zero width in every dimension, which makes the leaf
    undecidable (Unknown).
    """
    widths = d.box_upper - d.box_lower
    dim = int(np.argmax(widths))
    mid = 0.5 * (d.box_lower[dim] + d.box_upper[dim])
    if not (d.box_lower[dim] < mid < d.box_upper[dim]):
        return None
    children = []
    for half in (0, 1):
        lo = d.box_lower.copy()
        hi = d.box_upper.copy()
        if half == 0:
            hi[dim] = mid
        else:
            lo[dim] = mid
        bounds = relax.propagate_bounds(net, lo, hi, d.splits, base=d.neuron_bounds, start_layer=0)
        children.append(
            SubDomain(
                box_lower=lo,
                box_upper=hi,
                splits=dict(d.splits),
                neuron_bounds=bounds,
                depth=d.depth + 1,
                parent_lower_bound=d.parent_lower_bound,
            )
        )
    return children[0], children[1]


@dataclass
class SearchState:
    """Everything the worklist loop threads between steps."""

    task: VerificationTask
    heuristic: str
    config: BabConfig
    worklist: Worklist
    stats: RunStats
    params_by_row: List[RelaxationParams]
    start_time: float
    node_counter: int = 0
    stuck_unknown: bool = False
    exhausted_reason: Optional[str] = None


def _trace(state: SearchState, entry: dict) -> None:
    if state.stats.per_node_trace is not None:
        state.stats.per_node_trace.append(entry)


def _check_termination_measure(parent: SubDomain, child: SubDomain, via_split: bool) -> None:
    # Structural termination argument: a neuron split removes at least one
    # unstable neuron (bounds only shrink via intersection), a bisection
    # strictly reduces the descending-sorted width tuple.
    if via_split:
        assert len(child.splits) > len(parent.splits)
    else:
        pw = tuple(sorted(parent.box_upper - parent.box_lower, reverse=True))
        cw = tuple(sorted(child.box_upper - child.box_lower, reverse=True))
        assert cw < pw


def _process_node(state: SearchState, d: SubDomain, node_id: int) -> Optional[str]:
    """Run the four phases on one sub-domain. Returns Unsafe on a concrete
    violation, None otherwise (pruned or split)."""
    task, config = state.task, state.config
    net = task.network
    C = task.spec_matrix
    entry = {
        "node": node_id,
        "depth": d.depth,
        "parent_lower_bound": d.parent_lower_bound,
        "n_splits": len(d.splits),
    }

    if not d.neuron_bounds.is_feasible():
        entry["action"] = "pruned-infeasible"
        _trace(state, entry)
        return None

    # Phase 1: bound every spec row over this sub-domain.
    results: List[BoundResult] = []
    for r in range(task.n_spec):
        if config.realpha_per_node and node_id > 0:
            params = relax.optimize_alpha(net, C[r], d, config.alpha_iters, config.alpha_step)
        else:
            params = state.params_by_row[r]
        results.append(relax.compute_bounds(net, C[r], d, params))
    row_lbs = [res.lower_bound for res in results]
    raw_lb = min(row_lbs)
    worst_row = row_lbs.index(raw_lb)
    # The parent's bound remains valid on this shrunken region; inheriting it
    # keeps node bounds monotone even when the clamped relaxation drifts.
    eff_lb = max(raw_lb, d.parent_lower_bound)
    entry["lower_bound"] = eff_lb
    entry["raw_lower_bound"] = raw_lb
    entry["row"] = worst_row

    # Phase 2: safety check.
    if eff_lb > 0.0:
        entry["action"] = "pruned-safe"
        _trace(state, entry)
        return None

    # Phase 3: counterexample validation.
    bound = results[worst_row]
    x_star = witness_mod.construct_witness(bound, d.box_lower, d.box_upper)
    wit = witness_mod.validate_witness(net, C, x_star, bound)
    entry["witness_margin"] = float(wit.concrete_margin.min())
    if wit.kind == witness_mod.CONCRETE_VIOLATION:
        state.stats.witness = wit
        entry["action"] = "unsafe"
        _trace(state, entry)
        return UNSAFE

    # Phase 4: refinement guided by the spurious witness.
    params = state.params_by_row[worst_row]
    scores, clamps = heuristics.score_branches(
        state.heuristic, net, C[worst_row], bound, d, x_star, params
    )
    state.stats.gap_clamp_events += clamps
    pick = None
    used_kind = state.heuristic
    if scores and not heuristics.all_zero(scores):
        pick = heuristics.select_branch(scores)
    elif config.fallback == FALLBACK_BABSR and state.heuristic != heuristics.BABSR:
        fb_scores, _ = heuristics.score_branches(
            heuristics.BABSR, net, C[worst_row], bound, d, x_star, params
        )
        if fb_scores and not heuristics.all_zero(fb_scores):
            pick = heuristics.select_branch(fb_scores)
            used_kind = heuristics.BABSR
            scores = fb_scores

    if pick is not None:
        layer, neuron = pick
        children = split_subdomain(net, d, layer, neuron, config.full_recompute)
        entry["action"] = "split"
        entry["split"] = [layer, neuron]
        entry["split_kind"] = used_kind
    else:
        bisected = input_bisect(net, d)
        if bisected is None:
            state.stuck_unknown = True
            entry["action"] = "stuck"
            _trace(state, entry)
            return None
        children = bisected
        entry["action"] = "bisect"

    state.stats.splits_made += 1
    if scores:
        entry["score_max"] = max(s.score for s in scores)
        entry["score_n"] = len(scores)
    pushed = 0
    for child in children:
        _check_termination_measure(d, child, via_split=pick is not None)
        child.parent_lower_bound = eff_lb
        if child.neuron_bounds.is_feasible():
            state.worklist.push(child)
            pushed += 1
    entry["children"] = pushed
    _trace(state, entry)
    return None


def init_search(task: VerificationTask, heuristic: str, config: BabConfig) -> SearchState:
    """Build the search state and process the root sub-domain.

    The root does not count toward branches_visited: instances decided here
    report zero branches. If the root is neither pruned nor falsified, its
    children enter the worklist.
    """
    if heuristic not in heuristics.KINDS:
        raise ValueError(
            f"unknown heuristic {heuristic!r}; valid kinds: {', '.join(heuristics.KINDS)}"
        )
    if config.fallback not in (FALLBACK_BABSR, FALLBACK_BISECT):
        raise ValueError(f"unknown fallback {config.fallback!r}; expected babsr or bisect")
    root = make_root(task)
    stats = RunStats(verdict=UNKNOWN, per_node_trace=[] if config.trace else None)
    params_by_row = [
        relax.optimize_alpha(task.network, task.spec_matrix[r], root, config.alpha_iters,
                             config.alpha_step)
        for r in range(task.n_spec)
    ]
    state = SearchState(
        task=task,
        heuristic=heuristic,
        config=config,
        worklist=Worklist(),
        stats=stats,
        params_by_row=params_by_row,
        start_time=time.perf_counter(),
    )
    verdict = _process_node(state, root, node_id=0)
    if verdict == UNSAFE:
        state.exhausted_reason = None
        state.stats.verdict = UNSAFE
    return state


def _budget_exhausted(state: SearchState) -> Optional[str]:
    if time.perf_counter() - state.start_time > state.task.timeout_seconds:
        return "timeout"
    if state.stats.branches_visited >= state.task.max_branches and len(state.worklist) > 0:
        return "branch budget exhausted"
    return None


def worklist_step(state: SearchState, batch: int) -> Optional[str]:
    """Pop and process up to `batch` sub-domains in priority order.

    Returns a final verdict when one is reached (Unsafe on a violation, Safe
    when the worklist drains with nothing stuck), else None. Budgets are
    checked between nodes, never mid-bound; hitting one sets
    state.exhausted_reason and stops the step.
    """
    if batch < 1:
        raise ValueError("worklist_step: batch must be >= 1")
    for _ in range(batch):
        reason = _budget_exhausted(state)
        if reason is not None:
            state.exhausted_reason = reason
            return None
        d = state.worklist.pop()
        if d is None:
            return UNKNOWN if state.stuck_unknown else SAFE
        state.stats.branches_visited += 1
        state.node_counter += 1
        verdict = _process_node(state, d, node_id=state.node_counter)
        if verdict == UNSAFE:
            return UNSAFE
    return None


def verify(task: VerificationTask, heuristic: str = heuristics.DRG,
           config: Optional[BabConfig] = None) -> RunStats:
    """Run the full search loop on a task.

    Safe only if every sub-domain was pruned by a positive lower bound or
    infeasibility; Unsafe only with a validated concrete witness; Unknown on
    timeout, branch budget, or an unrefinable leaf. Deterministic given
    (task, heuristic, config, seed).
    """
    config = config or BabConfig()
    state = init_search(task, heuristic, config)
    stats = state.stats
    if stats.verdict == UNSAFE:
        stats.wall_time_s = time.perf_counter() - state.start_time
        return stats
    while True:
        verdict = worklist_step(state, config.batch)
        if state.exhausted_reason is not None:
            stats.verdict = UNKNOWN
            stats.unknown_reason = state.exhausted_reason
            break
        if verdict is not None:
            stats.verdict = verdict
            if verdict == UNKNOWN:
                stats.unknown_reason = "unrefinable leaf"
            break
    stats.wall_time_s = time.perf_counter() - state.start_time
    return stats
