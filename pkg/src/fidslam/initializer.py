"""
Two-graph robust initialization.

The *full* graph receives every factor as soon as it is measured. The
*optimized* graph only holds variables that could be initialized and factors
whose subgraph passed validation. Each round:

1. new factors are ordered (odometry first, then tag observations by
   decreasing pixel area, then the rest);
2. from each new factor not yet absorbed, a subgraph of newly determinable
   variables is discovered, walking through undetermined variables only;
3. the subgraph is initialized along its initialization list, optimized on
   its own with old dynamic poses pinned by tight priors, and accepted if the
   mean per-factor error (squared whitened residual per dimension) is below
   the scene threshold;
4. on failure the initialization list is rotated by one and the attempt
   repeated until the original order comes back around; a subgraph that never
   validates is rejected and only stays in the full graph.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateConfiguration, EvaluationFailure, InitializationImpossible,
                     NoValidPose, SingularSystem)
from .factors import (TAG, AbsolutePosePrior, Graph, TagProjection, body_key, camera_key,
                      describe, tag_key)
from .optimizer import OptimizerConfig, optimize
from .planar import ambiguity_check, is_unambiguous
from .se3 import Pose

log = logging.getLogger(__name__)

SUBGRAPH_OPTIMIZER = OptimizerConfig(max_iterations=50)
UPDATE_OPTIMIZER = OptimizerConfig(max_iterations=3)


@dataclass
class Subgraph:
    factors: list  # initialization list, in discovery order
    new_vars: list
    pinned: list  # old determined dynamic poses (get temporary priors)
    held: list  # determined static poses (fixed during validation)

    @property
    def fids(self) -> set:
        return {f.fid for f in self.factors}


@dataclass
class SubgraphResult:
    subgraph: Subgraph
    accepted: bool
    rotations: int
    error: float  # mean per-factor error of the reported attempt
    factor_errors: dict  # fid -> whitened residual norm
    values: dict = field(default_factory=dict, repr=False)


@dataclass
class RoundReport:
    round: int
    new_factors: list
    results: list = field(default_factory=list)

    @property
    def accepted(self) -> int:
        return sum(r.accepted for r in self.results)

    @property
    def rejected(self) -> int:
        return sum(not r.accepted for r in self.results)


class TwoGraphState:
    """The full graph, the optimized graph, and bookkeeping shared by both."""

    def __init__(self, scene, window: int | None = None,
                 update_config: OptimizerConfig = UPDATE_OPTIMIZER,
                 subgraph_config: OptimizerConfig = SUBGRAPH_OPTIMIZER):
        self.scene = scene
        self.settings = scene.settings
        self.window = window
        self.update_config = update_config
        self.subgraph_config = subgraph_config
        self.full = Graph()
        self.optimized = Graph()
        self.determined_at: dict = {}
        self.round = 0
        self.latest_time = -1
        self._next_fid = 0
        self._next_pin = -1
        self._ambiguity: dict = {}
        self._insert_priors()

    @property
    def determined(self) -> dict:
        return self.optimized.values

    def new_fid(self) -> int:
        fid = self._next_fid
        self._next_fid += 1
        return fid

    def _insert_priors(self):
        priors = []
        for b in self.scene.bodies.values():
            if b.prior is not None:
                priors.append((body_key(b.name), b.prior))
        for t in self.scene.tags.values():
            if t.prior is not None:
                priors.append((tag_key(t.id), t.prior))
        for c in self.scene.cameras.values():
            if c.extrinsic_prior is not None:
                priors.append((camera_key(c.name), c.extrinsic_prior))
        for key, prior in priors:
            f = AbsolutePosePrior(self.new_fid(), key, prior.pose, prior.noise)
            for g in (self.full, self.optimized):
                g.add_variable(key, prior.pose)
                g.add_factor(f)
            self.determined_at[key] = -1

    def ambiguity(self, f: TagProjection):
        """Cached planar-pose analysis of one tag observation (None if unusable)."""
        if f.fid not in self._ambiguity:
            try:
                self._ambiguity[f.fid] = ambiguity_check(f.corners, f.intrinsics, f.tag_size)
            except (NoValidPose, DegenerateConfiguration):
                self._ambiguity[f.fid] = None
        return self._ambiguity[f.fid]

    def pin_prior(self, key) -> AbsolutePosePrior:
        s = self.settings.pin_sigma
        fid = self._next_pin
        self._next_pin -= 1
        return AbsolutePosePrior(fid, key, self.optimized.values[key], (s,) * 6)

    def check_invariants(self):
        for fid in self.optimized.factors:
            assert fid in self.full.factors, fid
        for f in self.optimized.factors.values():
            for k in f.keys:
                assert k in self.optimized.values, k


# ------------------------------------------------------------------ ordering


def order_new_factors(new: list) -> list:
    """Odometry first, then tag observations by descending pixel area, then the rest."""
    relative = [f for f in new if f.kind == "relative"]
    projections = sorted(
        (f for f in new if f.kind == "projection"),
        key=lambda f: (-f.area, f.time, f.camera, f.tag_id))
    rest = [f for f in new if f.kind not in ("relative", "projection")]
    return relative + projections + rest


# ----------------------------------------------------------------- discovery


def _unique_keys(f) -> list:
    return list(dict.fromkeys(f.keys))


def _can_determine(state: TwoGraphState, f, key) -> bool:
    if f.kind == "relative":
        return True
    if f.kind != "projection":
        return False
    if f.body == f.rig and key == f.body:
        return False  # the rig cancels out of the chain
    a = state.ambiguity(f)
    if a is None:
        return False
    if key.kind == TAG:
        return is_unambiguous(a, state.settings)
    return True


def discover_subgraph(state: TwoGraphState, seed, claimed=frozenset()) -> Subgraph:
    """Collect every variable that becomes determinable starting from ``seed``.

    Traversal only passes through variables that are not yet determined, so
    factors attached solely to already-optimized variables are left out.
    Factors already in the optimized graph or claimed by another subgraph of
    the same round are skipped. Undetermined dynamic poses older than the
    discovery horizon (the window, in windowed mode) are abandoned and their
    factors are not revisited.
    """
    optimized = state.optimized
    full = state.full
    determined = optimized.values
    new_vars: dict = {}
    chosen: dict = {}
    horizon = state.window if state.window is not None else state.settings.discovery_horizon
    oldest = None if horizon is None else state.latest_time - horizon + 1
    stale = lambda g: oldest is not None and any(  # noqa: E731
        k.is_dynamic and k.time < oldest and k not in determined for k in g.keys)
    skip = lambda g: g.fid in optimized.factors or g.fid in claimed or g.fid in chosen  # noqa: E731

    # region reachable through undetermined variables
    region: dict = {}
    queue = deque([seed])
    seen_vars: dict = {}
    while queue:
        f = queue.popleft()
        if f.fid in region or f.fid in optimized.factors or f.fid in claimed or stale(f):
            continue
        region[f.fid] = f
        for k in _unique_keys(f):
            if k in determined or k in seen_vars:
                continue
            seen_vars[k] = None
            for g in full.factors_of(k):
                if g.fid not in region:
                    queue.append(g)

    work = deque(region.values())
    while work:
        f = work.popleft()
        if skip(f):
            continue
        unknown = [k for k in _unique_keys(f) if k not in determined and k not in new_vars]
        if not unknown:
            chosen[f.fid] = f
        elif len(unknown) == 1 and _can_determine(state, f, unknown[0]):
            key = unknown[0]
            new_vars[key] = None
            chosen[f.fid] = f
            for g in full.factors_of(key):
                if g.fid in region and not skip(g):
                    work.append(g)

    factors = list(chosen.values())
    if factors and not new_vars and seed.fid not in chosen:
        factors = []
    pinned, held = {}, {}
    for f in factors:
        for k in f.keys:
            if k in determined:
                (pinned if k.is_dynamic else held)[k] = None
    return Subgraph(factors, list(new_vars), list(pinned), list(held))


# ------------------------------------------------------------ initialization


def _init_from_factor(state: TwoGraphState, f, key, values) -> Pose:
    if f.kind == "relative":
        if key == f.a:
            return values[f.b] @ f.delta
        return values[f.a] @ f.delta.inverse()
    T_ct = state.ambiguity(f).best  # camera_from_tag
    W, C, G, Q = (values.get(k) for k in f.keys)
    if key == f.rig:
        return W @ G @ T_ct.inverse() @ C.inverse()
    if key == f.body:
        return Q @ C @ T_ct @ G.inverse()
    if key == f.tag:
        return W.inverse() @ Q @ C @ T_ct
    if key == f.cam:
        return Q.inverse() @ W @ G @ T_ct.inverse()
    raise InitializationImpossible(key)


def initialize_subgraph(state: TwoGraphState, sg: Subgraph, order=None) -> dict:
    """Initial values for every subgraph variable, following ``order``.

    Factors that still have more than one unknown are revisited on the next
    pass, which rotated lists need.
    """
    order = sg.factors if order is None else order
    values = {k: state.optimized.values[k] for k in sg.pinned + sg.held}
    pending = set(sg.new_vars)
    while pending:
        progress = False
        for f in order:
            unknown = [k for k in _unique_keys(f) if k not in values]
            if len(unknown) == 1 and unknown[0] in pending and _can_determine(state, f, unknown[0]):
                values[unknown[0]] = _init_from_factor(state, f, unknown[0], values)
                pending.discard(unknown[0])
                progress = True
        if not progress:
            raise InitializationImpossible(sorted(pending)[0])
    return values


# ---------------------------------------------------------------- validation


def _mean_factor_error(norms: dict, factors) -> float:
    if not factors:
        return 0.0
    return float(np.mean([norms[f.fid] ** 2 / f.dim for f in factors]))


def _attempt(state: TwoGraphState, sg: Subgraph, order) -> tuple[float, dict, dict]:
    values = initialize_subgraph(state, sg, order)
    g = Graph()
    for k, v in values.items():
        g.add_variable(k, v)
    for f in sg.factors:
        g.add_factor(f)
    for k in sg.pinned:
        g.add_factor(state.pin_prior(k))
    optimize(g, state.subgraph_config, free=sg.new_vars + sg.pinned, record=True)
    norms = {f.fid: g.last_error[f.fid] for f in sg.factors}
    return _mean_factor_error(norms, sg.factors), norms, g.values


def validate_and_transfer(state: TwoGraphState, sg: Subgraph) -> SubgraphResult:
    init_list = list(sg.factors)
    n_rot = len(init_list) - 1
    if state.settings.max_rotations is not None:
        n_rot = min(n_rot, state.settings.max_rotations)
    threshold = state.settings.subgraph_error_threshold
    best = None
    for rot in range(n_rot + 1):
        order = init_list[rot:] + init_list[:rot]
        try:
            err, norms, values = _attempt(state, sg, order)
        except (EvaluationFailure, SingularSystem, InitializationImpossible) as exc:
            log.debug("subgraph attempt %d failed: %s", rot, exc)
            continue
        if best is None or err < best[0]:
            best = (err, norms, rot)
        if err <= threshold:
            _transfer(state, sg, values)
            return SubgraphResult(sg, True, rot, err, norms, values)
    if best is None:
        return SubgraphResult(sg, False, n_rot, float("inf"), {f.fid: float("nan") for f in sg.factors})
    return SubgraphResult(sg, False, n_rot, best[0], best[1])


def _transfer(state: TwoGraphState, sg: Subgraph, values: dict):
    opt = state.optimized
    for k in sg.new_vars:
        opt.add_variable(k, values[k])
        state.determined_at[k] = state.round
    for f in sg.factors:
        opt.add_factor(f)
    update_optimized(state)


def update_optimized(state: TwoGraphState, cfg: OptimizerConfig | None = None):
    """Re-optimize the optimized graph, fully or over the sliding window."""
    cfg = cfg or state.update_config
    opt = state.optimized
    if state.window is None:
        free = None
    else:
        # recent dynamic poses, tags they observe, and statics that are still new
        oldest = state.latest_time - state.window + 1
        first_round = state.round - state.window + 1
        free = {}
        for k in opt.values:
            if k.is_dynamic and k.time >= oldest:
                free[k] = None
                for f in opt.factors_of(k):
                    for j in f.keys:
                        if j.kind == TAG:
                            free[j] = None
            elif not k.is_dynamic and state.determined_at.get(k, -1) >= first_round:
                free[k] = None
        free = [k for k in free if k in opt.values]
        if not free:
            return None
    try:
        return optimize(opt, cfg, free=free)
    except (EvaluationFailure, SingularSystem) as exc:
        log.warning("optimized-graph update failed: %s", exc)
        return None


# --------------------------------------------------------------------- round


def process_new_factors(state: TwoGraphState, new: list, time: int | None = None) -> RoundReport:
    """Enter ``new`` into the full graph, then discover, validate and transfer."""
    if time is not None:
        state.latest_time = max(state.latest_time, time)
    for f in new:
        for k in f.keys:
            state.full.add_variable(k)
        state.full.add_factor(f)
    report = RoundReport(state.round, list(new))
    claimed: dict = {}
    for f in order_new_factors(new):
        if f.fid in claimed or f.fid in state.optimized.factors:
            continue
        sg = discover_subgraph(state, f, claimed)
        if not sg.factors:
            continue
        for g in sg.factors:
            claimed[g.fid] = None
        report.results.append(validate_and_transfer(state, sg))
    state.round += 1
    return report


def factor_rows(report: RoundReport) -> list:
    """Per-factor diagnostics for one round: (factor, error, verdict, rotations)."""
    rows = []
    covered = {}
    for res in report.results:
        verdict = "accepted" if res.accepted else "rejected"
        for f in res.subgraph.factors:
            covered[f.fid] = None
            rows.append((f, res.factor_errors.get(f.fid, float("nan")), verdict, res.rotations))
    for f in report.new_factors:
        if f.fid not in covered:
            rows.append((f, float("nan"), "pending", 0))
    return rows


__all__ = [
    "TwoGraphState", "Subgraph", "SubgraphResult", "RoundReport", "order_new_factors",
    "discover_subgraph", "initialize_subgraph", "validate_and_transfer", "process_new_factors",
    "update_optimized", "factor_rows", "describe",
]
