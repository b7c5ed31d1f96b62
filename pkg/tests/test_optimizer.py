import copy

import numpy as np
import pytest
import scipy.sparse

from fidslam.camera import Intrinsics, project, tag_object_corners
from fidslam.errors import EvaluationFailure, SingularSystem
from fidslam.factors import (AbsolutePosePrior, Graph, LinearizationPlan, RelativePosePrior, TagProjection, body_key,
                             camera_key, stack_values, tag_key)
from fidslam.optimizer import DENSE_LIMIT, LinearSystem, OptimizerConfig, optimize, solve_normal_equations
from fidslam.se3 import Pose, compose, inverse, ominus, random_pose, retract, rot_x, transform_point

from .conftest import pose_close

K = Intrinsics(600.0, 600.0, 320.0, 240.0, width=640, height=480)
LAB, RIG, CAM = body_key("lab"), body_key("rig", 0), camera_key("cam0")


def chain_graph(rng, n=8):
    truth = [random_pose(rng)]
    for _ in range(n - 1):
        truth.append(compose(truth[-1], random_pose(rng, 0.2, 0.5)))
    keys = [body_key("rig", i) for i in range(n)]
    g = Graph()
    for k, p in zip(keys, truth):
        g.add_variable(k, retract(p, rng.normal(scale=0.2, size=6)))
    g.add_factor(AbsolutePosePrior(0, keys[0], truth[0], (0.01,) * 6))
    for i in range(1, n):
        g.add_factor(RelativePosePrior(i, keys[i], keys[i - 1], compose(inverse(truth[i - 1]), truth[i]),
                                       (0.01,) * 6))
    return g, keys, truth


def two_tag_scene():
    """Lab at the origin, two tags on the far wall, one camera looking at them."""
    tags = {tag_key(1): Pose.from_rt(rot_x(np.pi), [-0.3, 0.0, 2.0]),
            tag_key(2): Pose.from_rt(rot_x(np.pi), [0.35, 0.1, 2.2])}
    rig = Pose.from_twist([0.05, -0.03, 0.02, 0.02, -0.04, 0.1])
    values = {LAB: Pose(), CAM: Pose(), RIG: rig, **tags}
    return values


def render(values, tag, size=0.2):
    cam = compose(values[RIG], values[CAM])
    tag_world = compose(values[LAB], values[tag])
    S = tag_object_corners(size)
    return np.array([project(K, transform_point(inverse(cam), transform_point(tag_world, s))) for s in S])


def projections(values, noise=None):
    fs = []
    for i, tag in enumerate((tag_key(1), tag_key(2))):
        c = render(values, tag)
        if noise is not None:
            c = c + noise[i]
        fs.append(TagProjection(i, LAB, CAM, tag, RIG, c, "cam0", int(tag.owner), 0.2, 1.0, K, 0, "lab"))
    return fs


# ---------------------------------------------------------------- optimize


def test_single_prior_converges_fast(rng):
    T0 = random_pose(rng)
    g = Graph()
    g.add_variable(LAB, compose(T0, Pose(None, [0.5, 0, 0])))
    g.add_factor(AbsolutePosePrior(0, LAB, T0, (0.1,) * 6))
    res = optimize(g)
    assert res.status == "converged"
    assert res.iterations <= 5
    assert res.final_error < 1e-12
    assert pose_close(g.values[LAB], T0, 1e-7)


def test_odometry_chain_recovered(rng):
    g, keys, truth = chain_graph(rng)
    res = optimize(g)
    assert res.final_error < 1e-12
    for k, p in zip(keys, truth):
        assert pose_close(g.values[k], p, 1e-7)


def test_error_monotone_and_final_below_initial(rng):
    values = two_tag_scene()
    noise = rng.normal(size=(2, 4, 2))
    g = Graph()
    for k, p in values.items():
        g.add_variable(k, p)
    g.values[RIG] = retract(values[RIG], [0.05, 0.05, -0.05, 0.1, -0.1, 0.05])
    for f in projections(values, noise):
        g.add_factor(f)
    res = optimize(g, free=[RIG])
    assert res.final_error <= res.initial_error
    assert all(b <= a for a, b in zip(res.errors, res.errors[1:]))
    assert res.status in ("converged", "max_iter", "stalled")


def test_held_variables_do_not_move(rng):
    values = two_tag_scene()
    g = Graph()
    for k, p in values.items():
        g.add_variable(k, p)
    g.values[RIG] = retract(values[RIG], [0.02, 0, 0, 0.05, 0, 0])
    for f in projections(values):
        g.add_factor(f)
    before = {k: g.values[k] for k in values if k != RIG}
    optimize(g, free=[RIG])
    assert all(g.values[k] is before[k] for k in before)
    assert pose_close(g.values[RIG], values[RIG], 1e-7)


def test_rig_pose_within_monte_carlo_spread():
    rng = np.random.default_rng(7)
    values = two_tag_scene()
    truth = values[RIG]
    errs = []
    for _ in range(501):
        g = Graph()
        for k, p in values.items():
            g.add_variable(k, p)
        for f in projections(values, rng.normal(size=(2, 4, 2))):
            g.add_factor(f)
        optimize(g, free=[RIG])
        errs.append(ominus(g.values[RIG], truth))
    errs = np.array(errs)
    draws, held_out = errs[:500], errs[500]
    cov = np.cov(draws.T)
    sd = np.sqrt(np.diag(cov))
    # unbiased to within the Monte-Carlo standard error
    assert np.all(np.abs(draws.mean(axis=0)) < 3 * sd / np.sqrt(len(draws)))
    # a fresh solve falls inside the 3-sigma box of the sampled spread
    assert np.all(np.abs(held_out) < 3 * sd)
    # the sampled spread agrees with the Gauss-Newton covariance at the truth
    J = np.vstack([f.jacobians(values)[f.keys.index(RIG)] for f in projections(values)])
    lin = np.sqrt(np.diag(np.linalg.inv(J.T @ J)))
    assert np.all(np.abs(sd / lin - 1) < 0.2)


def test_gauge_freedom_raises(rng):
    g = Graph()
    a, b = body_key("rig", 0), body_key("rig", 1)
    g.add_variable(a, random_pose(rng))
    g.add_variable(b, random_pose(rng))
    g.add_factor(RelativePosePrior(0, b, a, random_pose(rng), (0.1,) * 6))
    with pytest.raises(SingularSystem):
        optimize(g)


def test_free_variable_without_factor_raises(rng):
    g = Graph()
    g.add_variable(LAB, random_pose(rng))
    g.add_variable(RIG, random_pose(rng))
    g.add_factor(AbsolutePosePrior(0, LAB, Pose(), (0.1,) * 6))
    with pytest.raises(SingularSystem):
        optimize(g, free=[LAB, RIG])


def test_behind_camera_initial_values_raise():
    values = two_tag_scene()
    g = Graph()
    for k, p in values.items():
        g.add_variable(k, p)
    for f in projections(values):
        g.add_factor(f)
    g.values[RIG] = compose(values[RIG], Pose.from_twist([0, np.pi, 0, 0, 0, 0]))
    with pytest.raises(EvaluationFailure):
        optimize(g, free=[RIG])


def test_determinism_bit_identical(rng):
    g, keys, _ = chain_graph(rng, 12)
    h = copy.deepcopy(g)
    ra, rb = optimize(g), optimize(h)
    assert ra.errors == rb.errors
    for k in keys:
        assert np.array_equal(g.values[k].q, h.values[k].q) and np.array_equal(g.values[k].t, h.values[k].t)


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(lambda_up=1.0)
    with pytest.raises(ValueError):
        OptimizerConfig(max_iterations=0)


# ---------------------------------------------------------------- normal equations


def assembled(g, keys):
    factors = list(g.factors.values())
    index, Rs, ts = stack_values(g.values, keys)
    system = LinearSystem(LinearizationPlan(factors, index), len(keys))
    return system.assemble(system.plan.evaluate(Rs, ts, jacobian=True))


def test_single_prior_is_6x6(rng):
    g = Graph()
    T0 = random_pose(rng)
    g.add_variable(LAB, retract(T0, rng.normal(scale=0.1, size=6)))
    g.add_factor(AbsolutePosePrior(0, LAB, T0, (0.1,) * 6))
    H, b = assembled(g, [LAB])
    assert H.shape == (6, 6) and b.shape == (6,)
    dx = solve_normal_equations(H, b, 0.0)
    assert np.allclose(dx, np.linalg.solve(H.toarray(), -b), atol=1e-12)


def test_block_sparsity_no_fill_between_unconnected(rng):
    g, keys, _ = chain_graph(rng, 4)
    H, _ = assembled(g, keys)
    D = H.toarray()
    for i in range(4):
        for j in range(4):
            block = D[6 * i:6 * i + 6, 6 * j:6 * j + 6]
            if abs(i - j) > 1:
                assert not np.any(block)
            else:
                assert np.any(block)
    assert H.nnz == 36 * (4 + 2 * 3)


def random_spd_blocks(rng, n, bandwidth=2):
    # J stacked from pairwise 6x12 blocks, so H has block-banded structure
    rows = []
    for i in range(n):
        J = np.zeros((6, 6 * n))
        J[:, 6 * i:6 * i + 6] = 0.5 * rng.normal(size=(6, 6)) + 3 * np.eye(6)
        j = min(n - 1, i + rng.integers(1, bandwidth + 1))
        if j != i:
            J[:, 6 * j:6 * j + 6] = rng.normal(size=(6, 6))
        rows.append(J)
    J = np.vstack(rows)
    return J.T @ J, J.T @ rng.normal(size=J.shape[0])


@pytest.mark.parametrize("n", [1, 3, 10, DENSE_LIMIT + 10])
def test_matches_dense_reference(rng, n):
    for lam in (0.0, 1e-4, 1.0):
        H, b = random_spd_blocks(rng, n)
        ref = np.linalg.solve(H + lam * np.diag(np.diag(H)), -b)
        for Hin in (H, scipy.sparse.csc_matrix(H)):
            dx = solve_normal_equations(Hin, b, lam)
            assert np.max(np.abs(dx - ref)) <= 1e-9 * max(1.0, np.max(np.abs(ref)))


def test_rank_deficient_raises():
    H = np.zeros((12, 12))
    H[:6, :6] = np.eye(6)
    with pytest.raises(SingularSystem):
        solve_normal_equations(H, np.ones(12), 1e-4)
    # nonzero diagonal but rank one
    v = np.ones((6, 1))
    with pytest.raises(SingularSystem):
        solve_normal_equations(v @ v.T, np.ones(6), 0.0)
