import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _oracles import fd_grad, rel_err
from centerline_factory.errors import DegenerateMaskWarning, NoForeground, SchemaError, ShapeMismatch
from centerline_factory.heads import (HeadOutput, LossParams, decode_bev, embed_loss, height_loss, offset_loss,
                                      pull_loss, push_loss, read_bevout, total_2d_loss, total_3d_loss,
                                      weighted_bce, write_bevout)
from centerline_factory.labelgen import BEVGridSpec, encode_bev

RNG = np.random.default_rng(1234)
REL = 1e-5


def random_field(rng, n=12, ne=3, c_max=4):
    inst = rng.integers(0, c_max + 1, n)
    inst[0] = 1
    return rng.normal(0, 1.5, (n, ne)), inst


# ------------------------------------------------------------------ worked values

def test_pull_worked_example():
    v, _ = pull_loss(np.array([[0.0], [4.0]]), np.array([1, 1]), 1.0)
    assert abs(v - 1.0) < 1e-12


def test_push_worked_example():
    v, _ = push_loss(np.array([[0.0], [1.0]]), np.array([1, 2]), 3.0)
    assert abs(v - 4.0) < 1e-12


def test_offset_worked_example():
    v, _ = offset_loss(np.array([[0.0]]), np.array([[0.75]]), np.array([[1]]))
    assert abs(v - 0.0625) < 1e-12


def test_height_worked_example():
    v, _ = height_loss(np.array([[1.5]]), np.array([[1.0]]), np.array([[1]]))
    assert abs(v - 0.25) < 1e-12


def test_margin_zero_conditions():
    e = np.array([[0.0, 0], [0.4, 0], [10, 0], [10.3, 0.2]])
    inst = np.array([1, 1, 2, 2])
    assert pull_loss(e, inst, 0.5)[0] == 0.0
    assert push_loss(e, inst, 3.0)[0] == 0.0
    assert np.all(pull_loss(e, inst, 0.5)[1] == 0) and np.all(push_loss(e, inst, 3.0)[1] == 0)


def test_push_single_instance_is_zero():
    assert push_loss(np.ones((3, 2)), np.array([1, 1, 0]), 3.0)[0] == 0.0


def test_pull_needs_foreground():
    with pytest.raises(NoForeground):
        pull_loss(np.ones((3, 2)), np.zeros(3, int), 0.5)


def test_loss_params_validation():
    with pytest.raises(ValueError):
        LossParams(delta_pull=2.0, delta_push=3.0)
    with pytest.raises(ValueError):
        LossParams(lambda_3d_seg=-1)


# ------------------------------------------------------------------ gradients

@pytest.mark.parametrize("kernel,delta", [(pull_loss, 0.5), (push_loss, 3.0)])
def test_embedding_gradients_match_finite_differences(kernel, delta):
    rng = np.random.default_rng(7)
    for _ in range(100):
        x, inst = random_field(rng)
        _, g = kernel(x, inst, delta)
        assert rel_err(g, fd_grad(lambda y: kernel(y, inst, delta)[0], x)) < REL


def test_offset_and_height_gradients():
    rng = np.random.default_rng(8)
    for _ in range(100):
        a = rng.normal(0, 2, (5, 4))
        gt = rng.uniform(0, 1, (5, 4))
        m = rng.random((5, 4)) < 0.5
        _, g = offset_loss(a, gt, m)
        assert rel_err(g, fd_grad(lambda y: offset_loss(y, gt, m)[0], a)) < REL
        h = rng.normal(0, 2, (5, 4))
        _, g = height_loss(h, gt, m)
        assert rel_err(g, fd_grad(lambda y: height_loss(y, gt, m)[0], h)) < REL


def test_bce_gradient():
    rng = np.random.default_rng(9)
    for _ in range(100):
        p = rng.uniform(0.05, 0.95, (6, 5))
        y = rng.random((6, 5)) < 0.3
        y[0, 0], y[0, 1] = True, False
        _, g = weighted_bce(p, y)
        assert rel_err(g, fd_grad(lambda q: weighted_bce(q, y)[0], p)) < REL


# ------------------------------------------------------------------ BCE

def test_bce_perfect_prediction():
    y = RNG.random((8, 8)) < 0.4
    v, _ = weighted_bce(y.astype(float), y)
    assert 0 <= v <= 2e-7


def test_bce_balanced_equals_unweighted():
    y = np.zeros((4, 4), bool)
    y[:2] = True
    p = RNG.uniform(0.01, 0.99, (4, 4))
    plain = -np.mean(np.where(y, np.log(p), np.log(1 - p)))
    assert abs(weighted_bce(p, y)[0] - plain) < 1e-12


def test_bce_random_against_direct_formula():
    p = RNG.uniform(0.01, 0.99, (8, 8))
    y = RNG.random((8, 8)) < 0.2
    N, n_fg = y.size, y.sum()
    total = 0.0
    for i in range(8):
        for j in range(8):
            if y[i, j]:
                total += N / (2 * n_fg) * -math.log(p[i, j])
            else:
                total += N / (2 * (N - n_fg)) * -math.log(1 - p[i, j])
    assert abs(weighted_bce(p, y)[0] - total / N) < 1e-12


def test_bce_degenerate_mask_warns():
    with pytest.warns(DegenerateMaskWarning):
        v, _ = weighted_bce(np.full((3, 3), 0.2), np.zeros((3, 3)))
    assert abs(v + math.log(0.8)) < 1e-12


# ------------------------------------------------------------------ properties

@settings(max_examples=100)
@given(st.integers(0, 10**6), st.floats(-50, 50))
def test_translation_and_permutation_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    x, inst = random_field(rng)
    for kernel, d in ((pull_loss, 0.5), (push_loss, 3.0)):
        base = kernel(x, inst, d)[0]
        assert abs(kernel(x + shift, inst, d)[0] - base) < 1e-9 * max(1, base)
    perm = np.concatenate([[0], rng.permutation(np.arange(1, 5))])
    assert abs(push_loss(x, perm[inst], 3.0)[0] - push_loss(x, inst, 3.0)[0]) < 1e-12


@settings(max_examples=50)
@given(st.integers(0, 10**6), st.floats(0, 5), st.floats(0, 5))
def test_embed_loss_linear_in_weights(seed, lp, ls):
    rng = np.random.default_rng(seed)
    x, inst = random_field(rng)
    p = LossParams(lambda_3d_pull=lp, lambda_3d_push=ls)
    want = lp * pull_loss(x, inst, 0.5)[0] + ls * push_loss(x, inst, 3.0)[0]
    assert embed_loss(x, inst, p)[0] == pytest.approx(want, rel=1e-12, abs=1e-15)
    assert embed_loss(x, inst, LossParams(lambda_3d_pull=0, lambda_3d_push=0))[0] == 0
    p2 = LossParams(lambda_3d_pull=2 * lp, lambda_3d_push=2 * ls)
    assert embed_loss(x, inst, p2)[0] == pytest.approx(2 * embed_loss(x, inst, p)[0], rel=1e-12, abs=1e-15)


def _scene_targets(rng, grid):
    lines = []
    for k in range(rng.integers(1, 4)):
        x0 = -12 + 8 * k + rng.uniform(-1, 1)
        lines.append(np.array([[x0, 0.0, 0.0], [x0 + rng.uniform(-3, 3), 60.0, rng.uniform(-1, 1)]]))
    return encode_bev(lines, grid)


def test_total_losses_compositional_and_nonnegative():
    rng = np.random.default_rng(3)
    grid = BEVGridSpec(-16, 16, 0, 30, 0.5)
    for _ in range(10):
        tg = _scene_targets(rng, grid)
        out = HeadOutput(rng.uniform(0.01, 0.99, grid.shape), rng.normal(0, 2, grid.shape + (4,)),
                         rng.normal(0, 1, grid.shape), rng.normal(0, 1, grid.shape))
        p = LossParams(lambda_3d_pull=0.3, lambda_3d_push=0.7, lambda_3d_seg=1.5, lambda_3d_offset=2.5,
                       lambda_3d_height=0.25)
        total, terms = total_3d_loss(out, tg, p, return_terms=True)
        manual = (0.3 * pull_loss(out.embed, tg.instance, 0.5)[0] + 0.7 * push_loss(out.embed, tg.instance, 3.0)[0]
                  + 1.5 * weighted_bce(out.conf, tg.seg)[0]
                  + 2.5 * offset_loss(out.x_offset_logits, tg.x_offset, tg.seg)[0]
                  + 0.25 * height_loss(out.height, tg.height, tg.seg)[0])
        assert total == pytest.approx(manual, rel=1e-12)
        assert total >= 0
        only_seg = LossParams(lambda_2d_pull=0, lambda_2d_push=0, lambda_2d_seg=3.0)
        t2 = total_2d_loss(out.conf, tg.seg, out.embed, tg.instance, only_seg)
        assert t2 == pytest.approx(3.0 * weighted_bce(out.conf, tg.seg)[0], rel=1e-12)


def test_background_height_never_contributes():
    gt = np.array([[1.0, 2.0], [3.0, 4.0]])
    m = np.array([[1, 0], [0, 1]])
    h = np.array([[1.5, 9.0], [-7.0, 4.0]])
    h2 = h.copy()
    h2[0, 1], h2[1, 0] = 123.0, -55.0
    assert height_loss(h, gt, m)[0] == height_loss(h2, gt, m)[0] == 0.25


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        offset_loss(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)))


# ------------------------------------------------------------------ decode / fixture

def test_decode_straight_lane_exact():
    grid = BEVGridSpec()
    tg = encode_bev([np.array([[1.3, 0.0, 0.2], [1.3, 100.0, 0.2]])], grid)
    lines = decode_bev(HeadOutput.from_targets(tg), grid)
    assert len(lines) == 1
    np.testing.assert_allclose(lines[0][:, 0], 1.3, atol=1e-12)
    np.testing.assert_allclose(lines[0][:, 1], grid.row_centers())
    np.testing.assert_allclose(lines[0][:, 2], 0.2, atol=1e-12)


def test_decode_two_separated_lanes():
    grid = BEVGridSpec()
    tg = encode_bev([np.array([[-2.0, 0, 0], [-2.0, 50, 0]]), np.array([[2.0, 0, 0], [2.5, 50, 0]])], grid)
    assert len(decode_bev(HeadOutput.from_targets(tg, separation=10.0), grid, embed_radius=1.5)) == 2


def test_decode_below_threshold_is_empty():
    grid = BEVGridSpec()
    out = HeadOutput(np.full(grid.shape, 0.3), np.zeros(grid.shape + (4,)), np.zeros(grid.shape),
                     np.zeros(grid.shape))
    assert decode_bev(out, grid, conf_threshold=0.5) == []


def test_bevout_round_trip_and_errors():
    grid = BEVGridSpec(-2, 2, 0, 3, 0.5)
    rng = np.random.default_rng(0)
    out = HeadOutput(rng.random(grid.shape).astype(np.float32), rng.normal(size=grid.shape + (3,)).astype(np.float32),
                     rng.normal(size=grid.shape).astype(np.float32), rng.normal(size=grid.shape).astype(np.float32))
    data = write_bevout(out)
    back = read_bevout(data)
    assert write_bevout(back) == data
    assert data[:4] == b"BVO1" and len(data) == 16 + 4 * grid.s1 * grid.s2 * 6
    with pytest.raises(SchemaError):
        read_bevout(data[:-1])
    with pytest.raises(SchemaError):
        read_bevout(b"XXXX" + data[4:])
