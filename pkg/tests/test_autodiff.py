import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etrnlp import ops
from etrnlp.autodiff import AutodiffError, Tensor, backward, build_tape
from etrnlp.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from etrnlp.gradcheck import check_gradients
from etrnlp.optim import Adam, AdamState, NonFiniteGradientError, adam_step

from oracles import conv2d_loop, pool2d_loop

SEEDS = range(5)


def leaf(a, grad=True):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# tape and backward


def test_sum_gradient_is_ones():
    x = leaf(np.random.default_rng(0).normal(size=(2, 3, 4, 5)))
    backward(ops.sum(x))
    assert np.array_equal(x.grad, np.ones_like(x.data))


def test_half_square_gradient_is_input():
    x = leaf(np.random.default_rng(1).normal(size=(3, 4)))
    backward(ops.mul(ops.sum(ops.mul(x, x)), Tensor(np.float64(0.5))))
    np.testing.assert_allclose(x.grad, x.data, rtol=0, atol=1e-15)


def test_backward_rejects_non_scalar():
    x = leaf(np.ones((2, 2)))
    with pytest.raises(AutodiffError):
        backward(ops.mul(x, x))


def test_backward_rejects_empty_tape():
    with pytest.raises(AutodiffError):
        backward(ops.sum(Tensor(np.ones(3))))


def test_backward_on_leaf_seeds_itself():
    x = Tensor(np.float32(2.0), requires_grad=True)
    backward(x)
    assert x.grad == 1.0


def test_tape_is_topological_and_frozen_tensors_are_not_leaves():
    x = leaf(np.ones((1, 2, 3, 3)))
    frozen = Tensor(np.ones((2, 1, 3, 3)))
    y = ops.relu(ops.conv2d(x, frozen, None, 1, 1, groups=2))
    tape = build_tape(ops.sum(y))
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.node is not None:
                assert position[id(inp.node)] < position[id(node)]
    assert all(t.requires_grad for t in tape.leaves)
    assert frozen not in tape.leaves and any(t is x for t in tape.leaves)


@pytest.mark.parametrize("seed", SEEDS)
def test_gradient_through_frozen_weights(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(2, 3, 5, 5)))
    w = Tensor(rng.normal(size=(3, 1, 3, 3)))  # frozen
    errs = check_gradients(lambda a: ops.conv2d(a, w, None, 1, 1, groups=3), [x], seed=seed)
    assert errs[0] < 1e-6
    assert w.grad is None


def test_replay_is_deterministic():
    def run():
        rng = np.random.default_rng(3)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)).astype(np.float32), requires_grad=True)
        opt = Adam([("w", w)], lr=1e-2)
        x = Tensor(rng.normal(size=(2, 3, 6, 6)).astype(np.float32))
        losses = []
        for _ in range(10):
            opt.zero_grad()
            loss = ops.mean(ops.relu(ops.conv2d(x, w, None, 1, 1)))
            backward(loss)
            opt.step()
            losses.append(loss.data.tobytes())
        return losses

    assert run() == run()


# ---------------------------------------------------------------------------
# conv2d


def test_conv_sum_of_ones():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), None, 1, 0)
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 4, 4)).astype(np.float32)
    out = ops.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)),
                     Tensor(np.zeros(1, np.float32)), 1, 0)
    assert np.array_equal(out.data, x)


def test_conv_matches_loop_oracle_reference_case():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 4, 8, 8))
    w = rng.normal(size=(6, 4, 3, 3))
    b = rng.normal(size=6)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
    ref = conv2d_loop(x, w, b, 1, 1)
    assert np.max(np.abs(out - ref) / np.maximum(np.abs(ref), 1e-6)) < 1e-6


CONV_CASES = [
    # n, c_in, c_out, k, stride, pad, groups, h
    (2, 4, 6, 3, 1, 1, 1, 8),
    (1, 4, 4, 3, 2, 1, 4, 9),     # depthwise, strided
    (2, 4, 8, 3, 1, 1, 4, 7),     # depthwise multiplier 2
    (2, 6, 4, 1, 1, 0, 2, 5),     # grouped pointwise
    (1, 3, 5, 5, 2, 2, 1, 11),
    (2, 8, 4, 3, 1, 0, 2, 6),     # grouped, no padding
]


@pytest.mark.parametrize("case", CONV_CASES)
def test_conv_forward_matches_loop_oracle(case):
    n, ci, co, k, s, p, g, h = case
    rng = np.random.default_rng(sum(case))
    x = rng.normal(size=(n, ci, h, h))
    w = rng.normal(size=(co, ci // g, k, k))
    b = rng.normal(size=co)
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), s, p, g).data
    np.testing.assert_allclose(out, conv2d_loop(x, w, b, s, p, g), rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("case", CONV_CASES)
@pytest.mark.parametrize("seed", SEEDS)
def test_conv_gradients(case, seed):
    n, ci, co, k, s, p, g, h = case
    rng = np.random.default_rng(seed)
    x, w, b = leaf(rng.normal(size=(n, ci, h, h))), leaf(rng.normal(size=(co, ci // g, k, k))), \
        leaf(rng.normal(size=co))
    errs = check_gradients(lambda a, c, d: ops.conv2d(a, c, d, s, p, g), [x, w, b], seed=seed)
    assert max(errs.values()) < 1e-3, errs


def test_conv_errors():
    x = Tensor(np.ones((1, 3, 4, 4)))
    with pytest.raises(ops.ShapeError):
        ops.conv2d(x, Tensor(np.ones((4, 1, 3, 3))), None, 1, 1, groups=2)
    with pytest.raises(ops.DegenerateOutputError):
        ops.conv2d(x, Tensor(np.ones((2, 3, 5, 5))), None, 1, 0)


def test_conv_mac_count():
    with ops.count_macs() as log:
        ops.conv2d(Tensor(np.zeros((1, 8, 32, 32))), Tensor(np.zeros((16, 8, 3, 3))), None, 1, 1)
    assert sum(m for _, m in log) == 16 * 8 * 9 * 1024 == 1_179_648


# ---------------------------------------------------------------------------
# pooling


def test_pool_single_window():
    x = leaf([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = ops.pool2d(x, "max", 2)
    assert out.data.item() == 4.0
    backward(ops.sum(out))
    assert np.array_equal(x.grad, [[[[0, 0], [0, 1.0]]]])
    assert ops.pool2d(Tensor(x.data), "avg", 2).data.item() == 2.5


def test_max_pool_tie_goes_to_first_index():
    x = leaf(np.ones((1, 1, 2, 2)))
    backward(ops.sum(ops.pool2d(x, "max", 2)))
    assert np.array_equal(x.grad, [[[[1.0, 0], [0, 0]]]])


@pytest.mark.parametrize("kind", ["avg", "max"])
@pytest.mark.parametrize("k,s,p", [(3, 1, 1), (2, 2, 0), (5, 1, 2), (3, 2, 1)])
def test_pool_matches_loop_oracle(kind, k, s, p):
    x = np.random.default_rng(k * 10 + s + p).normal(size=(1, 3, 9, 9))
    out = ops.pool2d(Tensor(x), kind, k, s, p).data
    np.testing.assert_allclose(out, pool2d_loop(x, kind, k, s, p), rtol=1e-6, atol=1e-12)


@pytest.mark.parametrize("kind", ["avg", "max"])
@pytest.mark.parametrize("seed", SEEDS)
def test_pool_gradients(kind, seed):
    x = leaf(np.random.default_rng(seed).normal(size=(2, 3, 7, 7)))
    errs = check_gradients(lambda a: ops.pool2d(a, kind, 3, 1, 1), [x], seed=seed)
    assert errs[0] < 1e-3


def test_pool_degenerate():
    with pytest.raises(ops.DegenerateOutputError):
        ops.pool2d(Tensor(np.ones((1, 1, 2, 2))), "avg", 5)


def test_unpool_inverts_pool():
    x = np.random.default_rng(4).normal(size=(2, 3, 8, 8))
    pooled, idx = ops.max_pool2d_with_indices(Tensor(x), 2, 2)
    restored = ops.max_unpool2d(pooled, idx, (8, 8)).data
    mask = restored != 0
    assert mask.sum() == pooled.size
    assert np.array_equal(restored[mask], x[mask])
    assert np.array_equal(np.sort(restored[mask]), np.sort(pooled.data.ravel()))


@pytest.mark.parametrize("seed", SEEDS)
def test_unpool_gradient(seed):
    x = np.random.default_rng(seed).normal(size=(1, 2, 6, 6))
    pooled, idx = ops.max_pool2d_with_indices(Tensor(x), 2, 2)
    v = leaf(pooled.data)
    assert check_gradients(lambda a: ops.max_unpool2d(a, idx, (6, 6)), [v], seed=seed)[0] < 1e-6


# ---------------------------------------------------------------------------
# batch norm


def _bn(x, scale, shift, training=True):
    c = x.shape[1]
    return ops.batchnorm2d(x, scale, shift, np.zeros(c), np.ones(c), training)


def test_bn_constant_channel_gives_shift():
    x = Tensor(np.full((2, 1, 3, 3), 7.0))
    out = _bn(x, Tensor(np.array([2.0])), Tensor(np.array([0.25])))
    np.testing.assert_allclose(out.data, 0.25, atol=1e-12)


def test_bn_normalises():
    x = Tensor(np.random.default_rng(0).normal(3, 2, size=(4, 3, 5, 5)))
    out = _bn(x, Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)


def test_bn_running_stats_and_eval():
    rng = np.random.default_rng(1)
    x = rng.normal(2, 3, size=(4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    ops.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True)
    m = x.size // 2
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    out = ops.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, False).data
    np.testing.assert_allclose(out, (x - rm[None, :, None, None]) / np.sqrt(rv + 1e-5)[None, :, None, None])


@pytest.mark.parametrize("training", [True, False])
@pytest.mark.parametrize("seed", SEEDS)
def test_bn_gradients(training, seed):
    rng = np.random.default_rng(seed)
    x, sc, sh = leaf(rng.normal(size=(2, 3, 4, 4))), leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)

    def f(a, b, c):
        # fresh copies so the running-stat update does not leak between evaluations
        return ops.batchnorm2d(a, b, c, rm.copy(), rv.copy(), training)

    errs = check_gradients(f, [x, sc, sh], seed=seed)
    assert max(errs.values()) < 1e-4, errs


# ---------------------------------------------------------------------------
# elementwise, structural and loss ops


UNARY = {
    "relu": ops.relu,
    "sigmoid": ops.sigmoid,
    "gap": ops.global_avg_pool,
    "reshape": lambda a: ops.reshape(a, (a.shape[0], -1)),
    "mean": ops.mean,
    "permute": lambda a: ops.permute_channels(a, np.array([2, 0, 3, 1])),
    "take": lambda a: ops.take_channels(a, np.array([3, 1, 1, 0, 3, 2])),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_unary_gradients(name, seed):
    x = np.random.default_rng(seed).normal(size=(2, 4, 3, 3))
    if name == "relu":
        x[np.abs(x) < 1e-2] = 0.5  # keep clear of the kink
    assert check_gradients(UNARY[name], [leaf(x)], seed=seed)[0] < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_binary_broadcast_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng.normal(size=(2, 3, 4, 4))), leaf(rng.normal(size=(1, 3, 1, 4)))
    for f in (ops.add, ops.sub, ops.mul):
        a.grad = b.grad = None
        errs = check_gradients(f, [a, b], seed=seed)
        assert max(errs.values()) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_concat_and_linear_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng.normal(size=(2, 2, 3, 3))), leaf(rng.normal(size=(2, 3, 3, 3)))
    assert max(check_gradients(lambda u, v: ops.concat([u, v], 1), [a, b], seed=seed).values()) < 1e-6
    x, w, bias = leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=3))
    assert max(check_gradients(ops.linear, [x, w, bias], seed=seed).values()) < 1e-3


@pytest.mark.parametrize("seed", SEEDS)
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    z = leaf(rng.normal(size=(6, 1)))
    y = rng.integers(0, 2, size=(6, 1)).astype(np.float64)
    assert check_gradients(lambda a: ops.bce_with_logits(a, y), [z], seed=seed)[0] < 1e-3
    p = leaf(rng.normal(size=(2, 1, 3, 3)))
    d = rng.normal(size=(2, 1, 3, 3))
    assert check_gradients(lambda a: ops.l1_loss(a, d), [p], seed=seed)[0] < 1e-3


def test_bce_is_stable_for_large_logits():
    z = Tensor(np.array([[80.0], [-80.0]]))
    loss = ops.bce_with_logits(z, np.array([[1.0], [0.0]]))
    assert np.isfinite(loss.data) and loss.data < 1e-30
    assert ops.bce_with_logits(z, np.array([[0.0], [1.0]])).data == pytest.approx(80.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_composite_network_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)))
    w = leaf(rng.normal(size=(4, 3, 3, 3)) * 0.5)
    b = leaf(rng.normal(size=4))
    lw = leaf(rng.normal(size=(1, 4)))
    lb = leaf(rng.normal(size=1))
    y = np.array([[1.0], [0.0]])

    def f(w_, b_, lw_, lb_):
        h = ops.pool2d(ops.relu(ops.conv2d(x, w_, b_, 1, 1)), "max", 2)
        return ops.bce_with_logits(ops.linear(ops.global_avg_pool(h), lw_, lb_), y)

    errs = check_gradients(f, [w, b, lw, lb], seed=seed)
    assert max(errs.values()) < 1e-3, errs


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(3, 7),
       st.integers(1, 3), st.integers(0, 2), st.integers(0, 10_000))
def test_conv_property_matches_oracle(n, g, per_group, h, k, pad, seed):
    rng = np.random.default_rng(seed)
    ci = g * per_group
    co = g * rng.integers(1, 3)
    if h + 2 * pad < k:
        return
    x = rng.normal(size=(n, ci, h, h))
    w = rng.normal(size=(co, per_group, k, k))
    out = ops.conv2d(Tensor(x), Tensor(w), None, 1, pad, g).data
    np.testing.assert_allclose(out, conv2d_loop(x, w, None, 1, pad, g), rtol=1e-6, atol=1e-9)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_is_fixed_point():
    p = Tensor(np.array([1.5, -2.0], np.float32), requires_grad=True)
    opt = Adam([("p", p)], lr=1e-2)
    p.grad = np.zeros(2, np.float32)
    before = p.data.copy()
    for _ in range(3):
        opt.step()
    assert np.array_equal(p.data, before)


def test_adam_first_step_by_hand():
    p = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    state = AdamState(lr=1e-4)
    state.m["p"], state.v["p"], state.steps["p"] = np.zeros(1), np.zeros(1), 0
    adam_step(p, np.array([1.0]), "p", state)
    # m_hat = 1, v_hat = 1 -> step lr / (1 + eps)
    assert p.data[0] == pytest.approx(-1e-4 / (1 + 1e-8), abs=1e-12)
    assert abs(p.data[0] + 1e-4) < 1e-6


def test_adam_matches_reference_formula_over_steps():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 3))
    p = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
    opt = Adam([("p", p)], lr=1e-3)
    ref, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, 1):
        p.grad = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 1e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_adam_non_finite_gradient_names_parameter_and_changes_nothing():
    a = Tensor(np.ones(2, np.float32), requires_grad=True)
    b = Tensor(np.ones(2, np.float32), requires_grad=True)
    opt = Adam([("a", a), ("layer.b", b)])
    a.grad = np.ones(2, np.float32)
    b.grad = np.array([1.0, np.nan], np.float32)
    with pytest.raises(NonFiniteGradientError) as info:
        opt.step()
    assert info.value.param_name == "layer.b"
    assert np.array_equal(a.data, np.ones(2)) and opt.state.steps["a"] == 0


def test_adam_identical_streams_are_bitwise_identical():
    def run():
        rng = np.random.default_rng(5)
        p = Tensor(rng.normal(size=(4,)).astype(np.float32), requires_grad=True)
        opt = Adam([("p", p)])
        for _ in range(20):
            p.grad = rng.normal(size=4).astype(np.float32)
            opt.step()
        return p.data.tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"conv.weight": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
               "scalar": np.array(3.25, np.float32), "empty": np.zeros((0, 5), np.float32),
               "名前": rng.normal(size=7).astype(np.float32)}
    path = tmp_path / "c.etrn"
    save_checkpoint(path, tensors)
    assert path.read_bytes()[:4] == b"ETRN"
    back = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape and back[k].tobytes() == tensors[k].tobytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "c.etrn"
    save_checkpoint(path, {"ab": np.array([1.0, 2.0], np.float32)})
    raw = path.read_bytes()
    assert raw[:4] == b"ETRN"
    version, count = struct.unpack_from("<HI", raw, 4)
    assert (version, count) == (1, 1)
    (name_len,) = struct.unpack_from("<H", raw, 10)
    assert raw[12:12 + name_len] == b"ab"
    rank, dim = struct.unpack_from("<IQ", raw, 12 + name_len)
    assert (rank, dim) == (1, 2)
    assert np.frombuffer(raw[-8:], "<f4").tolist() == [1.0, 2.0]


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "c.etrn"
    save_checkpoint(path, {"w": np.ones(4, np.float32)})
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short").write_bytes(raw[:-3])
    for name in ("bad", "short"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)
