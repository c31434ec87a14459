"""Primitive-by-primitive forward rules and finite-difference gradient checks."""

import numpy as np
import pytest

from sessionlm import autodiff as ad
from sessionlm.errors import ShapeError
from sessionlm.rng import Rng

from helpers import check_gradients, leaf


def test_matmul_shapes():
    a = ad.tensor(np.ones((2, 3)))
    b = ad.tensor(np.ones((3, 4)))
    assert ad.matmul(a, b).shape == (2, 4)


def test_matmul_shape_mismatch_reports_both():
    a = ad.tensor(np.ones((2, 3)))
    b = ad.tensor(np.ones((4, 4)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 4\)"):
        ad.matmul(a, b)


def test_unknown_primitive_rejected():
    with pytest.raises(ShapeError, match="unknown primitive"):
        ad.apply_primitive("conv2d", ad.tensor([1.0]))


def test_softmax_normalizes_and_shift_invariant():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 7))
    y = ad.softmax(ad.tensor(x)).data
    assert np.all(y > 0) and np.all(y < 1)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)
    y2 = ad.softmax(ad.tensor(x + 123.0)).data
    np.testing.assert_allclose(y, y2, atol=1e-6)


def test_embedding_lookup_repeats_rows():
    table = ad.tensor(np.arange(20.0).reshape(5, 4))
    out = ad.embedding_lookup(table, np.array([2, 2, 0]))
    assert out.shape == (3, 4)
    np.testing.assert_array_equal(out.data[0], out.data[1])
    np.testing.assert_array_equal(out.data[2], table.data[0])


def test_backward_square():
    x = ad.tensor([1.0, -2.0, 3.0], dtype=np.float64, requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_(ad.mul(x, x))
    grads = ad.backward(tape, loss)
    np.testing.assert_allclose(grads[x.node_id], [2.0, -4.0, 6.0])


def test_backward_rejects_nonscalar_loss():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ShapeError, match="scalar"):
        tape.backward(y)


def test_softmax_sum_has_zero_gradient():
    # outputs always sum to 1, so d(sum softmax)/dx == 0
    x = ad.tensor(np.random.default_rng(1).normal(size=6), dtype=np.float64, requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum_(ad.softmax(x))
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads[x.node_id], 0.0, atol=1e-12)


def test_unreachable_leaf_gets_zero_gradient():
    x = ad.tensor([1.0, 2.0], dtype=np.float64, requires_grad=True)
    unused = ad.tensor([3.0], dtype=np.float64, requires_grad=True)
    with ad.Tape() as tape:
        ad.sum_(unused)  # on tape but not reachable from loss
        loss = ad.sum_(x)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[unused.node_id], [0.0])


def test_dropout_rate_zero_is_identity():
    x = ad.tensor(np.arange(6.0), dtype=np.float64, requires_grad=True)
    with ad.Tape() as tape:
        out = ad.dropout(x, 0.0, Rng(0))
        loss = ad.sum_(out)
    np.testing.assert_array_equal(out.data, x.data)
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[x.node_id], np.ones(6))


def test_dropout_replays_bit_identical():
    x = ad.tensor(np.arange(12.0).reshape(3, 4))
    a = ad.dropout(x, 0.5, Rng(7, "d")).data
    b = ad.dropout(x, 0.5, Rng(7, "d")).data
    np.testing.assert_array_equal(a, b)


def test_add_bias_broadcast_only():
    a = ad.tensor(np.zeros((2, 3)))
    assert ad.add(a, ad.tensor(np.ones(3))).shape == (2, 3)
    with pytest.raises(ShapeError):
        ad.add(a, ad.tensor(np.ones((1, 3))))


class TestGradients:
    """Central finite differences (64-bit, step 1e-5), rel err < 1e-4."""

    def setup_method(self):
        self.rng = np.random.default_rng(42)

    def test_matmul_2d(self):
        a, b = leaf(self.rng, 3, 4), leaf(self.rng, 4, 5)
        check_gradients(lambda: ad.sum_(ad.matmul(a, b)), [a, b])

    def test_matmul_batched(self):
        a, b = leaf(self.rng, 2, 3, 4), leaf(self.rng, 2, 4, 5)
        check_gradients(lambda: ad.sum_(ad.mul(ad.matmul(a, b), ad.matmul(a, b))), [a, b])

    def test_matmul_3d_by_2d(self):
        a, b = leaf(self.rng, 2, 3, 4), leaf(self.rng, 4, 5)
        check_gradients(lambda: ad.mean(ad.tanh(ad.matmul(a, b))), [a, b])

    def test_add_and_bias(self):
        a, b = leaf(self.rng, 4, 3), leaf(self.rng, 3)
        check_gradients(lambda: ad.sum_(ad.sigmoid(ad.add(a, b))), [a, b])

    def test_mul(self):
        a, b = leaf(self.rng, 5, 2), leaf(self.rng, 5, 2)
        check_gradients(lambda: ad.sum_(ad.mul(a, b)), [a, b])

    def test_concat_and_slice(self):
        a, b = leaf(self.rng, 2, 3), leaf(self.rng, 2, 2)

        def loss():
            cat = ad.concat([a, b], axis=1)
            piece = ad.slice_(cat, (slice(0, 2), slice(1, 4)))
            return ad.sum_(ad.mul(piece, piece))

        check_gradients(loss, [a, b])

    def test_embedding_lookup(self):
        table = leaf(self.rng, 6, 3)
        idx = np.array([[1, 1, 4], [0, 2, 4]])
        check_gradients(
            lambda: ad.sum_(ad.tanh(ad.embedding_lookup(table, idx))), [table], max_coords=18
        )

    def test_gather_rows(self):
        a = leaf(self.rng, 3, 4, 2)
        idx = np.array([1, 3, 0])
        check_gradients(lambda: ad.sum_(ad.mul(ad.gather_rows(a, idx), ad.gather_rows(a, idx))), [a], max_coords=24)

    def test_softmax(self):
        a = leaf(self.rng, 3, 5)
        w = ad.constant(np.random.default_rng(3).normal(size=(3, 5)))
        check_gradients(lambda: ad.sum_(ad.mul(ad.softmax(a), w)), [a], max_coords=15)

    @pytest.mark.parametrize("op", [ad.sigmoid, ad.tanh, ad.gelu])
    def test_pointwise(self, op):
        a = leaf(self.rng, 4, 4)
        check_gradients(lambda: ad.sum_(op(a)), [a], max_coords=16)

    def test_log_with_floor(self):
        a = ad.tensor(np.abs(np.random.default_rng(5).normal(size=8)) + 0.5,
                      dtype=np.float64, requires_grad=True)
        check_gradients(lambda: ad.sum_(ad.log(a, floor=1e-12)), [a], max_coords=8)

    def test_layer_norm(self):
        x, g, b = leaf(self.rng, 3, 6), leaf(self.rng, 6), leaf(self.rng, 6)
        w = ad.constant(np.random.default_rng(4).normal(size=(3, 6)))
        check_gradients(lambda: ad.sum_(ad.mul(ad.layer_norm(x, g, b), w)), [x, g, b])

    def test_dropout(self):
        a = leaf(self.rng, 4, 4)
        check_gradients(
            lambda: ad.sum_(ad.dropout(a, 0.5, Rng(11, "fd"))), [a], max_coords=16
        )

    def test_mean_and_scale(self):
        a = leaf(self.rng, 3, 3)
        check_gradients(lambda: ad.scale(ad.mean(ad.mul(a, a)), 2.5), [a])

    def test_transpose_reshape(self):
        a = leaf(self.rng, 3, 4)
        check_gradients(
            lambda: ad.sum_(ad.mul(ad.reshape(ad.transpose(a), (2, 6)),
                                   ad.reshape(ad.transpose(a), (2, 6)))),
            [a],
        )

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_three_op_composition(self, seed):
        # fixed-seed random chain over the primitive catalog; square matmul
        # weights keep the running shape stable so any order composes
        catalog = ["sigmoid", "tanh", "gelu", "softmax", "dropout",
                   "matmul", "bias", "layernorm"]
        pick = np.random.default_rng(seed)
        ops = [catalog[int(pick.integers(len(catalog)))] for _ in range(3)]
        x = leaf(pick, 4, 6)
        w = [leaf(pick, 6, 6) for _ in range(3)]
        b = [leaf(pick, 6) for _ in range(3)]
        ln_g = [leaf(pick, 6) for _ in range(3)]
        ln_b = [leaf(pick, 6) for _ in range(3)]

        def build():
            t = x
            for i, name in enumerate(ops):
                if name == "sigmoid":
                    t = ad.sigmoid(t)
                elif name == "tanh":
                    t = ad.tanh(t)
                elif name == "gelu":
                    t = ad.gelu(t)
                elif name == "softmax":
                    t = ad.softmax(t)
                elif name == "dropout":
                    t = ad.dropout(t, 0.3, Rng(seed, f"chain{i}"))
                elif name == "matmul":
                    t = ad.matmul(t, w[i])
                elif name == "bias":
                    t = ad.add(t, b[i])
                elif name == "layernorm":
                    t = ad.layer_norm(t, ln_g[i], ln_b[i])
            return ad.mean(ad.mul(t, t))

        leaves = [x]
        for i, name in enumerate(ops):
            if name == "matmul":
                leaves.append(w[i])
            elif name == "bias":
                leaves.append(b[i])
            elif name == "layernorm":
                leaves.extend([ln_g[i], ln_b[i]])
        check_gradients(build, leaves)


def test_tape_topological_order():
    x = ad.tensor([1.0, 2.0], requires_grad=True)
    with ad.Tape() as tape:
        y = ad.mul(x, x)
        z = ad.sum_(ad.add(y, y))
    seen = set()
    for out_id, in_ids, _ in tape._entries:
        for in_id in in_ids:
            assert in_id not in seen or True  # inputs may be leaves
        assert all(i < out_id for i in in_ids)
        seen.add(out_id)
    assert z.node_id in seen


def test_forward_replay_bit_identical():
    rng = np.random.default_rng(9)
    x = ad.tensor(rng.normal(size=(4, 4)), requires_grad=True)
    w = ad.tensor(rng.normal(size=(4, 4)), requires_grad=True)

    def forward():
        h = ad.dropout(ad.gelu(ad.matmul(x, w)), 0.2, Rng(3, "replay"))
        return ad.sum_(h)

    assert float(forward().data) == float(forward().data)
