import numpy as np
import pytest

from wav2ent.core import Tensor, grad_check
from wav2ent.core import functional as F
from wav2ent.core.layers import MultiHeadAttention, TransformerBlock, sinusoidal_positions, transformer_block
from wav2ent.core.optim import Adam, AdamState, adam_step
from wav2ent.errors import ShapeMismatch


def _zero_all(module):
    for name, p in module.named_parameters():
        if not name.endswith("gamma"):
            p.data[...] = 0.0


class TestTransformerBlock:
    def test_zero_weights_is_identity(self):
        block = TransformerBlock(np.random.default_rng(0), 8, 2)
        _zero_all(block)
        x = np.random.default_rng(1).normal(size=(5, 8)).astype(np.float32)
        assert np.array_equal(block(Tensor(x)).data, x)

    def test_attention_rows_are_distributions(self):
        attn = MultiHeadAttention(np.random.default_rng(0), 8, 2)
        attn(Tensor(np.random.default_rng(1).normal(size=(3, 6, 8))))
        w = attn.last_weights
        assert w.shape == (3, 2, 6, 6)
        assert np.all(w >= 0) and np.allclose(w.sum(-1), 1.0, atol=1e-6)

    def test_batch_rows_are_independent(self):
        block = TransformerBlock(np.random.default_rng(2), 8, 4)
        x = np.random.default_rng(3).normal(size=(2, 5, 8)).astype(np.float32)
        both = block(Tensor(x)).data
        assert np.allclose(both[1], block(Tensor(x[1])).data, atol=1e-6)

    def test_permutation_equivariant_without_positions(self):
        block = TransformerBlock(np.random.default_rng(4), 8, 2)
        x = np.random.default_rng(5).normal(size=(6, 8)).astype(np.float32)
        perm = np.array([3, 0, 5, 1, 4, 2])
        assert np.allclose(block(Tensor(x[perm])).data, block(Tensor(x)).data[perm], atol=1e-5)

    def test_geometry_errors(self):
        with pytest.raises(ShapeMismatch):
            MultiHeadAttention(np.random.default_rng(0), 10, 3)
        block = TransformerBlock(np.random.default_rng(0), 8, 2)
        with pytest.raises(ShapeMismatch):
            block(Tensor(np.ones((4, 6))))
        with pytest.raises(ShapeMismatch):
            transformer_block(Tensor(np.ones((4, 8))), block, n_heads=4)

    def test_grad(self):
        block = TransformerBlock(np.random.default_rng(6), 8, 2).astype(np.float64)
        for p in block.parameters():
            p.data += np.random.default_rng(7).normal(0, 0.3, p.shape)
        x = Tensor(np.random.default_rng(8).normal(size=(4, 8)), requires_grad=True, dtype=np.float64)
        w = Tensor(np.random.default_rng(9).normal(size=(4, 8)), dtype=np.float64)
        params = [x] + block.parameters()
        assert grad_check(lambda: F.sum(F.mul(block(x), w)), params, n_coords=60) < 1e-3


def test_sinusoidal_table():
    table = sinusoidal_positions(4, 6)
    assert table.shape == (4, 6)
    assert np.allclose(table[0], [0, 1, 0, 1, 0, 1])
    assert table[1, 0] == pytest.approx(np.sin(1.0))
    assert table[2, 3] == pytest.approx(np.cos(2.0 / 10000 ** (2 / 6)))


class TestAdam:
    def test_zero_gradient_is_a_no_op(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True, dtype=np.float64)
        adam_step([p], [np.zeros(3)], AdamState(), lr=0.1)
        assert p.data.tolist() == [1.0, -2.0, 3.0]

    def test_first_step_is_lr_times_sign(self):
        p = Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True, dtype=np.float64)
        adam_step([p], [np.array([0.5, -3.0, 1e3])], AdamState(), lr=0.01)
        assert np.allclose(p.data, [0.99, 1.01, 0.99], atol=1e-8)

    def test_quadratic_descends_monotonically(self):
        theta = Tensor(np.array([1.0]), requires_grad=True, dtype=np.float64)
        opt = Adam([theta], lr=0.05)
        path = [abs(theta.data[0])]
        for _ in range(10):
            opt.zero_grad()
            F.sum(theta * theta).backward()
            opt.step()
            path.append(abs(theta.data[0]))
        assert all(b < a for a, b in zip(path, path[1:]))

    def test_state_length_mismatch(self):
        p = Tensor(np.ones(2), requires_grad=True)
        state = AdamState.for_params([p, p])
        with pytest.raises(ShapeMismatch):
            adam_step([p], [np.ones(2)], state, lr=0.1)

    def test_grad_shape_mismatch(self):
        p = Tensor(np.ones(2), requires_grad=True)
        with pytest.raises(ShapeMismatch):
            adam_step([p], [np.ones(3)], AdamState(), lr=0.1)
