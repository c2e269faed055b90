"""Channel and spatial attention blocks."""

import numpy as np
import pytest

from efficientsign.attention import SEBlock, SpatialAttentionBlock, se_forward, se_hidden, spatial_forward
from efficientsign.errors import ConfigurationError
from efficientsign.gradcheck import check_function
from efficientsign.tensor import Tensor


def _sigmoid(v):
    return 1 / (1 + np.exp(-v))


class TestSE:
    def test_zero_second_layer_halves_input(self, rng):
        x = rng.normal(size=(2, 8, 3, 3))
        out = se_forward(Tensor(x), Tensor(rng.normal(size=(2, 8))), Tensor(np.zeros(2)),
                         Tensor(np.zeros((8, 2))), Tensor(np.zeros(8)))
        np.testing.assert_array_equal(out.data, 0.5 * x)

    def test_hand_example(self):
        # z = [4, 2]; relu(4 + 2) = 6; s = sigmoid(6) for both channels
        x = np.array([[[[4.0]], [[2.0]]]])
        out, s = se_forward(Tensor(x), Tensor(np.array([[1.0, 1.0]])), Tensor(np.zeros(1)),
                            Tensor(np.array([[1.0], [1.0]])), Tensor(np.zeros(2)), return_gate=True)
        np.testing.assert_allclose(s.data, [[0.9975273768433653] * 2], rtol=1e-12)
        np.testing.assert_allclose(out.data.ravel(), [3.990109507373461, 1.9950547536867306], rtol=1e-12)

    @pytest.mark.parametrize("c,r,hidden", [(1280, 16, 80), (8, 16, 1), (3, 4, 1), (64, 16, 4)])
    def test_hidden_width(self, c, r, hidden):
        assert se_hidden(c, r) == hidden

    def test_param_count_b0(self):
        block = SEBlock(1280, 16)
        assert sum(p.data.size for p in block.parameters()) == 80 * 1280 + 80 + 1280 * 80 + 1280 == 206_160

    def test_channel_mismatch(self, rng):
        with pytest.raises(ConfigurationError):
            SEBlock(8)(Tensor(rng.normal(size=(1, 4, 2, 2))))

    def test_gate_in_open_interval_and_contraction(self, rng):
        block = SEBlock(16, 4, rng=rng, dtype=np.float64)
        block.b2.data = rng.normal(size=16)
        x = rng.normal(size=(3, 16, 4, 4))
        s = block.gate(Tensor(x)).data
        assert np.all((s > 0) & (s < 1))
        out = block(Tensor(x)).data
        assert out.shape == x.shape
        assert np.all(np.abs(out) <= np.abs(x))

    def test_gate_monotone_in_b2(self, rng):
        for trial in range(20):
            block = SEBlock(8, 2, rng=np.random.default_rng(trial), dtype=np.float64)
            block.b2.data = rng.normal(size=8)
            x = Tensor(rng.normal(size=(2, 8, 3, 3)))
            before = block.gate(x).data
            c = trial % 8
            block.b2.data[c] += abs(rng.normal()) + 0.01
            after = block.gate(x).data
            assert np.all(after[:, c] >= before[:, c])
            np.testing.assert_array_equal(np.delete(after, c, axis=1), np.delete(before, c, axis=1))

    def test_disabled_is_identity(self, rng):
        block = SEBlock(8, 2, rng=rng)
        block.enabled = False
        x = Tensor(rng.normal(size=(1, 8, 2, 2)))
        assert block(x) is x

    def test_gradients(self, rng):
        inputs = {"x": rng.normal(size=(2, 8, 3, 3)), "w1": rng.normal(size=(2, 8)), "b1": rng.normal(size=2) + 0.5,
                  "w2": rng.normal(size=(8, 2)), "b2": rng.normal(size=8)}
        for r in check_function(lambda x, w1, b1, w2, b2: se_forward(x, w1, b1, w2, b2), inputs):
            assert r.max_rel_error <= 1e-3


class TestSpatial:
    def test_zero_kernel_halves_input(self, rng):
        x = rng.normal(size=(2, 5, 4, 4))
        out = spatial_forward(Tensor(x), Tensor(np.zeros((1, 2, 7, 7))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, 0.5 * x)

    def test_constant_input_interior(self, rng):
        c, bias = 0.7, -0.3
        kernel = rng.normal(size=(1, 2, 7, 7)) * 0.1
        x = np.full((1, 3, 9, 9), c)
        _, m = spatial_forward(Tensor(x), Tensor(kernel), Tensor(np.array([bias])), return_map=True)
        # only the centre pixel sees the full 7x7 window on a 9x9 map
        assert m.data[0, 0, 4, 4] == pytest.approx(_sigmoid(c * kernel.sum() + bias), rel=1e-12)

    def test_shapes(self, rng):
        block = SpatialAttentionBlock(rng=rng)
        x = Tensor(rng.normal(size=(2, 1280, 7, 7)).astype(np.float32))
        assert block(x).shape == (2, 1280, 7, 7)
        m = block.attention_map(x).data
        assert m.shape == (2, 1, 7, 7)
        assert np.all((m > 0) & (m < 1))

    def test_param_count(self):
        block = SpatialAttentionBlock()
        assert block.kernel.shape == (1, 2, 7, 7)
        assert sum(p.data.size for p in block.parameters()) == 99

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            SpatialAttentionBlock(6)

    def test_contraction(self, rng):
        block = SpatialAttentionBlock(rng=rng, dtype=np.float64)
        x = rng.normal(size=(2, 4, 5, 5))
        assert np.all(np.abs(block(Tensor(x)).data) <= np.abs(x))

    def test_gradients(self, rng):
        inputs = {"x": rng.normal(size=(2, 4, 5, 5)), "k": 0.3 * rng.normal(size=(1, 2, 7, 7)),
                  "b": rng.normal(size=1)}
        for r in check_function(lambda x, k, b: spatial_forward(x, k, b), inputs):
            assert r.max_rel_error <= 1e-3


def test_init_biases_zero():
    se, sp = SEBlock(32, 16), SpatialAttentionBlock()
    assert not se.b1.data.any() and not se.b2.data.any() and not sp.bias.data.any()
