import numpy as np
import pytest

from swintormer import swda
from swintormer import tensor as T
from swintormer.swda import BlockConfig
from swintormer.tensor import Tensor
from swintormer.windowing import make_window_layout


def channel_attention_loops(q, k, v, temperature):
    """Loop reference for one head group: rows are channels, columns tokens."""
    nw, n, c = q.shape
    heads = temperature.size
    d = c // heads
    out = np.zeros_like(q)
    for w in range(nw):
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            qt, kt, vt = q[w, :, sl].T, k[w, :, sl].T, v[w, :, sl].T
            qt = qt / np.maximum(np.linalg.norm(qt, axis=1, keepdims=True), 1e-12)
            kt = kt / np.maximum(np.linalg.norm(kt, axis=1, keepdims=True), 1e-12)
            s = qt @ kt.T * temperature[h]
            a = np.exp(s - s.max(1, keepdims=True))
            a /= a.sum(1, keepdims=True)
            out[w, :, sl] = (a @ vt).T
    return out


def spatial_attention_loops(q, k, v, bias, mask):
    nw, n, c = q.shape
    heads = bias.shape[0]
    d = c // heads
    out = np.zeros_like(q)
    for w in range(nw):
        for h in range(heads):
            sl = slice(h * d, (h + 1) * d)
            s = q[w, :, sl] @ k[w, :, sl].T / np.sqrt(d) + bias[h]
            s = np.where(mask[w], s, -np.inf)
            a = np.exp(s - s.max(1, keepdims=True))
            a /= a.sum(1, keepdims=True)
            out[w, :, sl] = a @ v[w, :, sl]
    return out


class TestConfig:
    def test_split_and_hidden(self):
        cfg = BlockConfig(48)
        assert (cfg.c_chan, cfg.c_spat, cfg.hidden) == (24, 24, int(48 * 2.66))

    @pytest.mark.parametrize("kw", [dict(channels=3), dict(channels=8, shift=16), dict(channels=8, channel_split=1.5)])
    def test_rejects_invalid(self, kw):
        with pytest.raises(ValueError):
            BlockConfig(**kw)

    def test_param_shapes(self):
        shapes = swda.block_param_shapes(BlockConfig(8, window_size=4))
        assert shapes["qkv.weight"] == (8, 24)
        assert shapes["qkv_dw.weight"] == (3, 3, 24)
        assert shapes["rel_bias"] == (49, 1)
        assert shapes["ffn.in.weight"] == (8, 2 * 21)


class TestAttention:
    def test_channel_attention_matches_loops(self, rng):
        q, k, v = (rng.standard_normal((3, 16, 4)) for _ in range(3))
        temp = np.array([0.7, 1.3])
        got = swda.channel_attention(Tensor(q), Tensor(k), Tensor(v), Tensor(temp)).data
        np.testing.assert_allclose(got, channel_attention_loops(q, k, v, temp), rtol=1e-12, atol=1e-13)

    def test_spatial_attention_matches_loops(self, rng):
        layout = make_window_layout(8, 8, 4, 2)
        q, k, v = (rng.standard_normal((4, 16, 4)) for _ in range(3))
        table = Tensor(rng.standard_normal((49, 2)) * 0.1)
        bias = swda.gather_bias(table, 4)
        got = swda.spatial_attention(Tensor(q), Tensor(k), Tensor(v), bias, layout.mask()).data
        ref = spatial_attention_loops(q, k, v, bias.data, layout.mask())
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-13)

    def test_attention_maps_are_row_stochastic(self, rng):
        q, k, v = (Tensor(rng.standard_normal((2, 16, 8))) for _ in range(3))
        _, a = swda.channel_attention(q, k, v, Tensor(np.ones(2)), return_attn=True)
        np.testing.assert_allclose(a.data.sum(-1), 1.0, atol=1e-12)
        bias = swda.gather_bias(Tensor(np.zeros((49, 2))), 4)
        _, a = swda.spatial_attention(q, k, v, bias, return_attn=True)
        np.testing.assert_allclose(a.data.sum(-1), 1.0, atol=1e-12)


class TestBlock:
    @pytest.fixture
    def block(self, rng):
        cfg = BlockConfig(8, window_size=4, shift=2)
        params = swda.init_block_params(cfg, rng)
        for p in params.values():
            p.data = p.data + rng.uniform(-0.2, 0.2, p.shape)
        return cfg, params

    def test_shape_preserved(self, rng, block):
        cfg, params = block
        x = Tensor(rng.standard_normal((2, 7, 9, 8)))
        assert swda.swda_block(x, params, cfg).shape == (2, 7, 9, 8)

    def test_batch_invariance(self, rng, block):
        cfg, params = block
        x = rng.standard_normal((4, 8, 8, 8))
        whole = swda.swda_block(Tensor(x), params, cfg).data
        for i in range(4):
            one = swda.swda_block(Tensor(x[i]), params, cfg).data
            np.testing.assert_allclose(whole[i], one, rtol=0, atol=1e-10)

    def test_chunked_inference_matches_graph(self, rng, block, monkeypatch):
        cfg, params = block
        x = Tensor(rng.standard_normal((2, 8, 8, 8)))
        ref = swda.swda_block(x, params, cfg).data
        monkeypatch.setattr(swda, "_CHUNK_ELEMS", 1)
        with T.no_grad():
            chunked = swda.swda_block(x, params, cfg).data
        np.testing.assert_allclose(chunked, ref, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("split", [0.0, 1.0])
    def test_single_path_blocks(self, rng, split):
        cfg = BlockConfig(4, window_size=4, shift=2, channel_split=split)
        params = swda.init_block_params(cfg, rng)
        for p in params.values():
            p.data = p.data + rng.uniform(-0.3, 0.3, p.shape)
        assert ("temperature" in params) == (split > 0)
        assert ("rel_bias" in params) == (split < 1)
        x = Tensor(rng.standard_normal((6, 6, 4)), requires_grad=True)
        r = Tensor(rng.standard_normal((6, 6, 4)))
        rep = T.gradcheck(lambda: T.sum_(T.mul(swda.swda_block(x, params, cfg), r)), {"x": x, **params}, tol=1e-5)
        assert rep.passed, str(rep)
