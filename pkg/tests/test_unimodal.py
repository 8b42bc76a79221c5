import numpy as np
import pytest

import oracles
from modfuse import autodiff as ad
from modfuse import nn
from modfuse.errors import ConfigError, ShapeError
from modfuse.unimodal import Lstm, UnimodalExtractor


def make_store(seed=0):
    return nn.ParamStore(np.random.default_rng(seed), dtype=np.float64)


def lstm_oracle_params(cell):
    return (cell.wx.data, cell.wh.data, cell.b.data)


class TestLstm:
    def test_forward_matches_oracle(self):
        s = make_store(1)
        cell = Lstm(s, "c", 3, 4)
        x = np.random.default_rng(2).standard_normal((2, 6, 3))
        out = cell(ad.Tensor(x)).data
        for i in range(2):
            expect = oracles.lstm_direction(x[i], *lstm_oracle_params(cell))
            np.testing.assert_allclose(out[i], expect, atol=1e-10)

    def test_reverse_matches_oracle(self):
        s = make_store(3)
        cell = Lstm(s, "c", 3, 4)
        x = np.random.default_rng(4).standard_normal((1, 5, 3))
        out = cell(ad.Tensor(x), reverse=True).data
        expect = oracles.lstm_direction(x[0], *lstm_oracle_params(cell), reverse=True)
        np.testing.assert_allclose(out[0], expect, atol=1e-10)

    def test_gradcheck(self):
        s = make_store(5)
        cell = Lstm(s, "c", 2, 3)
        x = ad.Tensor(np.random.default_rng(6).standard_normal((1, 4, 2)))
        err = ad.grad_check(lambda t, _w: ad.tmean(cell(t)), [x, cell.wh])
        assert err < 1e-4


class TestExtractor:
    def _build(self, seed=0, d_in=4, d=6, kernel=3, max_T=8):
        s = make_store(seed)
        ext = UnimodalExtractor(s, "u", d_in, d, kernel, max_T)
        return s, ext

    def _oracle(self, ext, x, mask):
        return oracles.extract_unimodal(
            x, mask, ext.conv.w.data, ext.conv.b.data,
            lstm_oracle_params(ext.fwd), lstm_oracle_params(ext.bwd))

    def test_matches_oracle(self):
        s, ext = self._build(7)
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 7, 4))
        mask = np.array([[1, 1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1, 1]], dtype=float)
        x *= mask[:, :, None]
        out = ext(ad.Tensor(x), mask).data
        for i in range(2):
            np.testing.assert_allclose(out[i], self._oracle(ext, x[i], mask[i]), atol=1e-9)

    def test_output_shape(self):
        s, ext = self._build(d_in=5, d=8, max_T=10)
        x = np.zeros((3, 10, 5))
        mask = np.ones((3, 10))
        assert ext(ad.Tensor(x), mask).shape == (3, 10, 8)

    def test_masked_steps_exactly_zero(self):
        s, ext = self._build(9)
        rng = np.random.default_rng(10)
        mask = np.array([[1, 1, 1, 0, 0, 0, 0]], dtype=float)
        x = rng.standard_normal((1, 7, 4)) * mask[:, :, None]
        out = ext(ad.Tensor(x), mask).data
        assert (out[0, 3:] == 0.0).all()

    def test_zero_input_positions_only(self):
        # all-zero input: conv contributes only its (zero) bias, so the LSTM
        # sees just the positional table
        s, ext = self._build(11)
        mask = np.ones((1, 6))
        out = ext(ad.Tensor(np.zeros((1, 6, 4))), mask).data
        pos = oracles.sinusoid_table(6, 6)
        expect = oracles.bilstm(pos, lstm_oracle_params(ext.fwd),
                                lstm_oracle_params(ext.bwd))
        np.testing.assert_allclose(out[0], expect, atol=1e-9)

    def test_gradcheck_through_extractor(self):
        s, ext = self._build(12, d_in=3, d=4, max_T=5)
        mask = np.array([[1, 1, 1, 1, 0]], dtype=float)
        x = ad.Tensor(np.random.default_rng(13).standard_normal((1, 5, 3))
                      * mask[:, :, None])
        err = ad.grad_check(lambda t, _w: ad.tmean(ext(t, mask)), [x, ext.conv.w])
        assert err < 1e-4

    def test_wrong_width_rejected(self):
        s, ext = self._build()
        with pytest.raises(ShapeError):
            ext(ad.Tensor(np.zeros((1, 5, 9))), np.ones((1, 5)))

    def test_odd_d_rejected(self):
        s = make_store()
        with pytest.raises(ConfigError):
            UnimodalExtractor(s, "u", 4, 7, 3, 8)
