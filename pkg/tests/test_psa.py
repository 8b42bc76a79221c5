import numpy as np
import pytest

import oracles
from modfuse import autodiff as ad
from modfuse import nn
from modfuse.errors import ConfigError
from modfuse.psa import PsaLayer, PsaStack, Wal


def make_store(seed=0):
    return nn.ParamStore(np.random.default_rng(seed), dtype=np.float64)


def layer_oracle_params(layer):
    p = {
        "ln1_g": layer.ln1.g.data, "ln1_b": layer.ln1.b.data,
        "WQ": layer.attn.wq.W.data, "WK": layer.attn.wk.W.data,
        "WV": layer.attn.wv.W.data, "WO": layer.attn.wo.W.data,
        "ln2_g": layer.ln2.g.data, "ln2_b": layer.ln2.b.data,
        "f_W1": layer.ffn.w1.W.data, "f_b1": layer.ffn.w1.b.data,
        "f_W2": layer.ffn.w2.W.data, "f_b2": layer.ffn.w2.b.data,
    }
    if layer.predictor is not None:
        p["conv_w"] = layer.predictor.w.data
        p["conv_b"] = layer.predictor.b.data
    return p


class TestPsaLayer:
    def _build(self, seed, d=8, heads=2, with_chain=True):
        s = make_store(seed)
        layer = PsaLayer(s, "p", d, heads, with_chain=with_chain, ffn_mult=2)
        return s, layer

    def test_first_layer_matches_oracle(self):
        s, layer = self._build(1)
        rng = np.random.default_rng(2)
        T = 4
        mask = np.array([[1, 1, 1, 0]], dtype=float)
        Z = rng.standard_normal((1, T, 8)) * mask[:, :, None]
        out, logits = layer(ad.Tensor(Z), mask, None, mu=0.25)
        expect, e_logits = oracles.psa_layer(Z[0], mask[0], layer_oracle_params(layer),
                                             None, 0.25, heads=2)
        np.testing.assert_allclose(out.data[0], expect, atol=1e-10)
        np.testing.assert_allclose(logits.data[0], e_logits, atol=1e-10)

    @pytest.mark.parametrize("trial", range(100))
    def test_chained_layer_matches_literal_oracle(self, trial):
        # randomized tiny instances against the straight-line reference
        s, layer = self._build(100 + trial)
        rng = np.random.default_rng(200 + trial)
        T = int(rng.integers(2, 5))
        mu = float(rng.uniform(0.05, 1.0))
        mask = np.ones((1, T))
        if T > 2:
            mask[0, T - 1] = 0.0
        Z = rng.standard_normal((1, T, 8)) * mask[:, :, None]
        A_prev = rng.standard_normal((1, 2, T, T))
        out, _ = layer(ad.Tensor(Z), mask, ad.Tensor(A_prev), mu=mu)
        expect, _ = oracles.psa_layer(Z[0], mask[0], layer_oracle_params(layer),
                                      A_prev[0], mu, heads=2)
        np.testing.assert_allclose(out.data[0], expect, atol=1e-9)

    def test_mu_zero_equals_first_layer_path(self):
        s, layer = self._build(3)
        rng = np.random.default_rng(4)
        mask = np.ones((1, 4))
        Z = rng.standard_normal((1, 4, 8))
        A_prev = rng.standard_normal((1, 2, 4, 4))
        with_chain, _ = layer(ad.Tensor(Z), mask, ad.Tensor(A_prev), mu=0.0)
        without, _ = layer(ad.Tensor(Z), mask, None, mu=0.0)
        np.testing.assert_allclose(with_chain.data, without.data, atol=1e-12)

    def test_single_timestep_attends_to_itself(self):
        s, layer = self._build(5)
        rng = np.random.default_rng(6)
        Z = rng.standard_normal((1, 1, 8))
        mask = np.ones((1, 1))
        Zn = oracles.layer_norm(Z[0], layer.ln1.g.data, layer.ln1.b.data)
        out, logits = layer(ad.Tensor(Z), mask, None, mu=0.25)
        # weight 1 on the lone key: context is just V(W_O)
        ctx = oracles.merge_heads(oracles.split_heads(Zn @ layer.attn.wv.W.data, 2))
        ctx = ctx @ layer.attn.wo.W.data
        ze = Zn + ctx
        zen = oracles.layer_norm(ze, layer.ln2.g.data, layer.ln2.b.data)
        expect = oracles.ffn(zen, layer.ffn.w1.W.data, layer.ffn.w1.b.data,
                             layer.ffn.w2.W.data, layer.ffn.w2.b.data) + ze
        np.testing.assert_allclose(out.data[0], expect, atol=1e-10)

    def test_attention_rows_and_masking(self):
        s, layer = self._build(7)
        rng = np.random.default_rng(8)
        mask = np.array([[1, 1, 0, 1, 0]], dtype=float)
        Z = rng.standard_normal((1, 5, 8)) * mask[:, :, None]
        A_prev = rng.standard_normal((1, 2, 5, 5))
        Zn = layer.ln1(ad.Tensor(Z))
        A_cur = layer.attn.logits(Zn, Zn)
        pred = ad.gelu(layer.predictor(ad.Tensor(A_prev)))
        mixed = ad.add(ad.scale(pred, 0.3), ad.scale(
            ad.masked_softmax(A_cur, nn.key_mask(mask)), 0.7))
        A = ad.masked_softmax(mixed, nn.key_mask(mask)).data
        assert (A[0, :, :, 2] == 0.0).all() and (A[0, :, :, 4] == 0.0).all()
        np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-10)

    def test_gradcheck_through_layer(self):
        s, layer = self._build(9, d=4, heads=2)
        mask = np.array([[1, 1, 1, 0]], dtype=float)
        Z = ad.Tensor(np.random.default_rng(10).standard_normal((1, 4, 4))
                      * mask[:, :, None])
        A_prev = ad.Tensor(np.random.default_rng(11).standard_normal((1, 2, 4, 4)))

        def fn(z, a):
            out, _ = layer(z, mask, a, mu=0.4)
            return ad.tmean(out)

        assert ad.grad_check(fn, [Z, A_prev]) < 1e-4


class TestWal:
    def _build(self, seed=0):
        s = make_store(seed)
        flat = {"L": 8, "V": 12, "A": 6}
        return s, Wal(s, "w", flat)

    def _z(self, rng):
        return {"L": ad.Tensor(rng.standard_normal((2, 4, 2))),
                "V": ad.Tensor(rng.standard_normal((2, 6, 2))),
                "A": ad.Tensor(rng.standard_normal((2, 3, 2)))}

    def test_matches_oracle(self):
        s, wal = self._build(1)
        z = self._z(np.random.default_rng(2))
        psi, out = wal(z)
        for i in range(2):
            z_list = [z[m].data[i] for m in ("L", "V", "A")]
            params = [{"W": wal.params[m]["W"].data, "b": wal.params[m]["b"].data,
                       "P": wal.params[m]["P"].data[:, 0]} for m in ("L", "V", "A")]
            e_psi, e_out = oracles.wal(z_list, params)
            np.testing.assert_allclose(psi.data[i], e_psi, atol=1e-10)
            for j, m in enumerate(("L", "V", "A")):
                np.testing.assert_allclose(out[m].data[i], e_out[j], atol=1e-10)

    def test_weights_sum_to_one_and_positive(self):
        for seed in range(100):
            s, wal = self._build(seed)
            psi, _ = wal(self._z(np.random.default_rng(1000 + seed)))
            assert (psi.data > 0).all()
            np.testing.assert_allclose(psi.data.sum(axis=1), 1.0, atol=1e-12)

    def test_equal_gammas_give_uniform(self):
        s = make_store(3)
        flat = {"L": 4, "V": 4, "A": 4}
        wal = Wal(s, "w", flat)
        # identical parameters and identical inputs for all three branches
        for m in ("V", "A"):
            for k in ("W", "b", "P"):
                wal.params[m][k].data = wal.params["L"][k].data.copy()
        x = np.random.default_rng(4).standard_normal((1, 2, 2))
        psi, _ = wal({"L": ad.Tensor(x.copy()), "V": ad.Tensor(x.copy()),
                      "A": ad.Tensor(x.copy())})
        np.testing.assert_allclose(psi.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-12)

    def test_gamma_123_matches_exp_normalize(self):
        np.testing.assert_allclose(oracles.softmax_vec([1.0, 2.0, 3.0]),
                                   np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum(),
                                   atol=1e-12)

    def test_gradcheck(self):
        s, wal = self._build(5)
        z = self._z(np.random.default_rng(6))

        def fn(a, b, c):
            _, out = wal({"L": a, "V": b, "A": c})
            return ad.tmean(ad.concat([ad.reshape(out[m], (2, -1))
                                       for m in ("L", "V", "A")], axis=1))

        assert ad.grad_check(fn, [z["L"], z["V"], z["A"]]) < 1e-4


class TestPsaStack:
    def _masks(self):
        return {"L": np.array([[1, 1, 1, 0]], dtype=float),
                "V": np.array([[1, 1, 1, 1, 1]], dtype=float),
                "A": np.array([[1, 1, 0]], dtype=float)}

    def _z(self, rng, masks, d=8):
        return {m: ad.Tensor(rng.standard_normal((1, mk.shape[1], d)) * mk[:, :, None])
                for m, mk in masks.items()}

    def _maxima(self, masks):
        return {m: mk.shape[1] for m, mk in masks.items()}

    def test_output_shapes(self):
        s = make_store(1)
        masks = self._masks()
        stack = PsaStack(s, 8, 2, 3, self._maxima(masks), mu=0.25, ffn_mult=2)
        out = stack(self._z(np.random.default_rng(2), masks), masks)
        assert out["L"].shape == (1, 4, 8)
        assert out["V"].shape == (1, 5, 8)
        assert out["A"].shape == (1, 3, 8)

    def test_single_layer_has_no_chain(self):
        s = make_store(3)
        masks = self._masks()
        stack = PsaStack(s, 8, 2, 1, self._maxima(masks), mu=0.5, ffn_mult=2)
        assert all(stack.layers[m][0].predictor is None for m in ("L", "V", "A"))

    def test_mu_zero_equals_chainless_stack(self):
        masks = self._masks()
        maxima = self._maxima(masks)
        a = PsaStack(make_store(4), 8, 2, 2, maxima, mu=0.0, ffn_mult=2)
        b = PsaStack(make_store(99), 8, 2, 2, maxima, mu=0.0, use_chain=False,
                     ffn_mult=2)
        # align every shared parameter by name, then compare outputs
        for m in ("L", "V", "A"):
            for la, lb in zip(a.layers[m], b.layers[m]):
                pa, pb = layer_oracle_params(la), layer_oracle_params(lb)
                for k in pb:
                    pb[k][...] = pa[k]
        for wa, wb in zip(a.wals, b.wals):
            for m in ("L", "V", "A"):
                for k in ("W", "b", "P"):
                    wb.params[m][k].data[...] = wa.params[m][k].data
        z = self._z(np.random.default_rng(5), masks)
        out_a = a({m: ad.Tensor(z[m].data.copy()) for m in z}, masks)
        out_b = b({m: ad.Tensor(z[m].data.copy()) for m in z}, masks)
        for m in ("L", "V", "A"):
            np.testing.assert_allclose(out_a[m].data, out_b[m].data, atol=1e-10)

    def test_two_layer_chain_matches_composed_oracle(self):
        s = make_store(6)
        masks = self._masks()
        stack = PsaStack(s, 8, 2, 2, self._maxima(masks), mu=0.3, use_wal=False,
                         ffn_mult=2)
        rng = np.random.default_rng(7)
        z = self._z(rng, masks)
        out = stack(z, masks)
        for m in ("L", "V", "A"):
            z1, logits1 = oracles.psa_layer(z[m].data[0], masks[m][0],
                                            layer_oracle_params(stack.layers[m][0]),
                                            None, 0.3, heads=2)
            z2, _ = oracles.psa_layer(z1, masks[m][0],
                                      layer_oracle_params(stack.layers[m][1]),
                                      logits1, 0.3, heads=2)
            np.testing.assert_allclose(out[m].data[0], z2, atol=1e-9)

    def test_gradcheck_two_layer_stack(self):
        s = make_store(8)
        masks = {"L": np.array([[1, 1, 1]], dtype=float),
                 "V": np.array([[1, 1]], dtype=float),
                 "A": np.array([[1, 1]], dtype=float)}
        stack = PsaStack(s, 4, 2, 2, self._maxima(masks), mu=0.4, ffn_mult=2)
        rng = np.random.default_rng(9)
        z = self._z(rng, masks, d=4)

        def fn(a, b, c):
            out = stack({"L": a, "V": b, "A": c}, masks)
            return ad.tmean(out["L"])

        assert ad.grad_check(fn, [z["L"], z["V"], z["A"]]) < 1e-4

    def test_invalid_config_rejected(self):
        s = make_store(10)
        maxima = {"L": 4, "V": 4, "A": 4}
        with pytest.raises(ConfigError):
            PsaStack(s, 8, 3, 2, maxima, mu=0.25)
        with pytest.raises(ConfigError):
            PsaStack(make_store(11), 8, 2, 0, maxima, mu=0.25)
        with pytest.raises(ConfigError):
            PsaStack(make_store(12), 8, 2, 2, maxima, mu=1.5)
