import numpy as np
import pytest

import oracles
from modfuse import autodiff as ad
from modfuse import nn
from modfuse.errors import ConfigError
from modfuse.hca import HcaStack, HcaTarget, Mru


def make_store(seed=0):
    return nn.ParamStore(np.random.default_rng(seed), dtype=np.float64)


def mru_oracle_params(unit):
    return {
        "lnt_g": unit.ln_t.g.data, "lnt_b": unit.ln_t.b.data,
        "lns_g": unit.ln_s.g.data, "lns_b": unit.ln_s.b.data,
        "WQ": unit.attn.wq.W.data, "WK": unit.attn.wk.W.data,
        "WV": unit.attn.wv.W.data, "WO": unit.attn.wo.W.data,
        "ln2_g": unit.ln2.g.data, "ln2_b": unit.ln2.b.data,
        "f_W1": unit.ffn.w1.W.data, "f_b1": unit.ffn.w1.b.data,
        "f_W2": unit.ffn.w2.W.data, "f_b2": unit.ffn.w2.b.data,
    }


class TestMru:
    @pytest.mark.parametrize("trial", range(100))
    def test_matches_literal_oracle(self, trial):
        s = make_store(trial)
        unit = Mru(s, "m", 6, 2, ffn_mult=2)
        rng = np.random.default_rng(1000 + trial)
        T_s, T_t = int(rng.integers(2, 5)), int(rng.integers(1, 4))
        mask_s = np.ones((1, T_s))
        if T_s > 2:
            mask_s[0, -1] = 0.0
        mask_t = np.ones((1, T_t))
        Z_s = rng.standard_normal((1, T_s, 6)) * mask_s[:, :, None]
        Z_t = rng.standard_normal((1, T_t, 6))
        out, _ = unit(ad.Tensor(Z_s), mask_s, ad.Tensor(Z_t), mask_t)
        expect = oracles.mru(Z_s[0], mask_s[0], Z_t[0], mask_t[0],
                             mru_oracle_params(unit), heads=2)
        np.testing.assert_allclose(out.data[0], expect, atol=1e-9)

    def test_output_length_is_targets(self):
        s = make_store(1)
        unit = Mru(s, "m", 6, 2)
        rng = np.random.default_rng(2)
        out, _ = unit(ad.Tensor(rng.standard_normal((2, 9, 6))), np.ones((2, 9)),
                      ad.Tensor(rng.standard_normal((2, 4, 6))), np.ones((2, 4)))
        assert out.shape == (2, 4, 6)

    def test_singleton_source_rows_identical(self):
        # with one source element every target row sees the same context
        s = make_store(3)
        unit = Mru(s, "m", 6, 2, ffn_mult=2)
        rng = np.random.default_rng(4)
        Z_s = rng.standard_normal((1, 1, 6))
        Z_t = rng.standard_normal((1, 3, 6))
        Zs_n = oracles.layer_norm(Z_s[0], unit.ln_s.g.data, unit.ln_s.b.data)
        logits = unit.attn.logits(unit.ln_t(ad.Tensor(Z_t)), unit.ln_s(ad.Tensor(Z_s)))
        A = ad.masked_softmax(logits, nn.key_mask(np.ones((1, 1)))).data
        np.testing.assert_allclose(A, 1.0, atol=1e-12)
        ctx = unit.attn.context(ad.Tensor(np.ones_like(A)), unit.ln_s(ad.Tensor(Z_s))).data
        expect_row = oracles.merge_heads(oracles.split_heads(
            Zs_n @ unit.attn.wv.W.data, 2)) @ unit.attn.wo.W.data
        for r in range(3):
            np.testing.assert_allclose(ctx[0, r], expect_row[0], atol=1e-10)

    def test_attention_rows_sum_to_one_with_concat_mask(self):
        s = make_store(5)
        unit = Mru(s, "m", 6, 2)
        rng = np.random.default_rng(6)
        mask_s = np.array([[1, 1, 0, 1, 0, 1]], dtype=float)
        Z_s = rng.standard_normal((1, 6, 6)) * mask_s[:, :, None]
        Z_t = rng.standard_normal((1, 2, 6))
        _, A = unit(ad.Tensor(Z_s), mask_s, ad.Tensor(Z_t), np.ones((1, 2)))
        assert (A.data[:, :, :, mask_s[0] == 0] == 0.0).all()
        np.testing.assert_allclose(A.data.sum(axis=-1), 1.0, atol=1e-10)

    def test_gradcheck(self):
        s = make_store(7)
        unit = Mru(s, "m", 4, 2, ffn_mult=2)
        rng = np.random.default_rng(8)
        mask_s = np.array([[1, 1, 1]], dtype=float)
        mask_t = np.array([[1, 1]], dtype=float)
        Z_s = ad.Tensor(rng.standard_normal((1, 3, 4)))
        Z_t = ad.Tensor(rng.standard_normal((1, 2, 4)))

        def fn(zs, zt):
            out, _ = unit(zs, mask_s, zt, mask_t)
            return ad.tmean(out)

        assert ad.grad_check(fn, [Z_s, Z_t]) < 1e-4


def _tiny_inputs(rng, d=6):
    masks = {"L": np.array([[1, 1, 1]], dtype=float),
             "V": np.array([[1, 1, 1, 1]], dtype=float),
             "A": np.array([[1, 1]], dtype=float)}
    z = {m: rng.standard_normal((1, mk.shape[1], d)) * mk[:, :, None]
         for m, mk in masks.items()}
    return z, masks


class TestHcaTarget:
    def _params4(self, tgt):
        return [mru_oracle_params(tgt.mixed), mru_oracle_params(tgt.coarse),
                mru_oracle_params(tgt.fine[0]), mru_oracle_params(tgt.fine[1])]

    @pytest.mark.parametrize("target", ["L", "V", "A"])
    def test_matches_composed_oracle(self, target):
        s = make_store(11)
        tgt = HcaTarget(s, "h", 6, 2, ffn_mult=2)
        z, masks = _tiny_inputs(np.random.default_rng(12))
        out = tgt(target, {m: ad.Tensor(v) for m, v in z.items()}, masks)
        expect = oracles.hca_target({m: v[0] for m, v in z.items()},
                                    {m: v[0] for m, v in masks.items()},
                                    target, self._params4(tgt), heads=2)
        np.testing.assert_allclose(out.data[0], expect, atol=1e-9)
        assert out.shape == (1, masks[target].shape[1], 6)

    @pytest.mark.parametrize("trial", range(20))
    def test_random_trials_match_oracle(self, trial):
        s = make_store(300 + trial)
        tgt = HcaTarget(s, "h", 6, 2, ffn_mult=2)
        rng = np.random.default_rng(400 + trial)
        z, masks = _tiny_inputs(rng)
        target = ["L", "V", "A"][trial % 3]
        out = tgt(target, {m: ad.Tensor(v) for m, v in z.items()}, masks)
        expect = oracles.hca_target({m: v[0] for m, v in z.items()},
                                    {m: v[0] for m, v in masks.items()},
                                    target, self._params4(tgt), heads=2)
        np.testing.assert_allclose(out.data[0], expect, atol=1e-9)

    def test_identical_singleton_others_double_one_fine_term(self):
        s = make_store(13)
        tgt = HcaTarget(s, "h", 6, 2, ffn_mult=2)
        # make the two fine units share parameters
        for k, v in mru_oracle_params(tgt.fine[0]).items():
            mru_oracle_params(tgt.fine[1])[k][...] = v
        rng = np.random.default_rng(14)
        one = rng.standard_normal((1, 1, 6))
        z = {"L": ad.Tensor(rng.standard_normal((1, 2, 6))),
             "V": ad.Tensor(one.copy()), "A": ad.Tensor(one.copy())}
        masks = {"L": np.ones((1, 2)), "V": np.ones((1, 1)), "A": np.ones((1, 1))}
        full = tgt("L", z, masks)
        half = tgt("L", z, masks, stages=("mixed", "coarse"))
        single, _ = tgt.fine[0](z["V"], masks["V"], half, masks["L"])
        np.testing.assert_allclose(full.data, 2.0 * single.data, atol=1e-10)

    def test_each_granularity_matters(self):
        s = make_store(15)
        tgt = HcaTarget(s, "h", 6, 2, ffn_mult=2)
        z, masks = _tiny_inputs(np.random.default_rng(16))
        zt = {m: ad.Tensor(v) for m, v in z.items()}
        full = tgt("L", zt, masks).data
        for dropped in ("mixed", "coarse", "fine"):
            stages = tuple(st for st in ("mixed", "coarse", "fine") if st != dropped)
            reduced = tgt("L", zt, masks, stages=stages).data
            assert np.abs(full - reduced).max() > 1e-8


class TestHcaStack:
    def test_single_layer_equals_target_pass(self):
        s = make_store(21)
        stack = HcaStack(s, 6, 2, 1, ffn_mult=2)
        z, masks = _tiny_inputs(np.random.default_rng(22))
        zt = {m: ad.Tensor(v) for m, v in z.items()}
        out = stack(zt, masks)
        for m in ("L", "V", "A"):
            direct = stack.layers[0][m](m, zt, masks)
            np.testing.assert_array_equal(out[m].data, direct.data)

    def test_two_layers_compose(self):
        s = make_store(23)
        stack = HcaStack(s, 6, 2, 2, ffn_mult=2)
        z, masks = _tiny_inputs(np.random.default_rng(24))
        zt = {m: ad.Tensor(v) for m, v in z.items()}
        out = stack(zt, masks)
        mid = {m: stack.layers[0][m](m, zt, masks) for m in ("L", "V", "A")}
        for m in ("L", "V", "A"):
            expect = stack.layers[1][m](m, mid, masks)
            np.testing.assert_allclose(out[m].data, expect.data, atol=1e-12)
            assert out[m].shape == zt[m].shape

    def test_gradcheck_through_two_layers(self):
        s = make_store(25)
        stack = HcaStack(s, 4, 2, 2, ffn_mult=2)
        rng = np.random.default_rng(26)
        masks = {"L": np.ones((1, 2)), "V": np.ones((1, 2)), "A": np.ones((1, 2))}
        z = {m: ad.Tensor(rng.standard_normal((1, 2, 4))) for m in ("L", "V", "A")}

        def fn(a, b, c):
            out = stack({"L": a, "V": b, "A": c}, masks)
            return ad.tmean(out["A"])

        assert ad.grad_check(fn, [z["L"], z["V"], z["A"]]) < 1e-4

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigError):
            HcaStack(make_store(27), 6, 2, 0)
        with pytest.raises(ConfigError):
            HcaStack(make_store(28), 6, 4, 1)
