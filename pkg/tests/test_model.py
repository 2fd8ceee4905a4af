import math
from datetime import datetime, timedelta

import numpy as np
import pytest

from randwin import data as D
from randwin import model as M
from randwin import numkernel as nk
from randwin.train import nll_and_grad


def toy_config(**kw):
    base = dict(n_instances=3, n_heads=2, d_k=4, d_v=4, ff_dim=6, embed_dim=3, n_blocks=2, dropout=0.0)
    base.update(kw)
    return M.ModelConfig(**base)


def perturbed_params(cfg, seed, scale=0.1):
    rng = np.random.default_rng(seed)
    params = M.init_params(cfg, rng)
    return {k: v + scale * rng.normal(size=v.shape) for k, v in params.items()}


class TestConfig:
    def test_rejects_zero_dims(self):
        with pytest.raises(ValueError, match="d_k"):
            M.ModelConfig(d_k=0)

    @pytest.mark.parametrize("rate", [-0.1, 1.0])
    def test_rejects_bad_dropout(self, rate):
        with pytest.raises(ValueError):
            M.ModelConfig(dropout=rate)

    def test_round_trip_and_unknown_keys(self):
        cfg = toy_config()
        assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError, match="bogus"):
            M.ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})

    def test_input_dim(self):
        assert M.ModelConfig(n_covariates=2, embed_dim=5).input_dim == 8


class TestNumParams:
    def test_embedding_only(self):
        assert M.param_shapes(M.ModelConfig(n_instances=10, embed_dim=5))["embedding"] == (10, 5)
        assert math.prod(M.param_shapes(M.ModelConfig(n_instances=10, embed_dim=5))["embedding"]) == 50

    def test_first_block_qkv(self):
        cfg = M.ModelConfig(n_heads=8, d_k=10, d_v=10, n_covariates=2, embed_dim=5)
        shapes = M.param_shapes(cfg)
        assert sum(math.prod(shapes[f"b0.{w}"]) for w in ("Wq", "Wk", "Wv")) == 1920

    def test_doubling_blocks(self):
        one = M.ModelConfig(n_blocks=1, use_residual_layernorm=False)
        two = M.ModelConfig(n_blocks=2, use_residual_layernorm=False)
        four = M.ModelConfig(n_blocks=4, use_residual_layernorm=False)
        fixed = M.num_params(one) - sum(math.prod(s) for n, s in M.param_shapes(one).items() if n.startswith("b0."))
        later = sum(math.prod(s) for n, s in M.param_shapes(two).items() if n.startswith("b1."))
        assert M.num_params(four) - M.num_params(two) == 2 * later
        # hand count of one later block: QKV 3*8*80*10 + Wo 80*80 + bo 80 + FF 80*40+40+40*80+80
        assert later == 3 * 8 * 80 * 10 + 80 * 80 + 80 + 80 * 40 + 40 + 40 * 80 + 80
        assert M.num_params(one) == fixed + sum(math.prod(s) for n, s in M.param_shapes(one).items()
                                                if n.startswith("b0."))

    def test_count_matches_init(self):
        cfg = toy_config()
        params = M.init_params(cfg, np.random.default_rng(0))
        assert M.num_params(cfg) == sum(v.size for v in params.values())


class TestInit:
    def test_init_conventions(self):
        cfg = toy_config()
        p = M.init_params(cfg, np.random.default_rng(0))
        assert not p["embedding"].any() and not p["b0.bo"].any() and not p["head.b"].any()
        assert np.all(p["b1.ln2_g"] == 1.0)
        a = math.sqrt(6.0 / (cfg.width + cfg.ff_dim))
        assert np.abs(p["b0.W1"]).max() <= a
        assert all(np.all(np.isfinite(v)) for v in p.values())

    def test_seeded(self):
        cfg = toy_config()
        p1 = M.init_params(cfg, np.random.default_rng(5))
        p2 = M.init_params(cfg, np.random.default_rng(5))
        assert all(np.array_equal(p1[k], p2[k]) for k in p1)


class TestEmbedInstance:
    def test_zero_init(self):
        p = M.init_params(toy_config(), np.random.default_rng(0))
        np.testing.assert_array_equal(M.embed_instance(p, 0), np.zeros(3))

    def test_deterministic(self):
        p = perturbed_params(toy_config(), 0)
        np.testing.assert_array_equal(M.embed_instance(p, 1), M.embed_instance(p, 1))

    @pytest.mark.parametrize("i", [-1, 3])
    def test_out_of_range(self, i):
        with pytest.raises(IndexError):
            M.embed_instance(M.init_params(toy_config(), np.random.default_rng(0)), i)

    def test_adam_touches_only_row_with_gradient(self):
        cfg = toy_config(n_instances=4)
        p = M.init_params(cfg, np.random.default_rng(0))
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["embedding"][2] = [0.3, -1.0, 2.0]
        new, _ = nk.adam_step(p, grads, nk.AdamState(), lr=0.01)
        changed = np.any(new["embedding"] != p["embedding"], axis=1)
        assert changed.tolist() == [False, False, True, False]

    def test_gradient_lands_on_used_rows(self):
        cfg = toy_config(n_instances=4)
        p = perturbed_params(cfg, 1)
        X = np.random.default_rng(1).normal(size=(2, 5, 3))
        mu, sigma, cache = M.forward(p, cfg, X, [1, 3])
        g = M.backward(p, cfg, cache, np.ones_like(mu), np.zeros_like(sigma))
        assert not g["embedding"][[0, 2]].any()
        assert g["embedding"][[1, 3]].any()


class TestAttentionHead:
    def test_single_step_returns_value_row(self):
        rng = np.random.default_rng(0)
        Y = rng.normal(size=(1, 4))
        Wq, Wk, Wv = rng.normal(size=(3, 4, 2))
        np.testing.assert_allclose(M.attention_head(Y, Wq, Wk, Wv, nk.CausalMask(1)), Y @ Wv, rtol=1e-14)

    def test_zero_query_gives_running_mean(self):
        rng = np.random.default_rng(1)
        Y = rng.normal(size=(3, 4))
        Wk, Wv = rng.normal(size=(2, 4, 2))
        O = M.attention_head(Y, np.zeros((4, 2)), Wk, Wv, nk.CausalMask(3))
        V = Y @ Wv
        expected = np.cumsum(V, axis=0) / np.arange(1, 4)[:, None]
        np.testing.assert_allclose(O, expected, rtol=1e-12)

    def test_zero_key_gives_running_mean(self):
        rng = np.random.default_rng(2)
        Y = rng.normal(size=(3, 4))
        Wq, Wv = rng.normal(size=(2, 4, 2))
        O = M.attention_head(Y, Wq, np.zeros((4, 2)), Wv, nk.CausalMask(3))
        V = Y @ Wv
        np.testing.assert_allclose(O[2], V.mean(axis=0), rtol=1e-12)

    @pytest.mark.parametrize("j", range(5))
    def test_causal(self, j):
        rng = np.random.default_rng(j)
        Y = rng.normal(size=(5, 4))
        Wq, Wk, Wv = rng.normal(size=(3, 4, 3))
        base = M.attention_head(Y, Wq, Wk, Wv, nk.CausalMask(5))
        Y2 = Y.copy()
        Y2[j] += 1e-3 * rng.normal(size=4)
        out = M.attention_head(Y2, Wq, Wk, Wv, nk.CausalMask(5))
        assert np.abs(out[:j] - base[:j]).max(initial=0.0) <= 1e-12
        assert np.abs(out[j:] - base[j:]).max() > 0

    def test_shape_mismatch(self):
        with pytest.raises(nk.ShapeError):
            M.attention_head(np.zeros((3, 4)), np.zeros((5, 2)), np.zeros((4, 2)), np.zeros((4, 2)))


class TestDecoderBlock:
    def test_zero_weights_without_norm(self):
        cfg = toy_config(use_residual_layernorm=False)
        p = M.zero_params(cfg)
        Y = np.random.default_rng(0).normal(size=(6, cfg.input_dim))
        np.testing.assert_array_equal(M.decoder_block(Y, p, 0, cfg, nk.CausalMask(6)), np.zeros((6, cfg.width)))

    def test_single_head_is_attention_then_feedforward(self):
        cfg = toy_config(n_heads=1, use_residual_layernorm=False)
        p = perturbed_params(cfg, 3)
        Y = np.random.default_rng(3).normal(size=(5, cfg.input_dim))
        mask = nk.CausalMask(5)
        O = M.attention_head(Y, p["b0.Wq"][0], p["b0.Wk"][0], p["b0.Wv"][0], mask)
        P = O @ p["b0.Wo"] + p["b0.bo"]
        expected = nk.feedforward(P, p["b0.W1"], p["b0.b1"], p["b0.W2"], p["b0.b2"])
        np.testing.assert_allclose(M.decoder_block(Y, p, 0, cfg, mask), expected, rtol=1e-12, atol=1e-14)

    def test_wrong_width(self):
        cfg = toy_config()
        with pytest.raises(nk.ShapeError, match="block 1"):
            M.decoder_block(np.zeros((4, cfg.input_dim)), perturbed_params(cfg, 0), 1, cfg)

    def test_dropout_only_in_training(self):
        cfg = toy_config(dropout=0.5)
        p = perturbed_params(cfg, 4)
        Y = np.random.default_rng(4).normal(size=(6, cfg.input_dim))
        a = M.decoder_block(Y, p, 0, cfg, nk.CausalMask(6))
        b = M.decoder_block(Y, p, 0, cfg, nk.CausalMask(6))
        c = M.decoder_block(Y, p, 0, cfg, nk.CausalMask(6), training=True, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


def _inputs(rng, B=2, N=8, D=2):
    return rng.normal(size=(B, N, 1 + D))


class TestForward:
    def test_zero_head(self):
        cfg = toy_config()
        p = perturbed_params(cfg, 0)
        p["head.W"][:] = 0.0
        p["head.b"][:] = 0.0
        mu, sigma, _ = M.forward(p, cfg, _inputs(np.random.default_rng(0)), [0, 1])
        np.testing.assert_array_equal(mu, 0.0)
        np.testing.assert_allclose(sigma, math.log(2.0) + 1e-6, rtol=1e-15)

    def test_eval_deterministic(self):
        cfg = toy_config(dropout=0.3)
        p = perturbed_params(cfg, 1)
        X = _inputs(np.random.default_rng(1))
        a = M.forward(p, cfg, X, [0, 2])[:2]
        b = M.forward(p, cfg, X, [0, 2])[:2]
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_training_needs_rng(self):
        cfg = toy_config(dropout=0.1)
        with pytest.raises(ValueError, match="rng"):
            M.forward(perturbed_params(cfg, 0), cfg, _inputs(np.random.default_rng(0)), [0, 0], training=True)

    @pytest.mark.parametrize("seed", range(5))
    def test_sigma_positive_on_wild_inputs(self, seed):
        cfg = toy_config()
        p = perturbed_params(cfg, seed, scale=3.0)
        X = 100.0 * _inputs(np.random.default_rng(seed))
        _, sigma, _ = M.forward(p, cfg, X, [0, 1])
        assert np.all(sigma > 0)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_names_block(self):
        cfg = toy_config(use_residual_layernorm=False)
        p = perturbed_params(cfg, 0)
        p["b1.W2"][0, 0] = np.inf
        with pytest.raises(FloatingPointError, match="block 1"):
            M.forward(p, cfg, np.abs(_inputs(np.random.default_rng(0))) + 1.0, [0, 1])

    def test_input_shape_checked(self):
        cfg = toy_config()
        with pytest.raises(nk.ShapeError):
            M.forward(perturbed_params(cfg, 0), cfg, np.zeros((2, 5, 4)), [0, 1])

    @pytest.mark.parametrize("L", [1, 2])
    @pytest.mark.parametrize("j", [0, 3, 7])
    def test_causal_end_to_end(self, L, j):
        cfg = toy_config(n_blocks=L)
        p = perturbed_params(cfg, j)
        rng = np.random.default_rng(10 + j)
        X = _inputs(rng)
        mu, sigma, _ = M.forward(p, cfg, X, [0, 1])
        X2 = X.copy()
        X2[:, j] += 1e-3 * rng.normal(size=X2[:, j].shape)
        mu2, sigma2, _ = M.forward(p, cfg, X2, [0, 1])
        assert np.abs(mu2[:, :j] - mu[:, :j]).max(initial=0.0) <= 1e-12
        assert np.abs(sigma2[:, :j] - sigma[:, :j]).max(initial=0.0) <= 1e-12
        assert np.abs(mu2[:, j:] - mu[:, j:]).max() > 0

    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_equivariant_without_mask(self, seed):
        cfg = toy_config(use_causal_mask=False)
        p = perturbed_params(cfg, seed)
        rng = np.random.default_rng(seed)
        X = _inputs(rng, N=6)
        perm = rng.permutation(6)
        mu, sigma, _ = M.forward(p, cfg, X, [1, 2])
        mu_p, sigma_p, _ = M.forward(p, cfg, X[:, perm], [1, 2])
        np.testing.assert_allclose(mu_p, mu[:, perm], rtol=0, atol=1e-12)
        np.testing.assert_allclose(sigma_p, sigma[:, perm], rtol=0, atol=1e-12)

    def test_time_shift_invariance(self):
        # same values and covariates, different absolute positions: outputs agree exactly
        rng = np.random.default_rng(0)
        z = rng.uniform(1, 5, size=40)
        shift = 17
        start = datetime(2020, 1, 1)
        a = D.SeriesSet([D.SeriesInstance("a", start, timedelta(hours=1), z)])
        b = D.SeriesSet([D.SeriesInstance("b", start - timedelta(hours=shift), timedelta(hours=1),
                                          np.concatenate([rng.uniform(1, 5, shift), z]))])
        spec_a = D.WindowSpec(0, (20, 22, 25), (30, 31), "augmented")
        spec_b = D.WindowSpec(0, tuple(i + shift for i in spec_a.context), tuple(i + shift for i in spec_a.horizon))
        ba = D.build_batch([spec_a], a, scale_width=10)
        bb = D.build_batch([spec_b], b, scale_width=10)
        assert not np.array_equal(ba.time_index, bb.time_index)
        np.testing.assert_array_equal(ba.inputs, bb.inputs)
        cfg = toy_config(n_instances=1)
        p = perturbed_params(cfg, 0)
        mu_a, sigma_a, _ = M.forward(p, cfg, ba.inputs, ba.instance)
        mu_b, sigma_b, _ = M.forward(p, cfg, bb.inputs, bb.instance)
        np.testing.assert_array_equal(mu_a, mu_b)
        np.testing.assert_array_equal(sigma_a, sigma_b)


def _loss_fn(cfg, names, inst, targets, mask):
    def f(*arrs):
        p = dict(zip(names, arrs[:-1]))
        mu, sigma, cache = M.forward(p, cfg, arrs[-1], inst)
        loss, dmu, dsigma = nll_and_grad(mu, sigma, targets, mask)
        g = M.backward(p, cfg, cache, dmu, dsigma)
        return loss, [g[n] for n in names] + [g["inputs"]]
    return f


class TestGradients:
    @pytest.mark.parametrize("residual", [True, False])
    @pytest.mark.parametrize("seed", range(3))
    def test_forward_plus_nll(self, residual, seed):
        cfg = toy_config(use_residual_layernorm=residual)
        p = perturbed_params(cfg, seed)
        rng = np.random.default_rng(100 + seed)
        X = _inputs(rng)
        targets = rng.normal(size=(2, 8))
        mask = np.zeros((2, 8), dtype=bool)
        mask[:, 5:] = True
        names = sorted(p)
        err = nk.grad_check(_loss_fn(cfg, names, np.array([0, 2]), targets, mask), [p[n] for n in names] + [X])
        assert err <= 1e-4

    def test_maskless(self):
        cfg = toy_config(use_causal_mask=False)
        p = perturbed_params(cfg, 9)
        rng = np.random.default_rng(9)
        X = _inputs(rng, N=5)
        names = sorted(p)
        err = nk.grad_check(_loss_fn(cfg, names, np.array([1, 1]), rng.normal(size=(2, 5)), None),
                            [p[n] for n in names] + [X])
        assert err <= 1e-4

    def test_backward_returns_every_param(self):
        cfg = toy_config()
        p = perturbed_params(cfg, 0)
        mu, sigma, cache = M.forward(p, cfg, _inputs(np.random.default_rng(0)), [0, 1])
        g = M.backward(p, cfg, cache, np.ones_like(mu), np.ones_like(sigma))
        assert set(g) == set(p) | {"inputs"}
        assert all(g[k].shape == p[k].shape for k in p)


class TestDecoder:
    @pytest.mark.parametrize("mask", [True, False])
    @pytest.mark.parametrize("residual", [True, False])
    def test_matches_full_forward(self, mask, residual):
        cfg = toy_config(use_causal_mask=mask, use_residual_layernorm=residual)
        p = perturbed_params(cfg, 2)
        rng = np.random.default_rng(2)
        k, n, Np, S = 2, 3, 5, 4
        prefix = rng.normal(size=(k, Np, 3))
        steps = rng.normal(size=(k, n, S, 3))
        dec = M.Decoder(p, cfg, prefix, [2, 0], n, S)
        for s in range(S):
            mu, sigma = dec.step(steps[:, :, s])
            for i, inst in enumerate([2, 0]):
                seq = np.concatenate([np.repeat(prefix[i][None], n, axis=0), steps[i, :, :s + 1]], axis=1)
                mu_f, sigma_f, _ = M.forward(p, cfg, seq, [inst] * n)
                np.testing.assert_allclose(mu[i], mu_f[:, -1], rtol=1e-10, atol=1e-12)
                np.testing.assert_allclose(sigma[i], sigma_f[:, -1], rtol=1e-10, atol=1e-12)

    def test_step_budget(self):
        cfg = toy_config()
        dec = M.Decoder(perturbed_params(cfg, 0), cfg, np.zeros((1, 3, 3)), [0], 1, 1)
        dec.step(np.zeros((1, 1, 3)))
        with pytest.raises(IndexError):
            dec.step(np.zeros((1, 1, 3)))


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = toy_config()
        p = perturbed_params(cfg, 0)
        path = M.save_checkpoint(tmp_path / "m.npz", p, cfg, seed=7, manifest={"scaler": "one_plus_mean"})
        q, cfg2, meta = M.load_checkpoint(path)
        assert cfg2 == cfg and meta["seed"] == 7 and meta["manifest"]["scaler"] == "one_plus_mean"
        assert set(q) == set(p)
        for k in p:
            assert q[k].tobytes() == p[k].tobytes()

    def test_bytes_deterministic(self, tmp_path):
        cfg = toy_config()
        p = perturbed_params(cfg, 0)
        a = M.save_checkpoint(tmp_path / "a.npz", p, cfg, seed=1).read_bytes()
        b = M.save_checkpoint(tmp_path / "b.npz", p, cfg, seed=1).read_bytes()
        assert a == b

    def test_rejects_misshapen(self, tmp_path):
        cfg = toy_config()
        p = perturbed_params(cfg, 0)
        p["head.W"] = np.zeros((3, 2))
        path = M.save_checkpoint(tmp_path / "bad.npz", p, cfg)
        with pytest.raises(ValueError, match="head.W"):
            M.load_checkpoint(path)


class TestTrailingOutputs:
    @pytest.mark.parametrize("mask", [True, False])
    @pytest.mark.parametrize("out_from", [1, 5, 7])
    def test_matches_full_forward(self, mask, out_from):
        cfg = toy_config(use_causal_mask=mask)
        p = perturbed_params(cfg, out_from)
        X = _inputs(np.random.default_rng(out_from))
        mu, sigma, _ = M.forward(p, cfg, X, [0, 2])
        mu_t, sigma_t, _ = M.forward(p, cfg, X, [0, 2], out_from=out_from)
        np.testing.assert_allclose(mu_t, mu[:, out_from:], rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(sigma_t, sigma[:, out_from:], rtol=1e-12, atol=1e-14)

    @pytest.mark.parametrize("residual", [True, False])
    def test_gradients_match_masked_full_loss(self, residual):
        cfg = toy_config(use_residual_layernorm=residual)
        p = perturbed_params(cfg, 4)
        rng = np.random.default_rng(4)
        X = _inputs(rng)
        targets = rng.normal(size=(2, 8))
        mask = np.zeros((2, 8), dtype=bool)
        mask[:, 5:] = True
        mu, sigma, cache = M.forward(p, cfg, X, [1, 2])
        full = M.backward(p, cfg, cache, *nll_and_grad(mu, sigma, targets, mask)[1:])
        mu, sigma, cache = M.forward(p, cfg, X, [1, 2], out_from=5)
        part = M.backward(p, cfg, cache, *nll_and_grad(mu, sigma, targets[:, 5:])[1:])
        for k in full:
            np.testing.assert_allclose(part[k], full[k], rtol=1e-9, atol=1e-13)

    def test_out_of_range(self):
        cfg = toy_config()
        with pytest.raises(ValueError, match="out_from"):
            M.forward(perturbed_params(cfg, 0), cfg, _inputs(np.random.default_rng(0)), [0, 1], out_from=8)
