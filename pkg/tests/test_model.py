import math

import numpy as np
import pytest

from cdt import nn
from cdt.model import (CdtConfig, CdtModel, TokenWindow, forward,
                       gaussian_entropy, gaussian_nll, init_params, loss,
                       predict, preset, tokenize)
from cdt.nn import Tensor, backward

TINY = CdtConfig(state_dim=3, action_dim=2, n_layers=1, n_heads=2, embed_dim=8,
                 context_len=4, dropout=0.0, max_episode_len=16)


@pytest.fixture
def tiny_params(rng):
    return init_params(TINY, rng)


def window(rng, v=4, k=4, t0=0, state_dim=3, action_dim=2):
    return TokenWindow.from_steps(
        k,
        rtg_reward=rng.normal(size=v),
        rtg_cost=rng.normal(size=v),
        states=rng.normal(size=(v, state_dim)),
        actions=rng.uniform(-1, 1, (v, action_dim)),
        timesteps=np.arange(t0, t0 + v),
    )


def make_batch(rng, n=2, k=4):
    batch = []
    for i in range(n):
        v = k if i % 2 == 0 else max(1, k // 2)
        w = window(rng, v=v, k=k)
        acts = np.zeros((k, TINY.action_dim))
        acts[k - v:] = rng.uniform(-1, 1, (v, TINY.action_dim))
        batch.append((w, acts))
    return batch


class TestTokenWindow:
    def test_from_steps_pads_left(self, rng):
        w = window(rng, v=2, k=5)
        assert w.valid_mask.tolist() == [False, False, False, True, True]
        assert np.all(w.states[:3] == 0)
        assert w.last_valid == 4

    def test_rejects_non_increasing_timesteps(self, rng):
        with pytest.raises(ValueError, match="strictly increase"):
            TokenWindow(rtg_reward=[1.0, 1.0], rtg_cost=[0.0, 0.0],
                        states=np.ones((2, 3)), actions=np.ones((2, 2)),
                        timesteps=[3, 3], valid_mask=[True, True])

    def test_rejects_nonzero_padding(self, rng):
        with pytest.raises(ValueError, match="must be zero"):
            TokenWindow(rtg_reward=[9.0, 1.0], rtg_cost=[0.0, 0.0],
                        states=np.zeros((2, 3)), actions=np.zeros((2, 2)),
                        timesteps=[0, 1], valid_mask=[False, True])

    def test_rejects_interior_padding(self):
        with pytest.raises(ValueError, match="left prefix"):
            TokenWindow(rtg_reward=[0.0, 1.0, 0.0], rtg_cost=[0.0] * 3,
                        states=np.zeros((3, 3)), actions=np.zeros((3, 2)),
                        timesteps=[0, 1, 0],
                        valid_mask=[True, True, False])

    def test_needs_one_valid_position(self):
        with pytest.raises(ValueError, match="valid"):
            TokenWindow(rtg_reward=[0.0], rtg_cost=[0.0],
                        states=np.zeros((1, 3)), actions=np.zeros((1, 2)),
                        timesteps=[0], valid_mask=[False])


class TestTokenize:
    def test_minimal_window_has_four_tokens(self, rng, tiny_params):
        cfg = CdtConfig(state_dim=3, action_dim=2, n_layers=1, n_heads=2,
                        embed_dim=8, context_len=1, dropout=0.0,
                        max_episode_len=16)
        tokens = tokenize(window(rng, v=1, k=1), cfg, tiny_params)
        assert tokens.shape == (4, 8)

    def test_deterministic(self, rng, tiny_params):
        w = window(rng)
        a = tokenize(w, TINY, tiny_params).data
        b = tokenize(w, TINY, tiny_params).data
        assert np.array_equal(a, b)

    def test_timestep_shift_changes_only_time_component(self, rng, tiny_params):
        w0 = window(rng, t0=0)
        w5 = TokenWindow(rtg_reward=w0.rtg_reward, rtg_cost=w0.rtg_cost,
                         states=w0.states, actions=w0.actions,
                         timesteps=w0.timesteps + 5, valid_mask=w0.valid_mask)
        t0 = tokenize(w0, TINY, tiny_params).data.reshape(4, 4, 8)
        t5 = tokenize(w5, TINY, tiny_params).data.reshape(4, 4, 8)
        table = tiny_params["embed.time"].data
        for step in range(4):
            expected = table[step + 5] - table[step]
            diff = t5[step] - t0[step]
            # all four token types shift by the same timestep embedding delta
            assert np.allclose(diff, expected[None, :], atol=1e-12)

    def test_timestep_beyond_embedding_table_rejected(self, rng, tiny_params):
        w = window(rng, t0=14)  # timesteps 14..17 exceed max_episode_len 16
        with pytest.raises(ValueError, match="max_episode_len"):
            tokenize(w, TINY, tiny_params)


class TestForward:
    def test_output_shapes(self, rng, tiny_params):
        ga = forward(window(rng), TINY, tiny_params)
        assert ga.mean.shape == (4, 2)
        assert ga.log_std.shape == (4, 2)

    def test_causality_bit_exact(self, rng, tiny_params):
        w = window(rng)
        base = forward(w, TINY, tiny_params)
        perturbed = TokenWindow(
            rtg_reward=np.concatenate([w.rtg_reward[:3], [99.0]]),
            rtg_cost=w.rtg_cost, states=w.states, actions=w.actions,
            timesteps=w.timesteps, valid_mask=w.valid_mask)
        pert = forward(perturbed, TINY, tiny_params)
        assert np.array_equal(base.mean[:3], pert.mean[:3])
        assert np.array_equal(base.log_std[:3], pert.log_std[:3])
        assert not np.array_equal(base.mean[3], pert.mean[3])

    def test_action_token_masked_from_same_step_prediction(self, rng,
                                                           tiny_params):
        # the prediction at step t reads the s-token, which precedes a_t
        w = window(rng)
        changed = TokenWindow(
            rtg_reward=w.rtg_reward, rtg_cost=w.rtg_cost, states=w.states,
            actions=np.concatenate([w.actions[:3], [[0.77, -0.5]]]),
            timesteps=w.timesteps, valid_mask=w.valid_mask)
        assert np.array_equal(forward(w, TINY, tiny_params).mean[3],
                              forward(changed, TINY, tiny_params).mean[3])

    def test_single_token_attention_is_value_projection(self, rng):
        # softmax over one allowed entry is exactly 1, so attention reduces
        # to the value path of that token
        from cdt.model import _attention
        cfg = CdtConfig(state_dim=3, action_dim=2, n_layers=1, n_heads=2,
                        embed_dim=8, context_len=1, dropout=0.0,
                        max_episode_len=4)
        params = init_params(cfg, rng)
        x = Tensor(rng.normal(size=(1, 1, 8)))
        allow = np.ones((1, 1, 1), dtype=bool)
        out = _attention(x, allow, cfg, params, 0, train=False, rng=None)

        w_qkv = params["block0.attn.w_qkv"].data
        b_qkv = params["block0.attn.b_qkv"].data
        v = (x.data[0, 0] @ w_qkv + b_qkv)[16:24]  # the value slice
        expected = v @ params["block0.attn.w_out"].data \
            + params["block0.attn.b_out"].data
        assert np.allclose(out.data[0, 0], expected, atol=1e-12)

    def test_padding_neutrality(self, rng, tiny_params):
        w4 = window(rng, v=4, k=4)
        out4 = forward(w4, TINY, tiny_params)
        cfg8 = CdtConfig(state_dim=3, action_dim=2, n_layers=1, n_heads=2,
                         embed_dim=8, context_len=8, dropout=0.0,
                         max_episode_len=16)
        w8 = TokenWindow.from_steps(
            8, rtg_reward=w4.rtg_reward, rtg_cost=w4.rtg_cost,
            states=w4.states, actions=w4.actions, timesteps=w4.timesteps)
        out8 = forward(w8, cfg8, tiny_params)
        assert np.allclose(out8.mean[4:], out4.mean, atol=1e-12)
        assert np.allclose(out8.log_std[4:], out4.log_std, atol=1e-12)

    def test_matches_straight_line_reimplementation(self, rng, tiny_params):
        w = window(rng)
        got = forward(w, TINY, tiny_params)
        mean, log_std = straight_line_forward(w, TINY, tiny_params)
        assert np.allclose(got.mean, mean, atol=1e-10)
        assert np.allclose(got.log_std, log_std, atol=1e-10)

    def test_log_std_respects_bounds(self, rng):
        cfg = CdtConfig(state_dim=3, action_dim=2, n_layers=1, n_heads=2,
                        embed_dim=8, context_len=4, dropout=0.0,
                        max_episode_len=16, log_std_bounds=(-1.0, -0.5))
        params = init_params(cfg, rng)
        ga = forward(window(rng), cfg, params)
        assert np.all(ga.log_std >= -1.0) and np.all(ga.log_std <= -0.5)

    def test_deterministic_head_emits_mean_only(self, rng):
        cfg = CdtConfig(state_dim=3, action_dim=2, n_layers=1, n_heads=2,
                        embed_dim=8, context_len=4, dropout=0.0,
                        max_episode_len=16, head_mode="deterministic")
        params = init_params(cfg, rng)
        ga = forward(window(rng), cfg, params)
        assert ga.log_std is None
        assert np.all(np.abs(ga.mean) <= cfg.action_bound * 1.2)


def straight_line_forward(w, cfg, params):
    """Independent plain-numpy re-derivation of the forward pass."""
    p = {k: t.data for k, t in params.items()}
    K = cfg.context_len
    D = cfg.embed_dim
    H = cfg.n_heads
    dh = D // H
    time_emb = p["embed.time"][w.timesteps]

    def emb(x, name):
        return x @ p[f"embed.{name}.w"] + p[f"embed.{name}.b"] + time_emb

    e = np.zeros((K, 4, D))
    e[:, 0] = emb(w.rtg_reward[:, None], "rtg_r")
    e[:, 1] = emb(w.rtg_cost[:, None], "rtg_c")
    e[:, 2] = emb(w.states, "state")
    e[:, 3] = emb(w.actions, "action")
    x = e.reshape(4 * K, D)

    def layernorm(z, g, b):
        mu = z.mean(-1, keepdims=True)
        var = ((z - mu) ** 2).mean(-1, keepdims=True)
        return (z - mu) / np.sqrt(var + 1e-5) * g + b

    x = layernorm(x, p["embed.ln.g"], p["embed.ln.b"])
    S = 4 * K
    token_valid = np.repeat(w.valid_mask, 4)
    allow = np.tril(np.ones((S, S), dtype=bool)) & token_valid[None, :]
    allow |= np.eye(S, dtype=bool)

    for i in range(cfg.n_layers):
        h_in = layernorm(x, p[f"block{i}.ln1.g"], p[f"block{i}.ln1.b"])
        qkv = h_in @ p[f"block{i}.attn.w_qkv"] + p[f"block{i}.attn.b_qkv"]
        q, k_, v = qkv[:, :D], qkv[:, D:2 * D], qkv[:, 2 * D:]
        ctx = np.zeros((S, D))
        for head in range(H):
            sl = slice(head * dh, (head + 1) * dh)
            scores = q[:, sl] @ k_[:, sl].T / math.sqrt(dh)
            scores = np.where(allow, scores, -np.inf)
            weights = np.exp(scores - scores.max(-1, keepdims=True))
            weights = weights / weights.sum(-1, keepdims=True)
            ctx[:, sl] = weights @ v[:, sl]
        x = x + ctx @ p[f"block{i}.attn.w_out"] + p[f"block{i}.attn.b_out"]
        h_in = layernorm(x, p[f"block{i}.ln2.g"], p[f"block{i}.ln2.b"])
        hidden = h_in @ p[f"block{i}.mlp.w_fc"] + p[f"block{i}.mlp.b_fc"]
        c = math.sqrt(2 / math.pi)
        hidden = 0.5 * hidden * (1 + np.tanh(c * (hidden + 0.044715 * hidden**3)))
        x = x + hidden @ p[f"block{i}.mlp.w_out"] + p[f"block{i}.mlp.b_out"]

    x = layernorm(x, p["final_ln.g"], p["final_ln.b"])
    s_tokens = x[2::4]
    mean = np.tanh(s_tokens @ p["head.mean.w"] + p["head.mean.b"]) \
        * (cfg.action_bound * 1.2)
    log_std = np.clip(s_tokens @ p["head.log_std.w"] + p["head.log_std.b"],
                      *cfg.log_std_bounds)
    return mean, log_std


class TestLoss:
    def test_nll_closed_form_at_mean(self):
        m = Tensor(np.zeros((1, 1, 1)))
        ls = Tensor(np.zeros((1, 1, 1)))
        value = gaussian_nll(m, ls, np.zeros((1, 1, 1))).item()
        assert abs(value - 0.5 * math.log(2 * math.pi)) < 1e-9

    def test_entropy_closed_form(self):
        value = gaussian_entropy(Tensor(np.zeros((1, 1, 1)))).item()
        assert abs(value - 0.5 * (1 + math.log(2 * math.pi))) < 1e-9

    def test_entropy_scales_with_dims(self):
        value = gaussian_entropy(Tensor(np.zeros((1, 1, 3)))).item()
        assert value == pytest.approx(1.5 * (1 + math.log(2 * math.pi)))

    def test_zero_lambda_is_pure_nll(self, rng, tiny_params):
        batch = make_batch(rng)
        total, stats = loss(batch, TINY, tiny_params, lambda_ent=0.0,
                            train=False)
        assert total.item() == stats["nll"]

    def test_lambda_subtracts_entropy(self, rng, tiny_params):
        batch = make_batch(rng)
        _, s0 = loss(batch, TINY, tiny_params, lambda_ent=0.0, train=False)
        total, s1 = loss(batch, TINY, tiny_params, lambda_ent=0.5, train=False)
        assert total.item() == pytest.approx(s1["nll"] - 0.5 * s1["entropy"])
        assert s0["nll"] == s1["nll"]

    def test_empty_batch_rejected(self, tiny_params):
        with pytest.raises(ValueError, match="empty"):
            loss([], TINY, tiny_params)

    def test_negative_lambda_rejected(self, rng, tiny_params):
        with pytest.raises(ValueError, match="lambda_ent"):
            loss(make_batch(rng), TINY, tiny_params, lambda_ent=-0.1)

    def test_deterministic_head_uses_mse(self, rng):
        cfg = CdtConfig(state_dim=3, action_dim=2, n_layers=1, n_heads=2,
                        embed_dim=8, context_len=4, dropout=0.0,
                        max_episode_len=16, head_mode="deterministic")
        params = init_params(cfg, rng)
        batch = make_batch(rng)
        total, stats = loss(batch, cfg, params, lambda_ent=9.9, train=False)
        assert stats["entropy"] == 0.0

        ga = [forward(w, cfg, params) for w, _ in batch]
        num = 0.0
        count = 0
        for (w, acts), g in zip(batch, ga):
            for i in range(cfg.context_len):
                if w.valid_mask[i]:
                    num += ((acts[i] - g.mean[i]) ** 2).sum()
                    count += cfg.action_dim
        assert total.item() == pytest.approx(num / count)

    def test_entropy_gradient_is_exactly_minus_lambda(self, rng, tiny_params):
        # d(loss)/d(log_std bias) gains exactly -lambda per unit of dH/dbias
        batch = make_batch(rng)

        def bias_grad(lam):
            nn.zero_grads(tiny_params)
            total, _ = loss(batch, TINY, tiny_params, lambda_ent=lam,
                            train=False)
            backward(total)
            return tiny_params["head.log_std.b"].grad.copy()

        g0 = bias_grad(0.0)
        g1 = bias_grad(0.25)
        # dH/d(bias_j) = 1 at every valid position (inside the clip bounds),
        # and the loss averages over valid positions, so the difference is
        # exactly -0.25 per component
        assert np.allclose(g1 - g0, -0.25, atol=1e-12)

    def test_higher_lambda_gives_higher_log_std_after_one_step(self, rng):
        # one plain gradient-descent step from identical initialization: the
        # mean log-std over the batch must not decrease when lambda grows,
        # because the two gradients differ by exactly -dlambda * dH/dtheta
        batch = make_batch(rng)
        alpha = 1e-3
        mean_log_std = {}
        for lam in (0.0, 0.5):
            params = init_params(TINY, np.random.default_rng(7))
            total, _ = loss(batch, TINY, params, lambda_ent=lam, train=False)
            backward(total)
            for p in params.values():
                if p.grad is not None:
                    p.data = p.data - alpha * p.grad
            values = []
            for w, _ in batch:
                ga = forward(w, TINY, params)
                values.append(ga.log_std[w.valid_mask].mean())
            mean_log_std[lam] = np.mean(values)
        assert mean_log_std[0.5] >= mean_log_std[0.0]


class TestPredict:
    def test_mean_mode_deterministic(self, rng, tiny_params):
        w = window(rng)
        a = predict(w, TINY, tiny_params, mode="mean")
        b = predict(w, TINY, tiny_params, mode="mean")
        assert np.array_equal(a, b)

    def test_sample_collapses_at_tight_bounds(self, rng):
        cfg = CdtConfig(state_dim=3, action_dim=2, n_layers=1, n_heads=2,
                        embed_dim=8, context_len=4, dropout=0.0,
                        max_episode_len=16, log_std_bounds=(-12.0, -11.0))
        params = init_params(cfg, rng)
        w = window(rng)
        mean = predict(w, cfg, params, mode="mean")
        sample = predict(w, cfg, params, mode="sample",
                         rng=np.random.default_rng(0))
        assert np.allclose(sample, mean, atol=1e-4)

    def test_sample_empirical_mean_matches(self, rng, tiny_params):
        w = window(rng)
        mean = predict(w, TINY, tiny_params, mode="mean")
        ga = forward(w, TINY, tiny_params)
        std = np.exp(ga.log_std[w.last_valid])
        draws = np.array([
            predict(w, TINY, tiny_params, mode="sample",
                    rng=np.random.default_rng(1000 + i))
            for i in range(10_000)
        ])
        tol = 3 * std / math.sqrt(10_000)
        assert np.all(np.abs(draws.mean(axis=0) - mean) < tol + 1e-6)

    def test_sample_clipped_to_bounds(self, rng, tiny_params):
        w = window(rng)
        for i in range(50):
            a = predict(w, TINY, tiny_params, mode="sample",
                        rng=np.random.default_rng(i))
            assert np.all(np.abs(a) <= TINY.action_bound)

    def test_uses_last_valid_position(self, rng, tiny_params):
        w_short = window(rng, v=2, k=4)
        a = predict(w_short, TINY, tiny_params, mode="mean")
        ga = forward(w_short, TINY, tiny_params)
        assert np.array_equal(a, np.clip(ga.mean[3], -1.0, 1.0))

    def test_bad_mode_rejected(self, rng, tiny_params):
        with pytest.raises(ValueError, match="mode"):
            predict(window(rng), TINY, tiny_params, mode="argmax")


class TestModelContainer:
    def test_save_load_roundtrip(self, rng, tmp_path):
        model = CdtModel.init(TINY, rng)
        path = tmp_path / "m.ckpt"
        model.save(path, extra={"note": "hello"})
        loaded, extra = CdtModel.load(path)
        assert extra == {"note": "hello"}
        assert loaded.config == TINY
        for name, p in model.params.items():
            assert np.array_equal(loaded.params[name].data, p.data)

    def test_presets(self):
        desk = preset("desk", state_dim=4, action_dim=2)
        assert (desk.n_layers, desk.n_heads, desk.embed_dim) == (2, 4, 64)
        paper = preset("paper", state_dim=4, action_dim=2)
        assert (paper.n_layers, paper.n_heads, paper.embed_dim) == (3, 8, 128)
        with pytest.raises(ValueError):
            preset("mega", state_dim=4, action_dim=2)

    def test_config_validation(self):
        with pytest.raises(ValueError, match="divisible"):
            CdtConfig(state_dim=3, action_dim=2, embed_dim=10, n_heads=4)
        with pytest.raises(ValueError, match="head_mode"):
            CdtConfig(state_dim=3, action_dim=2, head_mode="soft")
        with pytest.raises(ValueError, match="log_std_bounds"):
            CdtConfig(state_dim=3, action_dim=2, log_std_bounds=(2.0, -5.0))

    def test_gaussian_head_params_only_when_needed(self, rng):
        det = CdtConfig(state_dim=3, action_dim=2, n_layers=1, n_heads=2,
                        embed_dim=8, head_mode="deterministic")
        params = init_params(det, rng)
        assert "head.log_std.w" not in params
