import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from model_fixtures import TINY, random_window, tiny_gradient_check
from oracles import verlet_loop
from trajair import diffcore as dc
from trajair import model as M
from trajair.train_eval import baseline_const_velocity

CFG = M.ModelConfig()


@pytest.fixture(scope="module")
def params():
    return M.init_params(CFG, 11)


def window(rng, agents, cfg=CFG):
    return random_window(rng, agents, cfg)


# ---------------------------------------------------------------- encoders


def test_shared_tcn_identical_histories(params):
    rng = np.random.default_rng(0)
    w = window(rng, 2)
    w.history[1] = w.history[0]
    h = M.encode_history(params, CFG, w.history).data
    assert h.shape == (2, CFG.tcn_channels)
    assert np.array_equal(h[0], h[1])


@pytest.mark.parametrize("agents", [1, 3, 7])
def test_history_encoding_width_independent_of_agent_count(params, agents):
    w = window(np.random.default_rng(agents), agents)
    assert M.encode_history(params, CFG, w.history).shape == (agents, CFG.tcn_channels)


def test_zero_weight_tcn_gives_zero():
    p = M.init_params(CFG, 0)
    for name in p:
        if name.startswith("tcn_obs"):
            p[name].data[...] = 0.0
    w = window(np.random.default_rng(1), 2)
    assert not M.encode_history(p, CFG, w.history).data.any()


def test_context_concat_and_zero_wind(params):
    w = window(np.random.default_rng(2), 2)
    h_obs = M.encode_history(params, CFG, w.history)
    h_enc = M.encode_context(params, CFG, h_obs, np.zeros_like(w.wind_hist))
    assert h_enc.shape == (2, CFG.tcn_channels + CFG.cnn_channels)
    assert np.array_equal(h_enc.data[:, : CFG.tcn_channels], h_obs.data)
    assert not h_enc.data[:, CFG.tcn_channels :].any()  # biases start at zero


def test_shared_wind_gives_identical_wind_features(params):
    w = window(np.random.default_rng(3), 3)
    h_enc = M.encode_context(params, CFG, M.encode_history(params, CFG, w.history), w.wind_hist).data
    wind_part = h_enc[:, CFG.tcn_channels :]
    assert np.array_equal(wind_part[0], wind_part[1]) and np.array_equal(wind_part[0], wind_part[2])


# ---------------------------------------------------------------- attention


def _h_enc(params, w):
    return M.encode_context(params, CFG, M.encode_history(params, CFG, w.history), w.wind_hist)


def test_single_agent_attends_to_itself(params):
    w = window(np.random.default_rng(4), 1)
    h_enc = _h_enc(params, w)
    h_gat, alpha = M.social_attention(params, CFG, h_enc)
    assert np.array_equal(alpha, np.ones((CFG.gat_heads, 1, 1)))
    own = dc.elu(dc.linear(h_enc, params["gat.w"])).data
    np.testing.assert_allclose(h_gat.data, own, rtol=0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_attention_rows_sum_to_one(agents, seed):
    params = M.init_params(CFG, seed % 1000)
    w = window(np.random.default_rng(seed), agents)
    _, alpha = M.social_attention(params, CFG, _h_enc(params, w))
    assert np.max(np.abs(alpha.sum(axis=-1) - 1.0)) < 1e-9


def test_block_mask_isolates_windows(params):
    rng = np.random.default_rng(5)
    a, b = window(rng, 2), window(rng, 3)
    joint = M.collate([a, b])
    cond_joint, alpha = M.condition(params, CFG, joint)
    cond_a, _ = M.condition(params, CFG, M.collate([a]))
    assert np.all(alpha[:, :2, 2:] == 0) and np.all(alpha[:, 2:, :2] == 0)
    np.testing.assert_allclose(cond_joint.data[:2], cond_a.data, rtol=0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_full_forward_permutation_equivariant(agents, seed):
    params = M.init_params(CFG, 7)
    rng = np.random.default_rng(seed)
    w = window(rng, agents)
    perm = rng.permutation(agents)
    eps = rng.standard_normal((agents, CFG.cvae_latent_dim))
    out = M.forward_train(params, CFG, M.collate([w]), None, eps=eps)
    out_p = M.forward_train(params, CFG, M.collate([w.permuted(perm)]), None, eps=eps[perm])
    assert np.max(np.abs(out.positions.data[perm] - out_p.positions.data)) < 1e-9
    assert np.max(np.abs(out.mu.data[perm] - out_p.mu.data)) < 1e-9


# ---------------------------------------------------------------- CVAE


def _cond_and_pred(params, w):
    batch = M.collate([w])
    cond, _ = M.condition(params, CFG, batch)
    return cond, M.encode_future(params, CFG, batch.future)


def test_zero_eps_gives_mean_and_shapes(params):
    w = window(np.random.default_rng(6), 2)
    cond, h_pred = _cond_and_pred(params, w)
    z, h_cvae, mu, log_var = M.cvae_train_forward(params, CFG, h_pred, cond, eps=np.zeros((2, 64)))
    assert np.array_equal(z.data, mu.data)
    assert mu.shape == log_var.shape == (2, CFG.cvae_latent_dim)
    assert h_cvae.shape == (2, CFG.mlp_hidden)


def test_same_eps_same_output(params):
    w = window(np.random.default_rng(7), 2)
    cond, h_pred = _cond_and_pred(params, w)
    a = M.cvae_train_forward(params, CFG, h_pred, cond, rng=np.random.default_rng(1))[1].data
    b = M.cvae_train_forward(params, CFG, h_pred, cond, rng=np.random.default_rng(1))[1].data
    assert np.array_equal(a, b)


def test_prior_sampling_reproducible_and_stochastic(params):
    w = window(np.random.default_rng(8), 3)
    cond, _ = _cond_and_pred(params, w)
    a = M.cvae_sample_forward(params, CFG, cond, np.random.default_rng(4)).data
    b = M.cvae_sample_forward(params, CFG, cond, np.random.default_rng(4)).data
    assert np.array_equal(a, b)
    rng = np.random.default_rng(9)
    draws = [M.cvae_sample_forward(params, CFG, cond, rng).data for _ in range(5)]
    assert len({d.tobytes() for d in draws}) == 5
    # distinct conditions give distinct outputs for the same z
    assert not np.allclose(a[0], a[1])


def test_non_finite_posterior_rejected(params):
    w = window(np.random.default_rng(10), 1)
    cond, h_pred = _cond_and_pred(params, w)
    bad = {k: v for k, v in params.items()}
    bad["q.logvar.b"] = dc.parameter(np.full(CFG.cvae_latent_dim, 1e6))
    with pytest.raises(dc.NonFiniteError):
        M.cvae_train_forward(bad, CFG, h_pred, cond, eps=np.ones((1, 64)))


# ---------------------------------------------------------------- head and rollout


def test_zero_accel_is_constant_velocity():
    history = np.array([[[-5.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]]])
    pos = M.rollout(np.zeros((1, 4, 3)), history).data
    assert pos[0].tolist() == [[2, 0, 0], [3, 0, 0], [4, 0, 0], [5, 0, 0]]


def test_constant_downward_accel_first_step():
    history = np.array([[[0.0, 0, 0], [1.0, 0, 0]]])
    pos = M.rollout(np.tile([0.0, 0.0, -1.0], (1, 3, 1)), history).data
    assert pos[0, 0].tolist() == [2.0, 0.0, -1.0]


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 15), st.integers(0, 2**32 - 1))
def test_rollout_matches_recurrence_oracle(agents, steps, seed):
    rng = np.random.default_rng(seed)
    history = rng.normal(0, 1000, (agents, 3, 3))
    accel = rng.normal(0, 5, (agents, steps, 3))
    pos = M.rollout(accel, history).data
    for a in range(agents):
        want = verlet_loop(history[a, -2].tolist(), history[a, -1].tolist(), accel[a].tolist())
        assert pos[a].tolist() == want


def test_zero_head_output_equals_const_velocity_baseline(params):
    w = window(np.random.default_rng(12), 3)
    zero = dict(params)
    zero["head.out.w"] = dc.parameter(np.zeros_like(params["head.out.w"].data))
    zero["head.out.b"] = dc.parameter(np.zeros_like(params["head.out.b"].data))
    cond, _ = _cond_and_pred(zero, w)
    h_cvae = M.cvae_sample_forward(zero, CFG, cond, np.random.default_rng(0))
    accel, pos = M.head_and_rollout(zero, CFG, h_cvae, w.history)
    assert not accel.data.any()
    assert np.array_equal(pos.data, baseline_const_velocity(w.history, CFG.t_pred).positions)


def test_sample_count_and_shapes(params):
    w = window(np.random.default_rng(13), 2)
    out = M.sample(params, CFG, M.collate([w], with_future=False), np.random.default_rng(0), 4)
    assert len(out) == 4
    assert all(s.positions.shape == (2, CFG.t_pred, 3) for s in out)


# ---------------------------------------------------------------- gradients and checkpoints


def test_end_to_end_gradient_tiny_model():
    ok, worst = tiny_gradient_check()
    assert ok, f"worst excess over tolerance {worst}"


def test_checkpoint_roundtrip_and_validation(tmp_path):
    p = M.init_params(TINY, 2)
    M.save_checkpoint(tmp_path / "m.ckpt", p, TINY, {"note": "x"})
    back, cfg, meta = M.load_checkpoint(tmp_path / "m.ckpt", TINY)
    assert cfg == TINY and meta["note"] == "x"
    assert all(np.array_equal(back[k].data, p[k].data) for k in p)
    with pytest.raises(ValueError, match="does not match"):
        M.load_checkpoint(tmp_path / "m.ckpt", CFG)


def test_config_validation():
    with pytest.raises(ValueError):
        M.ModelConfig(gat_dim=30, gat_heads=4)
    with pytest.raises(ValueError):
        M.ModelConfig(tcn_channels=0)
    with pytest.raises(ValueError):
        M.ModelConfig.from_dict({"bogus": 1})
