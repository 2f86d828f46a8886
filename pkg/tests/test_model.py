"""Tests for the prompt-conditioned trajectory network."""

import numpy as np
import pytest

import promptraj.model as M
from promptraj import autodiff as ad
from promptraj.errors import ConfigError, ContractError, NumericError
from promptraj.model import (ModelConfig, assemble_condition, diffusion_forward,
                             encode_condition, encode_history, encode_prompts,
                             fourier_features, init_params, task_encode,
                             time_embed, timestep_embed, tokenize_image,
                             velocity_forward)

from helpers import check_grad

RNG = np.random.default_rng(0)

MINI = ModelConfig(width=16, patch=16, image_size=32, fusion_layers=1,
                   fusion_heads=2, decoder_layers=2, decoder_heads=2,
                   history_len=2, horizon=4, fourier_freqs=4,
                   diffusion_steps=10)


def mini_inputs(batch=2, variant="bbox"):
    params = init_params(MINI, seed=1)
    frames = RNG.integers(0, 255, (batch, 32, 32, 3), dtype=np.uint8)
    current = RNG.integers(0, 255, (batch, 32, 32, 3), dtype=np.uint8)
    history = RNG.normal(0, 0.1, (batch, MINI.history_len, 10))
    payloads = [{"coords": {"object": np.array([0.1, 0.2, 0.3, 0.4]),
                            "target": np.array([0.5, 0.6, 0.7, 0.8])},
                 "render": False} for _ in range(batch)]
    if variant == "point":
        payloads = [{"coords": {"object": np.array([0.2, 0.3]),
                                "target": np.array([0.6, 0.7])},
                     "render": False} for _ in range(batch)]
    if variant in ("none", "vision_bbox"):
        payloads = [{"coords": None, "render": variant == "vision_bbox"}
                    for _ in range(batch)]
    return params, frames, current, history, payloads


# --- config ---------------------------------------------------------------------

def test_config_head_divisibility():
    with pytest.raises(ConfigError):
        ModelConfig(width=64, fusion_heads=5)
    with pytest.raises(ConfigError):
        ModelConfig(width=64, decoder_heads=7)


def test_config_rejects_bad_enum_values():
    with pytest.raises(ConfigError):
        ModelConfig(head="ddpmish")
    with pytest.raises(ConfigError):
        ModelConfig(variant="telepathy")
    with pytest.raises(ConfigError):
        ModelConfig(image_size=100, patch=16)


def test_condition_token_counts():
    assert ModelConfig().n_condition_tokens == 74
    assert ModelConfig(history_len=0).n_condition_tokens == 70
    assert ModelConfig(variant="point").n_condition_tokens == 72


def test_config_file_round_trip(tmp_path):
    cfg = ModelConfig(width=32, fusion_heads=2, decoder_heads=2,
                      variant="point", head="diffusion", freeze_tokenizer=True)
    cfg.save(tmp_path / "m.txt")
    assert ModelConfig.load(tmp_path / "m.txt") == cfg
    (tmp_path / "bad.txt").write_text("warp_drive = on\n")
    with pytest.raises(ConfigError):
        ModelConfig.load(tmp_path / "bad.txt")


# --- tokenizer --------------------------------------------------------------------

def test_tokenize_counts_and_determinism():
    params = init_params(MINI, seed=1)
    raster = RNG.integers(0, 255, (32, 32, 3), dtype=np.uint8)
    tokens, summary = tokenize_image(raster, MINI, params)
    assert tokens.shape == (1, 4, 16)
    assert summary.shape == (1, 1, 16)
    tokens2, summary2 = tokenize_image(raster, MINI, params)
    assert np.array_equal(tokens.data, tokens2.data)
    assert np.array_equal(summary.data, summary2.data)


def test_tokenize_desk_patch_count():
    cfg = ModelConfig()
    assert cfg.n_patches == 64


def test_tokenize_size_mismatch():
    params = init_params(MINI, seed=1)
    with pytest.raises(ConfigError):
        tokenize_image(np.zeros((48, 48, 3), dtype=np.uint8), MINI, params)


def test_tokenize_patch_permutation_locality():
    # with position embeddings zeroed, swapping two patches permutes exactly
    # the corresponding token rows
    params = init_params(MINI, seed=1)
    params["tok.pos"].data[:] = 0.0
    raster = RNG.integers(0, 255, (32, 32, 3), dtype=np.uint8)
    swapped = raster.copy()
    swapped[:16, :16], swapped[:16, 16:] = raster[:16, 16:].copy(), raster[:16, :16].copy()
    a, _ = tokenize_image(raster, MINI, params)
    b, _ = tokenize_image(swapped, MINI, params)
    assert np.allclose(a.data[0, 0], b.data[0, 1])
    assert np.allclose(a.data[0, 1], b.data[0, 0])
    assert np.allclose(a.data[0, 2:], b.data[0, 2:])


# --- fourier features ----------------------------------------------------------------

def test_fourier_origin_and_width():
    f = fourier_features(np.zeros(2), 8)
    assert f.shape == (1, 32) or f.shape == (32,)
    f = np.ravel(f)
    assert np.allclose(f[0::4], 0.0) and np.allclose(f[2::4], 0.0)
    assert np.allclose(f[1::4], 1.0) and np.allclose(f[3::4], 1.0)


def test_fourier_grid_distinctness():
    xs = np.round(np.arange(0, 1.0001, 1e-3), 9)
    coords = np.stack([xs, np.zeros_like(xs)], axis=-1)
    feats = fourier_features(coords, 8)
    assert len(np.unique(feats.round(12), axis=0)) == len(xs)


# --- prompt and task encoders -----------------------------------------------------------

def test_prompt_token_counts():
    params, _, _, _, payloads = mini_inputs(variant="bbox")
    assert encode_prompts("bbox", payloads, MINI, params).shape == (2, 4, 16)
    _, _, _, _, pts = mini_inputs(variant="point")
    assert encode_prompts("point", pts, MINI, params).shape == (2, 2, 16)
    _, _, _, _, none = mini_inputs(variant="none")
    assert encode_prompts("none", none, MINI, params).shape == (2, 2, 16)


def test_prompt_none_ignores_annotation_content():
    params, _, _, _, boxes = mini_inputs(variant="bbox")
    _, _, _, _, none = mini_inputs(variant="none")
    a = encode_prompts("none", none, MINI, params)
    b = encode_prompts("none", boxes, MINI, params)  # coords present but unused
    assert np.array_equal(a.data, b.data)


def test_prompt_payload_mismatch_rejected():
    params, _, _, _, _ = mini_inputs()
    with pytest.raises(ContractError):
        encode_prompts("bbox", [{"coords": None, "render": False}], MINI, params)
    with pytest.raises(ConfigError):
        encode_prompts("sonar", [], MINI, params)


def test_task_encode_token_count_and_residual_identity():
    params, frames, _, _, payloads = mini_inputs()
    tokens, summary = tokenize_image(frames, MINI, params)
    prompts = encode_prompts("bbox", payloads, MINI, params)
    fused = task_encode(tokens, summary, prompts, MINI, params)
    assert fused.shape == (2, 1 + 4, 16)
    # zero every fusion-layer output projection: residual path only
    for i in range(MINI.fusion_layers):
        for name in (f"fuse.{i}.self.wo.w", f"fuse.{i}.cross.wo.w",
                     f"fuse.{i}.mlp.fc2.w", f"fuse.{i}.mlp.fc2.b"):
            params[name].data[:] = 0.0
    fused0 = task_encode(tokens, summary, prompts, MINI, params)
    assert np.allclose(fused0.data[:, 1:], prompts.data)
    assert np.allclose(fused0.data[:, :1], summary.data)


# --- history and condition assembly ------------------------------------------------------

def test_history_empty_and_shape():
    params, *_ = mini_inputs()
    empty = encode_history(np.zeros((3, 0, 10)), MINI, params)
    assert empty.shape == (3, 0, 16)
    tokens = encode_history(np.zeros((3, 2, 10)), MINI, params)
    assert tokens.shape == (3, 2, 16)


def test_history_identical_steps_differ_by_position_only():
    params, *_ = mini_inputs()
    tokens = encode_history(np.full((1, 2, 10), 0.3), MINI, params)
    delta = tokens.data[0, 1] - tokens.data[0, 0]
    pos = params["hist.pos"].data
    assert np.allclose(delta, pos[1] - pos[0])


def test_assemble_condition_length_and_stability():
    params, frames, current, history, payloads = mini_inputs()
    cond = encode_condition(params, MINI, frames, current, history, payloads)
    assert cond.shape == (2, MINI.n_condition_tokens, 16)
    cond2 = encode_condition(params, MINI, frames, current, history, payloads)
    assert np.array_equal(cond.data, cond2.data)


def test_assemble_condition_no_history():
    params, frames, current, _, payloads = mini_inputs()
    cond = encode_condition(params, MINI, frames, current,
                            np.zeros((2, 0, 10)), payloads)
    assert cond.shape[1] == MINI.n_condition_tokens - MINI.history_len


# --- time embeddings ----------------------------------------------------------------------

def test_time_embed_width_and_distinctness():
    params, *_ = mini_inputs()
    a = time_embed(np.array([0.1]), MINI, params)
    b = time_embed(np.array([0.9]), MINI, params)
    assert a.shape == (1, 16)
    assert not np.allclose(a.data, b.data)
    assert np.array_equal(a.data, time_embed(np.array([0.1]), MINI, params).data)


def test_timestep_embed_distinct_indices():
    params, *_ = mini_inputs()
    embs = timestep_embed(np.arange(MINI.diffusion_steps), MINI, params)
    assert embs.shape == (MINI.diffusion_steps, 16)
    assert len(np.unique(embs.data.round(12), axis=0)) == MINI.diffusion_steps


# --- decoder heads ---------------------------------------------------------------------------

def test_forward_shapes_and_determinism():
    params, frames, current, history, payloads = mini_inputs()
    cond = encode_condition(params, MINI, frames, current, history, payloads)
    x = RNG.normal(0, 1, (2, MINI.horizon, 10))
    t = np.array([0.3, 0.7])
    v1 = velocity_forward(x, t, cond, MINI, params)
    v2 = velocity_forward(x, t, cond, MINI, params)
    assert v1.shape == (2, MINI.horizon, 10)
    assert np.array_equal(v1.data, v2.data)
    eps = diffusion_forward(x, np.array([1, 5]), cond, MINI, params)
    assert eps.shape == (2, MINI.horizon, 10)


def test_forward_rejects_nonfinite():
    params, frames, current, history, payloads = mini_inputs()
    cond = encode_condition(params, MINI, frames, current, history, payloads)
    x = np.zeros((2, MINI.horizon, 10))
    x[0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        velocity_forward(x, np.array([0.5, 0.5]), cond, MINI, params)


def test_attention_maps_row_stochastic():
    params, frames, current, history, payloads = mini_inputs()
    M.ATTENTION_TRACE = []
    try:
        cond = encode_condition(params, MINI, frames, current, history, payloads)
        velocity_forward(np.zeros((2, MINI.horizon, 10)), np.array([0.5, 0.5]),
                         cond, MINI, params)
        assert M.ATTENTION_TRACE
        for probs in M.ATTENTION_TRACE:
            sums = probs.sum(axis=-1)
            assert np.allclose(sums, 1.0, atol=1e-9)
            assert probs.min() >= 0.0
    finally:
        M.ATTENTION_TRACE = None


# --- gradients ----------------------------------------------------------------------------------

def _full_loss(params):
    frames = np.full((1, 32, 32, 3), 120, dtype=np.uint8)
    current = np.full((1, 32, 32, 3), 90, dtype=np.uint8)
    history = np.linspace(-0.1, 0.1, 20).reshape(1, 2, 10)
    payloads = [{"coords": {"object": np.array([0.1, 0.2, 0.3, 0.4]),
                            "target": np.array([0.5, 0.6, 0.7, 0.8])},
                 "render": False}]
    cond = encode_condition(params, MINI, frames, current, history, payloads)
    x = np.linspace(-1, 1, MINI.horizon * 10).reshape(1, MINI.horizon, 10)
    out = velocity_forward(x, np.array([0.4]), cond, MINI, params)
    target = ad.Tensor(np.linspace(0, 1, MINI.horizon * 10).reshape(out.shape))
    return ad.mse_mean(out, target)


def test_gradients_reach_all_encoder_params():
    params, *_ = mini_inputs()
    ad.zero_grads(params)
    loss = _full_loss(params)
    ad.backward(loss)
    for name in ("tok.patch.w", "tok.query", "prompt.fc1.w", "prompt.role",
                 "fuse.0.cross.wq.w", "hist.fc1.w", "cond.type", "time.fc1.w",
                 "dec.0.self.wq.w", "dec.out.w"):
        assert params[name].grad is not None, name
        assert np.abs(params[name].grad).max() > 0, name


@pytest.mark.parametrize("name", ["tok.query", "prompt.fc1.b", "hist.fc2.b",
                                  "time.fc2.b", "dec.out.b", "dec.embed.w",
                                  "cond.type"])
def test_end_to_end_gradient_check(name):
    params, *_ = mini_inputs()

    def build(leaf):
        trial = dict(params)
        trial[name] = leaf
        return _full_loss(trial)

    check_grad(build, params[name].data.copy(), rtol=1e-4)


def test_gradient_check_wrt_input_chunk():
    params, frames, current, history, payloads = mini_inputs(batch=1)
    cond_data = encode_condition(params, MINI, frames[:1], current[:1],
                                 history[:1], payloads[:1]).data

    def build(leaf):
        out = velocity_forward(leaf, np.array([0.6]), ad.Tensor(cond_data),
                               MINI, params)
        return ad.mse_mean(out, ad.Tensor(np.zeros(out.shape)))

    check_grad(build, RNG.normal(0, 0.5, (1, MINI.horizon, 10)), rtol=1e-4)
