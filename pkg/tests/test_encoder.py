import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from breathorder import posenc
from breathorder import tensor as tc
from breathorder.dataio import Clip
from breathorder.encoder import (ClipBank, ClipEncoder, ConfigError, EncoderConfig, attend, encode_clip,
                                 init_encoder_params, patchify, transformer_block)
from breathorder.tensor import Tensor


def small_cfg(**kw):
    base = dict(embed_dim=16, heads=2, spatial_layers=1, temporal_layers=1, patch_size=4,
                frames=3, resolution=8, channels=1)
    base.update(kw)
    return EncoderConfig(**base)


def frames_for(cfg, n=1, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, cfg.frames, cfg.resolution, cfg.resolution, cfg.channels))


def test_presets():
    toy = EncoderConfig.preset("toy")
    assert (toy.embed_dim, toy.heads, toy.grid, toy.tokens_per_frame) == (64, 4, 4, 17)
    paper = EncoderConfig.preset("paper")
    assert (paper.embed_dim, paper.heads, paper.spatial_layers, paper.temporal_layers) == (768, 12, 6, 6)
    assert paper.grid == 14 and paper.tokens_per_frame == 197
    with pytest.raises(ConfigError):
        EncoderConfig.preset("huge")


@pytest.mark.parametrize("kw", [dict(embed_dim=30, heads=4), dict(resolution=30), dict(posenc_mode="rope"),
                                dict(keep_ratio=0.0), dict(keep_ratio=1.5)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        EncoderConfig.preset("toy", **kw)


def test_config_round_trip(tmp_path):
    cfg = EncoderConfig.preset("toy", posenc_mode="APE", mgm_enabled=True, seed=4)
    cfg.save(tmp_path / "enc.json")
    assert EncoderConfig.load(tmp_path / "enc.json") == cfg
    assert cfg.posenc_mode == "ape"
    (tmp_path / "bad.json").write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ConfigError):
        EncoderConfig.load(tmp_path / "bad.json")


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([2, 4, 8]), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3))
def test_token_counts(P, g, T, C):
    cfg = small_cfg(patch_size=P, resolution=P * g, frames=T, channels=C, embed_dim=8, heads=1)
    enc = ClipEncoder(cfg)
    x = enc.tokens(frames_for(cfg, 2))
    assert x.shape == (2, T, g * g + 1, 8)
    assert enc.forward_tokens(x).shape == (2, T + 1, 8)


def test_patchify_layout():
    frames = np.arange(2 * 4 * 4 * 1, dtype=float).reshape(2, 4, 4, 1)
    p = patchify(frames, 2)
    assert p.shape == (2, 4, 4)
    # second patch of frame 0 is the top-right 2x2 block, row-major inside
    assert p[0, 1].tolist() == [2.0, 3.0, 6.0, 7.0]


def test_black_frame_tokens_identical():
    cfg = EncoderConfig.preset("toy")
    enc = ClipEncoder(cfg)
    x = enc.tokens(np.zeros((1, cfg.frames, 32, 32, 3))).data
    patch_tokens = x[0, :, 1:]
    assert np.all(patch_tokens == patch_tokens[0, 0])


def test_toy_embedding_length_and_determinism():
    cfg = EncoderConfig.preset("toy")
    params = init_encoder_params(cfg)
    clip = Clip(frames_for(cfg)[0].astype(np.float32), 0, "v", 1.0)
    e1 = encode_clip(clip, cfg, params)
    e2 = encode_clip(clip, cfg, params)
    assert e1.shape == (64,)
    assert e1.data.tobytes() == e2.data.tobytes()


def test_clip_shape_mismatch():
    cfg = EncoderConfig.preset("toy")
    with pytest.raises(ConfigError):
        ClipEncoder(cfg)(np.zeros((1, 4, 32, 32, 3)))


def test_zero_output_projections_make_block_identity():
    cfg = small_cfg()
    params = init_encoder_params(cfg)
    for k in ("attn.out", "mlp.fc2"):
        params[f"enc.spatial.0.{k}.w"].data[...] = 0.0
        params[f"enc.spatial.0.{k}.b"].data[...] = 0.0
    x = Tensor(np.random.default_rng(0).normal(size=(cfg.frames, cfg.tokens_per_frame, 16)))
    R, _ = ClipEncoder(cfg, params).rotations()
    y = transformer_block(x, params, "enc.spatial.0", cfg.heads, R)
    assert np.array_equal(y.data, x.data)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(1)
    q, k, v = (Tensor(rng.normal(size=(2, 3, 5, 8))) for _ in range(3))
    R = posenc.rotation_for_position(Tensor(rng.normal(scale=0.3, size=(3, 1, 8, 8))), rng.random((5, 3)))
    for rot in (None, R):
        _, w = attend(q, k, v, rot, return_weights=True)
        assert np.max(np.abs(w.data.sum(-1) - 1)) < 1e-12
        assert np.all(w.data > 0)


def test_block_gradient():
    cfg = small_cfg()
    params = init_encoder_params(cfg)
    R, _ = ClipEncoder(cfg, params).rotations()
    w = np.random.default_rng(2).normal(size=(cfg.frames, cfg.tokens_per_frame, 16))
    x = Tensor(np.random.default_rng(3).normal(size=w.shape))
    err = tc.grad_check(lambda t: (transformer_block(t, params, "enc.spatial.0", cfg.heads, R) * Tensor(w)).sum(), x)
    assert err < 1e-4


@pytest.mark.parametrize("mode", ["ape", "liere"])
def test_encoder_gradient_sum_of_embedding(mode):
    cfg = small_cfg(posenc_mode=mode, spatial_layers=2, temporal_layers=2)
    enc = ClipEncoder(cfg)
    # with unit gain the final layernorm makes sum(embedding) identically zero
    enc.params["enc.temporal.norm.g"].data[...] = np.random.default_rng(7).normal(size=16)
    frames = frames_for(cfg, 1, 5)
    loss = lambda _: enc(frames).sum()  # noqa: E731
    for name in ("enc.patch.w", "enc.spatial.1.attn.qkv.w", "enc.temporal.0.mlp.fc1.w"):
        p = enc.params[name]
        coords = np.random.default_rng(6).choice(p.size, 12, replace=False)
        assert tc.grad_check(loss, p, coords=coords) < 1e-4


def test_rotations_shapes_and_cls_identity():
    cfg = EncoderConfig.preset("toy")
    R_sp, R_tp = ClipEncoder(cfg).rotations()
    nb = cfg.head_dim // cfg.liere_block
    assert R_sp.shape == (cfg.frames, 1, cfg.tokens_per_frame, nb, 8, 8)
    assert R_tp.shape == (cfg.frames + 1, nb, 8, 8)
    assert np.array_equal(R_sp.data[:, 0, 0], np.broadcast_to(np.eye(8), (cfg.frames, nb, 8, 8)))
    assert np.array_equal(R_tp.data[0], np.broadcast_to(np.eye(8), (nb, 8, 8)))
    assert ClipEncoder(EncoderConfig.preset("toy", posenc_mode="ape")).rotations() == (None, None)


def test_mgm_toggle_changes_input_only_when_enabled():
    cfg = small_cfg(resolution=16, mgm_enabled=True, keep_ratio=0.25)
    frames = frames_for(cfg, 2, 7).astype(np.float32)
    enc = ClipEncoder(cfg)
    masked = enc.preprocess(frames)
    assert np.mean(masked == 0) > 0.5
    plain = ClipEncoder(small_cfg(resolution=16), enc.params)
    assert plain.preprocess(frames) is frames


def test_clip_bank_precomputes_masks():
    from breathorder.dataio import SynthParams, synth_sequence

    seq = synth_sequence(SynthParams(M=3, seed=1), "v")
    cfg = EncoderConfig.preset("toy", mgm_enabled=True)
    bank = ClipBank.from_sequences([seq], cfg)
    assert len(bank) == 3 and ("v", 2) in bank
    b = bank.batch([("v", 0), ("v", 2)])
    assert b.shape == (2, 8, 32, 32, 3) and b.dtype == np.float32
    # 4 of 16 tiles survive per frame
    tiles = b[0].reshape(8, 4, 8, 4, 8, 3)
    assert np.all((np.abs(tiles).sum(axis=(2, 4, 5)) > 0).sum(axis=(1, 2)) <= 4)
