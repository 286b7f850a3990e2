import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from breathorder import tensor as tc
from breathorder.dataio import WeakLabel
from breathorder.encoder import EncoderConfig
from breathorder.heads import (DegenerateInputError, TwoTowerCLS, TwoTowerFull, cosine_distance,
                               init_prototypes, order_from_scores, order_pair_embedding, prototype_loss,
                               renormalize_prototypes, sob_score, sob_scores)
from breathorder.tensor import Tensor

vec = st.lists(st.floats(-10, 10), min_size=3, max_size=3).map(np.array).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


def test_cosine_distance_examples():
    u = np.array([1.0, 2.0, 3.0])
    assert cosine_distance(u, u) == pytest.approx(0, abs=1e-15)
    assert cosine_distance([1, 0], [0, 1]) == 1
    assert cosine_distance(u, -u) == pytest.approx(2, abs=1e-15)
    with pytest.raises(DegenerateInputError):
        cosine_distance([0, 0], [1, 0])


@settings(max_examples=60)
@given(vec, vec, st.floats(1e-3, 1e3))
def test_cosine_distance_range_and_scale(u, v, a):
    d = cosine_distance(u, v)
    assert -1e-12 <= d <= 2 + 1e-12
    assert abs(cosine_distance(a * u, v) - d) < 1e-12


def _protos(orthogonal=True):
    a = np.array([1.0, 0.0, 0.0, 0.0])
    b = np.array([0.0, 1.0, 0.0, 0.0]) if orthogonal else a.copy()
    return {"proto.sob": tc.parameter(a), "proto.nosob": tc.parameter(b)}


def test_prototype_loss_examples():
    p = _protos()
    e = Tensor(p["proto.sob"].data.copy())
    assert prototype_loss(e, WeakLabel.SOB, p, 0.1).item() == pytest.approx(0, abs=1e-15)
    same = _protos(orthogonal=False)
    assert prototype_loss(e, WeakLabel.SOB, same, 0.1).item() == pytest.approx(0.1, abs=1e-15)
    ortho = Tensor(np.array([0.0, 0.0, 1.0, 0.0]))
    assert prototype_loss(ortho, WeakLabel.NoSOB, p, 0.0).item() == pytest.approx(1, abs=1e-15)
    with pytest.raises(ValueError):
        prototype_loss(e, WeakLabel.Excluded, p)


def test_prototype_init_and_renormalize():
    p = init_prototypes(16, seed=3)
    a, b = p["proto.sob"].data, p["proto.nosob"].data
    assert abs(np.linalg.norm(a) - 1) < 1e-12 and abs(np.dot(a, b)) < 1e-12
    p["proto.sob"].data *= 5
    renormalize_prototypes(p)
    assert abs(np.linalg.norm(p["proto.sob"].data) - 1) < 1e-12
    p["proto.nosob"].data[...] = 0
    with pytest.raises(DegenerateInputError):
        renormalize_prototypes(p)


def test_sob_score_examples():
    p = _protos()
    c_sob, c_nosob = p["proto.sob"].data, p["proto.nosob"].data
    assert sob_score(c_sob, c_sob, c_nosob) == pytest.approx(1)
    assert sob_score(c_nosob, c_sob, c_nosob) == pytest.approx(-1)
    assert sob_score(c_sob + c_nosob, c_sob, c_nosob) == pytest.approx(0, abs=1e-15)
    with pytest.raises(DegenerateInputError):
        sob_scores(np.zeros((1, 4)), c_sob, c_nosob)


@settings(max_examples=40)
@given(vec, vec, vec)
def test_sob_score_antisymmetric_in_prototypes(e, a, b):
    assert sob_score(e, a, b) == -sob_score(e, b, a)


def test_sob_scores_vectorized_matches_scalar():
    rng = np.random.default_rng(0)
    E, a, b = rng.normal(size=(6, 5)), rng.normal(size=5), rng.normal(size=5)
    ref = [sob_score(e, a, b) for e in E]
    assert np.max(np.abs(sob_scores(E, a, b) - ref)) < 1e-12


def test_order_examples():
    pred = order_from_scores(0.4, -0.2)
    assert pred.first_is_earlier and pred.margin == pytest.approx(0.6)
    assert order_from_scores(0.1, 0.1).first_is_earlier


@settings(max_examples=40)
@given(vec, vec)
def test_order_presentation_consistent(ea, eb):
    rng = np.random.default_rng(0)
    c_sob, c_nosob = rng.normal(size=3), rng.normal(size=3)
    ab = order_pair_embedding(ea, eb, c_sob, c_nosob)
    ba = order_pair_embedding(eb, ea, c_sob, c_nosob)
    if ab.margin > 0:
        assert ab.first_is_earlier != ba.first_is_earlier
    assert ab.margin == ba.margin


@pytest.fixture(scope="module")
def toy_frames():
    cfg = EncoderConfig.preset("toy")
    rng = np.random.default_rng(4)
    return cfg, rng.random((2, 8, 32, 32, 3)), rng.random((2, 8, 32, 32, 3))


@pytest.mark.parametrize("model_cls", [TwoTowerFull, TwoTowerCLS])
def test_two_tower_antisymmetry(model_cls, toy_frames):
    cfg, a, b = toy_frames
    model = model_cls(cfg)
    with tc.no_grad():
        ab = model.logits(a, b).data
        ba = model.logits(b, a).data
        aa = model.logits(a, a).data
    assert ab.shape == (2,)
    assert np.max(np.abs(ab + ba)) < 1e-9
    assert np.max(np.abs(aa)) < 1e-12
    assert np.any(ab != 0)


@pytest.mark.parametrize("model_cls", [TwoTowerFull, TwoTowerCLS])
def test_two_tower_zero_readout(model_cls, toy_frames):
    cfg, a, b = toy_frames
    model = model_cls(cfg)
    model.params["head.readout.w"].data[...] = 0
    with tc.no_grad():
        assert np.all(model.logits(a, b).data == 0)


def test_full_cross_attention_zero_init_matches_independent_towers(toy_frames):
    # zeroed cross-attention output projections reduce the full model to shared independent towers
    cfg, a, b = toy_frames
    full = TwoTowerFull(cfg)
    for k, p in full.params.items():
        if ".xattn.out." in k:
            p.data[...] = 0
    from breathorder.encoder import ClipEncoder

    plain = ClipEncoder(cfg, {k: v for k, v in full.params.items() if ".xattn." not in k and ".lnx." not in k})
    with tc.no_grad():
        z = full.logits(a, b).data
        ua, ub = plain(a).data, plain(b).data
    ref = (ua - ub) @ full.params["head.readout.w"].data[:, 0]
    assert np.max(np.abs(z - ref)) < 1e-12
