import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spokenalign import align as A
from spokenalign.errors import DataError, ParameterError, ShapeError
from spokenalign.records import CaptionRecord, ImageRecord
from spokenalign.tensor import grad_check

from conftest import SEEDS
from oracles import (alignment_gradcheck, exact_cost, hand_cost, naive_similarity, random_instance,
                     screened_instances)


# -- embeddings ----------------------------------------------------------------

def test_embed_region_identity_and_zero(rng):
    v = rng.normal(size=4)
    p = A.AlignParams(np.eye(4), np.zeros(4), np.zeros((4, 3)), np.zeros(4))
    np.testing.assert_array_equal(A.embed_region(v, p), v)
    b = rng.normal(size=4)
    p.b_m = b
    np.testing.assert_array_equal(A.embed_region(np.zeros(4), p), b)


def test_embed_region_hand_product():
    W = np.array([[1.0, 2.0], [-1.0, 0.5], [3.0, -2.0]])
    b = np.array([0.1, 0.2, 0.3])
    p = A.AlignParams(W, b, np.zeros((3, 1)), np.zeros(3))
    v = np.array([2.0, -1.0])
    hand = [1 * 2 + 2 * -1 + 0.1, -1 * 2 + 0.5 * -1 + 0.2, 3 * 2 + -2 * -1 + 0.3]
    np.testing.assert_allclose(A.embed_region(v, p), hand, atol=1e-15)


def test_embed_region_shape_error():
    p = A.AlignParams.zeros(3, 5, 4)
    with pytest.raises(ShapeError):
        A.embed_region(np.zeros(4), p)
    with pytest.raises(ShapeError):
        A.embed_word_vec(np.zeros(5), p)


def test_embed_word_identity_on_unit_nonnegative():
    p = A.AlignParams(np.zeros((3, 2)), np.zeros(3), np.eye(3), np.zeros(3))
    w = np.array([0.6, 0.8, 0.0])
    np.testing.assert_allclose(A.embed_word_vec(w, p), w, atol=1e-15)


def test_embed_word_saturates_to_zero(rng):
    W = rng.normal(size=(4, 3))
    p = A.AlignParams(np.zeros((4, 2)), np.zeros(4), W, np.full(4, -100.0))
    assert np.all(A.embed_word_vec(rng.normal(size=3), p) == 0)


def test_embed_word_hand_relu():
    W = np.array([[1.0, -1.0], [0.5, 2.0]])
    b = np.array([0.0, -1.0])
    p = A.AlignParams(np.zeros((2, 1)), np.zeros(2), W, b)
    w = np.array([3.0, 4.0])  # unit: [0.6, 0.8]
    z = [0.6 - 0.8 + 0.0, 0.3 + 1.6 - 1.0]
    np.testing.assert_allclose(A.embed_word_vec(w, p), [max(0, z[0]), max(0, z[1])], atol=1e-15)
    z_raw = [3 - 4, 1.5 + 8 - 1]
    np.testing.assert_allclose(A.embed_word_vec(w, p, normalize=False), [0.0, z_raw[1]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(1e-3, 1e3))
def test_embed_word_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    p = A.AlignParams(np.zeros((3, 2)), np.zeros(3), rng.normal(size=(3, 5)), rng.normal(size=3))
    w = rng.normal(size=5)
    np.testing.assert_allclose(A.embed_word_vec(c * w, p), A.embed_word_vec(w, p), rtol=1e-12, atol=1e-14)


def test_zero_word_vector_left_unnormalized():
    p = A.AlignParams(np.zeros((2, 2)), np.zeros(2), np.ones((2, 3)), np.array([0.5, -0.5]))
    np.testing.assert_array_equal(A.embed_word_vec(np.zeros(3), p), [0.5, 0.0])


# -- similarity ----------------------------------------------------------------

def test_similarity_floor_at_zero():
    p = A.AlignParams(np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))
    img = ImageRecord("i", np.array([[-1.0, -1.0], [-2.0, -0.5]]))
    cap = CaptionRecord("c", "i", words=np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert A.image_caption_similarity(img, cap, p) == 0.0


def test_similarity_single_value():
    p = A.AlignParams(np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))
    img = ImageRecord("i", np.array([[3.5, 0.0], [-1.0, 0.0]]))
    cap = CaptionRecord("c", "i", words=np.array([[1.0, 0.0]]))
    assert A.image_caption_similarity(img, cap, p) == 3.5


def test_similarity_matches_double_loop(rng):
    images, captions, params = random_instance(rng, 1, 5, 4, 3, regions=3, max_words=4)
    captions[0] = CaptionRecord("c", "i0", words=rng.normal(size=(4, 4)))
    assert A.image_caption_similarity(images[0], captions[0], params) == naive_similarity(images[0], captions[0], params)


def test_similarity_nonnegative_and_permutation_invariant(rng):
    for _ in range(20):
        images, captions, params = random_instance(rng, 1, 6, 5, 4, max_words=6)
        img, cap = images[0], captions[0]
        s = A.image_caption_similarity(img, cap, params)
        assert s >= 0
        perm_r = ImageRecord("i", img.regions[rng.permutation(20)])
        assert A.image_caption_similarity(perm_r, cap, params) == s
        perm_w = CaptionRecord("c", "i", words=cap.words[rng.permutation(cap.n_words)])
        assert A.image_caption_similarity(img, perm_w, params) == pytest.approx(s, rel=1e-12, abs=1e-12)


def test_batch_of_one(rng):
    images, captions, params = random_instance(rng, 1, 5, 4, 3)
    S = A.batch_similarity(images, captions, params)
    assert S.shape == (1, 1) and S[0, 0] == A.image_caption_similarity(images[0], captions[0], params)


def test_batch_duplicate_image_rows(rng):
    images, captions, params = random_instance(rng, 3, 5, 4, 3)
    images[2] = ImageRecord("dup", images[0].regions.copy())
    S = A.batch_similarity(images, captions, params)
    np.testing.assert_array_equal(S[0], S[2])


def test_batch_equals_pairwise(rng):
    images, captions, params = random_instance(rng, 4, 6, 5, 3)
    S = A.batch_similarity(images, captions, params)
    for k in range(4):
        for l in range(4):
            assert S[k, l] == A.image_caption_similarity(images[k], captions[l], params)
            assert S[k, l] == naive_similarity(images[k], captions[l], params)


def test_batch_length_mismatch(rng):
    images, captions, params = random_instance(rng, 3, 5, 4, 3)
    with pytest.raises(ParameterError):
        A.batch_similarity(images, captions[:2], params)


def test_missing_word_vectors_is_data_error(rng):
    images, _, params = random_instance(rng, 1, 5, 4, 3)
    cap = CaptionRecord("c", "i0", spectrograms=np.zeros((1, 40, 100)))
    with pytest.raises(DataError):
        A.image_caption_similarity(images[0], cap, params)


def test_chunked_scoring_matches_single_block(rng, monkeypatch):
    images, captions, params = random_instance(rng, 6, 5, 4, 3)
    full = A.score_matrix(images, captions, params)
    monkeypatch.setattr(A, "_CHUNK_CELLS", 1)
    assert np.array_equal(A.score_matrix(images, captions, params), full)


# -- margin cost ---------------------------------------------------------------


def test_margin_cost_satisfied():
    assert A.margin_cost(np.diag([10.0, 10.0])) == 0.0


def test_margin_cost_all_zero():
    assert A.margin_cost(np.zeros((2, 2))) == 4.0


def test_margin_cost_hand_expansions(rng):
    for B in (1, 2, 3):
        for _ in range(30):
            S = np.abs(rng.normal(size=(B, B))) * 2
            assert A.margin_cost(S) == pytest.approx(hand_cost(S.tolist()), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 6), st.floats(-50, 50))
def test_margin_cost_translation_invariant(seed, B, c):
    S = np.random.default_rng(seed).normal(size=(B, B)) * 3
    assert A.margin_cost(S) >= 0
    assert A.margin_cost(S + c) == pytest.approx(A.margin_cost(S), rel=1e-9, abs=1e-9)


def test_margin_cost_non_square():
    with pytest.raises(ShapeError):
        A.margin_cost(np.zeros((2, 3)))


def test_margin_cost_zero_iff_margins_hold(rng):
    S = np.diag([5.0, 6.0, 7.0]) + rng.uniform(0, 3.9, size=(3, 3)) * (1 - np.eye(3))
    assert A.margin_cost(S) == 0.0
    S[0, 1] = S[0, 0] - 0.5
    assert A.margin_cost(S) > 0


def test_margin_cost_grad_finite_difference(rng):
    S = rng.normal(size=(4, 4)) * 2
    fn = lambda p: (A.margin_cost(p["S"]), {"S": A.margin_cost_grad(p["S"])})
    assert grad_check(fn, {"S": S}) < 1e-5


# -- gradients -----------------------------------------------------------------


def test_exact_cost_agrees_with_float(rng):
    images, captions, params = random_instance(rng, 3, 5, 4, 3, regions=4)
    cost, _ = A.cost_gradients(images, captions, params)
    assert float(exact_cost(images, captions, params.as_dict())) == pytest.approx(cost, rel=1e-13)


@pytest.mark.parametrize("instance", screened_instances(len(SEEDS)), ids=[str(s) for s in SEEDS])
def test_cost_gradients_finite_difference(instance):
    images, captions, params = instance
    cost, _ = A.cost_gradients(images, captions, params)
    assert cost > 0
    assert alignment_gradcheck(images, captions, params) < 1e-5


def test_zero_cost_zero_gradient():
    # one-hot concepts: each caption matches only its own image, by a wide margin
    eye = np.eye(4)
    images = [ImageRecord(f"i{k}", np.tile(eye[k], (20, 1))) for k in range(4)]
    captions = [CaptionRecord(f"c{k}", f"i{k}", words=eye[[k, k]]) for k in range(4)]
    params = A.AlignParams(10 * eye, np.zeros(4), eye.copy(), np.zeros(4))
    cost, grads = A.cost_gradients(images, captions, params)
    assert cost == 0.0
    for g in grads.values():
        assert np.all(g == 0)


def test_duplicated_batch_gradients(rng):
    # Every original pair shows up four times in the doubled batch and each
    # image-vs-own-twin hinge has cancelling gradient, so gradients scale by 4.
    images, captions, params = screened_instances(1)[0]
    _, g1 = A.cost_gradients(images, captions, params)
    _, g2 = A.cost_gradients(images + images, captions + captions, params)
    for name in A.PARAM_NAMES:
        np.testing.assert_allclose(g2[name], 4 * g1[name], rtol=1e-10, atol=1e-12)


def test_gradients_accumulate_linearly_over_batches(rng):
    images, captions, params = screened_instances(1)[0]
    _, g = A.cost_gradients(images, captions, params)
    total = {k: 2 * v for k, v in g.items()}
    _, again = A.cost_gradients(images, captions, params)
    for name in A.PARAM_NAMES:
        np.testing.assert_array_equal(g[name] + again[name], total[name])


# -- fit ---------------------------------------------------------------------

def _tiny_dataset(rng, n=12):
    images = [ImageRecord(f"i{k:02d}", rng.normal(size=(20, 6))) for k in range(n)]
    captions = [CaptionRecord(f"i{k:02d}_{j}", f"i{k:02d}", words=rng.normal(size=(3, 5)))
                for k in range(n) for j in range(2)]
    return images, captions


def test_fit_zero_epochs_returns_init(rng):
    images, captions = _tiny_dataset(rng)
    init = A.AlignParams.initialize(4, 6, 5, seed=3)
    result = A.fit(images, captions, A.FitConfig(h=4, epochs=0), init=init)
    for name in A.PARAM_NAMES:
        assert result.params.as_dict()[name].tobytes() == init.as_dict()[name].tobytes()
    assert result.epoch_costs == []


def test_fit_deterministic(rng):
    images, captions = _tiny_dataset(rng)
    cfg = A.FitConfig(h=4, epochs=3, batch_images=5, learning_rate=1e-3, seed=11)
    a, b = A.fit(images, captions, cfg), A.fit(images, captions, cfg)
    assert a.epoch_costs == b.epoch_costs
    for name in A.PARAM_NAMES:
        assert a.params.as_dict()[name].tobytes() == b.params.as_dict()[name].tobytes()


def test_fit_rejects_captionless_image(rng):
    images, captions = _tiny_dataset(rng)
    captions = [c for c in captions if c.image_id != "i03"]
    with pytest.raises(DataError):
        A.fit(images, captions, A.FitConfig(h=4, epochs=1))


def test_fit_config_validation():
    with pytest.raises(ParameterError):
        A.FitConfig(learning_rate=-1).validate()
    with pytest.raises(ParameterError):
        A.FitConfig(momentum=1.5).validate()


def test_params_save_load(tmp_path):
    p = A.AlignParams.initialize(3, 5, 4, seed=2)
    p.save(tmp_path / "a", seed=2)
    q, header = A.AlignParams.load(tmp_path / "a")
    assert header["h"] == 3 and header["d_I"] == 5 and header["d_W"] == 4
    for name in A.PARAM_NAMES:
        assert p.as_dict()[name].tobytes() == q.as_dict()[name].tobytes()


# -- alignment inference ---------------------------------------------------

def test_alignment_all_negative(rng):
    p = A.AlignParams(np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))
    img = ImageRecord("i", -np.abs(rng.normal(size=(20, 2))) - 0.1)
    cap = CaptionRecord("c", "i", words=np.abs(rng.normal(size=(3, 2))))
    out = A.infer_alignment(img, cap, p)
    assert len(out) == 3 and [a.word_index for a in out] == [0, 1, 2]
    assert all(a.score <= 0 for a in out)
    assert not any(a.displayable for a in out)


def test_alignment_scores_are_similarity_terms(rng):
    images, captions, params = random_instance(rng, 1, 6, 5, 4, max_words=6)
    out = A.infer_alignment(images[0], captions[0], params)
    total = 0.0
    for a in out:
        total += max(a.score, 0.0)
    assert total == A.image_caption_similarity(images[0], captions[0], params)


def test_alignment_matches_brute_force_argmax(rng):
    for _ in range(10):
        images, captions, params = random_instance(rng, 1, 6, 5, 4, max_words=6)
        Y = A.embed_region(images[0].regions, params)
        X = A.embed_word_vec(captions[0].words, params)
        for a, x in zip(A.infer_alignment(images[0], captions[0], params), X):
            dots = [float(np.dot(y, x)) for y in Y]
            assert a.region_index == int(np.argmax(dots))
            assert a.score == pytest.approx(max(dots), rel=1e-12)


def test_alignment_ties_pick_lowest_region():
    p = A.AlignParams(np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))
    img = ImageRecord("i", np.tile([1.0, 1.0], (20, 1)))
    cap = CaptionRecord("c", "i", words=np.array([[1.0, 0.0]]))
    assert A.infer_alignment(img, cap, p)[0].region_index == 0


def test_alignment_region_permutation_maps_index(rng):
    images, captions, params = random_instance(rng, 1, 6, 5, 4, max_words=5)
    perm = rng.permutation(20)
    base = A.infer_alignment(images[0], captions[0], params)
    moved = A.infer_alignment(ImageRecord("p", images[0].regions[perm]), captions[0], params)
    for a, b in zip(base, moved):
        assert perm[b.region_index] == a.region_index and a.score == b.score


def test_alignment_json_and_svg(rng):
    images, captions, params = random_instance(rng, 1, 6, 5, 4, max_words=3)
    cap = captions[0]
    cap.word_texts = [f"w<{i}>" for i in range(cap.n_words)]
    aligns = A.infer_alignment(images[0], cap, params)
    doc = A.alignments_to_json([(images[0], cap, aligns)])
    assert doc[0]["alignments"][0].keys() >= {"word_index", "region_index", "score"}
    svg = A.alignment_svg(images[0], cap, aligns)
    assert svg.startswith("<svg") and svg.count("<line") == sum(a.displayable for a in aligns)
    assert "w&lt;0&gt;" in svg
