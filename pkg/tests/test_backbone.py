import numpy as np
import pytest

from segmem import autodiff as ad
from segmem import backbone as bb
from segmem.errors import (
    ArchMismatch,
    BadMagic,
    EmptyMemory,
    FrozenViolation,
    RangeViolation,
    ShapeMismatch,
    VersionMismatch,
)


@pytest.fixture(scope="module")
def params():
    return bb.ModelParams.initialize(0).freeze()


@pytest.fixture(scope="module")
def image():
    rng = np.random.default_rng(5)
    return rng.uniform(0.0, 1.0, (32, 32))


@pytest.fixture(scope="module")
def mask():
    m = np.zeros((32, 32))
    m[10:20, 12:22] = 1.0
    return m


def test_param_count_matches_array_sizes(params):
    by_hand = sum(arr.size for _, arr in params.named_arrays())
    assert params.param_count() == by_hand == 17617


def test_encode_image_deterministic(params, image):
    t1, e1 = bb.encode_image(params, image)
    t2, e2 = bb.encode_image(params, image)
    assert np.array_equal(t1, t2)
    assert np.array_equal(e1, e2)
    assert float(e1 @ e2) == pytest.approx(1.0)


def test_semantic_embedding_is_unit(params, image):
    _, emb = bb.encode_image(params, image)
    assert np.linalg.norm(emb) == pytest.approx(1.0, abs=1e-9)


def test_single_pixel_perturbation_changes_embedding(params, image):
    _, e1 = bb.encode_image(params, image)
    bumped = image.copy()
    bumped[7, 7] += 0.25
    _, e2 = bb.encode_image(params, bumped)
    assert float(e1 @ e2) < 1.0 - 1e-12


def test_encode_image_rejects_bad_shape(params):
    with pytest.raises(ShapeMismatch):
        bb.encode_image(params, np.zeros((16, 16)))


def test_encode_memory_deterministic(params, image, mask):
    t1 = bb.encode_memory(params, image, mask)
    t2 = bb.encode_memory(params, image, mask)
    assert np.array_equal(t1, t2)
    assert t1.shape == (32,)


def test_encode_memory_range_check(params, image):
    with pytest.raises(RangeViolation):
        bb.encode_memory(params, image, np.full((32, 32), 1.5))


def test_encode_memory_zero_token_with_zero_positions():
    params = bb.ModelParams.initialize(0)
    params.arrays["pos"] = np.zeros_like(params.arrays["pos"])
    params.arrays["mem_patch_b"] = np.zeros_like(params.arrays["mem_patch_b"])
    params.freeze()
    token = bb.encode_memory(params, np.zeros((32, 32)), np.zeros((32, 32)))
    assert np.array_equal(token, np.zeros(32))


def test_encode_memory_gradient_matches_fd(params, mask):
    rng = np.random.default_rng(0)
    img0 = rng.uniform(0.0, 1.0, (32, 32))

    def f(x):
        tape = x.tape
        w = {name: tape.leaf(arr) for name, arr in params.named_arrays()}
        token = bb.encode_memory_t(tape, w, x, tape.leaf(mask))
        return ad.sum_all(token * token)

    assert ad.grad_check(f, img0, eps=1e-5) <= 1e-4


def test_segment_requires_memory(params, image):
    with pytest.raises(EmptyMemory):
        bb.segment(params, image, [])


def test_single_memory_attention_weights_are_one(params, image, mask):
    token = bb.encode_memory(params, image, mask)
    att = bb.cross_attention_weights(params, image, [token])
    assert att.shape == (64, 1)
    assert np.all(att == 1.0)


def test_segment_invariant_under_memory_permutation(params, image, mask):
    rng = np.random.default_rng(9)
    tokens = [bb.encode_memory(params, rng.uniform(0, 1, (32, 32)), mask) for _ in range(5)]
    base_logits, base_obj = bb.segment(params, image, tokens)
    for perm_seed in range(4):
        order = np.random.default_rng(perm_seed).permutation(5)
        logits, obj = bb.segment(params, image, [tokens[i] for i in order])
        assert np.array_equal(logits, base_logits)
        assert obj == base_obj


def test_segment_duplicate_token_equals_single(params, image, mask):
    # equal value vectors make the attention read identical; tolerance is
    # ulp-level only because BLAS picks different kernels for 1-row and
    # 2-row operands
    token = bb.encode_memory(params, image, mask)
    l1, o1 = bb.segment(params, image, [token])
    l2, o2 = bb.segment(params, image, [token, token])
    assert np.allclose(l1, l2, atol=1e-12, rtol=0)
    assert o1 == pytest.approx(o2, abs=1e-12)


def test_loss_near_zero_for_perfect_prediction(mask):
    logits = np.where(mask > 0, 20.0, -20.0)
    assert bb.loss(logits, 20.0, mask) < 0.01


def test_loss_empty_gt_objectness_term():
    logits = np.full((32, 32), -20.0)
    value = bb.loss(logits, 0.0, np.zeros((32, 32)))
    # dice term is ~0 (smoothing saturates), objectness is 0.3 * ln 2
    assert value == pytest.approx(0.3 * np.log(2.0), abs=1e-3)


def test_loss_weight_is_03():
    assert bb.OBJ_LOSS_WEIGHT == 0.3


def test_loss_nonnegative(params, image, mask):
    rng = np.random.default_rng(2)
    for _ in range(10):
        logits = rng.normal(scale=5.0, size=(32, 32))
        assert bb.loss(logits, float(rng.normal()), mask) >= 0.0


@pytest.mark.slow
def test_frozen_weights_unchanged_by_10k_inferences(params, image, mask):
    before = params.checksum()
    token = bb.encode_memory(params, image, mask)
    for _ in range(10_000):
        bb.segment(params, image, [token])
        bb.loss(np.zeros((32, 32)), 0.0, mask)
    assert params.checksum() == before


def test_pretrain_rejects_frozen(params):
    with pytest.raises(FrozenViolation):
        bb.pretrain(params, [object()], bb.PretrainConfig(epochs=1))


def test_pretrain_deterministic_and_freezes():
    from segmem import synthdata as sd

    samples = []
    for family in (sd.ELLIPSE, sd.RECTANGLE):
        samples.extend(sd.generate(sd.TaskSpec(family), sd.BASE_DOMAIN, 8, seed=11))
        samples.extend(sd.generate(sd.TaskSpec(family), sd.PRETRAIN_DOMAINS[1], 8, seed=12))
    cfg = bb.PretrainConfig(epochs=2, matched_phase=0.5)
    p1, c1 = bb.pretrain(bb.ModelParams.initialize(3), samples, cfg)
    p2, c2 = bb.pretrain(bb.ModelParams.initialize(3), samples, cfg)
    assert p1.frozen and p2.frozen
    assert c1 == c2
    assert p1.checksum() == p2.checksum()
    with pytest.raises(FrozenViolation):
        p1.replace_arrays([arr for _, arr in p1.named_arrays()])


def test_checkpoint_roundtrip(tmp_path, params):
    path = tmp_path / "ckpt.json"
    bb.save_checkpoint(params, path)
    loaded = bb.load_checkpoint(path)
    assert loaded.checksum() == params.checksum()
    assert loaded.frozen


def test_checkpoint_validation(tmp_path, params):
    import json

    path = tmp_path / "ckpt.json"
    bb.save_checkpoint(params, path)
    doc = json.loads(path.read_text())

    bad = dict(doc, magic="NOPE")
    path.write_text(json.dumps(bad))
    with pytest.raises(BadMagic):
        bb.load_checkpoint(path)

    bad = dict(doc, version=2)
    path.write_text(json.dumps(bad))
    with pytest.raises(VersionMismatch):
        bb.load_checkpoint(path)

    bad = dict(doc, arch=dict(doc["arch"], embed_dim=64))
    path.write_text(json.dumps(bad))
    with pytest.raises(ArchMismatch):
        bb.load_checkpoint(path)


def test_loss_gradient_wrt_pseudo_observation_five_seeds():
    from segmem.experiments import end_to_end_gradcheck

    for seed in range(5):
        assert end_to_end_gradcheck(seed) <= 1e-4
