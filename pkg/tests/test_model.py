import struct

import numpy as np
import pytest

from vitderm import tensor as T
from vitderm.errors import ConfigurationError, DimensionError, WeightFormatError
from vitderm.gradcheck import check_gradients
from vitderm.model import (AttentionRecord, ViTConfig, ViTModel, head_shapes, init_weights, make_config,
                           param_count, patchify)
from vitderm.weights import load_weights, read_container, save_weights, write_container


@pytest.fixture
def tiny():
    return make_config("tiny")


@pytest.fixture
def images():
    return np.random.default_rng(5).uniform(size=(2, 8, 8, 3))


# -- configs ----------------------------------------------------------------

@pytest.mark.parametrize("name, D, mlp, heads, depth, patch", [
    ("L16", 1024, 4096, 16, 24, 16),
    ("L32", 1024, 4096, 16, 24, 32),
    ("B16", 768, 3072, 12, 12, 16),
    ("B32", 768, 3072, 12, 12, 32),
])
def test_presets(name, D, mlp, heads, depth, patch):
    cfg = make_config(name)
    assert (cfg.hidden_dim, cfg.mlp_dim, cfg.num_heads, cfg.depth, cfg.patch_size) == (D, mlp, heads, depth, patch)
    assert cfg.image_size == 224 and cfg.num_classes == 7 and cfg.head_neurons == 28


@pytest.mark.parametrize("name, tokens", [("L16", 197), ("L32", 50), ("B16", 197), ("B32", 50)])
def test_token_count_law(name, tokens):
    cfg = make_config(name)
    assert cfg.seq_len == (cfg.image_size // cfg.patch_size) ** 2 + 1 == tokens


def test_unknown_config_name():
    with pytest.raises(ConfigurationError):
        make_config("H14")


def test_custom_requires_all_fields():
    with pytest.raises(ConfigurationError, match="depth"):
        make_config("custom", image_size=8, patch_size=4, hidden_dim=8, mlp_dim=16, num_heads=2)
    cfg = make_config("custom", image_size=8, patch_size=4, hidden_dim=8, mlp_dim=16, num_heads=2, depth=1)
    assert cfg.seq_len == 5


@pytest.mark.parametrize("kw", [dict(image_size=10, patch_size=4), dict(hidden_dim=10, num_heads=4),
                                dict(head_activation="tanh"), dict(dropout_rate=1.0)])
def test_invalid_config(kw):
    with pytest.raises(ConfigurationError):
        make_config("tiny", **kw)


# -- patchify ---------------------------------------------------------------

@pytest.mark.parametrize("patch, n, length", [(16, 196, 768), (32, 49, 3072)])
def test_patchify_224(patch, n, length):
    assert patchify(np.zeros((224, 224, 3)), patch).shape == (n, length)


def test_patchify_order():
    img = np.arange(4 * 4 * 3, dtype=float).reshape(4, 4, 3)
    patches = patchify(img, 2)
    assert sorted(patches.reshape(-1)) == sorted(img.reshape(-1))
    expected = np.concatenate([img[0, 0], img[0, 1], img[1, 0], img[1, 1]])
    np.testing.assert_array_equal(patches[0], expected)
    # patch 1 is the top-right block
    np.testing.assert_array_equal(patches[1][:3], img[0, 2])


def test_patchify_indivisible():
    with pytest.raises(DimensionError):
        patchify(np.zeros((10, 10, 3)), 4)


# -- forward ----------------------------------------------------------------

def test_tiny_forward_shapes(tiny, images):
    model = init_weights(tiny, seed=0)
    probs, records = model.forward(images, capture_attention=True)
    assert probs.shape == (2, 7)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-5)
    assert len(records) == 2
    assert records[0].weights.shape == (1, 2, 5, 5)
    for rec in records:
        np.testing.assert_allclose(rec.weights.sum(axis=-1), 1.0, atol=1e-5)
        assert np.all(rec.weights >= 0)


def test_train_forward_needs_two_samples(tiny, images):
    with pytest.raises(DimensionError):
        init_weights(tiny).forward(images[:1], training=True)


def test_forward_rejects_wrong_image_size(tiny):
    with pytest.raises(DimensionError):
        init_weights(tiny).forward(np.zeros((2, 16, 16, 3)))


def test_eval_forward_deterministic(tiny, images):
    model = init_weights(tiny, seed=3)
    a = model.forward(images).data.tobytes()
    b = model.forward(images).data.tobytes()
    assert a == b


def test_permutation_equivariance_without_positions(tiny):
    cfg = make_config("tiny", image_size=12)
    with T.precision(np.float64):
        model = init_weights(cfg, seed=1)
        model.params["pos_embed"].data[...] = 0.0
        patches = np.random.default_rng(0).normal(size=(1, cfg.num_patches, cfg.patch_dim))
        perm = np.random.default_rng(1).permutation(cfg.num_patches)
        base = model.encode_patches(patches).data
        permuted = model.encode_patches(patches[:, perm]).data
    np.testing.assert_allclose(permuted[0, 0], base[0, 0], atol=1e-12)
    np.testing.assert_allclose(permuted[0, 1:], base[0, 1:][perm], atol=1e-12)


def test_cls_head_input(images):
    cfg = make_config("tiny", head_input="cls")
    model = init_weights(cfg)
    assert model.params["head.dense1.w"].shape == (8, 28)
    assert model.forward(images).shape == (2, 7)


def test_full_tiny_vit_gradients(tiny, images):
    cfg = make_config("tiny", head_activation="rrelu", dropout_rate=0.3)
    with T.precision(np.float64):
        model = init_weights(cfg, seed=2, dtype=np.float64)
        # nonzero biases and positions so every gradient path is exercised
        rng = np.random.default_rng(9)
        for p in model.params.values():
            p.data = p.data + rng.normal(scale=0.1, size=p.shape)
        x = np.random.default_rng(4).uniform(size=(3, 8, 8, 3))
        onehot = np.eye(7)[[0, 3, 6]]

        def loss():
            logits = model.logits(x, training=True, rng=np.random.default_rng(11))
            return T.softmax_cross_entropy(logits, onehot)

        errs = check_gradients(loss, model.params)
    worst = max(errs, key=errs.get)
    assert errs[worst] < 1e-4, (worst, errs[worst])


@pytest.mark.slow
def test_l16_forward_shapes():
    cfg = make_config("L16")
    model = init_weights(cfg, seed=0)
    seen = []
    with T.no_grad():
        encoded = model.encode(model.embed_patches(patchify(np.zeros((2, 224, 224, 3), np.float32), 16)))
        seen.append(encoded.shape)
        logits = model.head(encoded)
        probs = T.softmax(logits)
    assert seen == [(2, 197, 1024)]
    assert model.params["head.dense1.w"].shape == (197 * 1024, 28)
    assert probs.shape == (2, 7)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-5)


# -- parameter accounting ---------------------------------------------------

def test_tiny_backbone_param_count_independent_listing(tiny):
    # shapes written out by hand: image 8, patch 4, D 8, mlp 16, one block
    proj = 48 * 8 + 8
    cls, pos = 8, 5 * 8
    block = (8 + 8) + 4 * (8 * 8 + 8) + (8 + 8) + (8 * 16 + 16) + (16 * 8 + 8)
    final_ln = 16
    assert (proj, cls, pos, block, final_ln) == (392, 8, 40, 600, 16)
    assert param_count(tiny, include_head=False) == 1056
    assert ViTModel.zeros(tiny).num_parameters(include_head=False) == 1056


@pytest.mark.parametrize("name", ["L16", "L32", "B16", "B32", "tiny"])
def test_param_count_matches_live_enumeration(name):
    cfg = make_config(name)
    live = ViTModel.zeros(cfg)
    assert param_count(cfg, include_head=False) == live.num_parameters(include_head=False)
    assert param_count(cfg, include_head=True) == live.num_parameters(include_head=True)


def test_l16_head_contribution():
    cfg = make_config("L16")
    F = 197 * 1024
    expected = F * 28 + 28 + 2 * (F + 28) + 28 * 7 + 7
    assert param_count(cfg) - param_count(cfg, include_head=False) == expected
    assert sum(int(np.prod(s)) for s in head_shapes(cfg).values()) == expected


# -- initialization ---------------------------------------------------------

def test_init_deterministic(tiny):
    a, b = init_weights(tiny, seed=7), init_weights(tiny, seed=7)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


def test_init_seed_changes_something(tiny):
    a, b = init_weights(tiny, seed=7), init_weights(tiny, seed=8)
    assert any(not np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)


def test_init_distribution(tiny):
    cfg = make_config("tiny", hidden_dim=64, mlp_dim=256, num_heads=4)
    model = init_weights(cfg, seed=0)
    w = model.params["blocks.0.mlp.w1"].data
    assert np.all(np.abs(w) <= 0.04 + 1e-7)
    # truncated at 2 std: std shrinks to ~0.88 of 0.02
    assert 0.016 < w.std() < 0.019
    assert np.all(model.params["pos_embed"].data == 0)
    assert np.all(model.params["blocks.0.attn.bq"].data == 0)
    assert np.all(model.params["blocks.0.ln1.gamma"].data == 1)
    assert np.all(model.params["head.bn1.beta"].data == 0)


# -- persistence ------------------------------------------------------------

def test_round_trip_bit_identical(tmp_path, tiny, images):
    model = init_weights(tiny, seed=4)
    model.forward(images, training=True, rng=np.random.default_rng(0))  # moves running stats
    path = tmp_path / "m.vitw"
    save_weights(model, path)
    loaded = load_weights(path, tiny)
    for name, arr in model.state_dict().items():
        assert loaded.state_dict()[name].tobytes() == arr.tobytes(), name
    assert loaded.forward(images).data.tobytes() == model.forward(images).data.tobytes()


def test_container_layout(tmp_path):
    path = tmp_path / "x.vitw"
    write_container(path, {"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
    raw = path.read_bytes()
    expected = (b"VITW\x01" + struct.pack("<I", 2) + b"ab" + bytes([0, 2]) + struct.pack("<II", 1, 2)
                + np.array([1.0, 2.0], "<f4").tobytes() + struct.pack("<I", 0))
    assert raw == expected


def test_backbone_only_load(tmp_path, tiny):
    model = init_weights(tiny, seed=4)
    tensors = model.state_dict()
    del tensors["head.dense2.w"]
    path = tmp_path / "bb.vitw"
    write_container(path, tensors)
    with pytest.raises(WeightFormatError, match="head.dense2.w"):
        load_weights(path, tiny)
    loaded = load_weights(path, tiny, backbone_only=True, seed=99)
    np.testing.assert_array_equal(loaded.params["blocks.0.attn.wq"].data, model.params["blocks.0.attn.wq"].data)
    again = load_weights(path, tiny, backbone_only=True, seed=99)
    assert loaded.params["head.dense2.w"].shape == (28, 7)
    assert not np.array_equal(loaded.params["head.dense1.w"].data, model.params["head.dense1.w"].data)
    np.testing.assert_array_equal(loaded.params["head.dense1.w"].data, again.params["head.dense1.w"].data)
    assert np.all(loaded.buffers["head.bn1.running_var"] == 1)


def test_shape_mismatch_names_tensor(tmp_path):
    path = tmp_path / "bad.vitw"
    write_container(path, {"head.dense1.w": np.zeros((768, 28), np.float32)})
    with pytest.raises(DimensionError, match=r"head\.dense1\.w.*\[768, 28\].*\[201728, 28\]"):
        load_weights(path, make_config("L16"))


def test_load_reports_shape_mismatch(tmp_path, tiny):
    tensors = init_weights(tiny).state_dict()
    tensors["head.dense1.w"] = np.zeros((7, 28), np.float32)
    path = tmp_path / "bad.vitw"
    write_container(path, tensors)
    with pytest.raises(DimensionError, match=r"head\.dense1\.w.*\[7, 28\].*\[40, 28\]"):
        load_weights(path, tiny)


def test_extra_names_listed(tmp_path, tiny):
    tensors = init_weights(tiny).state_dict()
    tensors["blocks.9.attn.wq"] = np.zeros((8, 8), np.float32)
    path = tmp_path / "extra.vitw"
    write_container(path, tensors)
    with pytest.raises(WeightFormatError, match=r"blocks\.9\.attn\.wq"):
        load_weights(path, tiny)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.vitw"
    path.write_bytes(b"NOPE\x01" + struct.pack("<I", 0))
    with pytest.raises(WeightFormatError, match="magic"):
        read_container(path)


def test_truncated(tmp_path, tiny):
    path = tmp_path / "t.vitw"
    save_weights(init_weights(tiny), path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(WeightFormatError, match="truncated"):
        read_container(path)


def test_duplicate_names(tmp_path):
    rec = struct.pack("<I", 1) + b"a" + bytes([0, 1]) + struct.pack("<I", 1) + np.float32(1).tobytes()
    path = tmp_path / "d.vitw"
    path.write_bytes(b"VITW\x01" + rec + rec + struct.pack("<I", 0))
    with pytest.raises(WeightFormatError, match="duplicate"):
        read_container(path)


def test_attention_record_validates_shape():
    with pytest.raises(DimensionError):
        AttentionRecord(np.ones((2, 5, 5)))
