import numpy as np
import pytest

import finemine

TINY = {
    "seed": 4,
    "image_size": 16,
    "num_inclass_classes": 4,
    "num_outclass_classes": 3,
    "counts": {"labeled_train": 24, "validation": 8, "inclass_unlabeled": 12, "outclass_unlabeled": 12, "test": 8},
}


@pytest.fixture(scope="module")
def bundle():
    return finemine.generate(TINY)


def test_generate_is_deterministic(bundle):
    assert finemine.generate(TINY) == bundle
    assert bundle.num_inclass_classes == 4
    assert len(bundle.split("labeled_train")) == 24
    img = bundle.split("test")[0].image
    assert img.shape == (16, 16, 3) and img.dtype == np.float32
    assert 0.0 <= img.min() and img.max() <= 1.0


def test_bad_config_raises_value_error():
    with pytest.raises(ValueError):
        finemine.generate({"seed": -1})
    with pytest.raises(ValueError):
        finemine.generate({"sed": 1})


def test_missing_bundle_raises_os_error(tmp_path):
    with pytest.raises(OSError):
        finemine.load_bundle(tmp_path / "absent")


def test_bundle_round_trip(bundle, tmp_path):
    bundle.save(tmp_path / "b")
    assert finemine.load_bundle(tmp_path / "b") == bundle


def test_model_forward_and_gradient():
    rng = np.random.default_rng(0)
    model = finemine.init_classifier(3, 9)
    image = rng.random((12, 12, 3), dtype=np.float32)
    logits = finemine.forward(model, image, 12)
    assert len(logits) == 3
    p = finemine.softmax(logits)
    assert sum(p) == pytest.approx(1.0)
    assert finemine.grad_check(model, image, [0.8, 0.1, 0.1]) < 1e-4
    attn = finemine.attention(model, image, 12)
    assert attn.max() <= 1.0


def test_train_and_checkpoint(bundle, tmp_path):
    model = finemine.train_on_labeled(bundle, '{"epochs": 2, "crop_size": 16, "batch_size": 8, "warmup_epochs": 0}', 3)
    assert model.input_resolution == 16
    assert 0.0 <= finemine.accuracy(model, bundle) <= 1.0
    model.save(tmp_path / "m")
    assert finemine.load_checkpoint(tmp_path / "m") == model


def test_augment_views():
    img = np.random.default_rng(1).random((40, 40, 3), dtype=np.float32)
    views = finemine.augment.crops_144(img, [36, 40, 44, 48], 32)
    assert len(views) == 144
    np.testing.assert_array_equal(views[1], views[0][:, ::-1, :])
    assert len(finemine.augment.tta_three(img, 36, 32, 0)) == 3
    mapping = finemine.augment.rcm_permutation(4, 1, 5)
    assert sorted(mapping) == list(range(16))


def test_kmeans_and_fusion():
    pts = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]])
    assign, centroids, inertia = finemine.mining.kmeans(pts, 2)
    assert assign[0] == assign[1] != assign[2] == assign[3]
    assert inertia == pytest.approx(0.01)
    fused = finemine.fusion.fuse(np.array([[1.0, 0.0], [0.0, 1.0]]), [0.9, 0.1])
    assert fused == pytest.approx([0.9, 0.1])
    routed = finemine.fusion.routed_fuse([1.0, 0.0], [0.0, 1.0], finemine.Shot.LONG)
    assert routed == pytest.approx([0.7, 0.3])
    assert finemine.fusion.classify_shot(0.7) == finemine.Shot.CLOSE
    assert finemine.mining.vote_top1([(2, 0.9), (2, 0.5), (1, 0.99)]) == (2, 2, pytest.approx(0.7))


def test_default_config_shape():
    cfg = finemine.default_config()
    assert cfg["gen"]["num_inclass_classes"] == 10
    assert {"mining", "cluster", "fix", "fusion", "model_roles"} <= cfg.keys()
