import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image
from torch.nn import functional as F

from ssl_transfer.explain import Heatmap, blend, colorize, grad_cam, localization_score, overlay
from ssl_transfer.model import ClassifierHeadConfig, EncoderConfig, ProjectionHeadConfig, build_model

SMALL = EncoderConfig("small_cnn", 16, (32, 32), (4, 8, 8))


def _classifier(hidden_dim=8, seed=0):
    model = build_model(SMALL, ClassifierHeadConfig(3, hidden_dim), init_seed=seed)
    model.eval()
    return model


def _image(seed=0, size=(32, 32)):
    return np.random.default_rng(seed).random((*size, 3)).astype(np.float32)


def test_heatmap_range_and_resolution():
    heat = grad_cam(_classifier(), _image(), 1)
    assert heat.values.shape == (32, 32)
    assert heat.values.min() >= 0 and heat.values.max() <= 1
    assert heat.target_class == 1
    assert heat.layer == "block3"


def test_reference_encoder_224_gives_224_map():
    model = build_model(EncoderConfig.reference(), ClassifierHeadConfig(2, 512))
    model.eval()
    assert model.feature_maps(_image(0, (224, 224))[None]).shape[-2:] == (7, 7)
    heat = grad_cam(model, _image(0, (224, 224)), 0)
    assert heat.values.shape == (224, 224)
    assert heat.layer == "layer4"


def test_zeroed_final_layer_gives_zero_map():
    model = _classifier()
    with torch.no_grad():
        model.head[-1].weight.zero_()
        model.head[-1].bias.zero_()
    assert torch.equal(model(_image()[None]), torch.zeros(1, 3))
    heat = grad_cam(model, _image(), 2)
    assert np.array_equal(heat.values, np.zeros((32, 32)))


@pytest.mark.parametrize("seed", range(5))
def test_linear_head_matches_class_activation_map(seed):
    # with a linear head the map reduces to relu(sum_k W[c, k] A_k)
    model = _classifier(hidden_dim=0, seed=seed)
    img = _image(seed)
    for c in range(3):
        with torch.no_grad():
            maps = model.feature_maps(img[None])
            w = model.head[0].weight[c]
            cam = F.relu(torch.einsum("k,bkhw->bhw", w, maps))[:, None]
        up = F.interpolate(cam, size=(32, 32), mode="bilinear", align_corners=False)[0, 0].double().numpy()
        heat = grad_cam(model, img, c)
        if up.max() <= 0:
            assert not heat.values.any()
        else:
            expected = (up - up.min()) / (up.max() - up.min())
            assert np.allclose(heat.values, expected, atol=1e-5)
            assert heat.values.max() == 1.0


def test_determinism():
    model = _classifier()
    a = grad_cam(model, _image(3), 0)
    b = grad_cam(model, _image(3), 0)
    assert np.array_equal(a.values, b.values)


def test_training_flag_restored():
    model = _classifier()
    model.train()
    grad_cam(model, _image(), 0)
    assert model.training


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2))
def test_range_invariant(seed, c):
    values = grad_cam(_classifier(seed=seed % 7), _image(seed), c).values
    assert values.shape == (32, 32)
    assert values.min() >= 0 and values.max() <= 1
    assert values.max() in (0.0, 1.0)


def test_errors():
    model = _classifier()
    with pytest.raises(ValueError, match="target_class"):
        grad_cam(model, _image(), 3)
    with pytest.raises(ValueError, match="target_class"):
        grad_cam(model, _image(), -1)
    with pytest.raises(ValueError, match="no layer named"):
        grad_cam(model, _image(), 0, layer="block9")
    projector = build_model(SMALL, ProjectionHeadConfig((16, 8)))
    with pytest.raises(ValueError, match="classifier head"):
        grad_cam(projector, _image(), 0)


def test_earlier_layer_selectable():
    heat = grad_cam(_classifier(), _image(), 0, layer="block1")
    assert heat.layer == "block1"
    assert heat.values.shape == (32, 32)


# --- overlay ------------------------------------------------------------------------


def test_colormap_endpoints():
    assert np.allclose(colorize(np.array([0.0, 1.0])), [[0, 0, 0.5], [0.5, 0, 0]])


def test_alpha_extremes(rng):
    img = rng.random((6, 5, 3))
    values = rng.random((6, 5))
    assert np.array_equal(blend(values, img, 0.0), img)
    assert np.allclose(blend(values, img, 1.0), colorize(values))


def test_alpha_half_on_two_by_two():
    img = np.ones((2, 2, 3))
    values = np.array([[0.0, 1.0], [1.0, 0.0]])
    low, high = [0.5, 0.5, 0.75], [0.75, 0.5, 0.5]
    expected = np.array([[low, high], [high, low]])
    assert np.allclose(blend(values, img, 0.5), expected)
    png = overlay(values, img, 0.5)
    assert np.array_equal(png, np.round(expected * 255).astype(np.uint8))


def test_overlay_writes_png(tmp_path):
    img = np.zeros((4, 4, 3))
    heat = Heatmap(np.linspace(0, 1, 16).reshape(4, 4), 1, "block3")
    out = overlay(heat, img, 0.4, tmp_path / "nested" / "s1_cam_1.png")
    with Image.open(tmp_path / "nested" / "s1_cam_1.png") as im:
        assert im.mode == "RGB"
        assert np.array_equal(np.asarray(im), out)
    assert out.dtype == np.uint8


@pytest.mark.parametrize("alpha", [-0.1, 1.5])
def test_alpha_validated(alpha):
    with pytest.raises(ValueError, match="alpha"):
        overlay(np.zeros((2, 2)), np.zeros((2, 2, 3)), alpha)


def test_shape_mismatch():
    with pytest.raises(ValueError, match="does not match"):
        overlay(np.zeros((3, 2)), np.zeros((2, 2, 3)), 0.5)


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot write"):
        overlay(np.zeros((2, 2)), np.zeros((2, 2, 3)), 0.5, blocker / "out.png")


# --- localization -------------------------------------------------------------------


def test_localization_score():
    values = np.zeros((10, 10))
    values[2:6, 2:6] = 1.0
    inside, outside = localization_score(Heatmap(values, 1, "x"), [(4, 4, 2)], (10, 10))
    assert inside == 1.0 and outside == 0.0


def test_localization_needs_partial_cover():
    heat = Heatmap(np.zeros((4, 4)), 1, "x")
    with pytest.raises(ValueError):
        localization_score(heat, [], (4, 4))
    with pytest.raises(ValueError):
        localization_score(heat, [(2, 2, 10)], (4, 4))
