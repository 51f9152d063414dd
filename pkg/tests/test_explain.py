import numpy as np
import pytest
import torch
from PIL import Image

from sgcldff.core import ConfigError, ShapeError
from sgcldff.explain import (cam_from, grad_cam, heat_colors, overlay, render_heatmap,
                             render_overlay, saliency_consistency)
from sgcldff.model import build_model


def test_hand_two_channel_case():
    feats = torch.tensor([[[1.0, 0.0], [0.0, 0.0]], [[0.0, 2.0], [0.0, 0.0]]])
    grads = torch.stack([torch.ones(2, 2), torch.full((2, 2), 0.5)])
    assert cam_from(feats, grads).tolist() == [[1.0, 1.0], [0.0, 0.0]]


def test_unit_gradient_gives_normalised_feature():
    f = torch.tensor([[[0.0, 1.0], [2.0, 4.0]]])
    np.testing.assert_allclose(cam_from(f, torch.ones_like(f)), [[0, 0.25], [0.5, 1.0]])


def test_negative_gradient_gives_zero_cam():
    f = torch.rand(3, 4, 4)
    assert not cam_from(f, -torch.ones_like(f)).any()


def test_gradient_scale_invariance():
    g = torch.Generator().manual_seed(0)
    f = torch.rand(3, 4, 4, generator=g, dtype=torch.float64)
    grads = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    np.testing.assert_allclose(cam_from(f, grads), cam_from(f, 7.5 * grads), atol=1e-12)


def test_grad_cam_on_model(small_cfg):
    model = build_model(small_cfg, seed=0)
    with torch.no_grad():
        model.cls_head.fc.weight.normal_()
    x = torch.rand(4, 64, 64)
    for layer in ("fused", "stage4"):
        cam = grad_cam(model, x, 1, layer)
        assert cam.shape == (64, 64)
        assert cam.min() >= 0 and cam.max() <= 1
    np.testing.assert_array_equal(grad_cam(model, x.permute(1, 2, 0).numpy(), 1), grad_cam(model, x, 1))
    with pytest.raises(ConfigError):
        grad_cam(model, x, 1, "stage2")
    with pytest.raises(ConfigError):
        grad_cam(model, x, 4)


def test_consistency_conventions(rng):
    s = rng.random((8, 8))
    assert saliency_consistency(s, s) == pytest.approx(1.0)
    assert saliency_consistency(1 - s, s) == pytest.approx(0.0)
    assert saliency_consistency(np.full((8, 8), 0.3), s) == 0.5
    assert saliency_consistency(s, np.zeros((8, 8))) == 0.5
    # CAM on a coarser grid is resampled to the saliency grid
    assert 0.0 <= saliency_consistency(s[::2, ::2], s) <= 1.0


def test_colormap_endpoints():
    assert heat_colors(np.zeros((1, 1))).tolist() == [[[0, 0, 1]]]
    assert heat_colors(np.ones((1, 1))).tolist() == [[[1, 0, 0]]]
    img = np.full((2, 2, 3), 0.5)
    heat = np.array([[0.0, 1.0], [0.0, 0.0]])
    out = overlay(img, heat)
    np.testing.assert_allclose(out[0, 0], [0.3, 0.3, 0.7])
    np.testing.assert_allclose(out[0, 1], [0.7, 0.3, 0.3])
    with pytest.raises(ShapeError):
        overlay(img, np.zeros((3, 3)))


def test_rendering_is_byte_deterministic(tmp_path, rng):
    img, heat = rng.random((16, 16, 3)), rng.random((16, 16))
    a = render_overlay(img, heat, tmp_path / "a.png").read_bytes()
    b = render_overlay(img, heat, tmp_path / "b.png").read_bytes()
    assert a == b
    with Image.open(tmp_path / "a.png") as im:
        assert im.mode == "RGB" and im.size == (16, 16)
    render_heatmap(heat, tmp_path / "h.png")
    with Image.open(tmp_path / "h.png") as im:
        assert im.mode == "L"


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        render_overlay(np.zeros((2, 2, 3)), np.zeros((2, 2)), tmp_path / "missing" / "x.png")
