import pytest
import torch

from utt.model import TrackerConfig, UnifiedTracker, sanitize_proposals, to_tensor_image
from utt.neural import FeatureMap

TINY = TrackerConfig(backbone_widths=(4, 4, 8), dim=8, heads=2, ffn_hidden=16, pool_size=3, iterations=2)


def make(cfg=TINY, dtype=torch.float64, seed=0, random_heads=False):
    torch.manual_seed(seed)
    model = UnifiedTracker(cfg).to(dtype)
    if random_heads:
        for step in model.transformer.steps:
            torch.nn.init.normal_(step.box_head[2].weight, std=0.1)
    return model


def feats(model, n_images=2, size=64, seed=0):
    gen = torch.Generator().manual_seed(seed)
    dtype = next(model.parameters()).dtype
    return model.features(torch.rand(n_images, size, size, 3, generator=gen, dtype=dtype))


BOXES = torch.tensor([[5, 5, 30, 30], [10, 20, 40, 50], [30, 30, 60, 60], [0, 0, 20, 20]], dtype=torch.float64)
BIDX = torch.tensor([0, 1, 0, 0])


def test_output_lengths_per_mode():
    m = make()
    f = feats(m)
    sot = m(f, f, BOXES, "sot", batch_idx=BIDX)
    mot = m(f, f, BOXES, "mot", mot_proposals=BOXES, batch_idx=BIDX)
    assert len(sot.boxes) == TINY.iterations + 1
    assert len(mot.boxes) == TINY.iterations
    assert sot.heatmaps.shape == (4, 2, 8, 8)
    assert sot.embeddings.shape == (4, TINY.dim)
    assert all(b.shape == (4, 4) for b in sot.boxes + mot.boxes)


def test_zero_init_box_head_returns_proposals_exactly():
    m = make()
    f = feats(m)
    out = m(f, f, BOXES, "mot", mot_proposals=BOXES, batch_idx=BIDX)
    for b in out.boxes:
        assert torch.equal(b, BOXES)
    sot = m(f, f, BOXES, "sot", batch_idx=BIDX)
    prop, _ = sanitize_proposals(sot.boxes[0], TINY.stride)
    for b in sot.boxes[1:]:
        assert torch.equal(b, prop)


def test_heatmaps_normalised():
    m = make(dtype=torch.float32)
    f = feats(m)
    heat = m(f, f, BOXES.float(), "sot", batch_idx=BIDX).heatmaps
    sums = heat.sum(dim=(2, 3))
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-5)
    assert (heat >= 0).all()


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
@pytest.mark.parametrize("mode", ["sot", "mot"])
def test_permutation_equivariance_is_exact(mode, dtype):
    m = make(dtype=dtype, random_heads=True)
    f = feats(m)
    boxes = BOXES.to(dtype)
    perm = torch.tensor([2, 0, 3, 1])
    a = m(f, f, boxes, mode, mot_proposals=boxes, batch_idx=BIDX)
    b = m(f, f, boxes[perm], mode, mot_proposals=boxes[perm], batch_idx=BIDX[perm])
    for x, y in zip(a.boxes, b.boxes):
        assert torch.equal(x[perm], y)
    assert torch.equal(a.embeddings[perm], b.embeddings)


def test_targets_in_other_images_do_not_interact():
    m = make(random_heads=True)
    f = feats(m)
    full = m(f, f, BOXES, "mot", mot_proposals=BOXES, batch_idx=BIDX)
    sel = BIDX == 0
    part = m(f, f, BOXES[sel], "mot", mot_proposals=BOXES[sel], batch_idx=BIDX[sel])
    torch.testing.assert_close(full.final[sel], part.final)


def test_empty_target_set():
    m = make()
    f = feats(m)
    out = m(f, f, torch.zeros(0, 4, dtype=torch.float64), "sot")
    assert len(out.boxes) == TINY.iterations + 1
    assert out.final.shape == (0, 4)


def test_mot_mode_requires_proposals():
    m = make()
    f = feats(m)
    with pytest.raises(ValueError):
        m(f, f, BOXES, "mot")
    with pytest.raises(ValueError):
        m(f, f, BOXES, "det")


def test_sanitize_widens_small_proposals():
    p = torch.tensor([[10.0, 10.0, 10.0, 10.0], [0.0, 0.0, 20.0, 4.0], [0.0, 0.0, 16.0, 16.0]])
    out, n = sanitize_proposals(p, 8)
    assert n == 2
    assert out[0].tolist() == [6.0, 6.0, 14.0, 14.0]
    assert out[1].tolist() == [0.0, -2.0, 20.0, 6.0]
    assert torch.equal(out[2], p[2])


def test_reference_cross_attention_source():
    cfg = TrackerConfig(**{**TINY.__dict__, "mca_source": "reference"})
    m = make(cfg, random_heads=True)
    f = feats(m)
    g = FeatureMap(f.data.flip(0), f.stride)
    out = m(g, f, BOXES, "mot", mot_proposals=BOXES, batch_idx=BIDX)
    assert torch.isfinite(out.final).all()
    with pytest.raises(ValueError):
        TrackerConfig(mca_source="both")


def test_iterations_have_separate_parameters():
    m = make()
    a, b = m.transformer.steps
    assert a.corr_fc.weight.data_ptr() != b.corr_fc.weight.data_ptr()


def test_to_tensor_image_scales_uint8():
    img = torch.full((2, 2, 3), 255, dtype=torch.uint8).numpy()
    assert to_tensor_image(img).max().item() == 1.0


@pytest.mark.parametrize("bad", [dict(pool_size=0), dict(iterations=-1), dict(dim=10, heads=4)])
def test_tracker_config_validation(bad):
    with pytest.raises(ValueError):
        TrackerConfig(**bad)
