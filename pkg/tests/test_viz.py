import numpy as np
import pytest

from defhtr import viz
from defhtr.data import normalize, read_pgm, read_ppm
from defhtr.models import CRNN, LSTM1D, ModelConfig, build_model
from defhtr.synth import ink_to_gray, render_text
from defhtr.tensor import ContractError

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def model(mode="deformable", variant=CRNN, seed=0):
    return build_model(ModelConfig(variant, mode, charset_size=5, width_multiplier=0.125, seed=seed))


def line(text="abc", height=60):
    ink = render_text(text, pixel_scale=4, margin=(12, 4))
    img = normalize(ink_to_gray(ink))
    return img[:height] if img.shape[0] >= height else np.pad(img, ((0, height - img.shape[0]), (0, 0)),
                                                                   constant_values=1.0)


def test_zero_initialised_offsets_give_zero_map():
    mag = viz.offset_magnitude_map(model(), line())
    assert mag.shape == line().shape and not mag.any()
    assert not viz.render_gray(mag).any()


def test_unit_offset_bias_gives_constant_k_squared():
    m = model()
    bias = m.conv_layers()[0].offset_params.bias
    bias.data[:] = np.tile([1.0, 0.0], 9).astype(np.float32)
    mag = viz.offset_magnitude_map(m, line())
    assert np.array_equal(mag, np.full(mag.shape, 9.0))


def test_standard_layer_is_rejected():
    with pytest.raises(ContractError, match="not deformable"):
        viz.offset_magnitude_map(model("standard"), line())
    with pytest.raises(ContractError):
        viz.offset_magnitude_map(model(), line(), layer=99)


def test_edge_contrast_ratio():
    image = -np.ones((6, 8))
    image[:, 4:] = 1.0
    edges = viz.edge_mask(image)
    assert edges[:, 3].all() and edges.sum() == 6
    stats = viz.edge_contrast(np.where(edges, 3.0, 1.0), image)
    assert stats.ratio == 3.0 and stats.edge_pixels == 6
    coarse = viz.downsample_mask(edges, (3, 4))
    assert coarse[:, 1].all() and coarse.sum() == 3


@pytest.mark.parametrize("variant", [CRNN, LSTM1D])
def test_standard_mask_is_the_closed_form_rectangle(variant):
    m = model("standard", variant)
    img = line(height=m.config.input_height)
    w = m.lattice_length(img.shape[1])
    for column in (0, w // 2, w - 1):
        mask = viz.receptive_field(m, img, column)
        rect = viz.rf_rectangle(m, *img.shape, column)
        assert np.array_equal(mask, viz.rectangle_mask(img.shape, rect))


def test_zero_offset_deformable_mask_equals_standard():
    img = line()
    for column in (0, 3):
        assert np.array_equal(viz.receptive_field(model("deformable"), img, column),
                              viz.receptive_field(model("standard"), img, column))


def test_shifted_offsets_move_the_field(rng):
    m = model()
    first = m.conv_layers()[0]
    first.offset_params.bias.data[:] = np.tile([0.0, 0.5], 9).astype(np.float32)
    img = line()
    wide = viz.receptive_field(m, img, 2)
    base = viz.receptive_field(model("standard"), img, 2)
    assert (wide | base).sum() == wide.sum() and wide.sum() > base.sum()


def test_out_of_range_column():
    m = model()
    img = line()
    with pytest.raises(ContractError):
        viz.receptive_field(m, img, m.lattice_length(img.shape[1]))


def test_written_files_round_trip(tmp_path, rng):
    mag = rng.uniform(0, 4, (5, 7))
    viz.write_offset_map(tmp_path / "m.pgm", mag)
    assert np.array_equal(read_pgm(tmp_path / "m.pgm"), viz.render_gray(mag))
    img = line()
    mask = np.zeros(img.shape, bool)
    mask[10:20, 5:9] = True
    viz.write_rf_overlay(tmp_path / "rf.ppm", img, mask, deformable=True)
    rgb = read_ppm(tmp_path / "rf.ppm")
    assert np.array_equal(rgb, viz.overlay(img, [(mask, viz.DEFORMABLE_RGB)]))
    assert np.array_equal(rgb[~mask][:, 0], rgb[~mask][:, 1]) and not np.array_equal(rgb[mask][:, 0], rgb[mask][:, 1])


def test_figures_are_png(tmp_path):
    img = line()
    records = [{"epoch": 1, "mean_loss": 3.0, "val_cer": 0.5, "val_wer": 0.9},
               {"epoch": 2, "mean_loss": 2.0, "val_cer": 0.3, "val_wer": 0.7}]
    viz.plot_training_curves(records, tmp_path / "c.png")
    viz.plot_offset_map(img, np.zeros(img.shape), tmp_path / "o.png")
    viz.plot_receptive_field(img, img < 0, tmp_path / "r.png", deformable=False)
    for name in ("c.png", "o.png", "r.png"):
        assert (tmp_path / name).read_bytes()[:8] == PNG_MAGIC
