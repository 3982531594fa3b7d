import numpy as np
import pytest
from PIL import Image

from ntscc.source import (CONSTANT, NOISE_HIGH, DatasetSpec, DatasetSpecError, IngestError, SourceImage,
                          load_dataset, synth_texture, to_batch)


def test_synth_texture_deterministic_and_valid():
    a = synth_texture(7, 32)
    b = synth_texture(7, 32)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert a.pixels.shape == (32, 32, 3)
    assert a.blocks.shape == (4, 4)
    assert 0.0 <= a.pixels.min() and a.pixels.max() <= 1.0


def test_synth_block_kinds_have_expected_variance():
    img = synth_texture(11, 256)
    px = img.pixels.reshape(32, 8, 32, 8, 3).transpose(0, 2, 1, 3, 4).reshape(32, 32, 64, 3)
    var = px.var(axis=2).mean(axis=-1)
    assert np.all(var[img.blocks == CONSTANT] < 1e-10)
    assert var[img.blocks == NOISE_HIGH].mean() > 0.03


def test_bad_sizes_rejected():
    with pytest.raises(ValueError):
        synth_texture(0, 30)
    with pytest.raises(DatasetSpecError):
        DatasetSpec(crop=12).validate()
    with pytest.raises(DatasetSpecError):
        DatasetSpec(kind="image-folder", path="/does/not/exist").validate()
    with pytest.raises(ValueError):
        SourceImage(np.full((4, 4, 3), 1.5), "x")


def test_synthetic_dataset_stream():
    imgs = list(load_dataset(DatasetSpec(count=5, seed=2)))
    again = list(load_dataset(DatasetSpec(count=5, seed=2)))
    assert len(imgs) == 5
    assert to_batch(imgs).shape == (5, 32, 32, 3)
    np.testing.assert_array_equal(to_batch(imgs), to_batch(again))


def test_folder_dataset(tmp_path, caplog):
    rng = np.random.default_rng(0)
    for i in range(3):
        Image.fromarray(rng.integers(0, 256, (40, 48, 3), dtype=np.uint8)).save(tmp_path / f"im{i}.png")
    Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(tmp_path / "tiny.png")
    with caplog.at_level("WARNING"):
        imgs = list(load_dataset(DatasetSpec("image-folder", crop=32, count=7, path=str(tmp_path))))
    assert len(imgs) == 7
    assert all(im.shape == (32, 32, 3) for im in imgs)
    assert "skipped" in caplog.text


def test_unreadable_file_named(tmp_path):
    (tmp_path / "broken.png").write_bytes(b"not a png")
    with pytest.raises(IngestError, match="broken.png"):
        list(load_dataset(DatasetSpec("image-folder", crop=32, count=1, path=str(tmp_path))))
