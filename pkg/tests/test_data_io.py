"""Dataset scanning, synthetic generation, checkpoint persistence."""

import numpy as np
import pytest

from cunets.data import (
    DatasetManifest,
    SyntheticSpec,
    generate_synthetic,
    load_checkpoint,
    load_image,
    save_checkpoint,
    save_image_u8,
    save_mask,
    scan_dataset,
    write_dataset,
)
from cunets.errors import CheckpointError, InputError
from cunets.metrics import dice
from cunets.models import build_model, count_params

pytestmark = pytest.mark.filterwarnings("ignore:ASPP input")


# ----------------------------------------------------------------- scanning


def _make_layout(root, split=None, n=3, masks_per=1, orphan=False):
    base = root / split if split else root
    (base / "images").mkdir(parents=True)
    (base / "masks").mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i in range(n):
        save_image_u8(base / "images" / f"case{i}.png", rng.random((32, 32)))
        for m in range(masks_per):
            suffix = f"_mask{m}" if masks_per > 1 else "_mask"
            save_mask(base / "masks" / f"case{i}{suffix}.png",
                      (rng.random((32, 32)) < 0.2).astype(np.uint8))
    if orphan:
        save_image_u8(base / "images" / "orphan.png", rng.random((32, 32)))


def test_scan_pairs_images_with_multiple_masks(tmp_path):
    _make_layout(tmp_path, n=2, masks_per=2)
    manifest = scan_dataset(tmp_path)
    assert len(manifest.entries) == 2
    assert all(len(e.mask_paths) == 2 for e in manifest.entries)
    assert [e.source_id for e in manifest.entries] == ["case0", "case1"]


def test_scan_warns_and_skips_orphans(tmp_path):
    _make_layout(tmp_path, n=2, orphan=True)
    with pytest.warns(UserWarning, match="orphan"):
        manifest = scan_dataset(tmp_path)
    assert len(manifest.entries) == 2


def test_scan_is_deterministic(tmp_path):
    _make_layout(tmp_path, n=4)
    a = scan_dataset(tmp_path)
    b = scan_dataset(tmp_path)
    assert a.to_json() == b.to_json()


def test_scan_split_layout(tmp_path):
    _make_layout(tmp_path, split="train", n=3)
    _make_layout(tmp_path, split="test", n=2)
    manifest = scan_dataset(tmp_path)
    assert len(manifest.split("train")) == 3
    assert len(manifest.split("test")) == 2
    assert all(e.source_id.startswith(("train/", "test/")) for e in manifest.entries)


def test_scan_empty_root_raises(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "masks").mkdir()
    with pytest.raises(InputError):
        scan_dataset(tmp_path)
    with pytest.raises(InputError):
        scan_dataset(tmp_path / "missing")


def test_manifest_json_roundtrip(tmp_path):
    _make_layout(tmp_path, n=2)
    manifest = scan_dataset(tmp_path, profile="none")
    again = DatasetManifest.from_json(manifest.to_json())
    assert again.to_json() == manifest.to_json()


def test_image_io_16bit_roundtrip(tmp_path):
    from PIL import Image

    arr = (np.random.default_rng(1).random((20, 20)) * 65535).astype(np.uint16)
    Image.fromarray(arr, mode="I;16").save(tmp_path / "img.png")
    back = load_image(tmp_path / "img.png")
    assert back.dtype == np.uint16
    np.testing.assert_array_equal(back, arr)


# ---------------------------------------------------------------- synthetic


def test_synthetic_bit_reproducible():
    a = generate_synthetic(SyntheticSpec(n_cases=5, size=64, seed=7))
    b = generate_synthetic(SyntheticSpec(n_cases=5, size=64, seed=7))
    for ca, cb in zip(a, b):
        np.testing.assert_array_equal(ca.image, cb.image)
        np.testing.assert_array_equal(ca.mask, cb.mask)


def test_synthetic_foreground_fraction_bounds():
    for case in generate_synthetic(SyntheticSpec(n_cases=20, size=64, seed=3)):
        frac = case.mask.mean()
        assert 0.0 < frac < 0.5


def test_synthetic_masks_self_consistent():
    for case in generate_synthetic(SyntheticSpec(n_cases=5, size=48, seed=1)):
        assert dice(case.mask, case.mask) == 1.0
        case.validate()


def test_synthetic_spec_validation():
    with pytest.raises(InputError):
        SyntheticSpec(n_cases=1, size=50)
    with pytest.raises(InputError):
        SyntheticSpec(n_cases=1, size=64, blob_radius_range=(40, 50))
    with pytest.raises(InputError):
        SyntheticSpec(n_cases=0, size=64)


def test_write_dataset_roundtrip(tmp_path):
    cases = generate_synthetic(SyntheticSpec(n_cases=3, size=32, seed=2))
    write_dataset(cases, tmp_path)
    manifest = scan_dataset(tmp_path)
    assert len(manifest.entries) == 3


# -------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_exact(tmp_path):
    graph = build_model("connected_unets_plus", 32, seed=9)
    x = np.random.default_rng(0).random((1, 32, 32, 1), dtype=np.float32)
    before = graph.forward(x)
    path = tmp_path / "model.npz"
    save_checkpoint(graph, path)
    loaded = load_checkpoint(path)
    assert count_params(loaded) == count_params(graph)
    np.testing.assert_array_equal(loaded.forward(x), before)
    for (ka, pa), (kb, pb) in zip(graph.net.named_parameters(), loaded.net.named_parameters()):
        assert ka == kb
        np.testing.assert_array_equal(pa.data, pb.data)


def test_checkpoint_preserves_buffers(tmp_path):
    graph = build_model("unet", 32, seed=1)
    buffers = dict(graph.net.named_buffers())
    key = next(iter(buffers))
    buffers[key][...] = 7.5
    save_checkpoint(graph, tmp_path / "m.npz")
    loaded = load_checkpoint(tmp_path / "m.npz")
    np.testing.assert_array_equal(dict(loaded.net.named_buffers())[key], 7.5)


def test_checkpoint_missing_file_raises(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.npz")


def test_checkpoint_variant_mismatch_names_both(tmp_path):
    graph = build_model("connected_unets_plus", 32, seed=0)
    save_checkpoint(graph, tmp_path / "m.npz")
    with pytest.raises(CheckpointError, match="connected_unets_plus.*plusplus"):
        load_checkpoint(tmp_path / "m.npz", expect_variant="connected_unets_plusplus")


def test_checkpoint_corrupt_file_raises(tmp_path):
    path = tmp_path / "bad.npz"
    path.write_bytes(b"this is not an archive")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_restores_options(tmp_path):
    graph = build_model("connected_unets_plus", 32, seed=0, aspp_merge="concat",
                        unit_order="bn_relu")
    save_checkpoint(graph, tmp_path / "m.npz")
    loaded = load_checkpoint(tmp_path / "m.npz")
    assert loaded.options == graph.options
    assert count_params(loaded) == count_params(graph)
