import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from floodfuse.tilestore import (
    BundleError,
    SceneSpec,
    TileBundle,
    normalize_sar,
    patch_offsets,
    patchify,
    read_bundle,
    synth_scene,
    write_bundle,
)


def small_bundle(h=8, w=8, prior=None, seed=0):
    rng = np.random.default_rng(seed)
    return TileBundle(
        sar=rng.random((2, h, w)).astype(np.float32),
        optical=rng.random((3, h, w)).astype(np.float32),
        mask=(rng.random((1, h, w)) > 0.5).astype(np.float32),
        prior=None if prior is None else rng.random((prior, h, w)).astype(np.float32),
        meta={"id": "t0", "source": "test"},
    )


def test_write_plane_files(tmp_path):
    manifest = write_bundle(small_bundle(), tmp_path)
    planes = {k: v for k, v in manifest.items() if k.endswith(".f32")}
    assert sorted(planes) == ["mask_0.f32", "optical_0.f32", "optical_1.f32", "optical_2.f32", "sar_0.f32", "sar_1.f32"]
    assert set(planes.values()) == {8 * 8 * 4}
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert meta["H"] == 8 and meta["W"] == 8 and meta["version"] == 1
    assert meta["has_prior"] is False and meta["C_p"] == 0


def test_nonbinary_mask_rejected_before_writing(tmp_path):
    b = small_bundle()
    b.mask[0, 0, 0] = 0.5
    with pytest.raises(BundleError, match="mask not binary"):
        write_bundle(b, tmp_path / "out")
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize("prior", [None, 3, 4])
def test_round_trip_bit_exact(tmp_path, prior):
    b = small_bundle(12, 20, prior=prior, seed=3)
    write_bundle(b, tmp_path)
    r = read_bundle(tmp_path)
    for name in ("sar", "optical", "mask", "prior"):
        a, c = getattr(b, name), getattr(r, name)
        if a is None:
            assert c is None
        else:
            assert a.tobytes() == c.tobytes()
    # file bytes are little-endian f32 row-major
    raw = np.frombuffer((tmp_path / "sar_1.f32").read_bytes(), dtype="<f4").reshape(12, 20)
    assert np.array_equal(raw, b.sar[1])


def test_truncated_plane(tmp_path):
    write_bundle(small_bundle(), tmp_path)
    f = tmp_path / "optical_1.f32"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(BundleError, match="byte length"):
        read_bundle(tmp_path)


def test_meta_size_mismatch(tmp_path):
    write_bundle(small_bundle(4, 4), tmp_path)
    meta = json.loads((tmp_path / "meta.json").read_text())
    meta["H"] = meta["W"] = 256
    (tmp_path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(BundleError, match="byte length"):
        read_bundle(tmp_path)


def test_missing_meta(tmp_path):
    with pytest.raises(BundleError, match="meta.json"):
        read_bundle(tmp_path)


def test_non_finite_plane(tmp_path):
    write_bundle(small_bundle(), tmp_path)
    arr = np.zeros((8, 8), dtype="<f4")
    arr[2, 2] = np.nan
    (tmp_path / "sar_0.f32").write_bytes(arr.tobytes())
    with pytest.raises(BundleError, match="non-finite"):
        read_bundle(tmp_path)


def test_normalize_sar():
    assert np.all(normalize_sar(np.full((2, 3, 3), -25.0)) == 0.0)
    assert np.all(normalize_sar(np.full((2, 3, 3), 0.0)) == 1.0)
    assert np.allclose(normalize_sar(np.full((2, 1, 1), -12.5)), 0.5)
    assert np.all(normalize_sar(np.array([[[-40.0, 5.0]]] * 2)) == np.array([[[0.0, 1.0]]] * 2))
    with pytest.raises(ValueError):
        normalize_sar(np.array([[[np.nan]]] * 2))


def test_patchify_counts():
    assert len(patchify(small_bundle(256, 256), 256, 256)) == 1
    assert len(patchify(small_bundle(512, 512), 256, 256)) == 4
    offs = patch_offsets(300, 300, 256, 256)
    assert offs == [(0, 0), (0, 44), (44, 0), (44, 44)]
    with pytest.raises(ValueError):
        patchify(small_bundle(8, 8), 16, 16)


def test_patchify_content():
    b = small_bundle(10, 12, prior=4)
    patches = patchify(b, 8, 8)
    assert [p.shape for p in patches] == [(8, 8)] * 4
    last = patches[-1]
    assert np.array_equal(last.sar, b.sar[:, 2:10, 4:12])
    assert np.array_equal(last.prior, b.prior[:, 2:10, 4:12])


@settings(max_examples=40, deadline=None)
@given(h=st.integers(4, 40), w=st.integers(4, 40), patch=st.integers(1, 4), stride=st.integers(1, 4))
def test_patchify_covers_every_pixel(h, w, patch, stride):
    stride = min(stride, patch)
    covered = np.zeros((h, w), dtype=bool)
    for y, x in patch_offsets(h, w, patch, stride):
        assert 0 <= y <= h - patch and 0 <= x <= w - patch
        covered[y : y + patch, x : x + patch] = True
    assert covered.all()


def test_synth_extremes():
    assert synth_scene(SceneSpec(seed=1, size=(16, 16), water_fraction=0.0)).mask.sum() == 0
    assert synth_scene(SceneSpec(seed=1, size=(16, 16), water_fraction=1.0)).mask.min() == 1


def test_synth_deterministic(tmp_path):
    spec = SceneSpec(seed=7, size=(32, 48))
    a, b = synth_scene(spec), synth_scene(spec)
    write_bundle(a, tmp_path / "a")
    write_bundle(b, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    assert synth_scene(SceneSpec(seed=8, size=(32, 48))).sar.tobytes() != a.sar.tobytes()


@settings(max_examples=20, deadline=None)
@given(frac=st.floats(0, 1), seed=st.integers(0, 1000))
def test_synth_water_fraction(frac, seed):
    b = synth_scene(SceneSpec(seed=seed, size=(24, 24), water_fraction=frac))
    assert abs(b.mask.mean() - frac) <= 1 / (24 * 24)


def test_synth_properties():
    b = synth_scene(SceneSpec(seed=3, size=(64, 64), water_fraction=0.4, cloud_fraction=0.2, speckle_strength=0.0))
    for arr in (b.sar, b.optical, b.prior, b.mask):
        assert arr.min() >= 0 and arr.max() <= 1
    water = b.mask[0] == 1
    # noise-free water backscatter sits in the dark band
    assert 0.05 <= b.sar[0][water].mean() <= 0.15
    assert b.sar[0][~water].mean() > 0.3
    # clouds only in the prior: white pixels never appear in the target
    cloudy = np.all(b.prior[:3] == 1.0, axis=0)
    assert abs(cloudy.mean() - 0.2) < 1e-3
    assert not np.all(b.optical == 1.0, axis=0).any()


def test_synth_validation():
    with pytest.raises(ValueError):
        synth_scene(SceneSpec(water_fraction=2.0))
    with pytest.raises(ValueError):
        synth_scene(SceneSpec(terrain_octaves=0))
