import struct
from importlib import resources

import numpy as np
import pytest

from gazehoi.data import load_annotations
from gazehoi.errors import DimensionError, SchemaError, UnknownClass
from gazehoi.features import (
    KIND_GAZE, KIND_HUMAN, KIND_OBJECT, KIND_RELATION, KIND_SEMANTIC, FeatureStore,
    FeatureStoreWriter, FrameCache, SemanticTable, StoreFeatures, SyntheticFeatures,
    class_base, pair_bundle, semantic_embedding, synth_gaze, synth_visual,
)
from gazehoi.geometry import spatial_mask

FIXTURE = resources.files("gazehoi") / "fixtures" / "two_person_park.json"


def test_visual_deterministic():
    a = synth_visual(3, 26, 4, seed=9)
    b = synth_visual(3, 26, 4, seed=9)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (2048,)


def test_visual_classes_separable():
    # measured over a slice of the class table: different classes are far apart
    for c1, c2 in [(0, 1), (5, 26), (26, 77), (9, 10)]:
        a = synth_visual(3, c1, 4, seed=9)
        b = synth_visual(3, c2, 4, seed=9)
        cos = a @ b / np.linalg.norm(a) / np.linalg.norm(b)
        assert cos < 0.5
    # while two tracks of one class stay close
    a, b = synth_visual(1, 26, 0, seed=9), synth_visual(2, 26, 3, seed=9)
    assert a @ b / np.linalg.norm(a) / np.linalg.norm(b) > 0.9


def test_visual_zero_perturbation_is_base():
    np.testing.assert_array_equal(synth_visual(3, 26, 4, 9, perturbation=0.0),
                                  class_base(26, 9))


def test_semantic_rows():
    table = SemanticTable()
    np.testing.assert_array_equal(table(26), table(26))
    assert table(26).shape == (200,)
    np.testing.assert_allclose(np.linalg.norm(table.table, axis=1), 1.0)
    with pytest.raises(UnknownClass):
        table(78)
    with pytest.raises(UnknownClass):
        semantic_embedding(-1)


def test_semantic_loaded_table_verbatim(tmp_path):
    rows = np.random.default_rng(0).standard_normal((78, 200)).astype(np.float32)
    path = tmp_path / "sem.npy"
    np.save(path, rows)
    table = SemanticTable.from_file(path)
    for c in (0, 26, 77):
        assert table(c).tobytes() == rows[c].tobytes()


def test_gaze_center_argmax():
    g = synth_gaze(None, (320, 240), (640, 480))
    r, c = np.unravel_index(np.argmax(g), g.shape)
    assert r in (31, 32) and c in (31, 32)
    assert g.max() <= 1.0


def test_gaze_absent_is_flat():
    g = synth_gaze(None, None, (640, 480))
    assert np.all(g == g[0, 0])
    assert g[0, 0] == 1 / 4096


def test_gaze_mass_matches_closed_form():
    # sum of an isotropic Gaussian on the integer lattice far from the edges
    # equals 2*pi*sigma^2 up to exp(-2 pi^2 sigma^2) terms
    for point in [(320, 240), (300.7, 251.3), (333, 222)]:
        g = synth_gaze(None, point, (640, 480), sigma=3.0)
        assert abs(g.sum() - 2 * np.pi * 9.0) < 1e-6


def test_gaze_outside_frame_rejected():
    with pytest.raises(ValueError):
        synth_gaze(None, (700, 10), (640, 480))


def test_gaze_flip_is_mirror():
    w, h = 640, 480
    g = synth_gaze(None, (100, 200), (w, h))
    gf = synth_gaze(None, (w - 100, 200), (w, h))
    np.testing.assert_allclose(g[:, ::-1], gf, atol=1e-12)


# ---------------------------------------------------------------- store

DIMS = (8, 8, 8, 4, 16)


def random_store(path, n, seed=0):
    rng = np.random.default_rng(seed)
    written = {}
    with FeatureStoreWriter(path, DIMS) as w:
        for k in range(n):
            kind = int(rng.integers(0, 5))
            key = (int(rng.integers(0, 5)), k, kind, int(rng.integers(0, 9)), int(rng.integers(0, 9)))
            vec = rng.standard_normal(DIMS[kind]).astype(np.float32)
            w.add(*key, vec)
            written[key] = vec
    return written


def test_store_roundtrip(tmp_path):
    path = tmp_path / "f.bin"
    written = random_store(path, 40)
    store = FeatureStore(path)
    assert len(store) == 40
    for key, vec in written.items():
        np.testing.assert_array_equal(store.get(*key), vec.astype(np.float64))


def test_store_offsets_consistent(tmp_path):
    path = tmp_path / "f.bin"
    written = random_store(path, 100, seed=3)
    store = FeatureStore(path)
    # every payload starts right after its key, records are contiguous
    pos = 5 + 8 + 5 * 4
    for key in written:  # insertion order == file order
        pos += 17
        assert store.offsets[key] == pos
        pos += 4 * DIMS[key[2]]
    assert pos == path.stat().st_size
    raw = path.read_bytes()
    for key, off in store.offsets.items():
        assert struct.unpack_from("<IIBII", raw, off - 17) == key


def test_store_truncated(tmp_path):
    path = tmp_path / "f.bin"
    random_store(path, 10)
    data = path.read_bytes()
    path.write_bytes(data[:-3])
    with pytest.raises(DimensionError):
        FeatureStore(path)


def test_store_bad_magic(tmp_path):
    path = tmp_path / "f.bin"
    random_store(path, 2)
    data = bytearray(path.read_bytes())
    data[:5] = b"NOPE!"
    path.write_bytes(bytes(data))
    with pytest.raises(SchemaError):
        FeatureStore(path)


def test_store_wrong_length_on_write(tmp_path):
    with FeatureStoreWriter(tmp_path / "f.bin", DIMS) as w:
        with pytest.raises(DimensionError):
            w.add(0, 0, KIND_HUMAN, 1, 0, np.zeros(9))


# ---------------------------------------------------------------- bundles


def test_bundle_mask_from_geometry_and_flip():
    (video,) = load_annotations(FIXTURE)
    src = SyntheticFeatures(seed=1, visual_dim=32)
    b = pair_bundle(src, video, 2, 1, 3)
    b.validate()
    np.testing.assert_array_equal(b.mask, spatial_mask(video.box(1, 2), video.box(3, 2)))
    f = pair_bundle(src, video, 2, 1, 3, flipped=True)
    np.testing.assert_array_equal(
        f.mask, spatial_mask(video.box(1, 2).flip(640), video.box(3, 2).flip(640)))
    np.testing.assert_array_equal(f.gaze, b.gaze[:, ::-1])
    np.testing.assert_array_equal(f.v_s, b.v_s)
    assert pair_bundle(src, video, 2, 2, 1).object_is_human


def test_store_source_matches_synthetic(tmp_path):
    (video,) = load_annotations(FIXTURE)
    src = SyntheticFeatures(seed=1, visual_dim=16, semantic=SemanticTable(dim=8))
    path = tmp_path / "f.bin"
    with FeatureStoreWriter(path, (16, 16, 16, 8, 4096)) as w:
        for c in range(78):
            w.add(0, 0, KIND_SEMANTIC, c, 0, src.semantic(c))
        for t in video.times:
            for tid in video.present(t):
                w.add(video.video_id, t, KIND_HUMAN, tid, 0, src.human(video, t, tid))
                w.add(video.video_id, t, KIND_OBJECT, tid, 0, src.object(video, t, tid))
            for h, o in video.candidate_pairs(t):
                w.add(video.video_id, t, KIND_RELATION, h, o, src.relation(video, t, h, o))
            for h in video.humans_at(t):
                w.add(video.video_id, t, KIND_GAZE, h, 0, src.gaze(video, t, h))
    stored = StoreFeatures(FeatureStore(path))
    a = FrameCache([video], src).frame(7, 3)
    b = FrameCache([video], stored).frame(7, 3)
    assert a.pairs == b.pairs and a.humans == b.humans
    for name in ("v_s", "v_o", "v_rel", "semantic", "gaze"):
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), rtol=1e-6, atol=1e-7)
    np.testing.assert_array_equal(a.mask, b.mask)
    with pytest.raises(UnknownClass):
        stored.semantic(78)


def test_frame_cache_shapes():
    (video,) = load_annotations(FIXTURE)
    cache = FrameCache([video], SyntheticFeatures(seed=0, visual_dim=32))
    fr = cache.frame(7, 1)
    n = len(video.candidate_pairs(1))
    assert fr.v_s.shape == (n, 32) and fr.mask.shape == (n, 2, 27, 27)
    assert fr.gaze.shape == (2, 64, 64)
    assert cache.frame(7, 1) is fr
    ff = cache.frame(7, 1, True)
    np.testing.assert_array_equal(ff.gaze, fr.gaze[:, :, ::-1])
