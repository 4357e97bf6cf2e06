import numpy as np
import pytest

from qivr import storage
from qivr.baseline import FvStarDatabase, ShotRecord, binarize_fv
from qivr.bloom import FilterConfig, SceneFilter
from qivr.embedding import DescriptorSet, DiagonalGmm, PcaModel
from qivr.errors import FormatError
from qivr.hashing import HashFamilyConfig, sample_hash_bank, train_vq_bank
from qivr.index import (PIPELINE_BF_GD, PIPELINE_BF_PI, InvertedIndex,
                        compute_idf)

RNG = np.random.default_rng(31)


def _pca(d=4):
    basis = np.linalg.qr(RNG.standard_normal((d, d)))[0]
    return PcaModel(mean=RNG.standard_normal(d), basis=basis)


def _gmm(k=3, d=4):
    w = RNG.random(k) + 0.1
    return DiagonalGmm(w / w.sum(), RNG.standard_normal((k, d)),
                       RNG.random((k, d)) + 0.5)


def _bank(family, seed=7):
    cfg = HashFamilyConfig(family, "gbh", M=3, n=4, input_dim=4, seed=seed)
    if family == "vq":
        pools = [RNG.standard_normal((40, 4)) for _ in range(3)]
        return train_vq_bank(pools, cfg)
    return sample_hash_bank(cfg)


def _roundtrip(to_bytes, from_bytes, value):
    blob = to_bytes(value)
    again = to_bytes(from_bytes(blob))
    assert blob == again
    return from_bytes(blob)


# -------------------------------------------------------- binary formats

def test_descriptor_round_trip():
    dset = DescriptorSet("f1", RNG.standard_normal((6, 5)).astype(np.float32))
    out = _roundtrip(storage.descriptors_to_bytes,
                     lambda b: storage.descriptors_from_bytes(b, "f1"), dset)
    np.testing.assert_array_equal(out.vectors, dset.vectors.astype(np.float64))


def test_empty_descriptor_round_trip():
    dset = DescriptorSet("none", np.zeros((0, 3)))
    out = _roundtrip(storage.descriptors_to_bytes,
                     lambda b: storage.descriptors_from_bytes(b, "none"), dset)
    assert out.n == 0 and out.dim == 3


def test_pca_round_trip():
    model = _pca()
    out = _roundtrip(storage.model_to_bytes, storage.model_from_bytes, model)
    assert isinstance(out, PcaModel)
    assert out.mean.dtype == np.float64


def test_gmm_round_trip():
    model = _gmm()
    out = _roundtrip(storage.model_to_bytes, storage.model_from_bytes, model)
    assert isinstance(out, DiagonalGmm)
    np.testing.assert_array_equal(out.weights,
                                  model.weights.astype(np.float32).astype(np.float64))


@pytest.mark.parametrize("family", ["lsh_c", "lsh_s", "lsh_b", "vq"])
def test_bank_round_trip(family):
    bank = _bank(family)
    out = _roundtrip(storage.bank_to_bytes, storage.bank_from_bytes, bank)
    assert out.config == bank.config
    # hashes behave identically after the round trip
    x = RNG.standard_normal(4)
    assert [h.bucket(x) for h in out.hashes] == [h.bucket(x) for h in bank.hashes]


@pytest.mark.parametrize("partitioned", [True, False])
def test_filters_round_trip(partitioned):
    if partitioned:
        cfg = FilterConfig(partitioned=True, M=3, L_p=16)
    else:
        cfg = FilterConfig(partitioned=False, M=3, L_np=64)
    filters = []
    for i in range(4):
        f = SceneFilter(f"s{i}", cfg)
        for bit in RNG.integers(0, cfg.n_bits, size=10):
            f.set_bit(int(bit))
        filters.append(f)
    blob = storage.filters_to_bytes(filters, cfg)
    loaded_cfg, loaded = storage.filters_from_bytes(blob)
    assert loaded_cfg == cfg
    assert storage.filters_to_bytes(loaded, loaded_cfg) == blob
    for a, b in zip(loaded, filters):
        assert a.scene_id == b.scene_id
        np.testing.assert_array_equal(a.words, b.words)
        assert a.popcount == b.popcount


def test_filters_reject_mixed_configs():
    a = SceneFilter("a", FilterConfig(partitioned=True, M=3, L_p=16))
    b = SceneFilter("b", FilterConfig(partitioned=True, M=3, L_p=32))
    with pytest.raises(FormatError):
        storage.filters_to_bytes([a, b], a.config)


def _toy_index(pipeline=PIPELINE_BF_GD, partitioned=True):
    if partitioned:
        fcfg = FilterConfig(partitioned=True, M=3, L_p=16)
        nbits = 48
    else:
        fcfg = FilterConfig(partitioned=False, M=3, L_np=64)
        nbits = 64
    hcfg = HashFamilyConfig("lsh_s", "gbh", M=3, n=4 if partitioned else 6,
                            input_dim=4, seed=2)
    keys = np.sort(RNG.choice(nbits, size=9, replace=False)).astype(np.int64)
    lists = [np.sort(RNG.choice(5, size=int(RNG.integers(1, 4)), replace=False))
             for _ in keys]
    offsets = np.zeros(len(keys) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(l) for l in lists])
    index = InvertedIndex(
        pipeline=pipeline, filter_config=fcfg, hash_config=hcfg,
        scene_ids=tuple(f"scene{i}" for i in range(5)),
        keys=keys, offsets=offsets,
        ordinals=np.concatenate(lists).astype(np.int32),
        fingerprints=(bytes(range(32)), bytes(32), b"\xff" * 32))
    compute_idf(index)
    return index


@pytest.mark.parametrize("pipeline", [PIPELINE_BF_GD, PIPELINE_BF_PI])
@pytest.mark.parametrize("partitioned", [True, False])
def test_index_round_trip(pipeline, partitioned):
    index = _toy_index(pipeline, partitioned)
    blob = storage.index_to_bytes(index)
    loaded = storage.index_from_bytes(blob)
    assert storage.index_to_bytes(loaded) == blob
    assert loaded.pipeline == index.pipeline
    assert loaded.scene_ids == index.scene_ids
    assert loaded.fingerprints == index.fingerprints
    np.testing.assert_array_equal(loaded.keys, index.keys)
    np.testing.assert_array_equal(loaded.offsets, index.offsets)
    np.testing.assert_array_equal(loaded.ordinals, index.ordinals)
    np.testing.assert_array_equal(loaded.idf, index.idf)
    np.testing.assert_array_equal(loaded.scene_sq_norm, index.scene_sq_norm)


def test_index_rejects_tampered_idf():
    blob = bytearray(storage.index_to_bytes(_toy_index()))
    blob[-4:] = b"\xff\xff\xff\xff"  # idf block sits at the tail
    with pytest.raises(FormatError):
        storage.index_from_bytes(bytes(blob))


@pytest.mark.parametrize("granularity", ["scene", "shot", "frame"])
def test_fvstar_round_trip(granularity):
    rows = np.vstack([binarize_fv(RNG.standard_normal(12)) for _ in range(6)])
    db = FvStarDatabase(granularity, 3, 4,
                        tuple(f"e{i}" for i in range(6)),
                        tuple(f"p{i % 2}" for i in range(6)), rows, skipped=2)
    out = _roundtrip(storage.fvstar_to_bytes, storage.fvstar_from_bytes, db)
    assert out.granularity == granularity
    assert out.owners == db.owners
    assert out.parents == db.parents
    np.testing.assert_array_equal(out.matrix, db.matrix)


# ------------------------------------------------------------- bad input

def test_bad_magic_rejected():
    blob = storage.descriptors_to_bytes(DescriptorSet("x", np.ones((1, 2))))
    with pytest.raises(FormatError):
        storage.descriptors_from_bytes(b"XXXX" + blob[4:], "x")


def test_truncation_rejected():
    blob = storage.model_to_bytes(_pca())
    with pytest.raises(FormatError):
        storage.model_from_bytes(blob[:-3])


def test_trailing_bytes_rejected():
    blob = storage.bank_to_bytes(_bank("lsh_c"))
    with pytest.raises(FormatError):
        storage.bank_from_bytes(blob + b"\x00")


def test_unsupported_version_rejected():
    blob = bytearray(storage.descriptors_to_bytes(DescriptorSet("x", np.ones((1, 2)))))
    blob[4] = 99  # version field follows the magic
    with pytest.raises(FormatError):
        storage.descriptors_from_bytes(bytes(blob), "x")


def test_negative_seed_rejected():
    cfg = HashFamilyConfig("lsh_c", "gbh", M=3, n=4, input_dim=4, seed=7)
    bank = sample_hash_bank(cfg)
    object.__setattr__(bank.config, "seed", -1)
    with pytest.raises(FormatError):
        storage.bank_to_bytes(bank)


# ------------------------------------------------------------ file layer

def test_file_round_trip_and_stem_source_id(tmp_path):
    dset = DescriptorSet("frame7", RNG.standard_normal((3, 4)).astype(np.float32))
    path = storage.write_descriptors(tmp_path / "deep" / "frame7.qivd", dset)
    out = storage.read_descriptors(path)
    assert out.source_id == "frame7"  # defaults to the file stem
    np.testing.assert_array_equal(out.vectors, dset.vectors.astype(np.float64))


def test_model_digests_are_stable_and_sensitive():
    pca, gmm, bank = _pca(), _gmm(), _bank("lsh_s")
    first = storage.model_digests(pca, gmm, bank)
    second = storage.model_digests(pca, gmm, bank)
    assert first == second
    assert all(len(d) == 32 for d in first)
    other = storage.model_digests(_pca(), gmm, bank)
    assert other[0] != first[0]
    assert other[1:] == first[1:]


def test_make_bundle_carries_digests():
    pca, gmm, bank = _pca(), _gmm(), _bank("lsh_b")
    bundle = storage.make_bundle(pca, gmm, bank)
    assert bundle.digests == storage.model_digests(pca, gmm, bank)


# ------------------------------------------------------------- manifests

def test_manifest_grouping_and_path_resolution(tmp_path):
    text = ("# comment line\n"
            "\n"
            "sceneA\tf0\tdata/f0.qivd\tshot0\n"
            "sceneA\tf1\tdata/f1.qivd\tshot0\n"
            "sceneA\tf2\tdata/f2.qivd\tshot1\n"
            "sceneB\tf0\tdata/g0.qivd\tshot2\n")
    path = tmp_path / "manifest.tsv"
    path.write_text(text)
    scenes, shots = storage.read_manifest(path)
    assert [s.scene_id for s in scenes] == ["sceneA", "sceneB"]
    assert len(scenes[0].frame_refs) == 3
    fid, resolved = scenes[0].frame_refs[0]
    assert fid == "f0"
    assert resolved == str((tmp_path / "data" / "f0.qivd").resolve())
    assert [(s.shot_id, s.parent_scene) for s in shots] == [
        ("shot0", "sceneA"), ("shot1", "sceneA"), ("shot2", "sceneB")]
    assert len(shots[0].frame_refs) == 2


def test_manifest_without_shot_column(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("s\tf\tx.qivd\n")
    scenes, shots = storage.read_manifest(path)
    assert len(scenes) == 1 and shots == []


def test_manifest_rejects_duplicates_and_bad_columns(tmp_path):
    path = tmp_path / "m.tsv"
    path.write_text("s\tf\tx.qivd\ns\tf\ty.qivd\n")
    with pytest.raises(FormatError):
        storage.read_manifest(path)
    path.write_text("s\tf\n")
    with pytest.raises(FormatError):
        storage.read_manifest(path)


def test_frame_loader_reads_by_ref(tmp_path):
    dset = DescriptorSet("fX", np.ones((2, 2), dtype=np.float32))
    p = storage.write_descriptors(tmp_path / "a.qivd", dset)
    out = storage.frame_loader(("fX", str(p)))
    assert out.source_id == "fX"
    assert out.n == 2


def test_read_queries(tmp_path):
    path = tmp_path / "q.tsv"
    path.write_text("q0\ta.qivd\nq1\tb.qivd\n")
    pairs = storage.read_queries(path)
    assert [qid for qid, _ in pairs] == ["q0", "q1"]
    assert pairs[0][1] == str((tmp_path / "a.qivd").resolve())
    path.write_text("q0\ta.qivd\nq0\tb.qivd\n")
    with pytest.raises(FormatError):
        storage.read_queries(path)


def test_read_ground_truth(tmp_path):
    path = tmp_path / "gt.tsv"
    path.write_text("q0\tsceneA\nq1\tsceneA,sceneB\n")
    truth = storage.read_ground_truth(path)
    assert truth == {"q0": ("sceneA",), "q1": ("sceneA", "sceneB")}
    path.write_text("q0\t,\n")
    with pytest.raises(FormatError):
        storage.read_ground_truth(path)


def test_read_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# settings\npipeline = bf_pi\nM=8\n\nalpha =  0.25\n")
    assert storage.read_config_file(path) == {
        "pipeline": "bf_pi", "M": "8", "alpha": "0.25"}
    path.write_text("pipeline bf_pi\n")
    with pytest.raises(FormatError):
        storage.read_config_file(path)
