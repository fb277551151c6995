import numpy as np
import pytest

from tdsv.gmm import DiagGmm
from tdsv.ivector import TotalVariabilityModel
from tdsv.nnet.mlp import BnConfig, MlpNetwork, build_mlp
from tdsv.nnet.pca import PcaProjection, train_pca
from tdsv.nnet.xvector import XvectorConfig, XvectorNetwork, build_xvector_net
from tdsv.plda import PldaModel, train_spherical_norm
from tdsv.storage import (FormatError, archive_config_hash, load_model, model_config_hash,
                          read_container, read_feature, read_feature_archive, read_index,
                          read_vector_archive, save_model, write_container,
                          write_feature_archive, write_vector_archive)


def f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_gmm(rng):
    w = rng.uniform(0.5, 1.0, 4)
    return DiagGmm(w / w.sum(), rng.standard_normal((4, 3)), rng.uniform(0.5, 2.0, (4, 3)))


class TestModels:
    def test_gmm(self, rng, tmp_path):
        g = make_gmm(rng)
        save_model(tmp_path / "m", g, "abc")
        back = load_model(tmp_path / "m", DiagGmm, "abc")
        np.testing.assert_array_equal(back.means, g.means)
        np.testing.assert_array_equal(back.variances, g.variances)
        np.testing.assert_array_equal(back.weights, g.weights)

    def test_tv(self, rng, tmp_path):
        tv = TotalVariabilityModel.from_ubm(make_gmm(rng), rng.standard_normal((12, 2)))
        save_model(tmp_path / "m", tv)
        back = load_model(tmp_path / "m", TotalVariabilityModel)
        np.testing.assert_array_equal(back.T, tv.T)
        assert back.ubm_hash == tv.ubm_hash

    def test_plda_with_norm(self, rng, tmp_path):
        x = rng.standard_normal((30, 3))
        model = PldaModel(np.ones(3), 2 * np.eye(3), np.eye(3), train_spherical_norm(x, 2))
        save_model(tmp_path / "m", model)
        back = load_model(tmp_path / "m", PldaModel)
        np.testing.assert_array_equal(back.between, model.between)
        assert back.norm.iterations == 2
        np.testing.assert_array_equal(back.norm.whiteners[1], model.norm.whiteners[1])

    def test_plda_without_norm(self, tmp_path):
        save_model(tmp_path / "m", PldaModel(np.zeros(2), np.eye(2), np.eye(2)))
        assert load_model(tmp_path / "m").norm is None

    def test_mlp(self, rng, tmp_path):
        net = build_mlp(5, [3, 4], BnConfig(depth=2, width=6), rng)
        save_model(tmp_path / "m", net)
        back = load_model(tmp_path / "m", MlpNetwork)
        assert len(back.heads) == 2
        for a, b in zip(net.parameters(), back.parameters()):
            np.testing.assert_array_equal(b, f32(a))

    def test_xvector(self, rng, tmp_path):
        cfg = XvectorConfig(contexts=((-1, 0, 1), (0,)), frame_dims=(4, 5), segment_dims=(3, 2))
        net = build_xvector_net(3, 2, cfg, rng)
        net.classes = ["a", "b"]
        save_model(tmp_path / "m", net)
        back = load_model(tmp_path / "m", XvectorNetwork)
        assert back.classes == ["a", "b"] and back.contexts == [[-1, 0, 1], [0]]
        for a, b in zip(net.parameters(), back.parameters()):
            np.testing.assert_array_equal(b, f32(a))

    def test_pca(self, rng, tmp_path):
        pca = train_pca(rng.standard_normal((50, 4)), 2)
        save_model(tmp_path / "m", pca)
        back = load_model(tmp_path / "m", PcaProjection)
        np.testing.assert_array_equal(back.basis, pca.basis)

    def test_config_hash(self, rng, tmp_path):
        save_model(tmp_path / "m", make_gmm(rng), "h1")
        assert model_config_hash(tmp_path / "m") == "h1"
        with pytest.raises(FormatError, match="expected 'h2'"):
            load_model(tmp_path / "m", config_hash="h2")


class TestContainerErrors:
    def test_unknown_format(self, tmp_path):
        (tmp_path / "m").write_bytes(b"NOTATDSVxxxx")
        with pytest.raises(FormatError, match="unknown format"):
            read_container(tmp_path / "m")

    def test_tag_mismatch(self, rng, tmp_path):
        save_model(tmp_path / "m", make_gmm(rng))
        with pytest.raises(FormatError, match="tag mismatch"):
            load_model(tmp_path / "m", PldaModel)

    def test_truncated(self, rng, tmp_path):
        save_model(tmp_path / "m", make_gmm(rng))
        data = (tmp_path / "m").read_bytes()
        (tmp_path / "m").write_bytes(data[:-5])
        with pytest.raises(FormatError, match="truncated"):
            load_model(tmp_path / "m")

    def test_trailing_bytes(self, rng, tmp_path):
        save_model(tmp_path / "m", make_gmm(rng))
        with open(tmp_path / "m", "ab") as fh:
            fh.write(b"\0")
        with pytest.raises(FormatError, match="trailing"):
            load_model(tmp_path / "m")

    def test_version(self, tmp_path):
        write_container(tmp_path / "m", b"TDSVGMM1", {}, {})
        data = bytearray((tmp_path / "m").read_bytes())
        data[8] = 9
        (tmp_path / "m").write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version 9"):
            read_container(tmp_path / "m")

    def test_unsupported_object(self, tmp_path):
        with pytest.raises(FormatError):
            save_model(tmp_path / "m", object())


class TestArchives:
    def test_feature_round_trip(self, rng, tmp_path):
        feats = {f"u{i}": rng.standard_normal((10 + i, 3)) for i in range(5)}
        write_feature_archive(tmp_path / "a.feats", feats.items(), "cfg1")
        back = read_feature_archive(tmp_path / "a.feats")
        assert list(back) == list(feats)
        for k in feats:
            np.testing.assert_array_equal(back[k], f32(feats[k]))
        np.testing.assert_array_equal(read_feature(tmp_path / "a.feats", "u3"), f32(feats["u3"]))
        assert archive_config_hash(tmp_path / "a.feats") == "cfg1"
        offsets, _ = read_index(tmp_path / "a.feats")
        assert offsets["u0"] == 0

    def test_random_access_missing(self, rng, tmp_path):
        write_feature_archive(tmp_path / "a.feats", [("u", np.zeros((2, 2)))])
        with pytest.raises(KeyError):
            read_feature(tmp_path / "a.feats", "v")

    def test_feature_must_be_2d(self, tmp_path):
        with pytest.raises(FormatError):
            write_feature_archive(tmp_path / "a.feats", [("u", np.zeros(3))])

    def test_corrupt_record(self, tmp_path):
        write_feature_archive(tmp_path / "a.feats", [("u", np.zeros((2, 2)))])
        (tmp_path / "a.feats").write_bytes(b"garbage!" + (tmp_path / "a.feats").read_bytes())
        with pytest.raises(FormatError, match="magic"):
            read_feature_archive(tmp_path / "a.feats")

    def test_vector_round_trip(self, rng, tmp_path):
        vecs = {f"m{i}": rng.standard_normal(7) for i in range(4)}
        write_vector_archive(tmp_path / "v.vec", vecs.items(), "h")
        back = read_vector_archive(tmp_path / "v.vec")
        for k in vecs:
            np.testing.assert_array_equal(back[k], f32(vecs[k]))
        assert archive_config_hash(tmp_path / "v.vec") == "h"
