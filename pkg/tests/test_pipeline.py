import filecmp

import numpy as np
import pytest

from tdsv import storage
from tdsv.config import CorpusConfig, ExperimentConfig, GmmConfig, IvectorConfig
from tdsv.evaluation import NONTARGET_TYPES, compute_eer, read_scores
from tdsv.nnet.mlp import BnConfig
from tdsv.nnet.xvector import XvectorConfig
from tdsv.pipeline import PipelineError, bn_tap_layer, read_info, run_pipeline, write_info
from tdsv.synth import SyntheticCorpusSpec


def tiny(work_dir, **kw):
    spec = kw.pop("spec", SyntheticCorpusSpec(
        n_speakers=4, n_phrases=2, dim=6, min_frames=30, max_frames=40,
        n_background_speakers=6, n_background_phrases=2, n_background_utts=3))
    return ExperimentConfig(
        work_dir=str(work_dir), corpus=CorpusConfig(synthetic=spec),
        gmm=GmmConfig(components=4, em_iters=3), ivector=IvectorConfig(rank=4, iters=3),
        xvector=XvectorConfig(contexts=((-1, 0, 1), (0,)), frame_dims=(8, 8),
                              segment_dims=(6, 6), min_chunk=10, max_chunk=20, epochs=2,
                              batch_size=8),
        **kw)


@pytest.fixture(autouse=True)
def no_env_cache(monkeypatch):
    monkeypatch.delenv("TDSV_CACHE_DIR", raising=False)


class TestRun:
    def test_all_systems(self, tmp_path):
        res = run_pipeline(tiny(tmp_path / "w"))
        assert set(res.reports) == {"gmm-ubm", "ivector", "xvector", "score-fusion",
                                    "vector-fusion"}
        for system, rep in res.reports.items():
            assert all(rep.rows[t] is not None for t in NONTARGET_TYPES)
            assert res.score_files[system].exists()
            assert (tmp_path / "w" / "scores" / f"{system}.det").exists()
        text = (tmp_path / "w" / "report.txt").read_text()
        assert "[vector-fusion] features=mfcc" in text
        assert (tmp_path / "w" / "config.yaml").exists()

    def test_cache_reuse(self, tmp_path):
        cfg = tiny(tmp_path / "w", systems=["gmm-ubm"])
        first = run_pipeline(cfg)
        second = run_pipeline(cfg)
        assert first.executed and not second.executed
        assert set(second.reused) == set(first.executed)
        assert filecmp.cmp(first.score_files["gmm-ubm"], second.score_files["gmm-ubm"],
                           shallow=False)

    def test_changed_parameter_reruns_downstream(self, tmp_path):
        run_pipeline(tiny(tmp_path / "w", systems=["gmm-ubm"]))
        cfg = tiny(tmp_path / "w", systems=["gmm-ubm"])
        cfg.gmm.relevance = 5.0
        res = run_pipeline(cfg)
        assert res.executed == ["gmm-scores"]

    def test_byte_identical_fresh_runs(self, tmp_path):
        a = run_pipeline(tiny(tmp_path / "a", systems=["gmm-ubm", "ivector"]))
        b = run_pipeline(tiny(tmp_path / "b", systems=["gmm-ubm", "ivector"]))
        for system in a.score_files:
            assert filecmp.cmp(a.score_files[system], b.score_files[system], shallow=False)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a" / "cache").rglob("*")
                       if p.is_file())
        assert files
        for rel in files:
            assert filecmp.cmp(tmp_path / "a" / rel, tmp_path / "b" / rel, shallow=False), rel

    def test_env_cache_dir(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TDSV_CACHE_DIR", str(tmp_path / "shared"))
        run_pipeline(tiny(tmp_path / "w", systems=["gmm-ubm"]))
        assert any((tmp_path / "shared").glob("ubm-*/DONE"))

    def test_hash_mismatch_refused(self, tmp_path):
        cfg = tiny(tmp_path / "w", systems=["gmm-ubm"])
        run_pipeline(cfg)
        cache = tmp_path / "w" / "cache"
        ubm_path = next(cache.glob("ubm-*")) / "ubm.gmm"
        storage.save_model(ubm_path, storage.load_model(ubm_path), "someone-else")
        for d in cache.glob("gmm-scores-*"):
            (d / "DONE").unlink()
        with pytest.raises(PipelineError, match="stage gmm-scores failed"):
            run_pipeline(cfg)
        assert run_pipeline(cfg, force=True).executed == ["gmm-scores"]

    def test_stage_failure_names_stage(self, tmp_path):
        cfg = tiny(tmp_path / "w", systems=["gmm-ubm"])
        cfg.gmm.components = 100000
        with pytest.raises(PipelineError, match="stage ubm failed"):
            run_pipeline(cfg)

    def test_no_speaker_information_is_chance(self, tmp_path):
        spec = SyntheticCorpusSpec(n_speakers=10, n_phrases=2, dim=6, speaker_scale=0.0,
                                   min_frames=30, max_frames=40, n_background_speakers=6,
                                   n_background_phrases=2, n_test=4)
        res = run_pipeline(tiny(tmp_path / "w", spec=spec, systems=["gmm-ubm"]))
        s = read_scores(res.score_files["gmm-ubm"])
        eer, _ = compute_eer(s.by_type("genuine"), s.by_type("impostor-correct"))
        assert abs(eer - 0.5) < 0.1

    def test_bn_features(self, tmp_path):
        cfg = tiny(tmp_path / "w", systems=["gmm-ubm"], features="bn",
                   bn=BnConfig(depth=2, width=12, epochs=1, tap_layer=1, pca_dim=5,
                               batch_start=64, batch_end=64))
        res = run_pipeline(cfg)
        assert "bn" in res.executed
        bn_dir = next((tmp_path / "w" / "cache").glob("bn-*"))
        feats = storage.read_feature_archive(bn_dir / "evaluation.feats")
        assert next(iter(feats.values())).shape[1] == 5

    @pytest.mark.parametrize("task,layer", [("spkr", 4), ("spkr+phrase", 4), ("phone", 2),
                                            ("stcl", 2), ("utcl", 2)])
    def test_default_tap_layer(self, task, layer):
        assert bn_tap_layer(ExperimentConfig(bn_task=task)) == layer
        assert bn_tap_layer(ExperimentConfig(bn_task=task, bn=BnConfig(tap_layer=3))) == 3

    def test_phone_task_needs_files(self, tmp_path):
        cfg = tiny(tmp_path / "w", systems=["gmm-ubm"], features="bn", bn_task="phone")
        with pytest.raises(PipelineError, match="phone"):
            run_pipeline(cfg)

    def test_file_corpus(self, tmp_path):
        first = run_pipeline(tiny(tmp_path / "a", systems=["gmm-ubm"]))
        corpus_dir = next((tmp_path / "a" / "cache").glob("corpus-*"))
        cfg = tiny(tmp_path / "b", systems=["gmm-ubm"])
        cfg.corpus = CorpusConfig(synthetic=None,
                                  background=str(corpus_dir / "background.feats"),
                                  background_info=str(corpus_dir / "background.info"),
                                  evaluation=str(corpus_dir / "evaluation.feats"),
                                  enroll=str(corpus_dir / "enroll.txt"),
                                  trials=str(corpus_dir / "trials.txt"))
        second = run_pipeline(cfg)
        np.testing.assert_array_equal(read_scores(first.score_files["gmm-ubm"]).scores,
                                      read_scores(second.score_files["gmm-ubm"]).scores)


class TestInfoFiles:
    def test_round_trip(self, tmp_path):
        info = {"u1": ("spk1", "p1"), "m": ["a", "b", "c"]}
        write_info(tmp_path / "i.txt", info)
        assert read_info(tmp_path / "i.txt") == {"u1": ("spk1", "p1"), "m": ("a", "b", "c")}
