"""End-to-end experiment runner with a content-addressed stage cache.

Every stage output lives in ``<cache>/<stage>-<hash>/`` where the hash covers
the stage name, its configuration subtree and the hashes of its inputs. A
``DONE`` marker is written last, so interrupted stages are recomputed. Stage
outputs are always read back from disk before use, which keeps fresh and
cached runs numerically identical.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import storage
from .config import ExperimentConfig, config_hash, dump_config
from .evaluation import ScoreSet, fuse_scores, parse_trials, read_scores, report, write_det, \
    write_scores, write_trials
from .gmm import DiagGmm, accumulate_bw_stats, llr_score, map_adapt, train_ubm_em
from .ivector import TotalVariabilityModel, extract_ivector, train_tv_em
from .nnet.labels import read_class_table, read_phone_labels, utterance_labels
from .nnet.mlp import MlpNetwork, extract_deep_features, train_bn_dnn
from .nnet.pca import PcaProjection, project_pca, train_pca
from .nnet.xvector import XvectorNetwork, extract_xvector, train_xvector_net
from .plda import PldaModel, apply_spherical_norm, plda_score_batch, train_plda, \
    train_spherical_norm
from .synth import generate_synthetic_corpus
from .tcl import stcl_labels, utcl_labels

log = logging.getLogger(__name__)

FUSED = ("ivector", "xvector")  # both fusion variants combine the i- and x-vector systems


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineResult:
    reports: dict  # system -> MetricReport
    score_files: dict  # system -> Path
    executed: list = field(default_factory=list)
    reused: list = field(default_factory=list)


def cache_root(cfg: ExperimentConfig) -> Path:
    env = os.environ.get("TDSV_CACHE_DIR")
    return Path(env) if env else Path(cfg.work_dir) / "cache"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]


def write_info(path, info: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt, fields in info.items():
            fh.write(" ".join([utt, *fields]) + "\n")


def read_info(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return {p[0]: tuple(p[1:]) for p in (line.split() for line in fh) if p}


class _Runner:
    def __init__(self, cfg: ExperimentConfig, force: bool = False):
        self.cfg = cfg
        self.force = force
        self.root = cache_root(cfg)
        self.executed, self.reused = [], []

    def stage(self, name: str, params, inputs: list, build) -> tuple[Path, str]:
        """Run `build(out_dir, stage_hash)` unless a finished copy is cached."""
        h = config_hash(name, params, list(inputs))
        out = self.root / f"{name}-{h}"
        if (out / "DONE").exists():
            self.reused.append(name)
            return out, h
        if out.exists():
            shutil.rmtree(out)
        out.mkdir(parents=True)
        log.info("stage %s (%s)", name, h)
        try:
            build(out, h)
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(f"stage {name} failed: {exc}") from exc
        (out / "DONE").write_text(h + "\n", encoding="utf-8")
        self.executed.append(name)
        return out, h

    def load(self, path, cls, producer: str):
        if not Path(path).exists():
            raise PipelineError(f"missing dependency artifact {path}")
        return storage.load_model(path, cls, None if self.force else producer)

    def features(self, path, producer: str) -> dict:
        if not Path(path).exists():
            raise PipelineError(f"missing dependency artifact {path}")
        if not self.force and storage.archive_config_hash(path) != producer:
            raise PipelineError(f"{path}: produced by a different configuration")
        return storage.read_feature_archive(path)

    def vectors(self, path, producer: str) -> dict:
        if not self.force and storage.archive_config_hash(path) != producer:
            raise PipelineError(f"{path}: produced by a different configuration")
        return storage.read_vector_archive(path)

    def seed(self, name: str) -> int:
        """Per-stage integer seed derived from the master seed."""
        digest = hashlib.sha256(f"{self.cfg.seed}:{name}".encode()).digest()
        return int.from_bytes(digest[:4], "little")


# ---------------------------------------------------------------- corpus

def _corpus_stage(run: _Runner):
    c = run.cfg.corpus
    if c.synthetic is not None:
        def build(out, h):
            corpus = generate_synthetic_corpus(c.synthetic)
            storage.write_feature_archive(out / "background.feats", corpus.background.items(), h)
            storage.write_feature_archive(out / "evaluation.feats", corpus.evaluation.items(), h)
            write_info(out / "background.info", corpus.background_info)
            write_info(out / "enroll.txt", {m: u for m, u in corpus.enroll.items()})
            write_trials(out / "trials.txt", corpus.trials)
        return run.stage("corpus", c.synthetic, [], build)

    digests = [file_digest(p) for p in (c.background, c.background_info, c.evaluation,
                                        c.enroll, c.trials)]

    def build(out, h):
        for src, dst in ((c.background, "background.feats"), (c.evaluation, "evaluation.feats")):
            storage.write_feature_archive(out / dst, storage.read_feature_archive(src).items(), h)
        shutil.copyfile(c.background_info, out / "background.info")
        shutil.copyfile(c.enroll, out / "enroll.txt")
        shutil.copyfile(c.trials, out / "trials.txt")
    return run.stage("corpus", None, digests, build)


# ---------------------------------------------------------------- BN features

def _bn_labels(run: _Runner, feats: dict, info: dict):
    cfg = run.cfg
    counts = {u: len(x) for u, x in feats.items()}
    utts = list(feats)
    task = cfg.bn_task
    if task == "spkr":
        return [utterance_labels(utts, {u: info[u][0] for u in utts}, counts, "speaker")], None
    if task == "spkr+phrase":
        return [utterance_labels(utts, {u: info[u][0] for u in utts}, counts, "speaker"),
                utterance_labels(utts, {u: info[u][1] for u in utts}, counts, "phrase")], None
    if task == "utcl":
        return [utcl_labels(counts, cfg.tcl)], None
    if task == "stcl":
        labels, _ = stcl_labels(counts, cfg.tcl)
        keep = {u: np.arange(len(labels[u])) for u in labels.ids()}
        return [labels], keep
    if not (cfg.corpus.phone_labels and cfg.corpus.phone_table):
        raise PipelineError("bn_task 'phone' needs corpus.phone_labels and corpus.phone_table")
    labels, masks = read_phone_labels(cfg.corpus.phone_labels,
                                      read_class_table(cfg.corpus.phone_table))
    return [labels], {u: np.flatnonzero(m) for u, m in masks.items()}


def bn_tap_layer(cfg: ExperimentConfig) -> int:
    if cfg.bn.tap_layer is not None:
        return cfg.bn.tap_layer
    return 4 if cfg.bn_task in ("spkr", "spkr+phrase") else 2


def _bn_stage(run: _Runner, corpus_dir: Path, corpus_hash: str):
    cfg = run.cfg
    tap = bn_tap_layer(cfg)
    params = {"task": cfg.bn_task, "bn": cfg.bn, "tcl": cfg.tcl,
              "phone": [file_digest(p) for p in (cfg.corpus.phone_labels, cfg.corpus.phone_table)
                        if p]}

    def build(out, h):
        bg = run.features(corpus_dir / "background.feats", corpus_hash)
        info = read_info(corpus_dir / "background.info")
        labelsets, keep = _bn_labels(run, bg, info)
        train = bg if keep is None else {u: bg[u][keep[u]] for u in labelsets[0].ids()}
        net = train_bn_dnn(train, labelsets[0], cfg.bn, seed=run.seed("bn"),
                           labels2=labelsets[1] if len(labelsets) > 1 else None)
        storage.save_model(out / "bn.nnet", net, h)
        net = run.load(out / "bn.nnet", MlpNetwork, h)
        deep = np.vstack([extract_deep_features(net, x, tap, cfg.bn.pre_activation)
                          for x in train.values()])
        storage.save_model(out / "bn.pca", train_pca(deep, cfg.bn.pca_dim), h)
        pca = run.load(out / "bn.pca", PcaProjection, h)
        for part in ("background", "evaluation"):
            src = run.features(corpus_dir / f"{part}.feats", corpus_hash)
            bn = ((u, project_pca(pca, extract_deep_features(net, x, tap,
                                                             cfg.bn.pre_activation)))
                  for u, x in src.items())
            storage.write_feature_archive(out / f"{part}.feats", bn, h)
    return run.stage("bn", params, [corpus_hash], build)


# ---------------------------------------------------------------- back-ends

def _ubm_stage(run: _Runner, feat_dir: Path, feat_hash: str):
    g = run.cfg.gmm

    def build(out, h):
        bg = run.features(feat_dir / "background.feats", feat_hash)
        ubm = train_ubm_em(list(bg.values()), g.components, g.em_iters, seed=run.seed("ubm"))
        storage.save_model(out / "ubm.gmm", ubm, h)
    return run.stage("ubm", {"components": g.components, "em_iters": g.em_iters},
                     [feat_hash], build)


def _enroll_map(path) -> dict:
    return {m: list(u) for m, u in read_info(path).items()}


def _gmm_scores_stage(run: _Runner, corpus_dir, feat_dir, feat_hash, ubm_dir, ubm_hash):
    g = run.cfg.gmm

    def build(out, h):
        ubm = run.load(ubm_dir / "ubm.gmm", DiagGmm, ubm_hash)
        ev = run.features(feat_dir / "evaluation.feats", feat_hash)
        trials = parse_trials(corpus_dir / "trials.txt")
        models = {}
        for m, utts in _enroll_map(corpus_dir / "enroll.txt").items():
            models[m] = map_adapt(ubm, np.vstack([ev[u] for u in utts]), g.relevance, g.map_iters)
        scores = [llr_score(models[t.model], ubm, ev[t.utterance]) for t in trials]
        write_scores(out / "scores.txt", ScoreSet(list(trials), np.array(scores)))
    return run.stage("gmm-scores", {"relevance": g.relevance, "map_iters": g.map_iters},
                     [feat_hash, ubm_hash], build)


def _ivector_stage(run: _Runner, feat_dir, feat_hash, ubm_dir, ubm_hash):
    iv = run.cfg.ivector

    def build(out, h):
        ubm = run.load(ubm_dir / "ubm.gmm", DiagGmm, ubm_hash)
        bg = run.features(feat_dir / "background.feats", feat_hash)
        stats = [accumulate_bw_stats(ubm, x, utt_id=u) for u, x in bg.items()]
        tv = train_tv_em(stats, ubm, iv.rank, iv.iters, seed=run.seed("tv"),
                         min_divergence=iv.min_divergence)
        storage.save_model(out / "tv.mat", tv, h)
        tv = run.load(out / "tv.mat", TotalVariabilityModel, h)
        for part in ("background", "evaluation"):
            src = run.features(feat_dir / f"{part}.feats", feat_hash)
            vecs = ((u, extract_ivector(tv, accumulate_bw_stats(ubm, x, utt_id=u)).w)
                    for u, x in src.items())
            storage.write_vector_archive(out / f"{part}.vec", vecs, h)
    return run.stage("ivector", iv, [feat_hash, ubm_hash], build)


def _xvector_stage(run: _Runner, corpus_dir, feat_dir, feat_hash):
    xc = run.cfg.xvector

    def build(out, h):
        bg = run.features(feat_dir / "background.feats", feat_hash)
        info = read_info(corpus_dir / "background.info")
        net = train_xvector_net(bg, {u: info[u][:2] for u in bg}, xc, seed=run.seed("xvector"))
        storage.save_model(out / "xvector.nnet", net, h)
        net = run.load(out / "xvector.nnet", XvectorNetwork, h)
        for part in ("background", "evaluation"):
            src = run.features(feat_dir / f"{part}.feats", feat_hash)
            storage.write_vector_archive(out / f"{part}.vec",
                                         ((u, extract_xvector(net, x)) for u, x in src.items()), h)
    return run.stage("xvector", xc, [feat_hash], build)


def _concat_stage(run: _Runner, a, b):
    (a_dir, a_hash), (b_dir, b_hash) = a, b

    def build(out, h):
        for part in ("background", "evaluation"):
            va = run.vectors(a_dir / f"{part}.vec", a_hash)
            vb = run.vectors(b_dir / f"{part}.vec", b_hash)
            storage.write_vector_archive(out / f"{part}.vec",
                                         ((u, np.concatenate([va[u], vb[u]])) for u in va), h)
    return run.stage("vector-fusion", None, [a_hash, b_hash], build)


def _plda_scores_stage(run: _Runner, system: str, corpus_dir, vec_dir, vec_hash):
    p = run.cfg.plda

    def build(out, h):
        bg = run.vectors(vec_dir / "background.vec", vec_hash)
        info = read_info(corpus_dir / "background.info")
        x = np.vstack(list(bg.values()))
        norm = train_spherical_norm(x, p.norm_iters)
        # one class per (speaker, phrase) pair
        labels = np.array([" ".join(info[u][:2]) for u in bg])
        plda = train_plda(apply_spherical_norm(norm, x), labels, p.iters, norm=norm)
        storage.save_model(out / "plda.model", plda, h)
        plda = run.load(out / "plda.model", PldaModel, h)
        ev = run.vectors(vec_dir / "evaluation.vec", vec_hash)
        enroll = _enroll_map(corpus_dir / "enroll.txt")
        models = {m: np.mean([ev[u] for u in utts], axis=0) for m, utts in enroll.items()}
        storage.write_vector_archive(out / "models.vec", models.items(), h)
        trials = parse_trials(corpus_dir / "trials.txt")
        e = apply_spherical_norm(plda.norm, np.vstack([models[t.model] for t in trials]))
        t = apply_spherical_norm(plda.norm, np.vstack([ev[t.utterance] for t in trials]))
        write_scores(out / "scores.txt", ScoreSet(list(trials), plda_score_batch(plda, e, t)))
    return run.stage(f"{system}-plda", p, [vec_hash], build)


# ---------------------------------------------------------------- driver

def run_pipeline(cfg: ExperimentConfig, force: bool = False) -> PipelineResult:
    """Run every configured system and write scores and reports to ``work_dir``."""
    cfg.validate()
    run = _Runner(cfg, force)
    with threadpool_limits(1) if cfg.single_thread else nullcontext():
        corpus_dir, corpus_hash = _corpus_stage(run)
        if cfg.features == "bn":
            feat_dir, feat_hash = _bn_stage(run, corpus_dir, corpus_hash)
        else:
            feat_dir, feat_hash = corpus_dir, corpus_hash

        wanted = set(cfg.systems)
        if wanted & {"score-fusion", "vector-fusion"}:
            wanted |= set(FUSED)
        score_dirs, vec = {}, {}
        if wanted & {"gmm-ubm", "ivector"}:
            ubm = _ubm_stage(run, feat_dir, feat_hash)
        if "gmm-ubm" in wanted:
            score_dirs["gmm-ubm"] = _gmm_scores_stage(run, corpus_dir, feat_dir, feat_hash, *ubm)[0]
        if "ivector" in wanted:
            vec["ivector"] = _ivector_stage(run, feat_dir, feat_hash, *ubm)
        if "xvector" in wanted:
            vec["xvector"] = _xvector_stage(run, corpus_dir, feat_dir, feat_hash)
        if "vector-fusion" in wanted:
            vec["vector-fusion"] = _concat_stage(run, vec["ivector"], vec["xvector"])
        for system, (vdir, vhash) in vec.items():
            score_dirs[system] = _plda_scores_stage(run, system, corpus_dir, vdir, vhash)[0]

        work = Path(cfg.work_dir)
        (work / "scores").mkdir(parents=True, exist_ok=True)
        dump_config(cfg, work / "config.yaml")
        score_sets = {s: read_scores(d / "scores.txt") for s, d in score_dirs.items()}
        if "score-fusion" in wanted:
            parts = [score_sets[s] for s in FUSED]
            score_sets["score-fusion"] = fuse_scores(parts, cfg.fusion_weights)

        result = PipelineResult({}, {}, run.executed, run.reused)
        tables = []
        for system in [s for s in cfg.systems if s in score_sets]:
            path = work / "scores" / f"{system}.scores"
            write_scores(path, score_sets[system])
            rep = report(score_sets[system])
            write_det(work / "scores" / f"{system}.det", rep.rows["pooled"].det)
            result.reports[system] = rep
            result.score_files[system] = path
            tables.append(f"[{system}] features={cfg.features}\n{rep.format_table()}")
        (work / "report.txt").write_text("\n\n".join(tables) + "\n", encoding="utf-8")
        (work / "stages.json").write_text(
            json.dumps({"executed": run.executed, "reused": run.reused}, indent=1) + "\n",
            encoding="utf-8")
    return result

