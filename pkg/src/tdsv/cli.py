"""Command-line interface: ``tdsv <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import storage
from .config import ConfigError, config_hash, load_config, load_synth_spec
from .evaluation import ScoreSet, TrialError, fuse_scores, parse_trials, read_scores, report, \
    write_det, write_scores, write_trials
from .frontend import FrontendConfig, FrontendError, process_clip, read_wav
from .gmm import DiagGmm, accumulate_bw_stats, llr_score, map_adapt, train_ubm_em
from .ivector import TotalVariabilityModel, extract_ivector, train_tv_em
from .nnet.labels import read_class_table, read_label_file, read_phone_labels, \
    utterance_labels, write_label_file
from .nnet.mlp import BnConfig, MlpNetwork, extract_deep_features, train_bn_dnn
from .nnet.pca import PcaProjection, project_pca, train_pca
from .nnet.xvector import XvectorConfig, XvectorNetwork, extract_xvector, train_xvector_net
from .pipeline import PipelineError, read_info, run_pipeline, write_info
from .plda import PldaModel, apply_spherical_norm, plda_score_batch, train_plda, \
    train_spherical_norm
from .synth import SyntheticCorpusSpec, generate_synthetic_corpus
from .tcl import TclConfig, stcl_labels, utcl_labels

log = logging.getLogger("tdsv")


def _yaml_section(path, cls, **overrides):
    data = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**data)


def _enroll_map(path) -> dict:
    return {m: list(u) for m, u in read_info(path).items()}


# ---------------------------------------------------------------- front-end

def cmd_extract_features(args):
    cfg = _yaml_section(args.config, FrontendConfig)
    h = config_hash(cfg)
    items = []
    with open(args.wav_list, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            utt, path = (parts[0], parts[1]) if len(parts) > 1 else (Path(parts[0]).stem, parts[0])
            clip = read_wav(path, utt)
            if clip.sample_rate != cfg.sample_rate:
                raise FrontendError(f"{path}: {clip.sample_rate} Hz, config expects "
                                    f"{cfg.sample_rate} Hz")
            items.append(process_clip(clip, cfg))
    storage.write_feature_archive(args.out, items, h)
    log.info("wrote %d utterances to %s", len(items), args.out)


# ---------------------------------------------------------------- GMM-UBM

def cmd_train_ubm(args):
    feats = storage.read_feature_archive(args.feats)
    ubm = train_ubm_em(list(feats.values()), args.components, args.iters, seed=args.seed)
    storage.save_model(args.out, ubm, config_hash("ubm", args.components, args.iters, args.seed))


def cmd_adapt(args):
    ubm = storage.load_model(args.ubm, DiagGmm)
    feats = storage.read_feature_archive(args.feats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash("adapt", args.relevance, args.iters, storage.model_config_hash(args.ubm))
    for model, utts in _enroll_map(args.enroll).items():
        adapted = map_adapt(ubm, np.vstack([feats[u] for u in utts]), args.relevance, args.iters)
        storage.save_model(out / f"{model}.gmm", adapted, h)


def cmd_score_gmm(args):
    ubm = storage.load_model(args.ubm, DiagGmm)
    feats = storage.read_feature_archive(args.feats)
    trials = parse_trials(args.trials)
    models = {}
    scores = []
    for t in trials:
        if t.model not in models:
            models[t.model] = storage.load_model(Path(args.models) / f"{t.model}.gmm", DiagGmm)
        scores.append(llr_score(models[t.model], ubm, feats[t.utterance]))
    write_scores(args.out, ScoreSet(list(trials), np.array(scores)))


# ---------------------------------------------------------------- i-vector / PLDA

def cmd_train_tv(args):
    ubm = storage.load_model(args.ubm, DiagGmm)
    feats = storage.read_feature_archive(args.feats)
    stats = [accumulate_bw_stats(ubm, x, utt_id=u) for u, x in feats.items()]
    tv = train_tv_em(stats, ubm, args.rank, args.iters, seed=args.seed,
                     min_divergence=args.min_divergence)
    storage.save_model(args.out, tv, config_hash("tv", args.rank, args.iters, args.seed))


def cmd_extract_ivector(args):
    ubm = storage.load_model(args.ubm, DiagGmm)
    tv = storage.load_model(args.tv, TotalVariabilityModel)
    feats = storage.read_feature_archive(args.feats)
    vecs = [(u, extract_ivector(tv, accumulate_bw_stats(ubm, x, utt_id=u)).w)
            for u, x in feats.items()]
    storage.write_vector_archive(args.out, vecs, storage.model_config_hash(args.tv))


def cmd_enroll(args):
    vecs = storage.read_vector_archive(args.vectors)
    models = [(m, np.mean([vecs[u] for u in utts], axis=0))
              for m, utts in _enroll_map(args.enroll).items()]
    storage.write_vector_archive(args.out, models, storage.archive_config_hash(args.vectors))


def cmd_train_plda(args):
    vecs = storage.read_vector_archive(args.vectors)
    info = read_info(args.info)
    x = np.vstack(list(vecs.values()))
    labels = np.array([" ".join(info[u][:2]) for u in vecs])
    norm = train_spherical_norm(x, args.norm_iters)
    plda = train_plda(apply_spherical_norm(norm, x), labels, args.iters, norm=norm)
    storage.save_model(args.out, plda, config_hash("plda", args.iters, args.norm_iters))


def cmd_score_plda(args):
    plda = storage.load_model(args.plda, PldaModel)
    models = storage.read_vector_archive(args.models)
    vecs = storage.read_vector_archive(args.vectors)
    trials = parse_trials(args.trials)
    norm = plda.norm
    e = np.vstack([models[t.model] for t in trials])
    t = np.vstack([vecs[t.utterance] for t in trials])
    if norm is not None:
        e, t = apply_spherical_norm(norm, e), apply_spherical_norm(norm, t)
    write_scores(args.out, ScoreSet(list(trials), plda_score_batch(plda, e, t)))


# ---------------------------------------------------------------- networks

_BN_TASK_LABELS = {"spkr": "speaker", "stcl": "tcl", "utcl": "tcl", "phone": "phone"}


def cmd_train_bn(args):
    cfg = _yaml_section(args.config, BnConfig, gamma=args.gamma, depth=args.depth,
                        width=args.width, epochs=args.epochs)
    feats = storage.read_feature_archive(args.feats)
    labels2 = None
    if args.info:
        info = read_info(args.info)
        counts = {u: len(x) for u, x in feats.items()}
        utts = list(feats)
        labels = utterance_labels(utts, {u: info[u][0] for u in utts}, counts, "speaker")
        if args.task == "spkr+phrase":
            labels2 = utterance_labels(utts, {u: info[u][1] for u in utts}, counts, "phrase")
    elif args.labels and args.phone_table:
        labels, masks = read_phone_labels(args.labels, read_class_table(args.phone_table))
        feats = {u: feats[u][masks[u]] for u in labels.ids()}
    elif args.labels:
        labels = read_label_file(args.labels, task=_BN_TASK_LABELS.get(args.task, "speaker"))
        if args.task == "spkr+phrase":
            if not args.labels2:
                raise ConfigError("--task spkr+phrase needs --labels2 (phrase labels)")
            labels2 = read_label_file(args.labels2, task="phrase")
        # sTCL with a dropped partial chunk labels a prefix of each utterance
        feats = {u: feats[u][:len(labels[u])] for u in labels.ids()}
    elif args.task == "utcl":
        labels = utcl_labels({u: len(x) for u, x in feats.items()})
    else:
        raise ConfigError("train-bn needs --labels or --info")
    net = train_bn_dnn(feats, labels, cfg, seed=args.seed, labels2=labels2)
    storage.save_model(args.out, net, config_hash("bn", args.task, cfg, args.seed))


def cmd_extract_bn(args):
    net = storage.load_model(args.nnet, MlpNetwork)
    feats = storage.read_feature_archive(args.feats)
    deep = {u: extract_deep_features(net, x, args.layer, args.pre_activation)
            for u, x in feats.items()}
    if args.pca:
        pca = storage.load_model(args.pca, PcaProjection)
    else:
        pca = train_pca(np.vstack(list(deep.values())), args.pca_dim)
        storage.save_model(args.pca_out or f"{args.out}.pca", pca,
                           storage.model_config_hash(args.nnet))
    storage.write_feature_archive(args.out, ((u, project_pca(pca, d)) for u, d in deep.items()),
                                  storage.model_config_hash(args.nnet))


def cmd_train_xvector(args):
    cfg = _yaml_section(args.config, XvectorConfig, epochs=args.epochs)
    feats = storage.read_feature_archive(args.feats)
    info = read_info(args.info)
    net = train_xvector_net(feats, {u: info[u][:2] for u in feats}, cfg, seed=args.seed)
    storage.save_model(args.out, net, config_hash("xvector", cfg, args.seed))


def cmd_extract_xvector(args):
    net = storage.load_model(args.nnet, XvectorNetwork)
    feats = storage.read_feature_archive(args.feats)
    storage.write_vector_archive(args.out, ((u, extract_xvector(net, x)) for u, x in feats.items()),
                                 storage.model_config_hash(args.nnet))


def cmd_tcl_labels(args):
    cfg = TclConfig(classes=args.classes, chunk=args.chunk, mode=args.mode,
                    drop_partial=args.drop_partial, seed=args.seed)
    counts = {u: len(x) for u, x in storage.read_feature_archive(args.feats).items()}
    if args.mode == "utterance":
        labels = utcl_labels(counts, cfg)
    else:
        labels, _ = stcl_labels(counts, cfg)
    write_label_file(args.out, labels)


# ---------------------------------------------------------------- evaluation

def _aligned_to_trials(scores: ScoreSet, trials) -> ScoreSet:
    index = {t.key: s for t, s in zip(scores.trials, scores.scores)}
    missing = [t.key for t in trials if t.key not in index]
    if missing:
        raise TrialError(f"{len(missing)} trials have no score, e.g. {missing[0]}")
    return ScoreSet(list(trials), np.array([index[t.key] for t in trials]))


def cmd_evaluate(args):
    scores = read_scores(args.scores)
    if args.trials:
        scores = _aligned_to_trials(scores, parse_trials(args.trials))
    rep = report(scores)
    print(rep.format_table())
    if args.det:
        write_det(args.det, rep.rows["pooled"].det)


def cmd_fuse(args):
    sets = [read_scores(p) for p in args.scores]
    if args.weights == "equal":
        weights = None
    else:
        weights = [float(w) for w in args.weights.split(",")]
    fused = fuse_scores(sets, weights)
    if args.out:
        write_scores(args.out, fused)
    else:
        for t, s in zip(fused.trials, fused.scores):
            sys.stdout.write(f"{t.model}\t{t.utterance}\t{t.type}\t{s:.6f}\n")


# ---------------------------------------------------------------- experiments

def cmd_run(args):
    cfg = load_config(args.config)
    if args.work_dir:
        cfg.work_dir = args.work_dir
    result = run_pipeline(cfg, force=args.force)
    print(Path(cfg.work_dir, "report.txt").read_text(encoding="utf-8"), end="")
    log.info("executed stages: %s", ", ".join(result.executed) or "none (all cached)")


def cmd_synth(args):
    spec = load_synth_spec(args.spec) if args.spec else SyntheticCorpusSpec()
    corpus = generate_synthetic_corpus(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash(spec)
    storage.write_feature_archive(out / "background.feats", corpus.background.items(), h)
    storage.write_feature_archive(out / "evaluation.feats", corpus.evaluation.items(), h)
    write_info(out / "background.info", corpus.background_info)
    write_info(out / "evaluation.info", corpus.evaluation_info)
    write_info(out / "enroll.txt", corpus.enroll)
    write_trials(out / "trials.txt", corpus.trials)
    counts = corpus.trials.counts()
    print(" ".join(f"{k}={v}" for k, v in counts.items()))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tdsv", description="Text-dependent speaker verification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        return sp

    sp = add("extract-features", cmd_extract_features, "MFCC + deltas + VAD + CMVN from WAV files")
    sp.add_argument("--config", help="YAML with front-end settings")
    sp.add_argument("--wav-list", required=True, help="lines of 'utt-id path' or 'path'")
    sp.add_argument("--out", required=True)

    sp = add("train-ubm", cmd_train_ubm, "train a diagonal-covariance UBM")
    sp.add_argument("--feats", required=True)
    sp.add_argument("--components", type=int, default=512)
    sp.add_argument("--iters", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("adapt", cmd_adapt, "MAP-adapt target models from enrollment utterances")
    sp.add_argument("--ubm", required=True)
    sp.add_argument("--feats", required=True)
    sp.add_argument("--enroll", required=True, help="lines of 'model utt1 utt2 ...'")
    sp.add_argument("--relevance", type=float, default=10.0)
    sp.add_argument("--iters", type=int, default=3)
    sp.add_argument("--out", required=True, help="output directory of <model>.gmm files")

    sp = add("score-gmm", cmd_score_gmm, "GMM-UBM log-likelihood-ratio scoring")
    sp.add_argument("--ubm", required=True)
    sp.add_argument("--models", required=True, help="directory written by 'adapt'")
    sp.add_argument("--feats", required=True)
    sp.add_argument("--trials", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train-tv", cmd_train_tv, "train the total-variability matrix")
    sp.add_argument("--ubm", required=True)
    sp.add_argument("--feats", required=True)
    sp.add_argument("--rank", type=int, default=400)
    sp.add_argument("--iters", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--min-divergence", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("extract-ivector", cmd_extract_ivector, "extract i-vectors")
    sp.add_argument("--ubm", required=True)
    sp.add_argument("--tv", required=True)
    sp.add_argument("--feats", required=True)
    sp.add_argument("--out", required=True)

    sp = add("enroll", cmd_enroll, "average enrollment vectors per model")
    sp.add_argument("--vectors", required=True)
    sp.add_argument("--enroll", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train-plda", cmd_train_plda, "spherical normalization + two-covariance PLDA")
    sp.add_argument("--vectors", required=True)
    sp.add_argument("--info", required=True, help="lines of 'utt speaker phrase'")
    sp.add_argument("--iters", type=int, default=10)
    sp.add_argument("--norm-iters", type=int, default=2)
    sp.add_argument("--out", required=True)

    sp = add("score-plda", cmd_score_plda, "PLDA scoring of model/test vector pairs")
    sp.add_argument("--plda", required=True)
    sp.add_argument("--models", required=True, help="vector archive written by 'enroll'")
    sp.add_argument("--vectors", required=True)
    sp.add_argument("--trials", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train-bn", cmd_train_bn, "train a bottleneck DNN")
    sp.add_argument("--feats", required=True)
    sp.add_argument("--task", choices=("spkr", "spkr+phrase", "phone", "stcl", "utcl"),
                    required=True)
    sp.add_argument("--labels", help="frame label file")
    sp.add_argument("--labels2", help="phrase label file for --task spkr+phrase")
    sp.add_argument("--phone-table", help="class-name table; --labels then holds phone symbols")
    sp.add_argument("--info", help="derive speaker/phrase labels from 'utt speaker phrase' lines")
    sp.add_argument("--gamma", type=float, default=None)
    sp.add_argument("--depth", type=int, default=None)
    sp.add_argument("--width", type=int, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--config", help="YAML with network settings")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("extract-bn", cmd_extract_bn, "bottleneck features: hidden layer + PCA")
    sp.add_argument("--nnet", required=True)
    sp.add_argument("--feats", required=True)
    sp.add_argument("--layer", type=int, default=4)
    sp.add_argument("--pre-activation", action="store_true")
    sp.add_argument("--pca-dim", type=int, default=57)
    sp.add_argument("--pca", help="existing PCA model; trained on --feats when omitted")
    sp.add_argument("--pca-out")
    sp.add_argument("--out", required=True)

    sp = add("train-xvector", cmd_train_xvector, "train an x-vector network")
    sp.add_argument("--feats", required=True)
    sp.add_argument("--info", required=True)
    sp.add_argument("--config", help="YAML with network settings")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("extract-xvector", cmd_extract_xvector, "extract x-vectors")
    sp.add_argument("--nnet", required=True)
    sp.add_argument("--feats", required=True)
    sp.add_argument("--out", required=True)

    sp = add("tcl-labels", cmd_tcl_labels, "time-contrastive frame labels")
    sp.add_argument("--feats", required=True)
    sp.add_argument("--mode", choices=("utterance", "stream"), default="utterance")
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--chunk", type=int, default=6)
    sp.add_argument("--drop-partial", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "EER / MinDCF per trial type")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--trials")
    sp.add_argument("--det", help="write pooled DET points here")

    sp = add("fuse", cmd_fuse, "weighted score fusion")
    sp.add_argument("--weights", default="equal", help="'equal' or comma-separated weights")
    sp.add_argument("--out")
    sp.add_argument("scores", nargs="+")

    sp = add("run", cmd_run, "run a full experiment from a YAML config")
    sp.add_argument("--config", required=True)
    sp.add_argument("--work-dir")
    sp.add_argument("--force", action="store_true", help="accept artifacts with other hashes")

    sp = add("synth", cmd_synth, "generate a synthetic corpus")
    sp.add_argument("--spec", help="YAML synthetic corpus spec")
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, KeyError, OSError, PipelineError) as exc:
        print(f"tdsv {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
