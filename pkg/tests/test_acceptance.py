"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line."""

import filecmp
import time

import numpy as np
import pytest

from oracles import (central_difference, eer_bruteforce, gmm_avg_loglik, ivector_dense,
                     min_dcf_bruteforce, plda_llr_joint, rel_error)
from tdsv.config import CorpusConfig, ExperimentConfig, GmmConfig, IvectorConfig
from tdsv.evaluation import (ScoreSet, Trial, compute_eer, compute_min_dcf,
                             dcf_normalizer, fuse_scores, fuse_vectors, parse_trials)
from tdsv.gmm import (BaumWelchStats, DiagGmm, accumulate_bw_stats, gmm_log_likelihood,
                      llr_score, map_adapt, train_ubm_em)
from tdsv.ivector import TotalVariabilityModel, extract_ivector, train_tv_em
from tdsv.nnet.mlp import BnConfig, DenseLayer, MlpNetwork, loss_and_grads
from tdsv.nnet.xvector import (XvectorConfig, build_xvector_net, stats_pool,
                               stats_pool_backward, xvector_loss_and_grads)
from tdsv.pipeline import run_pipeline
from tdsv.plda import PldaModel, plda_score, train_plda
from tdsv.storage import read_vector_archive
from tdsv.synth import SyntheticCorpusSpec
from tdsv.tcl import stream_labels, utterance_labels

N_INSTANCES = 100


def random_gmm(rng, C, D):
    return DiagGmm(rng.dirichlet(np.ones(C)), rng.normal(0, 2, (C, D)),
                   rng.uniform(0.3, 3.0, (C, D)))


def random_spd(rng, R, scale=1.0):
    a = rng.standard_normal((R, R))
    return scale * (a @ a.T / R + 0.2 * np.eye(R))


def random_scores(rng):
    # quarter-step grid so ties are common
    g = rng.integers(-12, 13, rng.integers(1, 25)) / 4.0
    i = rng.integers(-16, 9, rng.integers(1, 25)) / 4.0
    return g, i


@pytest.fixture(scope="module", autouse=True)
def no_env_cache(request):
    mp = pytest.MonkeyPatch()
    mp.delenv("TDSV_CACHE_DIR", raising=False)
    request.addfinalizer(mp.undo)


@pytest.mark.criterion(1, "oracle equivalence")
def test_oracle_equivalence(record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = dict(gmm=0.0, ivector=0.0, plda=0.0, eer=0.0, min_dcf=0.0)
    for _ in range(N_INSTANCES):
        C, D = rng.integers(1, 5), rng.integers(1, 4)
        g = random_gmm(rng, C, D)
        x = rng.normal(0, 3, (rng.integers(1, 6), D))
        ref = gmm_avg_loglik(g.weights, g.means, g.variances, x)
        worst["gmm"] = max(worst["gmm"], abs(gmm_log_likelihood(g, x) - ref))

        C, D, R = rng.integers(1, 4), rng.integers(1, 3), rng.integers(1, 4)
        R = min(R, C * D)
        ubm = random_gmm(rng, C, D)
        tv = TotalVariabilityModel.from_ubm(ubm, rng.standard_normal((C * D, R)))
        n = rng.uniform(0, 5, C)
        stats = BaumWelchStats(n, rng.standard_normal((C, D)) * (n[:, None] + 0.1))
        ref = ivector_dense(tv.T, ubm.variances, stats.n, stats.centered(ubm.means))
        worst["ivector"] = max(worst["ivector"],
                               np.max(np.abs(extract_ivector(tv, stats).w - ref)))

        R = rng.integers(1, 4)
        model = PldaModel(rng.standard_normal(R), random_spd(rng, R, 2.0), random_spd(rng, R))
        e, t = rng.standard_normal((2, R)) * 2
        ref = plda_llr_joint(model.mean, model.between, model.within, e, t)
        worst["plda"] = max(worst["plda"], abs(plda_score(model, e, t) - ref))

        gs, im = random_scores(rng)
        worst["eer"] = max(worst["eer"], abs(compute_eer(gs, im)[0] - eer_bruteforce(gs, im)))
        worst["min_dcf"] = max(worst["min_dcf"],
                               abs(compute_min_dcf(gs, im) - min_dcf_bruteforce(gs, im)))
    elapsed = time.perf_counter() - start
    record_property("detail", f"{N_INSTANCES} instances each, worst |err| "
                    f"{max(worst.values()):.1e}, {elapsed:.1f}s")
    for name, err in worst.items():
        assert err <= 1e-9, name
    assert elapsed < 60


@pytest.mark.criterion(2, "EM monotonicity")
def test_em_monotonicity(record_property):
    drops = dict(ubm=0.0, tv=0.0, plda=0.0)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        centres = rng.normal(0, 4, (3, 3))
        x = np.vstack([c + rng.standard_normal((150, 3)) for c in centres])
        hist = []
        train_ubm_em(x, 4, iters=8, seed=seed, history=hist)
        for (_, a, floored), (_, b, _) in zip(hist, hist[1:]):
            if not floored:
                drops["ubm"] = max(drops["ubm"], a - b)

        ubm = random_gmm(rng, 3, 2)
        T_true = rng.standard_normal((6, 2))
        stats = []
        for u in range(40):
            w = rng.standard_normal(2)
            comp = rng.integers(0, 3, 30)
            feats = ubm.means[comp] + (T_true @ w).reshape(3, 2)[comp] + \
                rng.standard_normal((30, 2)) * np.sqrt(ubm.variances[comp])
            stats.append(accumulate_bw_stats(ubm, feats, utt_id=f"u{u}"))
        hist = []
        train_tv_em(stats, ubm, rank=2, iters=6, seed=seed, history=hist)
        drops["tv"] = max(drops["tv"], max(a[1] - b[1] for a, b in zip(hist, hist[1:])))

        labels = np.repeat(np.arange(25), 4)
        y = rng.multivariate_normal(np.zeros(3), random_spd(rng, 3, 3.0), 25)
        v = y[labels] + rng.multivariate_normal(np.zeros(3), random_spd(rng, 3), 100)
        hist = []
        train_plda(v, labels, iters=8, history=hist)
        drops["plda"] = max(drops["plda"], max(a[1] - b[1] for a, b in zip(hist, hist[1:])))
    record_property("detail", "20 datasets each, largest decrease "
                    + ", ".join(f"{k} {max(v, 0.0):.1e}" for k, v in drops.items()))
    assert drops["ubm"] <= 1e-8
    assert drops["tv"] <= 1e-6 and drops["plda"] <= 1e-6


@pytest.mark.criterion(3, "gradient correctness")
def test_gradient_correctness(record_property):
    rng = np.random.default_rng(7)
    errors = {}

    def mlp(activation, n_heads):
        dims = (5, 6, 4)
        hidden = [DenseLayer(rng.normal(0, 0.7, (a, b)), rng.normal(0, 0.3, b), activation)
                  for a, b in zip(dims, dims[1:])]
        heads = [DenseLayer(rng.normal(0, 0.7, (4, c)), rng.normal(0, 0.3, c), "softmax")
                 for c in (3, 4)[:n_heads]]
        return MlpNetwork(hidden, heads)

    def check(net, x, targets, gamma):
        _, grads = loss_and_grads(net, x, targets, gamma)
        return max(rel_error(g, central_difference(
            lambda: loss_and_grads(net, x, targets, gamma)[0], p))
            for p, g in zip(net.parameters(), grads))

    x = rng.standard_normal((7, 5))
    for act in ("sigmoid", "relu", "linear", "softmax"):
        errors[act] = check(mlp(act, 1), x, [rng.integers(0, 3, 7)], 1.0)
    for gamma in (0.0, 0.3, 1.0):
        targets = [rng.integers(0, 3, 7), rng.integers(0, 4, 7)]
        errors[f"gamma={gamma}"] = check(mlp("sigmoid", 2), x, targets, gamma)

    h = rng.standard_normal((9, 4))
    c = rng.standard_normal(8)
    _, cache = stats_pool(h)
    errors["stats-pool"] = rel_error(stats_pool_backward(h, c, cache),
                                     central_difference(lambda: float(c @ stats_pool(h)[0]), h))

    for act in ("sigmoid", "relu"):
        cfg = XvectorConfig(contexts=((-1, 0, 1), (0,)), frame_dims=(5, 4), segment_dims=(4, 3),
                            activation=act)
        net = build_xvector_net(3, 4, cfg, rng)
        chunks = [rng.standard_normal((n, 3)) for n in (6, 9, 4)]
        targets = [0, 3, 1]
        _, grads = xvector_loss_and_grads(net, chunks, targets)
        errors[f"xvector-{act}"] = max(rel_error(g, central_difference(
            lambda: xvector_loss_and_grads(net, chunks, targets)[0], p))
            for p, g in zip(net.parameters(), grads))
    worst = max(errors, key=errors.get)
    record_property("detail", f"{len(errors)} checks, worst {worst} {errors[worst]:.1e}")
    assert all(e < 1e-4 for e in errors.values()), errors


@pytest.mark.criterion(4, "TCL labeling")
def test_tcl_labeling(record_property):
    for n in range(1, 501):
        lab = utterance_labels(n, 10)
        assert len(lab) == n and np.all(np.diff(lab) >= 0)
        counts = np.bincount(lab, minlength=10)
        used = counts[counts > 0]
        assert used.max() - used.min() <= 1
        # walk the frames, filling segments of size ceil/floor(n / 10) in order
        remaining = [n // 10 + (1 if k < n % 10 else 0) for k in range(10)]
        expected, label = [0] * 10, 0
        for _ in range(n):
            while remaining[label] == 0:
                label += 1
            expected[label] += 1
            remaining[label] -= 1
        assert counts.tolist() == expected
    s = stream_labels(1200, 6, 10)
    period = next(p for p in range(1, 600) if np.array_equal(s[p:], s[:-p]))
    record_property("detail", f"n=1..500 checked, stream period {period}")
    assert period == 60


@pytest.mark.criterion(5, "closed-form limits")
def test_closed_form_limits(record_property):
    rng = np.random.default_rng(5)
    ubm = random_gmm(rng, 4, 3)
    x = rng.normal(0, 2, (50, 3))
    assert llr_score(ubm, ubm, x) == 0.0
    adapted = map_adapt(ubm, x, relevance=1e12)
    map_err = np.max(np.abs(adapted.means - ubm.means))
    assert map_err < 1e-6
    tv = TotalVariabilityModel.from_ubm(ubm, rng.standard_normal((12, 3)))
    w = extract_ivector(tv, BaumWelchStats(np.zeros(4), np.zeros((4, 3)))).w
    assert np.all(w == 0.0)
    model = PldaModel(rng.standard_normal(3), np.zeros((3, 3)), random_spd(rng, 3))
    pairs = rng.standard_normal((100, 2, 3)) * 4
    assert all(plda_score(model, a, b) == 0.0 for a, b in pairs)
    record_property("detail", f"MAP max |mean shift| {map_err:.1e}")


@pytest.mark.criterion(6, "synthetic end-to-end separation")
def test_synthetic_separation(tmp_path, record_property):
    start = time.perf_counter()
    cfg = ExperimentConfig(work_dir=str(tmp_path / "run"), systems=["gmm-ubm"],
                           corpus=CorpusConfig(synthetic=SyntheticCorpusSpec()),
                           gmm=GmmConfig(components=32))
    rep = run_pipeline(cfg).reports["gmm-ubm"]
    elapsed = time.perf_counter() - start
    pooled = rep.rows["pooled"].eer
    iw, ic = rep.rows["impostor-wrong"].eer, rep.rows["impostor-correct"].eer
    record_property("detail", f"pooled EER {100 * pooled:.2f}%, impostor-wrong "
                    f"{100 * iw:.2f}% vs impostor-correct {100 * ic:.2f}%, {elapsed:.0f}s")
    assert pooled <= 0.05
    assert iw <= ic
    assert elapsed < 600


@pytest.mark.criterion(7, "fusion sanity")
def test_fusion_sanity(record_property):
    rng = np.random.default_rng(3)
    trials = [Trial(f"m{k % 7}", f"u{k}", "genuine" if k % 4 == 0 else "impostor-correct")
              for k in range(400)]
    s = ScoreSet(trials, rng.standard_normal(400) * 3.7)
    assert np.array_equal(fuse_scores([s, s]).scores, s.scores)

    g, n = np.full(20, 1.0), np.full(20, -1.0)
    ga, gb, na, nb = g.copy(), g.copy(), n.copy(), n.copy()
    ga[:4], gb[:4] = -1.5, 3.0
    nb[4:8], na[4:8] = 1.5, -3.0
    pair = [Trial("m", f"g{k}", "genuine") for k in range(20)] + \
           [Trial("m", f"n{k}", "impostor-correct") for k in range(20)]
    a = ScoreSet(pair, np.concatenate([ga, na]))
    b = ScoreSet(pair, np.concatenate([gb, nb]))
    eers = [compute_eer(x.by_type("genuine"), x.by_type("impostor-correct"))[0]
            for x in (a, b, fuse_scores([a, b]))]
    assert eers[2] < min(eers[:2])

    v = fuse_vectors(rng.standard_normal(400), rng.standard_normal(400), "u", "u")
    assert v.shape == (800,)
    record_property("detail", f"component EERs {eers[0]:.2f}/{eers[1]:.2f}, fused "
                    f"{eers[2]:.2f}; fused vector dim {v.shape[0]}")


@pytest.mark.criterion(8, "metric definitions")
def test_metric_definitions(tmp_path, record_property):
    assert dcf_normalizer(10.0, 1.0, 0.01) == 0.1
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(N_INSTANCES):
        g, i = random_scores(rng)
        base = compute_eer(g, i)[0]
        for f in (np.exp, np.arctan, lambda s: 2.5 * s - 3.0, lambda s: s ** 3):
            worst = max(worst, abs(compute_eer(f(g), f(i))[0] - base))
    assert worst <= 1e-9

    shape = {"genuine": 3242, "target-wrong": 29178, "impostor-correct": 120086,
             "impostor-wrong": 1080774}
    path = tmp_path / "replica.trials"
    with open(path, "w") as fh:
        for kind, n in shape.items():
            fh.writelines(f"model{k % 3242}\t{kind}-{k}\t{kind}\n" for k in range(n))
    counts = parse_trials(path).counts()
    assert counts == shape
    record_property("detail", "normalizer 0.1, EER transform drift "
                    f"{worst:.0e}, replica counts " + "/".join(str(counts[k]) for k in shape))


def _full_config(work_dir, features):
    spec = SyntheticCorpusSpec(n_speakers=6, n_phrases=3, dim=12, min_frames=40, max_frames=60,
                               n_background_speakers=8, n_background_phrases=3)
    return ExperimentConfig(
        work_dir=str(work_dir), features=features, corpus=CorpusConfig(synthetic=spec),
        gmm=GmmConfig(components=8, em_iters=4), ivector=IvectorConfig(rank=6, iters=3),
        bn=BnConfig(depth=3, width=16, epochs=2, tap_layer=2, pca_dim=8, batch_start=64,
                    batch_end=128),
        xvector=XvectorConfig(contexts=((-1, 0, 1), (0,)), frame_dims=(16, 16),
                              segment_dims=(8, 8), min_chunk=20, max_chunk=40, epochs=3,
                              batch_size=8))


@pytest.mark.criterion(9, "determinism")
def test_determinism(tmp_path, record_property):
    compared, models = 0, 0
    for features in ("mfcc", "bn"):
        runs = [run_pipeline(_full_config(tmp_path / f"{features}-{k}", features))
                for k in range(2)]
        assert set(runs[0].score_files) == {"gmm-ubm", "ivector", "xvector", "score-fusion",
                                            "vector-fusion"}
        a, b = tmp_path / f"{features}-0", tmp_path / f"{features}-1"
        files = sorted(p.relative_to(a) for p in a.rglob("*")
                       if p.is_file() and p.name not in ("config.yaml",))
        for rel in files:
            assert filecmp.cmp(a / rel, b / rel, shallow=False), rel
            compared += 1
            models += rel.suffix in (".gmm", ".mat", ".model", ".nnet", ".pca")
        fused = read_vector_archive(next(a.glob("cache/vector-fusion-[0-9a-f]*")) / "evaluation.vec")
        iv = read_vector_archive(next(a.glob("cache/ivector-[0-9a-f]*")) / "evaluation.vec")
        xv = read_vector_archive(next(a.glob("cache/xvector-[0-9a-f]*")) / "evaluation.vec")
        u = next(iter(fused))
        assert fused[u].shape[0] == iv[u].shape[0] + xv[u].shape[0]
    record_property("detail", f"{compared} files byte-identical across two fresh runs, "
                    f"{models} of them models")
