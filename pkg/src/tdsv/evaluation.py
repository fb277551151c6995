"""Trial lists, score files, EER / MinDCF, DET points and fusion."""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

GENUINE = "genuine"
NONTARGET_TYPES = ("target-wrong", "impostor-correct", "impostor-wrong")
TRIAL_TYPES = (GENUINE,) + NONTARGET_TYPES


class TrialError(ValueError):
    pass


@dataclass(frozen=True)
class Trial:
    model: str
    utterance: str
    type: str

    @property
    def key(self) -> tuple:
        return (self.model, self.utterance, self.type)


@dataclass
class TrialList:
    trials: list = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for t in self.trials:
            if t.type not in TRIAL_TYPES:
                raise TrialError(f"unknown trial type {t.type!r}")
            if t.key in seen:
                raise TrialError(f"duplicate trial {t.key}")
            seen.add(t.key)

    def __len__(self) -> int:
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def counts(self) -> dict:
        c = Counter(t.type for t in self.trials)
        return {k: c.get(k, 0) for k in TRIAL_TYPES}


@dataclass
class ScoreSet:
    trials: list
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.trials) != self.scores.shape[0]:
            raise TrialError(f"{len(self.trials)} trials but {self.scores.shape[0]} scores")
        if not np.all(np.isfinite(self.scores)):
            raise TrialError("scores must be finite")

    def by_type(self, trial_type: str) -> np.ndarray:
        mask = np.array([t.type == trial_type for t in self.trials], dtype=bool)
        return self.scores[mask]


def parse_trials(path) -> TrialList:
    trials, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise TrialError(f"{path}:{lineno}: expected 3 tab-separated fields")
            model, utt, ttype = parts
            if ttype not in TRIAL_TYPES:
                raise TrialError(f"{path}:{lineno}: unknown trial type {ttype!r}")
            trial = Trial(model, utt, ttype)
            if trial.key in seen:
                raise TrialError(f"{path}:{lineno}: duplicate trial {trial.key}")
            seen.add(trial.key)
            trials.append(trial)
    return TrialList(trials)


def write_trials(path, trials) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(f"{t.model}\t{t.utterance}\t{t.type}\n")


def write_scores(path, scores: ScoreSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t, s in zip(scores.trials, scores.scores):
            fh.write(f"{t.model}\t{t.utterance}\t{t.type}\t{s:.6f}\n")


def read_scores(path) -> ScoreSet:
    trials, values = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4 or parts[2] not in TRIAL_TYPES:
                raise TrialError(f"{path}:{lineno}: malformed score line")
            trials.append(Trial(*parts[:3]))
            values.append(float(parts[3]))
    return ScoreSet(trials, np.array(values))


def _check_nonempty(genuine, impostor):
    g = np.asarray(genuine, dtype=np.float64).reshape(-1)
    i = np.asarray(impostor, dtype=np.float64).reshape(-1)
    if g.size == 0 or i.size == 0:
        raise ValueError("both genuine and impostor score lists must be non-empty")
    return g, i


def error_rates(genuine, impostor):
    """Miss and false-alarm rates at every distinct threshold, plus both endpoints.

    A score equal to the threshold is accepted. Returns ``(thresholds, p_miss,
    p_fa)`` ordered by increasing threshold; the first entry is -inf (accept
    all) and the last +inf (reject all).
    """
    g, i = _check_nonempty(genuine, impostor)
    thr = np.unique(np.concatenate([g, i]))
    g_sorted, i_sorted = np.sort(g), np.sort(i)
    p_miss = np.searchsorted(g_sorted, thr, side="left") / g.size
    p_fa = 1.0 - np.searchsorted(i_sorted, thr, side="left") / i.size
    thr = np.concatenate([[-np.inf], thr, [np.inf]])
    p_miss = np.concatenate([[0.0], p_miss, [1.0]])
    p_fa = np.concatenate([[1.0], p_fa, [0.0]])
    return thr, p_miss, p_fa


def _interp_threshold(t0: float, t1: float, alpha: float) -> float:
    if not np.isfinite(t0):
        return t1
    if not np.isfinite(t1):
        return t0
    return t0 + alpha * (t1 - t0)


def compute_eer(genuine, impostor) -> tuple[float, float]:
    """Equal error rate and its threshold.

    The crossing of FA - miss is located between adjacent sweep points and
    both rates are interpolated linearly there.
    """
    thr, p_miss, p_fa = error_rates(genuine, impostor)
    diff = p_fa - p_miss  # decreasing from +1 to -1
    k = int(np.flatnonzero(diff <= 0)[0])
    if diff[k] == 0:
        return float(p_miss[k]), float(thr[k])
    d0, d1 = diff[k - 1], diff[k]
    alpha = d0 / (d0 - d1)
    eer = p_miss[k - 1] + alpha * (p_miss[k] - p_miss[k - 1])
    return float(eer), float(_interp_threshold(thr[k - 1], thr[k], alpha))


def dcf_normalizer(c_miss: float = 10.0, c_fa: float = 1.0, p_target: float = 0.01) -> float:
    return min(c_miss * p_target, c_fa * (1.0 - p_target))


def compute_min_dcf(genuine, impostor, c_miss: float = 10.0, c_fa: float = 1.0,
                    p_target: float = 0.01) -> float:
    """Normalized minimum detection cost over all thresholds (SRE08 defaults)."""
    if c_miss <= 0 or c_fa <= 0:
        raise ValueError("detection costs must be positive")
    if not 0.0 < p_target < 1.0:
        raise ValueError("p_target must lie in (0, 1)")
    _, p_miss, p_fa = error_rates(genuine, impostor)
    cost = c_miss * p_miss * p_target + c_fa * p_fa * (1.0 - p_target)
    return float(np.min(cost) / dcf_normalizer(c_miss, c_fa, p_target))


def det_points(genuine, impostor) -> np.ndarray:
    """(P_fa, P_miss) pairs along the threshold sweep."""
    _, p_miss, p_fa = error_rates(genuine, impostor)
    return np.column_stack([p_fa, p_miss])


def _aligned(score_sets):
    ref = score_sets[0]
    ref_keys = [t.key for t in ref.trials]
    out = [ref.scores]
    for s in score_sets[1:]:
        pos = {t.key: k for k, t in enumerate(s.trials)}
        if len(pos) != len(ref_keys) or any(k not in pos for k in ref_keys):
            raise TrialError("score sets do not cover the same trials")
        out.append(s.scores[[pos[k] for k in ref_keys]])
    return out


def fuse_scores(score_sets, weights=None) -> ScoreSet:
    """Per-trial weighted sum of aligned systems; equal weights by default."""
    score_sets = list(score_sets)
    if not score_sets:
        raise ValueError("nothing to fuse")
    if weights is None:
        weights = [1.0 / len(score_sets)] * len(score_sets)
    if len(weights) != len(score_sets):
        raise ValueError(f"{len(weights)} weights for {len(score_sets)} systems")
    columns = _aligned(score_sets)
    fused = np.zeros_like(columns[0])
    for w, col in zip(weights, columns):
        fused = fused + w * col
    return ScoreSet(list(score_sets[0].trials), fused)


def fuse_vectors(a, b, a_id: str | None = None, b_id: str | None = None) -> np.ndarray:
    """Concatenate two embeddings of the same utterance."""
    if a_id is None:
        a_id = getattr(a, "id", None)
    if b_id is None:
        b_id = getattr(b, "id", None)
    if a_id is not None and b_id is not None and a_id != b_id:
        raise ValueError(f"cannot fuse vectors of different utterances: {a_id} vs {b_id}")
    va = np.asarray(getattr(a, "w", a), dtype=np.float64).reshape(-1)
    vb = np.asarray(getattr(b, "w", b), dtype=np.float64).reshape(-1)
    return np.concatenate([va, vb])


@dataclass
class TypeMetrics:
    eer: float
    min_dcf: float
    threshold: float
    det: np.ndarray
    n_genuine: int
    n_nontarget: int


@dataclass
class MetricReport:
    rows: dict  # trial type or "pooled" -> TypeMetrics (None when absent)
    average_eer: float
    average_min_dcf: float

    def format_table(self) -> str:
        lines = [f"{'non-target type':<18}{'EER%':>8}{'MinDCFx100':>12}{'#gen':>8}{'#non':>10}"]
        for name, m in self.rows.items():
            if m is None:
                lines.append(f"{name:<18}{'absent':>8}")
                continue
            lines.append(f"{name:<18}{100 * m.eer:8.2f}{100 * m.min_dcf:12.2f}"
                         f"{m.n_genuine:8d}{m.n_nontarget:10d}")
        lines.append(f"{'average':<18}{100 * self.average_eer:8.2f}"
                     f"{100 * self.average_min_dcf:12.2f}")
        return "\n".join(lines)


def _metrics(g, n, **dcf) -> TypeMetrics:
    eer, thr = compute_eer(g, n)
    return TypeMetrics(eer, compute_min_dcf(g, n, **dcf), thr, det_points(g, n), g.size, n.size)


def report(scores: ScoreSet, types=NONTARGET_TYPES, **dcf) -> MetricReport:
    """Genuine-vs-type metrics per non-target type, pooled over all of them, and
    the unweighted average over the present types."""
    g = scores.by_type(GENUINE)
    if g.size == 0:
        raise TrialError("no genuine trials to evaluate")
    rows, present = {}, []
    for t in types:
        n = scores.by_type(t)
        if n.size == 0:
            warnings.warn(f"no {t} trials; row marked absent")
            rows[t] = None
            continue
        rows[t] = _metrics(g, n, **dcf)
        present.append(rows[t])
    if not present:
        raise TrialError("no non-target trials to evaluate")
    pooled = np.concatenate([scores.by_type(t) for t in types])
    rows["pooled"] = _metrics(g, pooled, **dcf)
    return MetricReport(rows, float(np.mean([m.eer for m in present])),
                        float(np.mean([m.min_dcf for m in present])))


def write_det(path, points: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pfa, pmiss in points:
            fh.write(f"{pfa:.6f}\t{pmiss:.6f}\n")
