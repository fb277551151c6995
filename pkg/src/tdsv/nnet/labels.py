"""Frame-label sets and the text label-file format.

One line per utterance::

    utt-id n_frames l0 l1 ... l_{n-1}

Phone label files use the same layout with symbolic labels; frames whose
symbol is in the silence set are dropped before training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TASKS = ("speaker", "phrase", "phone", "tcl")
SILENCE = frozenset({"sil", "pause"})


class LabelError(ValueError):
    pass


@dataclass
class LabelSet:
    labels: dict = field(default_factory=dict)  # utt id -> int array
    n_classes: int = 0
    task: str = "speaker"

    def __post_init__(self):
        if self.task not in TASKS:
            raise LabelError(f"unknown task {self.task!r}")
        self.labels = {k: np.asarray(v, dtype=np.int64) for k, v in self.labels.items()}
        for utt, lab in self.labels.items():
            if lab.size and (lab.min() < 0 or lab.max() >= self.n_classes):
                raise LabelError(f"{utt}: label out of range [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, utt_id: str) -> np.ndarray:
        return self.labels[utt_id]

    def ids(self) -> list:
        return list(self.labels)


def write_label_file(path, labelset: LabelSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for utt, lab in labelset.labels.items():
            fh.write(" ".join([utt, str(len(lab))] + [str(int(v)) for v in lab]) + "\n")


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise LabelError(f"{path}:{lineno}: malformed label line")
            try:
                n = int(parts[1])
            except ValueError as exc:
                raise LabelError(f"{path}:{lineno}: frame count is not an integer") from exc
            if len(parts) - 2 != n:
                raise LabelError(f"{path}:{lineno}: expected {n} labels, got {len(parts) - 2}")
            yield lineno, parts[0], parts[2:]


def read_label_file(path, n_classes: int | None = None, task: str = "speaker") -> LabelSet:
    labels = {}
    for lineno, utt, toks in _read_lines(path):
        try:
            labels[utt] = np.array([int(t) for t in toks], dtype=np.int64)
        except ValueError as exc:
            raise LabelError(f"{path}:{lineno}: non-integer label") from exc
    if n_classes is None:
        n_classes = 1 + max((int(v.max()) for v in labels.values() if v.size), default=-1)
    return LabelSet(labels, n_classes, task)


def read_class_table(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [line.split()[0] for line in fh if line.strip()]


def read_phone_labels(path, class_names, silence=SILENCE):
    """Read symbolic phone labels.

    Returns ``(labelset, masks)`` where ``masks[utt]`` marks the frames kept
    (non-silence). Silence symbols are removed from the class table.
    """
    table = [name for name in class_names if name not in silence]
    index = {name: i for i, name in enumerate(table)}
    labels, masks = {}, {}
    for lineno, utt, toks in _read_lines(path):
        mask = np.array([t not in silence for t in toks], dtype=bool)
        try:
            labels[utt] = np.array([index[t] for t in toks if t not in silence], dtype=np.int64)
        except KeyError as exc:
            raise LabelError(f"{path}:{lineno}: unknown phone {exc.args[0]!r}") from exc
        masks[utt] = mask
    return LabelSet(labels, len(table), "phone"), masks


def utterance_labels(utt_ids, utt_to_class: dict, frame_counts: dict, task="speaker") -> LabelSet:
    """Frame labels that repeat one class per utterance (speaker / phrase tasks)."""
    classes = sorted(set(utt_to_class[u] for u in utt_ids), key=str)
    index = {c: i for i, c in enumerate(classes)}
    labels = {u: np.full(frame_counts[u], index[utt_to_class[u]], dtype=np.int64) for u in utt_ids}
    return LabelSet(labels, len(classes), task)
