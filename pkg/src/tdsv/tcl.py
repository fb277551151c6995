"""Time-contrastive frame labels: stream-wise (sTCL) and utterance-wise (uTCL)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nnet.labels import LabelSet


class TclError(ValueError):
    pass


@dataclass
class TclConfig:
    classes: int = 10
    chunk: int = 6
    mode: str = "utterance"
    drop_partial: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise TclError("need at least two TCL classes")
        if self.chunk < 1:
            raise TclError("chunk length must be positive")
        if self.mode not in ("stream", "utterance"):
            raise TclError(f"unknown TCL mode {self.mode!r}")


def stream_labels(n_frames: int, chunk: int = 6, classes: int = 10) -> np.ndarray:
    """Label of every frame of a concatenated stream: chunk i gets i mod classes."""
    return (np.arange(n_frames) // chunk) % classes


def segment_sizes(n_frames: int, classes: int) -> np.ndarray:
    """Sizes of the `classes` contiguous segments; the first ``n % classes`` get one extra frame."""
    base, rem = divmod(n_frames, classes)
    return base + (np.arange(classes) < rem)


def utterance_labels(n_frames: int, classes: int = 10) -> np.ndarray:
    if n_frames < 1:
        raise TclError("utterance has no frames")
    sizes = segment_sizes(n_frames, classes)
    return np.repeat(np.arange(classes), sizes)


def utcl_labels(frame_counts: dict, cfg: TclConfig | None = None) -> LabelSet:
    """uTCL: split each utterance uniformly into `classes` segments."""
    cfg = cfg or TclConfig(mode="utterance")
    labels = {utt: utterance_labels(int(n), cfg.classes) for utt, n in frame_counts.items()}
    return LabelSet(labels, cfg.classes, "tcl")


def stcl_labels(frame_counts: dict, cfg: TclConfig | None = None, shuffle: bool = True):
    """sTCL: shuffle utterances, concatenate them into one stream and label
    consecutive chunks of `chunk` frames cyclically.

    Returns ``(labelset, order)`` where `order` is the utterance order of the
    stream. With ``drop_partial`` the trailing partial chunk is removed; the
    dropped frames are a suffix of the stream, so each utterance keeps a
    prefix of its frames (``features[:len(labels)]``).
    """
    cfg = cfg or TclConfig(mode="stream")
    utts = list(frame_counts)
    total = int(sum(frame_counts[u] for u in utts))
    if total == 0:
        raise TclError("empty stream")
    if shuffle:
        rng = np.random.default_rng(cfg.seed)
        utts = [utts[i] for i in rng.permutation(len(utts))]
    stream = stream_labels(total, cfg.chunk, cfg.classes)
    if cfg.drop_partial and total % cfg.chunk:
        stream[total - total % cfg.chunk:] = -1
    labels, pos = {}, 0
    for u in utts:
        n = int(frame_counts[u])
        labels[u] = stream[pos:pos + n]
        pos += n
    if cfg.drop_partial:
        kept = {u: l[l >= 0] for u, l in labels.items()}
        return LabelSet({u: l for u, l in kept.items() if l.size}, cfg.classes, "tcl"), utts
    return LabelSet(labels, cfg.classes, "tcl"), utts
