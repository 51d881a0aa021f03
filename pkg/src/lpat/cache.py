"""Line-oriented dataset cache.

Layout: magic ``LPAT-DATA v1``, the attribute list, the window length, the
scaling extrema, then the four sample sections (train_labeled,
train_unlabeled, valid, test). Each sample is a header line
``sample <serial> <end date> <label|u>`` followed by ``window`` rows of
full-precision decimal feature values.
"""

from __future__ import annotations

from datetime import date
from pathlib import Path

import numpy as np

from .data import DatasetSplit, Sample, ScalingParams

MAGIC = "LPAT-DATA v1"
SECTIONS = ("train_labeled", "train_unlabeled", "valid", "test")


class CacheFormatError(ValueError):
    """Dataset cache file is malformed or truncated."""


def save_split(split: DatasetSplit, path) -> None:
    lines = [
        MAGIC,
        "attrs " + ",".join(split.attrs),
        f"window {split.window}",
        "vmin " + " ".join(repr(float(v)) for v in split.scaling.v_min),
        "vmax " + " ".join(repr(float(v)) for v in split.scaling.v_max),
    ]
    for name in SECTIONS:
        samples = getattr(split, name)
        lines.append(f"section {name} {len(samples)}")
        for s in samples:
            label = "u" if s.label is None else str(int(s.label))
            lines.append(f"sample {s.serial} {s.window_end.isoformat()} {label}")
            for row in np.asarray(s.features, dtype=float):
                lines.append(" ".join(repr(float(x)) for x in row))
    lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def load_split(path) -> DatasetSplit:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != MAGIC:
        raise CacheFormatError(f"{path}: missing magic line {MAGIC!r}")

    def need(i, prefix):
        if i >= len(lines) or not lines[i].startswith(prefix):
            raise CacheFormatError(f"{path}: expected {prefix!r} at line {i + 1}")
        return lines[i][len(prefix):]

    attrs = tuple(a for a in need(1, "attrs ").split(",") if a)
    try:
        window = int(need(2, "window "))
        v_min = np.array([float(v) for v in need(3, "vmin ").split()])
        v_max = np.array([float(v) for v in need(4, "vmax ").split()])
    except ValueError as exc:
        raise CacheFormatError(f"{path}: bad header value ({exc})") from None
    if len(attrs) != v_min.size or v_min.size != v_max.size:
        raise CacheFormatError(f"{path}: attribute count disagrees with scaling")
    split = DatasetSplit(train_labeled=[], train_unlabeled=[], valid=[], test=[],
                         scaling=ScalingParams(v_min, v_max),
                         attrs=attrs, window=window)

    i = 5
    for name in SECTIONS:
        head = need(i, f"section {name} ")
        try:
            count = int(head)
        except ValueError:
            raise CacheFormatError(f"{path}: bad section count at line {i + 1}") from None
        i += 1
        bucket = getattr(split, name)
        for _ in range(count):
            parts = need(i, "sample ").split()
            if len(parts) != 3:
                raise CacheFormatError(f"{path}: malformed sample header at line {i + 1}")
            serial, end_str, label_str = parts
            try:
                end = date.fromisoformat(end_str)
            except ValueError:
                raise CacheFormatError(f"{path}: bad date at line {i + 1}") from None
            label = None if label_str == "u" else int(label_str)
            i += 1
            if i + window > len(lines):
                raise CacheFormatError(f"{path}: sample block cut short at line {i + 1}")
            try:
                feats = np.array(
                    [[float(v) for v in lines[i + r].split()] for r in range(window)])
            except ValueError as exc:
                raise CacheFormatError(f"{path}: bad feature value ({exc})") from None
            if feats.shape != (window, len(attrs)):
                raise CacheFormatError(
                    f"{path}: sample at line {i} has shape {feats.shape}, "
                    f"expected {(window, len(attrs))}")
            i += window
            bucket.append(Sample(features=feats, label=label, serial=serial,
                                 window_end=end))
    if i >= len(lines) or lines[i] != "end":
        raise CacheFormatError(f"{path}: missing end marker")
    return split
