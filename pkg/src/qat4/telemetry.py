"""Evaluation, unique-level statistics and the JSON-lines training log.

Log format: the first line is a header ``{"format": "qat4-log", "version": 1}``;
every following line is one JSON object holding an EpochRecord. Floats are
written with ``repr`` precision so a read reproduces the written record
exactly.
"""

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import batch_iter
from .errors import FormatError, LogParseError
from .layers import cross_entropy_loss
from .quantize import TANH_CLIP_SCALE

LOG_FORMAT = "qat4-log"
LOG_VERSION = 1


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float
    test_loss: float
    lr: float
    unique_levels: dict = field(default_factory=dict)
    unique_min: int = 0
    unique_max: int = 0
    unique_mean: float = 0.0
    max_abs_master: dict = field(default_factory=dict)
    grad_norm_mean: float = 0.0
    seconds: float = 0.0
    nan_flag: bool = False


def evaluate_arrays(net, images, labels, batch_size=500):
    """Top-1 accuracy and mean loss on already-normalized images, eval mode."""
    correct = 0
    loss_sum = 0.0
    n = len(labels)
    for start in range(0, n, batch_size):
        x = images[start:start + batch_size]
        y = labels[start:start + batch_size]
        logits = net.forward(x, training=False)
        loss, _ = cross_entropy_loss(logits, y)
        loss_sum += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct / n, loss_sum / n


def evaluate(net, dataset, norm, batch_size=500):
    correct = 0
    loss_sum = 0.0
    for x, y in batch_iter(dataset, batch_size, norm=norm, shuffle=False):
        logits = net.forward(x, training=False)
        loss, _ = cross_entropy_loss(logits, y)
        loss_sum += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct / len(dataset), loss_sum / len(dataset)


def unique_level_summary(net):
    """(min, max, mean) distinct-level count over quantized layers."""
    counts = list(net.unique_levels().values())
    return min(counts), max(counts), float(np.mean(counts))


def max_abs_masters(net):
    return {p.name: float(np.max(np.abs(p.value))) for p in net.quantized_params()}


def _jsonable(record):
    d = asdict(record)
    for k, v in d.items():
        if isinstance(v, float) and not math.isfinite(v):
            d[k] = repr(v)
    return d


def write_log(record, path, header=None):
    """Append one record, creating the file with its header line if needed.

    ``header`` adds run-level entries (e.g. normalization constants) to the
    header line of a new file; it is ignored when appending.
    """
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8") as fh:
        if new:
            head = dict(header or {}, format=LOG_FORMAT, version=LOG_VERSION)
            fh.write(json.dumps(head, sort_keys=True) + "\n")
        fh.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")


def read_log_header(path):
    with open(path, encoding="utf-8") as fh:
        line = fh.readline()
    try:
        head = json.loads(line)
    except json.JSONDecodeError as exc:
        raise LogParseError(path, 1, f"invalid JSON ({exc.msg})") from None
    if not isinstance(head, dict) or head.get("format") != LOG_FORMAT:
        raise FormatError(f"{path}: not a {LOG_FORMAT} file")
    return head


def read_log(path):
    names = {f.name for f in fields(EpochRecord)}
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LogParseError(path, lineno, f"invalid JSON ({exc.msg})") from None
            if lineno == 1:
                if not isinstance(obj, dict) or obj.get("format") != LOG_FORMAT:
                    raise FormatError(f"{path}: not a {LOG_FORMAT} file")
                if obj.get("version") != LOG_VERSION:
                    raise FormatError(f"{path}: unsupported log version {obj.get('version')}")
                continue
            if not isinstance(obj, dict) or set(obj) != names:
                raise LogParseError(path, lineno, "record fields do not match EpochRecord")
            for k, v in obj.items():
                if isinstance(v, str) and v in ("nan", "inf", "-inf"):
                    obj[k] = float(v)
            records.append(EpochRecord(**obj))
    return records


CSV_COLUMNS = ("epoch", "train_loss", "train_acc", "test_loss", "test_acc", "lr",
               "unique_min", "unique_max", "unique_mean", "grad_norm_mean", "seconds",
               "nan_flag")


def export_csv(records, path):
    """Per-epoch curve table (accuracy/loss/unique levels) for external plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([getattr(r, c) for c in CSV_COLUMNS])


def clip_curve_csv(path, bound=TANH_CLIP_SCALE, lo=-6.0, hi=6.0, num=241):
    """Tanh soft clip vs hard clip, with their derivatives, sampled on [lo, hi]."""
    w = np.linspace(lo, hi, num)
    soft = bound * np.tanh(w / bound)
    hard = np.clip(w, -bound, bound)
    dsoft = 1.0 - np.tanh(w / bound) ** 2
    dhard = (np.abs(w) < bound).astype(float)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(("w", "tanh_clip", "hard_clip", "tanh_grad", "hard_grad"))
        for row in zip(w, soft, hard, dsoft, dhard):
            out.writerow([f"{v:.6g}" for v in row])
