"""Accuracy/NME reports on the 7- and 3-class scales, and report comparison."""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import file_digest, load_checkpoint
from .dataset import (
    ANNOTATION_FILE,
    CLASS_NAMES_3,
    CLASS_NAMES_7,
    DEFAULT_LABEL_MAP_3,
    IMAGE_SIZE,
    N_LANDMARKS,
    label_map_code,
    load_annotations,
    remap_7_to_3,
    stack,
)
from .geometry import normalized_landmark_errors
from .model import ModelParams, predict_batch
from .train import model_from_checkpoint

REPORT_HEADER = ["dataset", "n", "acc7", "acc3", "nme", "labelmap3", "checkpoint_digest"]
PREDICT_CHUNK = 100


class EvalError(ValueError):
    pass


@dataclass
class EvalReport:
    dataset: str
    n: int
    acc7: float
    acc3: float
    nme: float
    confusion_7: np.ndarray   # rows = truth, columns = prediction
    confusion_3: np.ndarray
    recall_7: np.ndarray
    recall_3: np.ndarray
    checkpoint_digest: str
    labelmap3: str

    def summary_row(self) -> list[str]:
        return [self.dataset, str(self.n), repr(self.acc7), repr(self.acc3), repr(self.nme),
                self.labelmap3, self.checkpoint_digest]


def confusion(truth, pred, k: int) -> np.ndarray:
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (np.asarray(truth), np.asarray(pred)), 1)
    return m


def _recall(m: np.ndarray) -> np.ndarray:
    rows = m.sum(axis=1)
    return np.where(rows > 0, np.diag(m) / np.maximum(rows, 1), np.nan)


def build_report(pred_shapes, pred_labels, gt_shapes, gt_labels, *, dataset: str = "",
                 checkpoint_digest: str = "", label_map=DEFAULT_LABEL_MAP_3) -> EvalReport:
    """Assemble a report from predictions; the 3-class matrix remaps both truth and prediction."""
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    pred_labels = np.asarray(pred_labels, dtype=np.int64)
    n = gt_labels.size
    if n == 0:
        raise EvalError("cannot evaluate an empty dataset")
    c7 = confusion(gt_labels, pred_labels, 7)
    c3 = confusion(remap_7_to_3(gt_labels, label_map), remap_7_to_3(pred_labels, label_map), 3)
    nme = float(np.mean(normalized_landmark_errors(np.asarray(pred_shapes), np.asarray(gt_shapes))))
    return EvalReport(dataset, n, float(np.trace(c7)) / n, float(np.trace(c3)) / n, nme, c7, c3,
                      _recall(c7), _recall(c3), checkpoint_digest, label_map_code(label_map))


def dataset_id(path) -> str:
    """Content-derived id: the same data gives the same id wherever it lives."""
    ann = Path(path) / ANNOTATION_FILE
    return "sha256:" + hashlib.sha256(ann.read_bytes()).hexdigest()[:16]


def check_compatible(params: ModelParams) -> None:
    cfg = params.config
    if cfg.n_classes != 7:
        raise EvalError(f"checkpoint predicts {cfg.n_classes} classes; datasets carry 7")
    if cfg.n_landmarks != N_LANDMARKS:
        raise EvalError(f"checkpoint predicts {cfg.n_landmarks} landmarks; datasets carry {N_LANDMARKS}")
    if cfg.input_size != IMAGE_SIZE:
        raise EvalError(f"checkpoint expects {cfg.input_size}px images; datasets carry {IMAGE_SIZE}px")


def evaluate_model(params: ModelParams, samples, **kw) -> EvalReport:
    check_compatible(params)
    images, shapes, labels = stack(samples)
    pred_s, pred_l = [], []
    for s in range(0, len(labels), PREDICT_CHUNK):
        S, lab, _ = predict_batch(params, images[s:s + PREDICT_CHUNK])
        pred_s.append(S)
        pred_l.append(lab)
    return build_report(np.concatenate(pred_s), np.concatenate(pred_l), shapes, labels, **kw)


def evaluate(checkpoint, dataset, label_map=DEFAULT_LABEL_MAP_3) -> EvalReport:
    """Load a checkpoint and a dataset directory, validate both, then run inference."""
    params = model_from_checkpoint(load_checkpoint(checkpoint))
    check_compatible(params)
    samples = load_annotations(dataset)
    if not samples:
        raise EvalError(f"dataset {dataset} is empty")
    return evaluate_model(params, samples, dataset=dataset_id(dataset),
                          checkpoint_digest=file_digest(checkpoint), label_map=label_map)


# ---------------------------------------------------------------------------
# report files


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def confusion_csv(m: np.ndarray, names: list[str]) -> str:
    return _csv([["truth\\pred"] + names] + [[names[i]] + [str(int(v)) for v in row] for i, row in enumerate(m)])


def report_text(r: EvalReport) -> str:
    lines = [
        f"dataset            {r.dataset}",
        f"checkpoint sha256  {r.checkpoint_digest}",
        f"label map (7->3)   {r.labelmap3}  "
        + " ".join(f"{a}->{CLASS_NAMES_3[int(b)]}" for a, b in zip(CLASS_NAMES_7, r.labelmap3)),
        f"samples            {r.n}",
        f"accuracy (7)       {r.acc7:.4f}",
        f"accuracy (3)       {r.acc3:.4f}",
        f"mean NME           {r.nme:.4f}",
        "",
        "per-class recall (7)",
    ]
    lines += [f"  {name:<10} {rec:.4f}" for name, rec in zip(CLASS_NAMES_7, r.recall_7)]
    lines += ["per-class recall (3)"]
    lines += [f"  {name:<10} {rec:.4f}" for name, rec in zip(CLASS_NAMES_3, r.recall_3)]
    width = max(len(n) for n in CLASS_NAMES_7) + 1
    lines += ["", "confusion (7), rows = truth", " " * width + "".join(f"{n[:6]:>7}" for n in CLASS_NAMES_7)]
    lines += [f"{CLASS_NAMES_7[i]:<{width}}" + "".join(f"{v:>7}" for v in row) for i, row in enumerate(r.confusion_7)]
    return "\n".join(lines) + "\n"


def write_report(r: EvalReport, out_dir) -> dict[str, Path]:
    """Write report.csv, report.txt, confusion7.csv and confusion3.csv."""
    out = Path(out_dir)
    files = {
        "report.csv": _csv([REPORT_HEADER, r.summary_row()]),
        "report.txt": report_text(r),
        "confusion7.csv": confusion_csv(r.confusion_7, CLASS_NAMES_7),
        "confusion3.csv": confusion_csv(r.confusion_3, CLASS_NAMES_3),
    }
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, text in files.items():
        (out / name).write_text(text)
        paths[name] = out / name
    return paths


@dataclass
class ReportSummary:
    dataset: str
    n: int
    acc7: float
    acc3: float
    nme: float
    labelmap3: str
    checkpoint_digest: str

    @classmethod
    def of(cls, r: EvalReport) -> "ReportSummary":
        return cls(r.dataset, r.n, r.acc7, r.acc3, r.nme, r.labelmap3, r.checkpoint_digest)


def read_report(path) -> ReportSummary:
    p = Path(path)
    if p.is_dir():
        p = p / "report.csv"
    try:
        with open(p, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise EvalError(f"cannot read report {p}: {exc.strerror}") from None
    if len(rows) != 2 or rows[0] != REPORT_HEADER or len(rows[1]) != len(REPORT_HEADER):
        raise EvalError(f"{p}: not a report CSV (expected header {','.join(REPORT_HEADER)} and one row)")
    v = dict(zip(REPORT_HEADER, rows[1]))
    try:
        return ReportSummary(v["dataset"], int(v["n"]), float(v["acc7"]), float(v["acc3"]), float(v["nme"]),
                             v["labelmap3"], v["checkpoint_digest"])
    except ValueError as exc:
        raise EvalError(f"{p}: {exc}") from None


# ---------------------------------------------------------------------------
# comparison

COMPARE_METRICS = ("acc7", "acc3", "nme")


@dataclass
class Comparison:
    names: tuple[str, str]
    a: ReportSummary
    b: ReportSummary

    def delta(self, metric: str) -> float:
        return getattr(self.a, metric) - getattr(self.b, metric)

    def text(self) -> str:
        na, nb = self.names
        w = max(8, len(na), len(nb)) + 2
        lines = [f"dataset {self.a.dataset}  n={self.a.n}  label map {self.a.labelmap3}",
                 f"{'metric':<8}{na:>{w}}{nb:>{w}}{'delta':>{w}}"]
        for m in COMPARE_METRICS:
            lines.append(f"{m:<8}{getattr(self.a, m):>{w}.4f}{getattr(self.b, m):>{w}.4f}{self.delta(m):>+{w}.4f}")
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        na, nb = self.names
        rows = [["metric", na, nb, "delta"]]
        rows += [[m, repr(getattr(self.a, m)), repr(getattr(self.b, m)), f"{self.delta(m):+.6f}"]
                 for m in COMPARE_METRICS]
        return _csv(rows)


def compare(a, b, names: tuple[str, str] = ("a", "b")) -> Comparison:
    """Side-by-side metrics with deltas (a - b); both reports must share dataset and label map."""
    a = ReportSummary.of(a) if isinstance(a, EvalReport) else a
    b = ReportSummary.of(b) if isinstance(b, EvalReport) else b
    if a.dataset != b.dataset or a.n != b.n:
        raise EvalError(f"reports cover different datasets ({a.dataset}, n={a.n} vs {b.dataset}, n={b.n})")
    if a.labelmap3 != b.labelmap3:
        raise EvalError(f"reports use different 7->3 label maps ({a.labelmap3} vs {b.labelmap3})")
    if names[0] == names[1]:
        raise EvalError(f"comparison columns need distinct names; got {names[0]!r} twice")
    return Comparison(tuple(names), a, b)
