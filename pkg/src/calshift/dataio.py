"""File formats: datasets, detector bundles, prediction dumps, report CSVs.

Everything is text-based and diffable. Floats are written with repr so
float64 values round-trip bit-exactly; all writes are whole-file atomic
(write to a temp file in the target directory, then rename). NaN metric
values appear as the marker ``NA``.
"""

from __future__ import annotations

import json
import math
import os
import tempfile

import numpy as np

from .calib import CalibratedDetector
from .dataset import UNLABELED, LabeledDataset
from .errors import ConfigurationError, DataFormatError
from .evalkit import ConfidenceInterval, ReferralCurve
from .metrics import BinStats, MetricReport
from .nncore import load_checkpoint, save_checkpoint

DATASET_MAGIC = "#calshift-dataset-v1"
BUNDLE_MANIFEST = "manifest.json"


def atomic_write_text(path: str, text: str) -> None:
    """Write a file atomically: temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt_float(v: float) -> str:
    return "NA" if (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _parse_float(s: str) -> float:
    return math.nan if s == "NA" else float(s)


def _provenance_lines(provenance: dict | None) -> list[str]:
    """Comment lines embedding run provenance (config digest, seed)."""
    if not provenance:
        return []
    return [f"#{k}={provenance[k]}" for k in sorted(provenance)]


def _skip_comments(lines: list[str]) -> list[str]:
    return [l for l in lines if not l.startswith("#")]


# ---------------------------------------------------------------------------
# dataset files

def save_dataset(ds: LabeledDataset, path: str) -> None:
    """Dataset file: magic line, key=value header, one CSV row per example.

    Row layout: id,label[,month],f0..f{d-1}; label is 0, 1 or ``?``.
    Binary features are written as integers, dense features with repr.
    """
    has_months = ds.months is not None
    lines = [DATASET_MAGIC]
    header = f"#dimension={ds.dimension} mode={ds.mode} months={int(has_months)}"
    lines.append(header)
    for key in sorted(ds.meta):
        lines.append(f"#meta {key}={ds.meta[key]}")
    binary = ds.mode == "binary-drebin-like"
    for i in range(len(ds)):
        label = ds.labels[i]
        fields = [ds.ids[i], "?" if label == UNLABELED else str(int(label))]
        if has_months:
            fields.append(str(int(ds.months[i])))
        row = ds.features[i]
        if binary:
            fields.extend(str(int(v)) for v in row)
        else:
            fields.extend(repr(float(v)) for v in row)
        lines.append(",".join(fields))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_dataset(path: str) -> LabeledDataset:
    """Parse a dataset file; errors name the offending line and field."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != DATASET_MAGIC:
        raise DataFormatError(f"{path}: line 1: missing {DATASET_MAGIC} magic")
    if len(lines) < 2 or not lines[1].startswith("#"):
        raise DataFormatError(f"{path}: line 2: missing header line")
    header = {}
    for part in lines[1][1:].split():
        if "=" not in part:
            raise DataFormatError(f"{path}: line 2: bad header field {part!r}")
        k, v = part.split("=", 1)
        header[k] = v
    try:
        dimension = int(header["dimension"])
        mode = header["mode"]
        has_months = bool(int(header["months"]))
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}: line 2: bad header ({exc})") from exc

    meta = {}
    rows = []
    expected = 2 + (1 if has_months else 0) + dimension
    for lineno, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        if line.startswith("#meta "):
            body = line[len("#meta ") :]
            if "=" not in body:
                raise DataFormatError(f"{path}: line {lineno}: bad meta line")
            k, v = body.split("=", 1)
            meta[k] = v
            continue
        if line.startswith("#"):
            continue
        fields = line.split(",")
        if len(fields) != expected:
            raise DataFormatError(
                f"{path}: line {lineno}: expected {expected} fields, got {len(fields)}"
            )
        ex_id = fields[0]
        if fields[1] == "?":
            label = UNLABELED
        elif fields[1] in ("0", "1"):
            label = int(fields[1])
        else:
            raise DataFormatError(
                f"{path}: line {lineno}: field 2: label must be 0, 1 or ?, got {fields[1]!r}"
            )
        month = None
        offset = 2
        if has_months:
            try:
                month = int(fields[2])
            except ValueError:
                raise DataFormatError(
                    f"{path}: line {lineno}: field 3: bad month {fields[2]!r}"
                ) from None
            offset = 3
        feats = []
        for j, raw in enumerate(fields[offset:]):
            try:
                feats.append(float(raw))
            except ValueError:
                raise DataFormatError(
                    f"{path}: line {lineno}: field {offset + j + 1}: bad value {raw!r}"
                ) from None
        rows.append((ex_id, label, month, feats))

    n = len(rows)
    features = np.array([r[3] for r in rows], dtype=np.float64).reshape(n, dimension)
    return LabeledDataset(
        features=features,
        labels=np.array([r[1] for r in rows], dtype=np.int64),
        ids=[r[0] for r in rows],
        months=np.array([r[2] for r in rows], dtype=np.int64) if has_months else None,
        mode=mode,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# detector bundles

def save_detector(det: CalibratedDetector, directory: str) -> None:
    """Bundle: manifest.json plus one checkpoint file per member."""
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "format": "calshift-detector-v1",
        "kind": det.kind,
        "size": len(det.members),
        "temperature": det.temperature,
        "weights": None if det.weights is None else det.weights.tolist(),
        "samples_per_prediction": det.samples_per_prediction,
        "member_seeds": list(det.member_seeds),
        "members": [f"member_{i:03d}.json" for i in range(len(det.members))],
    }
    for i, model in enumerate(det.members):
        save_checkpoint(model, os.path.join(directory, manifest["members"][i]))
    atomic_write_text(
        os.path.join(directory, BUNDLE_MANIFEST),
        json.dumps(manifest, sort_keys=True, indent=1),
    )


def load_detector(directory: str) -> CalibratedDetector:
    manifest_path = os.path.join(directory, BUNDLE_MANIFEST)
    if not os.path.exists(manifest_path):
        raise ConfigurationError(f"no detector manifest at {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "calshift-detector-v1":
        raise ConfigurationError("not a recognized detector bundle")
    members = [load_checkpoint(os.path.join(directory, m)) for m in manifest["members"]]
    weights = manifest["weights"]
    return CalibratedDetector(
        kind=manifest["kind"],
        members=members,
        temperature=manifest["temperature"],
        weights=None if weights is None else np.array(weights, dtype=np.float64),
        samples_per_prediction=manifest["samples_per_prediction"],
        member_seeds=list(manifest["member_seeds"]),
    )


# ---------------------------------------------------------------------------
# prediction dumps

def save_predictions(ids, member_probs: np.ndarray, weights: np.ndarray, path: str,
                     provenance: dict | None = None) -> None:
    """CSV with columns id,member_probs,weights; lists are ;-joined."""
    lines = _provenance_lines(provenance) + ["id,member_probs,weights"]
    w_text = ";".join(repr(float(w)) for w in weights)
    for i, ex_id in enumerate(ids):
        probs = ";".join(repr(float(p)) for p in member_probs[i])
        lines.append(f"{ex_id},{probs},{w_text}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_predictions(path: str):
    """Returns (ids, member_probs (n, T), weights (T,))."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = _skip_comments(fh.read().splitlines())
    if not lines or lines[0] != "id,member_probs,weights":
        raise DataFormatError(f"{path}: line 1: bad prediction header")
    ids, probs, weights = [], [], None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        fields = line.split(",")
        if len(fields) != 3:
            raise DataFormatError(f"{path}: line {lineno}: expected 3 fields")
        ids.append(fields[0])
        probs.append([float(v) for v in fields[1].split(";")])
        weights = np.array([float(v) for v in fields[2].split(";")])
    return ids, np.array(probs, dtype=np.float64), weights


# ---------------------------------------------------------------------------
# report tables

def metrics_to_csv(report: MetricReport, path: str, provenance: dict | None = None) -> None:
    lines = _provenance_lines(provenance) + ["metric,value"]
    lines += [f"{name},{_fmt_float(value)}" for name, value in report.rows()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def metrics_to_json(report: MetricReport, path: str, provenance: dict | None = None) -> None:
    doc = {name: (None if math.isnan(v) else v) for name, v in report.rows()}
    if provenance:
        doc["provenance"] = dict(provenance)
    atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=1))


def load_metrics_csv(path: str) -> dict[str, float]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = _skip_comments(fh.read().splitlines())
    if not lines or lines[0] != "metric,value":
        raise DataFormatError(f"{path}: line 1: bad metrics header")
    out = {}
    for line in lines[1:]:
        if not line:
            continue
        name, value = line.split(",", 1)
        out[name] = _parse_float(value)
    return out


def bins_to_csv(bins: list[BinStats], path: str, provenance: dict | None = None) -> None:
    lines = _provenance_lines(provenance) + ["lower,upper,count,conf,frac_pos"]
    for b in bins:
        lines.append(
            f"{_fmt_float(b.lower)},{_fmt_float(b.upper)},{b.count},"
            f"{_fmt_float(b.conf)},{_fmt_float(b.frac_pos)}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def reliability_to_csv(rows, path: str, provenance: dict | None = None) -> None:
    lines = _provenance_lines(provenance) + ["conf,frac_pos,count"]
    for conf, frac, count in rows:
        lines.append(f"{_fmt_float(conf)},{_fmt_float(frac)},{count}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def referral_to_csv(curve: ReferralCurve, path: str, provenance: dict | None = None) -> None:
    lines = _provenance_lines(provenance) + ["tau,retained,coverage,acc,bacc"]
    for tau, retained, coverage, acc, bacc in curve.rows():
        lines.append(
            f"{_fmt_float(tau)},{retained},{_fmt_float(coverage)},"
            f"{_fmt_float(acc)},{_fmt_float(bacc)}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def histogram_to_csv(rows, path: str, provenance: dict | None = None) -> None:
    lines = _provenance_lines(provenance) + ["lower,upper,count,density"]
    for (lower, upper), count, density in rows:
        lines.append(f"{_fmt_float(lower)},{_fmt_float(upper)},{count},{_fmt_float(density)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def intervals_to_csv(entries: list[tuple[str, ConfidenceInterval]], path: str,
                     provenance: dict | None = None) -> None:
    lines = _provenance_lines(provenance) + ["statistic,point,lower,upper,level,repetitions"]
    for name, ci in entries:
        lines.append(
            f"{name},{_fmt_float(ci.point)},{_fmt_float(ci.lower)},"
            f"{_fmt_float(ci.upper)},{_fmt_float(ci.level)},{ci.repetitions}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# svg emitters (pure text output, no plotting dependency)

_SVG_SIZE = 360
_MARGIN = 40


def _svg_header(provenance: dict | None = None):
    s = _SVG_SIZE
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{s}" height="{s}" '
        f'viewBox="0 0 {s} {s}">',
    ]
    if provenance:
        body = " ".join(f"{k}={provenance[k]}" for k in sorted(provenance))
        lines.append(f"<!-- {body} -->")
    lines.append(f'<rect width="{s}" height="{s}" fill="white"/>')
    return lines


def _to_px(x, y, xmax=1.0):
    span = _SVG_SIZE - 2 * _MARGIN
    px = _MARGIN + (x / xmax) * span
    py = _SVG_SIZE - _MARGIN - y * span
    return f"{px:.2f}", f"{py:.2f}"


def reliability_svg(rows, path: str, provenance: dict | None = None) -> None:
    """Reliability diagram: per-bin points against the diagonal."""
    parts = _svg_header(provenance)
    x0, y0 = _to_px(0.0, 0.0)
    x1, y1 = _to_px(1.0, 1.0)
    parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y1}" stroke="#999" stroke-dasharray="4 3"/>')
    parts.append(f'<rect x="{_MARGIN}" y="{_MARGIN}" width="{_SVG_SIZE-2*_MARGIN}" height="{_SVG_SIZE-2*_MARGIN}" fill="none" stroke="black"/>')
    for conf, frac, count in rows:
        cx, cy = _to_px(conf, frac)
        parts.append(f'<circle cx="{cx}" cy="{cy}" r="4" fill="#1f5fbf"/>')
        parts.append(f'<text x="{cx}" y="{float(cy)-6:.2f}" font-size="8" text-anchor="middle">{count}</text>')
    parts.append("</svg>")
    atomic_write_text(path, "\n".join(parts) + "\n")


def referral_svg(curve: ReferralCurve, path: str, provenance: dict | None = None) -> None:
    """Accuracy (solid) and balanced accuracy (dashed) against tau."""
    parts = _svg_header(provenance)
    xmax = float(curve.taus[-1]) if len(curve.taus) and curve.taus[-1] > 0 else 1.0
    parts.append(f'<rect x="{_MARGIN}" y="{_MARGIN}" width="{_SVG_SIZE-2*_MARGIN}" height="{_SVG_SIZE-2*_MARGIN}" fill="none" stroke="black"/>')
    for values, style in ((curve.acc, 'stroke="#1f5fbf"'), (curve.bacc, 'stroke="#bf3f1f" stroke-dasharray="4 3"')):
        pts = []
        for tau, v in zip(curve.taus, values):
            if math.isnan(v):
                continue
            px, py = _to_px(float(tau), float(v), xmax=xmax)
            pts.append(f"{px},{py}")
        if pts:
            parts.append(f'<polyline fill="none" {style} points="{" ".join(pts)}"/>')
    parts.append("</svg>")
    atomic_write_text(path, "\n".join(parts) + "\n")
