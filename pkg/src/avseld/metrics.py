"""DCASE 2023 / 2024 SELD metrics, aggregate scores, reliability bins and MSE distributions.

With one prediction per class and frame, matching is positional: a frame/class
cell is a *match* when both prediction and reference are active there.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .objectives import cartesian_to_spherical, spherical_to_cartesian

DOA_THRESHOLD = 20.0
DIST_THRESHOLD = 1.0
SEGMENT_FRAMES = 10


@dataclass
class EventGrid:
    activity: np.ndarray  # [L, N] bool
    doa: np.ndarray  # [L, N, 3], unit rows where active
    distance: np.ndarray | None = None  # [L, N] metres

    def __post_init__(self):
        self.activity = np.asarray(self.activity, dtype=bool)
        self.doa = np.asarray(self.doa, dtype=np.float64)
        if self.doa.shape != self.activity.shape + (3,):
            raise ValueError(f"doa shape {self.doa.shape} does not match activity {self.activity.shape}")
        if self.distance is not None:
            self.distance = np.asarray(self.distance, dtype=np.float64)
            if self.distance.shape != self.activity.shape:
                raise ValueError("distance grid does not match activity")


def score_2023(er, f, le_deg, lr) -> float:
    return (er + (1.0 - f) + le_deg / 180.0 + (1.0 - lr)) / 4.0


def score_2024(f1, doae_deg, rde) -> float:
    return ((1.0 - f1) + doae_deg / 180.0 + rde) / 3.0


def _normalize(v, name="vector"):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError(f"zero-norm {name} has no direction")
    return v / n


def angular_error(u, v):
    """Angle in degrees between direction vectors (broadcasts over leading axes)."""
    u, v = _normalize(u), _normalize(v)
    return np.degrees(np.arccos(np.clip(np.sum(u * v, axis=-1), -1.0, 1.0)))


def _report_text(report) -> str:
    return "".join(f"{k}: {v}\n" for k, v in asdict(report).items())


def _report_flat(report) -> str:
    return "".join(f"{k}={v}\n" for k, v in asdict(report).items())


@dataclass
class Seld2023Report:
    ER: float
    F: float
    LE: float
    LR: float
    Score: float
    undefined_localization: bool = False

    to_text = _report_text
    to_flat = _report_flat


@dataclass
class Seld2024Report:
    F1: float
    DOAE: float
    RDE: float
    Score: float
    undefined_localization: bool = False

    to_text = _report_text
    to_flat = _report_flat


def _check_aligned(pred: EventGrid, ref: EventGrid):
    if pred.activity.shape != ref.activity.shape:
        raise ValueError(f"prediction grid {pred.activity.shape} vs reference {ref.activity.shape}")


def _matched_angles(pred, ref, match):
    ang = np.zeros(match.shape)
    if match.any():
        ang[match] = angular_error(pred.doa[match], ref.doa[match])
    return ang


def _error_rate(fp, fn, n_ref, segment):
    total = 0
    for s in range(0, fp.shape[0], segment):
        n_fp, n_fn = int(fp[s:s + segment].sum()), int(fn[s:s + segment].sum())
        total += min(n_fn, n_fp) + max(0, n_fn - n_fp) + max(0, n_fp - n_fn)
    return total / max(n_ref, 1)


def _counts_2023(pred, ref, ang, threshold, segment):
    match = pred.activity & ref.activity
    tp = match & (ang <= threshold)
    fp = pred.activity & ~tp
    fn = ref.activity & ~tp
    n_tp, n_fp, n_fn = int(tp.sum()), int(fp.sum()), int(fn.sum())
    n_ref, n_match = int(ref.activity.sum()), int(match.sum())
    denom = 2 * n_tp + n_fp + n_fn
    f = 1.0 if denom == 0 else 2 * n_tp / denom
    undefined = n_match == 0 or n_ref == 0
    le = float(ang[match].mean()) if n_match else 180.0
    lr = n_match / n_ref if n_ref else 0.0
    er = _error_rate(fp, fn, n_ref, segment)
    return er, f, le, lr, undefined


def evaluate_2023(pred: EventGrid, ref: EventGrid, threshold: float = DOA_THRESHOLD,
                  segment: int = SEGMENT_FRAMES, average: str = "micro") -> Seld2023Report:
    """Location-dependent ER / F, class-dependent LE / LR and the aggregate score."""
    _check_aligned(pred, ref)
    ang = _matched_angles(pred, ref, pred.activity & ref.activity)
    if average == "micro":
        er, f, le, lr, undefined = _counts_2023(pred, ref, ang, threshold, segment)
    elif average == "macro":
        per_class = []
        for c in range(ref.activity.shape[1]):
            p = EventGrid(pred.activity[:, c:c + 1], pred.doa[:, c:c + 1])
            r = EventGrid(ref.activity[:, c:c + 1], ref.doa[:, c:c + 1])
            per_class.append(_counts_2023(p, r, ang[:, c:c + 1], threshold, segment))
        er, f, le, lr = (float(np.mean([pc[i] for pc in per_class])) for i in range(4))
        undefined = any(pc[4] for pc in per_class)
    else:
        raise ValueError(f"average must be 'micro' or 'macro', got {average!r}")
    return Seld2023Report(er, f, le, lr, score_2023(er, f, le, lr), undefined)


def _counts_2024(pred, ref, ang, threshold, dist_threshold):
    match = pred.activity & ref.activity
    rel = np.zeros(match.shape)
    if match.any():
        rel[match] = np.abs(pred.distance[match] - ref.distance[match]) / ref.distance[match]
    tp = match & (ang <= threshold) & (rel <= dist_threshold)
    n_tp = int(tp.sum())
    n_fp, n_fn = int((pred.activity & ~tp).sum()), int((ref.activity & ~tp).sum())
    denom = 2 * n_tp + n_fp + n_fn
    f1 = 1.0 if denom == 0 else 2 * n_tp / denom
    n_match = int(match.sum())
    doae = float(ang[match].mean()) if n_match else 180.0
    rde = float(rel[match].mean()) if n_match else 1.0
    return f1, doae, rde, n_match == 0


def evaluate_2024(pred: EventGrid, ref: EventGrid, threshold: float = DOA_THRESHOLD,
                  dist_threshold: float = DIST_THRESHOLD, average: str = "micro") -> Seld2024Report:
    """Location- and distance-dependent F1, DOA error, relative distance error and score."""
    _check_aligned(pred, ref)
    if pred.distance is None or ref.distance is None:
        raise ValueError("2024 evaluation needs distances on both grids")
    if np.any(ref.distance[ref.activity] <= 0):
        raise ValueError("reference distances must be positive")
    ang = _matched_angles(pred, ref, pred.activity & ref.activity)
    if average == "micro":
        f1, doae, rde, undefined = _counts_2024(pred, ref, ang, threshold, dist_threshold)
    elif average == "macro":
        per_class = []
        for c in range(ref.activity.shape[1]):
            sl = slice(c, c + 1)
            p = EventGrid(pred.activity[:, sl], pred.doa[:, sl], pred.distance[:, sl])
            r = EventGrid(ref.activity[:, sl], ref.doa[:, sl], ref.distance[:, sl])
            per_class.append(_counts_2024(p, r, ang[:, sl], threshold, dist_threshold))
        f1, doae, rde = (float(np.mean([pc[i] for pc in per_class])) for i in range(3))
        undefined = any(pc[3] for pc in per_class)
    else:
        raise ValueError(f"average must be 'micro' or 'macro', got {average!r}")
    return Seld2024Report(f1, doae, rde, score_2024(f1, doae, rde), undefined)


def grid_from_output(p, y, task_mode: str = "doa_2023", threshold: float = 0.5) -> EventGrid:
    """Threshold probabilities ``[L, N]`` and split locations ``[L, N, 3]`` into direction and distance."""
    p, y = np.asarray(p, dtype=np.float64), np.asarray(y, dtype=np.float64)
    norm = np.linalg.norm(y, axis=-1)
    safe = np.where(norm[..., None] > 0, y / np.maximum(norm, 1e-12)[..., None], [0.0, 0.0, 1.0])
    distance = norm if task_mode == "doa_distance_2024" else None
    return EventGrid(p > threshold, safe, distance)


def grid_from_targets(targets) -> EventGrid:
    loc = np.asarray(targets.location, dtype=np.float64)
    active = np.asarray(targets.activity) > 0.5
    norm = np.linalg.norm(loc, axis=-1)
    doa = np.where(norm[..., None] > 0, loc / np.maximum(norm, 1e-12)[..., None], [0.0, 0.0, 1.0])
    distance = norm if targets.task_mode == "doa_distance_2024" else None
    return EventGrid(active, doa, distance)


def grid_from_events(rows, n_frames: int, n_classes: int) -> EventGrid:
    """Rasterise prediction/reference rows (frame, class, az, el[, distance])."""
    activity = np.zeros((n_frames, n_classes), dtype=bool)
    doa = np.zeros((n_frames, n_classes, 3))
    doa[..., 2] = 1.0
    distance = np.zeros((n_frames, n_classes))
    has_distance = False
    for r in rows:
        if not (0 <= r.frame < n_frames and 0 <= r.cls < n_classes):
            raise ValueError(f"row outside the grid: frame {r.frame}, class {r.cls}")
        activity[r.frame, r.cls] = True
        doa[r.frame, r.cls] = spherical_to_cartesian(r.azimuth, r.elevation)
        if r.distance is not None:
            distance[r.frame, r.cls] = r.distance
            has_distance = True
    return EventGrid(activity, doa, distance if has_distance else None)


def events_from_output(p, y, task_mode: str = "doa_2023", threshold: float = 0.5):
    """Prediction rows for every cell above ``threshold``, with confidence."""
    from .io import EventRow

    p, y = np.asarray(p), np.asarray(y, dtype=np.float64)
    az, el = cartesian_to_spherical(y)
    dist = np.linalg.norm(y, axis=-1)
    rows = []
    for frame, cls in zip(*np.nonzero(p > threshold)):
        rows.append(EventRow(int(frame), int(cls), float(az[frame, cls]), float(el[frame, cls]),
                             float(dist[frame, cls]) if task_mode == "doa_distance_2024" else None,
                             float(p[frame, cls])))
    return rows


@dataclass
class CalibrationBin:
    lower: float
    upper: float
    count: int
    mean_confidence: float | None
    accuracy: float | None


@dataclass
class CalibrationReport:
    per_class: dict = field(default_factory=dict)  # class index -> list[CalibrationBin]
    pooled: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = ["class\tlower\tupper\tcount\tmean_confidence\taccuracy"]
        for name, bins in [("all", self.pooled)] + sorted(self.per_class.items()):
            for b in bins:
                lines.append(f"{name}\t{b.lower:.3f}\t{b.upper:.3f}\t{b.count}\t"
                             f"{_fmt(b.mean_confidence)}\t{_fmt(b.accuracy)}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    return "null" if v is None else f"{v:.6f}"


def _bins(conf, correct, edges):
    idx = np.searchsorted(edges, conf, side="left") - 1
    out = []
    for i in range(len(edges) - 1):
        sel = idx == i
        n = int(sel.sum())
        out.append(CalibrationBin(float(edges[i]), float(edges[i + 1]), n,
                                  float(conf[sel].mean()) if n else None,
                                  float(correct[sel].mean()) if n else None))
    return out


def calibration_bins(confidence, reference_activity, n_bins: int = 10, threshold: float = 0.5) -> CalibrationReport:
    """Reliability data over ``(threshold, 1]``; accuracy is the reference-active fraction."""
    conf = np.asarray(confidence, dtype=np.float64)
    ref = np.asarray(reference_activity) > 0.5
    if conf.shape != ref.shape:
        raise ValueError(f"confidence {conf.shape} vs reference {ref.shape}")
    n_classes = conf.shape[-1]
    conf, ref = conf.reshape(-1, n_classes), ref.reshape(-1, n_classes)
    edges = np.linspace(threshold, 1.0, n_bins + 1)
    report = CalibrationReport()
    keep = conf > threshold
    report.pooled = _bins(conf[keep], ref[keep], edges)
    for c in range(n_classes):
        k = keep[:, c]
        report.per_class[c] = _bins(conf[k, c], ref[k, c], edges)
    return report


def mse_distribution(preds, refs) -> list[float]:
    """Per-clip activity-masked location MSE.

    ``preds`` are ``[L, N, 3]`` location arrays, ``refs`` are targets with
    ``activity`` and ``location``.
    """
    out = []
    for y_hat, ref in zip(preds, refs, strict=True):
        err = (np.asarray(ref.location, dtype=np.float64) - np.asarray(y_hat, dtype=np.float64))
        err = err * np.asarray(ref.activity, dtype=np.float64)[..., None]
        out.append(float((err ** 2).sum(-1).mean()))
    return out
