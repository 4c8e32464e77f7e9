"""Detection metrics: matching, precision/recall, all-point AP, mAP, confusion matrix.

Detections are ``Detection`` objects; ground truths are ``(BBox, class_id)``
pairs (``data.Target``). Dataset-level functions take one list per image.
"""
import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxes import greedy_match, iou_matrix

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# IoU values sitting on a threshold (0.6 vs 0.6) must count despite rounding.
IOU_SLACK = 1e-9


def iou(a, b):
    """IoU of two normalized center-format boxes."""
    return float(iou_matrix([a.xyxy()], [b.xyxy()])[0, 0])


def _xyxy(boxes):
    return np.asarray([b.xyxy() for b in boxes], dtype=np.float64).reshape(-1, 4)


@dataclass
class MatchResult:
    """Greedy matching outcome of one image at one IoU threshold.

    ``scores``, ``classes``, ``tp`` and ``ious`` run over detections in
    descending score order (ties keep input order).
    """

    scores: np.ndarray
    classes: np.ndarray
    tp: np.ndarray
    ious: np.ndarray
    n_gt: dict = field(default_factory=dict)

    @property
    def num_tp(self):
        return int(self.tp.sum())

    @property
    def num_fp(self):
        return int(len(self.tp) - self.tp.sum())

    @property
    def num_fn(self):
        return int(sum(self.n_gt.values()) - self.tp.sum())

    def for_class(self, c):
        m = self.classes == c
        return MatchResult(self.scores[m], self.classes[m], self.tp[m], self.ious[m], {c: self.n_gt.get(c, 0)})

    def fn_per_class(self):
        return {c: n - int(self.tp[self.classes == c].sum()) for c, n in self.n_gt.items()}


def match_detections(dets, gts, thr=0.5):
    """Per class, highest score first, take the unmatched ground truth with best IoU if >= thr."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    dets = [dets[i] for i in order]
    scores = np.asarray([d.score for d in dets], dtype=np.float64)
    classes = np.asarray([d.class_id for d in dets], dtype=np.int64)
    tp = np.zeros(len(dets), dtype=bool)
    ious = np.zeros(len(dets), dtype=np.float64)
    gt_cls = np.asarray([g[1] for g in gts], dtype=np.int64)
    n_gt = {int(c): int((gt_cls == c).sum()) for c in np.unique(gt_cls)}
    for c in set(classes.tolist()) | set(n_gt):
        di = np.flatnonzero(classes == c)
        gi = np.flatnonzero(gt_cls == c)
        if len(di) == 0 or len(gi) == 0:
            continue
        m = iou_matrix(_xyxy([dets[i].box for i in di]), _xyxy([gts[j][0] for j in gi]))
        match = greedy_match(m, thr - IOU_SLACK)
        hit = match >= 0
        tp[di[hit]] = True
        ious[di[hit]] = m[np.flatnonzero(hit), match[hit]]
    return MatchResult(scores, classes, tp, ious, n_gt)


def precision_recall(m):
    """Precision TP/(TP+FP) and recall TP/(TP+FN); 0 with no detections, recall 1 with no truth."""
    tp, fp, fn = m.num_tp, m.num_fp, m.num_fn
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 1.0
    return p, r


def _sorted_flags(scored_flags):
    flags = sorted(scored_flags, key=lambda sf: -sf[0])  # stable: ties keep insertion order
    return np.asarray([bool(f) for _, f in flags], dtype=bool)


def pr_curve(scored_flags, n_gt):
    """(recall, precision) after each detection prefix, in descending score order."""
    tp = _sorted_flags(scored_flags)
    if len(tp) == 0:
        return []
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt if n_gt else np.zeros(len(tp))
    precision = ctp / (ctp + cfp)
    return list(zip(recall.tolist(), precision.tolist()))


def area_under_pr(points):
    """Area under the right-to-left running-max precision envelope of a PR curve."""
    if not points:
        return 0.0
    rec = np.asarray([r for r, _ in points])
    prec = np.asarray([p for _, p in points])
    envelope = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], rec]))
    return float(np.sum(steps * envelope))


def average_precision(scored_flags, n_gt):
    """All-point interpolated AP: exact area under the precision envelope over recall.

    With no ground truth, AP is 0 if anything was detected and 1 otherwise.
    """
    if n_gt == 0:
        return 0.0 if len(scored_flags) else 1.0
    return area_under_pr(pr_curve(scored_flags, n_gt))


def mean_ap(per_class_ap):
    aps = list(per_class_ap)
    if not aps:
        raise ValueError("mean_ap needs at least one class")
    return float(sum(aps) / len(aps))


def _accumulate(dets_per_image, gts_per_image, thr):
    """Per-class scored TP flags and ground-truth counts pooled over images."""
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError(f"{len(dets_per_image)} detection lists for {len(gts_per_image)} images")
    flags, n_gt = {}, {}
    for dets, gts in zip(dets_per_image, gts_per_image):
        m = match_detections(dets, gts, thr)
        for c, n in m.n_gt.items():
            n_gt[c] = n_gt.get(c, 0) + n
        for s, c, t in zip(m.scores.tolist(), m.classes.tolist(), m.tp.tolist()):
            flags.setdefault(c, []).append((s, t))
    return flags, n_gt


def per_class_ap(dets_per_image, gts_per_image, thr=0.5):
    """AP for each class present in the ground truth."""
    flags, n_gt = _accumulate(dets_per_image, gts_per_image, thr)
    return {c: average_precision(flags.get(c, []), n) for c, n in sorted(n_gt.items())}


def map_at(dets_per_image, gts_per_image, thr=0.5):
    aps = per_class_ap(dets_per_image, gts_per_image, thr)
    return mean_ap(aps.values()) if aps else 0.0


def map_range(dets_per_image, gts_per_image, thresholds=IOU_THRESHOLDS):
    """Mean of mAP over IoU thresholds 0.50, 0.55, ..., 0.95."""
    return float(np.mean([map_at(dets_per_image, gts_per_image, t) for t in thresholds]))


def confusion_matrix(dets_per_image, gts_per_image, num_classes, conf_thresh=0.25, iou_thresh=0.5):
    """(K+1) x (K+1) counts; rows are true classes, columns predicted, index K is background.

    Per image, detections at or above ``conf_thresh`` are paired with ground
    truths class-agnostically, highest IoU first, one-to-one, IoU >= iou_thresh.
    """
    k = num_classes
    cm = np.zeros((k + 1, k + 1), dtype=np.int64)
    for dets, gts in zip(dets_per_image, gts_per_image):
        dets = [d for d in dets if d.score >= conf_thresh]
        m = iou_matrix(_xyxy([g[0] for g in gts]), _xyxy([d.box for d in dets]))
        gi, di = np.nonzero(m >= iou_thresh - IOU_SLACK)
        order = np.argsort(-m[gi, di], kind="stable")
        g_used = np.zeros(len(gts), dtype=bool)
        d_used = np.zeros(len(dets), dtype=bool)
        for g, d in zip(gi[order], di[order]):
            if g_used[g] or d_used[d]:
                continue
            g_used[g] = d_used[d] = True
            cm[gts[g][1], dets[d].class_id] += 1
        for g in np.flatnonzero(~g_used):
            cm[gts[g][1], k] += 1
        for d in np.flatnonzero(~d_used):
            cm[k, dets[d].class_id] += 1
    return cm


def normalize_rows(cm):
    cm = np.asarray(cm, dtype=np.float64)
    sums = cm.sum(axis=1, keepdims=True)
    return np.divide(cm, sums, out=np.zeros_like(cm), where=sums > 0)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    ap50: float
    ap50_95: float
    support: int


@dataclass
class EvalReport:
    per_class: dict
    precision: float
    recall: float
    map50: float
    map50_95: float
    confusion: list
    pr_samples: dict
    class_names: list

    def to_dict(self):
        d = asdict(self)
        d["per_class"] = {str(c): v for c, v in d["per_class"].items()}
        d["pr_samples"] = {str(c): v for c, v in d["pr_samples"].items()}
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, out_dir):
        """Write report.json, pr_curves.csv and confusion.csv; returns the paths."""
        from pathlib import Path

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = [out_dir / "report.json", out_dir / "pr_curves.csv", out_dir / "confusion.csv"]
        paths[0].write_text(self.to_json() + "\n")
        with open(paths[1], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class_id", "class_name", "recall", "precision"])
            for c, pts in sorted(self.pr_samples.items()):
                for r, p in pts:
                    w.writerow([c, self.class_names[c], f"{r:.6f}", f"{p:.6f}"])
        names = list(self.class_names) + ["background"]
        with open(paths[2], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\pred"] + names)
            for name, row in zip(names, self.confusion):
                w.writerow([name] + [int(v) for v in row])
        return paths


def evaluate(dets_per_image, gts_per_image, num_classes, class_names=None, conf_thresh=0.25):
    """Full report. AP uses every detection; precision/recall use those >= conf_thresh.

    Aggregates average over the classes that appear in the ground truth.
    """
    class_names = list(class_names or [str(c) for c in range(num_classes)])
    flags50, n_gt = _accumulate(dets_per_image, gts_per_image, 0.5)
    ap_by_thr = [per_class_ap(dets_per_image, gts_per_image, t) for t in IOU_THRESHOLDS]
    gated = [[d for d in dets if d.score >= conf_thresh] for dets in dets_per_image]
    per_class = {}
    for c in range(num_classes):
        n = n_gt.get(c, 0)
        fl = [f for s, f in flags50.get(c, []) if s >= conf_thresh]
        tp = sum(fl)
        p = tp / len(fl) if fl else 0.0
        r = tp / n if n else 1.0
        per_class[c] = ClassMetrics(
            precision=p,
            recall=r,
            ap50=ap_by_thr[0].get(c, average_precision(flags50.get(c, []), 0)),
            ap50_95=float(np.mean([a.get(c, average_precision(flags50.get(c, []), 0)) for a in ap_by_thr])),
            support=n,
        )
    present = sorted(n_gt)
    if present:
        agg = lambda attr: float(np.mean([getattr(per_class[c], attr) for c in present]))  # noqa: E731
        precision, recall = agg("precision"), agg("recall")
        map50 = mean_ap(ap_by_thr[0].values())
        map50_95 = float(np.mean([mean_ap(a.values()) for a in ap_by_thr]))
    else:
        precision = recall = map50 = map50_95 = 0.0
    cm = confusion_matrix(gated, gts_per_image, num_classes, conf_thresh, 0.5)
    pr = {c: pr_curve(flags50.get(c, []), n_gt.get(c, 0)) for c in range(num_classes)}
    return EvalReport(
        per_class=per_class,
        precision=precision,
        recall=recall,
        map50=map50,
        map50_95=map50_95,
        confusion=cm.tolist(),
        pr_samples=pr,
        class_names=class_names,
    )
