"""Click-prompt evaluation: per-instance IoU, instance-averaged mIoU, and
report emission (CSV tables, JSON, data-ratio curves)."""

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

LOGIT_THRESHOLD = 0.0  # probability 0.5

MODES = ("simcmf", "scratch", "zero_shot")


def iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    for name, m in (("pred", pred_mask), ("gt", gt_mask)):
        vals = np.unique(m)
        if not np.isin(vals, (0, 1, False, True)).all():
            raise ValueError(f"{name} mask is not binary (values {vals[:8]})")
    pred_mask = pred_mask.astype(bool)
    gt_mask = gt_mask.astype(bool)
    union = int((pred_mask | gt_mask).sum())
    if union == 0:
        return 1.0
    return int((pred_mask & gt_mask).sum()) / union


@dataclass
class EvalReport:
    """Per-instance IoUs for one dataset/mode; mIoU is their mean in percent."""

    mode: str
    dataset: str = "dataset"
    entries: list = field(default_factory=list)  # (record_id, instance_id, iou)
    train_ratio: float | None = None

    @property
    def miou(self) -> float:
        if not self.entries:
            return 0.0
        return float(np.mean([e[2] for e in self.entries]) * 100.0)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "dataset": self.dataset,
            "train_ratio": self.train_ratio,
            "miou": self.miou,
            "entries": [
                {"record_id": r, "instance_id": i, "iou": v} for r, i, v in self.entries
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            mode=d["mode"],
            dataset=d.get("dataset", "dataset"),
            train_ratio=d.get("train_ratio"),
            entries=[
                (e["record_id"], e["instance_id"], e["iou"]) for e in d["entries"]
            ],
        )


def evaluate(model, records: list, mode: str = "simcmf",
             threshold: float = LOGIT_THRESHOLD, dataset: str = "dataset",
             train_ratio: float | None = None) -> EvalReport:
    """Prompt the model with each instance's click and score against that
    instance only. `zero_shot` feeds the record's natural-image reference to
    the bare backbone; the other modes feed the multi-channel image to the
    cross-modal model. No weights change in any mode."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got '{mode}'")
    entries = []
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    with torch.no_grad():
        for rec in records:
            if mode == "zero_shot":
                image = torch.from_numpy(np.ascontiguousarray(rec.rgb_reference()))
            else:
                image = torch.from_numpy(rec.image)
            for inst in rec.instances:
                if mode == "zero_shot":
                    pred = model.predict_rgb(image, inst.click)
                else:
                    pred = model.predict(image, inst.click)
                pred_mask = (pred.logits > threshold).cpu().numpy()
                entries.append((rec.id, inst.instance_id, iou(pred_mask, inst.mask)))
    if was_training and hasattr(model, "train"):
        model.train()
    return EvalReport(mode=mode, dataset=dataset, entries=entries, train_ratio=train_ratio)


def _write_csv(path: Path, header: list, rows: list) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def report(reports: list, out_dir) -> dict:
    """Emit comparison tables and curves for a set of evaluation reports.

    Writes report.json (everything), summary.csv (datasets x modes, with a
    simcmf-minus-scratch column when both are present), and, if any report
    carries a train_ratio, a data-ratio curve as CSV and PNG. Output bytes
    are a pure function of the input reports.
    """
    if not reports:
        raise ValueError("report needs at least one evaluation result")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}

    payload = {"reports": [r.to_dict() for r in reports]}
    json_path = out_dir / "report.json"
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    written["json"] = json_path

    flat = [r for r in reports if r.train_ratio is None]
    if flat:
        datasets = sorted({r.dataset for r in flat})
        modes = sorted({r.mode for r in flat})
        table = {(r.dataset, r.mode): r.miou for r in flat}
        header = ["dataset"] + modes
        diff = "simcmf" in modes and "scratch" in modes
        if diff:
            header.append("simcmf_minus_scratch")
        rows = []
        for ds in datasets:
            row = [ds] + [_fmt(table.get((ds, m))) for m in modes]
            if diff:
                a, b = table.get((ds, "simcmf")), table.get((ds, "scratch"))
                row.append(_fmt(a - b if a is not None and b is not None else None))
            rows.append(row)
        summary_path = out_dir / "summary.csv"
        _write_csv(summary_path, header, rows)
        written["summary"] = summary_path

    curves = [r for r in reports if r.train_ratio is not None]
    if curves:
        curve_rows = sorted(
            ((r.train_ratio, r.mode, r.miou) for r in curves), key=lambda t: (t[0], t[1])
        )
        curve_path = out_dir / "data_ratio_curve.csv"
        _write_csv(
            curve_path,
            ["train_ratio", "mode", "miou"],
            [[_fmt(a), b, _fmt(c)] for a, b, c in curve_rows],
        )
        written["curve"] = curve_path
        written["plot"] = _plot_ratio_curve(curve_rows, out_dir / "data_ratio_curve.png")
    return written


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6g}"


def _plot_ratio_curve(curve_rows, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    by_mode = {}
    for ratio, mode, miou in curve_rows:
        by_mode.setdefault(mode, []).append((ratio, miou))
    for mode in sorted(by_mode):
        pts = sorted(by_mode[mode])
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xlabel("training data ratio")
    ax.set_ylabel("mIoU (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": "simcmf"})
    plt.close(fig)
    return path
