"""Run reports: JSON record, plain-text table and static SVG plots."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from .core import ContractError


@dataclass
class RunReport:
    command: str
    seed: int
    config: str
    metrics: Dict[str, dict] = field(default_factory=dict)
    epochs: List[dict] = field(default_factory=list)
    stages: List[dict] = field(default_factory=list)
    predictions: List[dict] = field(default_factory=list)
    wall_clock: Optional[float] = None

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "RunReport":
        try:
            with open(path) as fh:
                obj = json.load(fh)
            return cls(**obj)
        except (OSError, ValueError, TypeError) as exc:
            raise ContractError(f"cannot read run report {path}: {exc}") from None


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _table(header: List[str], rows: List[list]) -> List[str]:
    cells = [header] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    out = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    out.insert(1, "  ".join("-" * w for w in widths))
    return out


def render_table(report: RunReport) -> str:
    """Human-readable summary; identical input gives identical text."""
    lines = [f"command: {report.command}", f"seed: {report.seed}"]
    if report.wall_clock is not None:
        lines.append(f"wall clock: {report.wall_clock:.1f} s")
    if report.metrics:
        thresholds = sorted({k for m in report.metrics.values() for k in m.get("vIoU_at", {})}, key=float)
        rows = [[split, m["n_samples"], m["m_vIoU"], m["m_tIoU"], *[m["vIoU_at"].get(k) for k in thresholds]]
                for split, m in sorted(report.metrics.items())]
        lines += ["", "metrics"]
        lines += _table(["split", "n", "m_vIoU", "m_tIoU", *[f"vIoU@{k}" for k in thresholds]], rows)
    if report.stages:
        rows = []
        for st in report.stages:
            m = st.get("metrics") or {}
            rows.append([st["stage"], "inf" if st["bound"] is None else st["bound"], st["videos"], st["steps"],
                         st.get("selection_accuracy"), m.get("m_vIoU"), m.get("m_tIoU")])
        lines += ["", "stages"]
        lines += _table(["stage", "bound", "videos", "steps", "sel_acc", "m_vIoU", "m_tIoU"], rows)
    if report.epochs:
        rows = [[e["stage"], e["epoch"], e["steps"], e["spatial_loss"], e["temporal_loss"]] for e in report.epochs]
        lines += ["", "epochs"]
        lines += _table(["stage", "epoch", "steps", "spatial", "temporal"], rows)
    return "\n".join(lines) + "\n"


def write_plots(report: RunReport, out_dir) -> List[Path]:
    """Loss curves and per-stage metrics as SVG files; returns the written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "tubeground"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if report.epochs:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        x = list(range(1, len(report.epochs) + 1))
        for key in ("spatial_loss", "temporal_loss"):
            ys = [e[key] for e in report.epochs]
            if any(y is not None for y in ys):
                ax.plot(x, [float("nan") if y is None else y for y in ys], marker="o", label=key.split("_")[0])
        ax.set_xlabel("epoch (across stages)")
        ax.set_ylabel("mean loss")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "loss_curves.svg"
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    staged = [st for st in report.stages if st.get("metrics")]
    if staged:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        x = [st["stage"] for st in staged]
        ax.plot(x, [st["metrics"]["m_vIoU"] for st in staged], marker="o", label="m_vIoU")
        ax.plot(x, [st["metrics"]["m_tIoU"] for st in staged], marker="s", label="m_tIoU")
        ax.plot(x, [st.get("selection_accuracy") for st in staged], marker="^", label="selection acc.")
        ax.set_xticks(x)
        ax.set_xlabel("stage")
        ax.set_ylim(0, 1)
        ax.legend()
        fig.tight_layout()
        path = out_dir / "stage_metrics.svg"
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
