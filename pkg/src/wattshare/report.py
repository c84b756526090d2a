"""Loss-report rendering: delimited output, terminal bars and saved figures.

The per-bucket table mirrors the demo's transfer analysis: expended and
gained energy per time bucket with the wireless loss as its own column.
"""

from __future__ import annotations

from pathlib import Path

LOSS_CSV_HEADER = "start_s,end_s,expended_mwh,gained_mwh,loss_mwh"
BAR_WIDTH = 32


def loss_report_csv(report: dict) -> str:
    """Bucket rows with 6 decimal places, one line per bucket."""
    lines = [LOSS_CSV_HEADER]
    for bucket in report["buckets"]:
        lines.append(
            f"{bucket['start_s']:.6f},{bucket['end_s']:.6f},"
            f"{bucket['expended_mwh']:.6f},{bucket['gained_mwh']:.6f},"
            f"{bucket['loss_mwh']:.6f}")
    return "\n".join(lines) + "\n"


def loss_report_chart(report: dict) -> str:
    """Aligned text chart; the loss column gets its own bar per bucket."""
    buckets = report["buckets"]
    peak = max((b["expended_mwh"] for b in buckets), default=0.0)
    scale = BAR_WIDTH / peak if peak > 0 else 0.0

    def bar(value: float, char: str) -> str:
        return (char * max(0, round(value * scale))).ljust(BAR_WIDTH)

    lines = [
        f"totals: expended {report['provider_expended_mwh']:.6f} mWh, "
        f"gained {report['consumer_gained_mwh']:.6f} mWh, "
        f"loss {report['loss_mwh']:.6f} mWh over {report['duration_s']:.6f} s",
        "",
        f"{'window (s)':<22} {'expended':<{BAR_WIDTH}} {'gained':<{BAR_WIDTH}} "
        f"{'loss':<{BAR_WIDTH}} loss_mwh",
    ]
    for b in buckets:
        window = f"{b['start_s']:.0f}-{b['end_s']:.0f}"
        lines.append(
            f"{window:<22} {bar(b['expended_mwh'], '#')} "
            f"{bar(b['gained_mwh'], '=')} {bar(b['loss_mwh'], '!')} "
            f"{b['loss_mwh']:>12.6f}")
    if report.get("flags"):
        lines.append("")
        lines.append("flags: " + ", ".join(report["flags"]))
    return "\n".join(lines) + "\n"


def render_loss_figure(report: dict, path: Path | str) -> Path:
    """Grouped per-bucket bars saved as an image; loss drawn in red."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    buckets = report["buckets"]
    centers = list(range(len(buckets)))
    width = 0.28
    expended = [b["expended_mwh"] for b in buckets]
    gained = [b["gained_mwh"] for b in buckets]
    loss = [b["loss_mwh"] for b in buckets]

    fig, ax = plt.subplots(figsize=(max(6.0, 1.6 * len(buckets)), 4.0))
    ax.bar([c - width for c in centers], expended, width, label="provider expended",
           color="#4878cf")
    ax.bar(centers, gained, width, label="consumer gained", color="#6acc65")
    ax.bar([c + width for c in centers], loss, width, label="loss", color="#d65f5f")
    ax.set_xticks(centers)
    ax.set_xticklabels([f"{b['start_s']:.0f}-{b['end_s']:.0f}" for b in buckets],
                       rotation=30, ha="right", fontsize=8)
    ax.set_xlabel("transfer window (s)")
    ax.set_ylabel("energy (mWh)")
    ax.set_title(
        f"Energy transfer: {report['provider_expended_mwh']:.1f} mWh expended, "
        f"{report['loss_mwh']:.1f} mWh lost")
    ax.legend()
    fig.tight_layout()
    out = Path(path)
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out
