"""Render run figures from the plot-data CSVs.

Figures are a convenience; the CSVs under ``plot_data/`` remain the
contract, and everything here reads only those files.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}
GOLDEN = (5 ** 0.5 - 1) / 2


def _rows(path: Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _floats(rows, key):
    return [float(r[key]) if r[key] != "" else float("nan") for r in rows]


def new_figure(width: float = 4.0, ncols: int = 1):
    fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, width * GOLDEN), squeeze=False)
    return fig, axes[0]


def _save(fig, path: Path) -> None:
    fig.tight_layout()
    # no Software/date metadata, so repeated renders are byte-stable
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_calibration_cdf(rows, ax) -> None:
    scores = _floats(rows, "score")
    ax.step(scores, _floats(rows, "cumulative_fraction"), where="post", color="k", lw=1)
    tau = [s for s, r in zip(scores, rows) if r["is_tau"] == "1"]
    if tau:
        ax.axvline(tau[0], color="tab:red", ls="--", lw=1, label=f"tau = {tau[0]:.4f}")
        ax.legend(loc="lower right")
    ax.set_xlabel("predicted harm probability")
    ax.set_ylabel("cumulative fraction")


def plot_coverage(rows, ax) -> None:
    ax.plot(_floats(rows, "alpha"), _floats(rows, "safe_fraction"), "o-", color="tab:blue")
    ax.set_xlabel("risk level alpha")
    ax.set_ylabel("safe fraction")


def plot_subgroup_calibration(rows, axes) -> None:
    for ax, group in zip(axes, ("Age", "Sex", "Race")):
        levels = dict.fromkeys(r["level"] for r in rows if r["group"] == group)
        hi = 0.0
        for level in levels:
            sel = [r for r in rows if r["group"] == group and r["level"] == level]
            x, y = _floats(sel, "mean_predicted"), _floats(sel, "observed")
            lo, up = _floats(sel, "wilson_low"), _floats(sel, "wilson_high")
            err = [[yi - li for yi, li in zip(y, lo)], [ui - yi for yi, ui in zip(y, up)]]
            ax.errorbar(x, y, yerr=err, fmt="o", ms=3, capsize=2, label=level)
            hi = max(hi, max(x), max(y))
        hi *= 1.15
        ax.plot([0, hi], [0, hi], "k--", lw=0.8)
        ax.set_xlim(0, hi)
        ax.set_ylim(0, hi)
        ax.set_title(group)
        ax.set_xlabel("mean predicted")
        ax.legend(fontsize=6)
    axes[0].set_ylabel("observed harm rate")


def plot_actions(rows, axes) -> None:
    overall = [r for r in rows if r["scope"] == "overall"]
    axes[0].bar([int(r["action"]) for r in overall], _floats(overall, "count"), color="0.5")
    axes[0].set_xlabel("action")
    axes[0].set_ylabel("count")
    axes[0].set_title("overall")
    strata = dict.fromkeys(r["stratum"] for r in rows if r["scope"] == "length_quartile")
    width = 0.8 / max(1, len(strata))
    for i, s in enumerate(strata):
        sel = [r for r in rows if r["scope"] == "length_quartile" and r["stratum"] == s]
        axes[1].bar([int(r["action"]) + i * width for r in sel], _floats(sel, "count"),
                    width=width, label=f"Q{int(s) + 1}")
    axes[1].set_xlabel("action")
    axes[1].set_title("by episode-length quartile")
    axes[1].legend()


def plot_value(rows, ax) -> None:
    ax.plot(_floats(rows, "alpha"), _floats(rows, "v0"), "s-", color="tab:green")
    ax.set_xlabel("risk level alpha")
    ax.set_ylabel("FQE V0")


def render_figures(out: str | Path, run=None) -> dict[str, str]:
    out = Path(out)
    data = out / "plot_data"
    figs = out / "figures"
    figs.mkdir(exist_ok=True)
    written = {}

    def dest(name: str) -> Path:
        rel = f"figures/{name}.png"
        written[name] = rel
        return run.record("figures", name, rel) if run is not None else out / rel

    with plt.rc_context(STYLE):
        fig, ax = new_figure()
        plot_calibration_cdf(_rows(data / "calibration_cdf.csv"), ax[0])
        _save(fig, dest("calibration_cdf"))

        fig, ax = new_figure()
        plot_coverage(_rows(data / "coverage_vs_alpha.csv"), ax[0])
        _save(fig, dest("coverage_vs_alpha"))

        fig, ax = new_figure(3.2, ncols=3)
        plot_subgroup_calibration(_rows(data / "calibration_by_subgroup.csv"), ax)
        _save(fig, dest("calibration_by_subgroup"))

        fig, ax = new_figure(3.6, ncols=2)
        plot_actions(_rows(data / "action_histogram.csv"), ax)
        _save(fig, dest("action_histogram"))

        fig, ax = new_figure()
        plot_value(_rows(data / "value_vs_alpha.csv"), ax[0])
        _save(fig, dest("value_vs_alpha"))
    return written
