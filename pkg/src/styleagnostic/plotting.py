"""PNG figures for experiment summaries.

Every function takes the ``series`` block written by
:func:`styleagnostic.experiments.write_summary` and draws with the Agg
backend, so nothing here needs a display.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_STYLE = {
    "figure.figsize": (4.8, 3.4),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}

_LABELS = {
    "shape_bias": "shape bias",
    "texture_bias": "texture bias",
    "d_A": "proxy A-distance",
    "target_accuracy": "target accuracy",
    "in_domain_accuracy": "in-domain accuracy",
}


def _xy_err(entry, metric, xkey):
    xs, ms, ss = [], [], []
    for x, m, s in zip(entry[xkey], entry[metric]["mean"], entry[metric]["std"]):
        if m is None:
            continue
        xs.append(x)
        ms.append(m)
        ss.append(0.0 if s is None else s)
    return xs, ms, ss


def _label(entry, skip):
    parts = [entry["variant"]]
    if "stage" not in skip and "stage" in entry:
        parts.append(f"stage {entry['stage']}")
    if "lambda_adv" not in skip and "lambda_adv" in entry:
        parts.append(f"λ={entry['lambda_adv']:g}")
    if entry.get("unlabeled"):
        parts.append("+unlabeled")
    return ", ".join(parts)


def plot_vs_lambda(series: dict, metric: str, path) -> Path | None:
    """Metric mean ± std against lambda_adv, one line per (variant, stage)."""
    lines = [e for e in series.get("vs_lambda", []) if len(e["lambda_adv"]) >= 2]
    if not lines:
        return None
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for e in lines:
            xs, ms, ss = _xy_err(e, metric, "lambda_adv")
            ax.errorbar(xs, ms, yerr=ss, marker="o", capsize=3, label=_label(e, ("lambda_adv",)))
        # lambda grids usually include 0, so a symlog axis keeps the small values apart
        ax.set_xscale("symlog", linthresh=0.05)
        ax.set_xlabel("adversarial weight λ")
        ax.set_ylabel(_LABELS.get(metric, metric))
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_vs_stage(series: dict, metric: str, path) -> Path | None:
    lines = [e for e in series.get("vs_stage", []) if len(e["stage"]) >= 2]
    if not lines:
        return None
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for e in lines:
            xs, ms, ss = _xy_err(e, metric, "stage")
            ax.errorbar(xs, ms, yerr=ss, marker="s", capsize=3, label=_label(e, ("stage",)))
        ax.set_xticks(sorted({s for e in lines for s in e["stage"]}))
        ax.set_xlabel("randomization stage")
        ax.set_ylabel(_LABELS.get(metric, metric))
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_variant_bars(rows: list, metric: str, path) -> Path | None:
    """Bar per aggregated cell, e.g. target accuracy of each variant."""
    rows = [r for r in rows if r.get(f"{metric}_mean") is not None]
    if not rows:
        return None
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(max(4.8, 0.9 * len(rows)), 3.4))
        labels = [_label(r, ()) for r in rows]
        means = [r[f"{metric}_mean"] for r in rows]
        errs = [r[f"{metric}_std"] or 0.0 for r in rows]
        ax.bar(range(len(rows)), means, yerr=errs, capsize=3, color="0.6", edgecolor="0.2")
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel(_LABELS.get(metric, metric))
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def render_report(summary: dict, output_dir) -> list[Path]:
    """Write every figure that the summary has data for; returns the written paths."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    series = summary.get("series", {})
    made = [
        plot_vs_lambda(series, "shape_bias", out / "shape_bias_vs_lambda.png"),
        plot_vs_lambda(series, "d_A", out / "d_A_vs_lambda.png"),
        plot_vs_stage(series, "target_accuracy", out / "accuracy_vs_stage.png"),
        plot_variant_bars(summary.get("rows", []), "target_accuracy", out / "target_accuracy.png"),
    ]
    return [p for p in made if p is not None]
