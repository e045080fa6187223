"""Condition x method accuracy evaluation and report rendering.

Every cell of the report is a mean +/- standard error over seeded trials;
test-time perturbation streams are domain-separated from training streams.
Reports render as CSV (per-trial and summary), an aligned text table, and a
grouped bar figure saved next to the delimited output.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .perturb import PerturbationSpec, add_noise, drop_points
from .pointcloud import Dataset
from .seeding import make_rng


@dataclass
class EvalCondition:
    name: str
    spec: PerturbationSpec
    seed: int = 0


@dataclass
class CellStats:
    accuracies: list
    mean: float
    stderr: float

    @classmethod
    def from_accuracies(cls, accs) -> "CellStats":
        arr = np.asarray(accs, dtype=np.float64)
        stderr = float(arr.std(ddof=1) / np.sqrt(arr.size)) if arr.size > 1 else 0.0
        return cls(accuracies=[float(a) for a in arr], mean=float(arr.mean()), stderr=stderr)


@dataclass
class ReportTable:
    model_names: list
    condition_names: list
    cells: dict = field(default_factory=dict)  # (model, condition) -> CellStats
    config_hash: str = "-"
    seed: int = 0

    def cell(self, model: str, condition: str) -> CellStats:
        return self.cells[(model, condition)]

    def to_csv(self) -> str:
        lines = ["model,condition,trial,accuracy"]
        for m in self.model_names:
            for c in self.condition_names:
                for trial, acc in enumerate(self.cells[(m, c)].accuracies):
                    lines.append(f"{m},{c},{trial},{acc!r}")
        return "\n".join(lines) + "\n"

    def to_summary_csv(self) -> str:
        lines = ["model,condition,mean,stderr"]
        for m in self.model_names:
            for c in self.condition_names:
                cell = self.cells[(m, c)]
                lines.append(f"{m},{c},{cell.mean!r},{cell.stderr!r}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        """Aligned table: conditions as rows, models as columns."""
        col_w = max(12, *(len(m) + 2 for m in self.model_names))
        row_w = max(len(c) for c in self.condition_names) + 2
        header = " " * row_w + "".join(f"{m:>{col_w}}" for m in self.model_names)
        lines = [header]
        for c in self.condition_names:
            row = f"{c:<{row_w}}"
            for m in self.model_names:
                cell = self.cells[(m, c)]
                row += f"{cell.mean:>{col_w - 8}.1f} ± {cell.stderr:<5.2f}"
            lines.append(row.rstrip())
        lines.append("")
        lines.append(f"config_hash {self.config_hash}  seed {self.seed}")
        return "\n".join(lines) + "\n"


def perturb_split(clouds, spec: PerturbationSpec, rng) -> list:
    """Drop-then-noise on every cloud with a shared stream (evaluation path)."""
    out = []
    for cloud in clouds:
        c = drop_points(cloud, spec, None, rng) if spec.drop_fraction > 0 else cloud
        out.append(add_noise(c, spec, rng))
    return out


def _predict_accuracy(model, clouds) -> float:
    """Top-1 accuracy in percent; clouds are grouped by size for batching."""
    by_size: dict = {}
    for c in clouds:
        by_size.setdefault(c.n, []).append(c)
    correct = 0
    for n, group in by_size.items():
        pts = np.concatenate([c.points for c in group], axis=0)
        labels = np.array([c.label for c in group])
        preds = model.predict(pts, n)
        correct += int((preds == labels).sum())
    return 100.0 * correct / len(clouds)


def evaluate(model, clouds, condition: EvalCondition, trials: int, master_seed: int = 0) -> CellStats:
    """Accuracy under a condition: fresh perturbation stream per trial."""
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    if not clouds:
        raise DataError("evaluate called on an empty split")
    accs = []
    for trial in range(trials):
        rng = make_rng(master_seed, "eval", condition.name, condition.seed, trial)
        perturbed = clouds if condition.spec.is_noop else perturb_split(clouds, condition.spec, rng)
        accs.append(_predict_accuracy(model, perturbed))
    return CellStats.from_accuracies(accs)


def robustness_report(
    models: dict,
    conditions,
    dataset: Dataset,
    trials: int = 5,
    master_seed: int = 0,
    split: str = "test",
    config_hash: str = "-",
) -> ReportTable:
    """Cross-product evaluation of named models under named conditions."""
    if not models or not conditions:
        raise ConfigError("robustness_report needs at least one model and one condition")
    names = list(models)
    cond_names = [c.name for c in conditions]
    if len(set(cond_names)) != len(cond_names):
        raise ConfigError("condition names must be unique")
    clouds = dataset.clouds_in(split)
    table = ReportTable(
        model_names=names,
        condition_names=cond_names,
        config_hash=config_hash,
        seed=master_seed,
    )
    for mname in names:
        for cond in conditions:
            table.cells[(mname, cond.name)] = evaluate(
                models[mname], clouds, cond, trials, master_seed
            )
    return table


def default_conditions(master_seed: int = 0) -> list:
    return [
        EvalCondition("clean", PerturbationSpec(), seed=master_seed),
        EvalCondition("drop50", PerturbationSpec(drop_fraction=0.5, spatial=True), seed=master_seed),
        EvalCondition("noise010", PerturbationSpec(sigma=0.1), seed=master_seed),
    ]


def render_figure(table: ReportTable, path: str) -> None:
    """Grouped bar chart of mean accuracy per condition and model."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n_cond = len(table.condition_names)
    n_models = len(table.model_names)
    width = 0.8 / n_models
    x = np.arange(n_cond)
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * n_cond, 3.6))
    for j, m in enumerate(table.model_names):
        means = [table.cells[(m, c)].mean for c in table.condition_names]
        errs = [table.cells[(m, c)].stderr for c in table.condition_names]
        ax.bar(x + (j - (n_models - 1) / 2) * width, means, width, yerr=errs, label=m, capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels(table.condition_names)
    ax.set_ylabel("accuracy [%]")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    ax.set_title("accuracy by condition and training method")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(table: ReportTable, out_dir: str, stem: str = "report") -> dict:
    """Write CSVs, the aligned text table, and the bar figure; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "csv": os.path.join(out_dir, f"{stem}.csv"),
        "summary": os.path.join(out_dir, f"{stem}_summary.csv"),
        "text": os.path.join(out_dir, f"{stem}.txt"),
        "figure": os.path.join(out_dir, f"{stem}.png"),
    }
    with open(paths["csv"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table.to_csv())
    with open(paths["summary"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table.to_summary_csv())
    with open(paths["text"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table.to_text())
    render_figure(table, paths["figure"])
    return paths
