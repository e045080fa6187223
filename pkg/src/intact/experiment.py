"""End-to-end pipelines: data generation, both training phases, evaluation.

The CLI subcommands and the acceptance suite call these functions, so a run
is reproducible whether driven from the command line or from tests. Every
artifact is stamped with the config hash; all randomness descends from the
single run seed.
"""

from __future__ import annotations

import os
from dataclasses import replace

import numpy as np

from . import saliency
from .actstudent import StudentTrainConfig, TrainReport, closed_loop_train
from .config import ExperimentConfig, eval_conditions
from .errors import ConfigError
from .evalreport import ReportTable, robustness_report, write_report
from .metateacher import train_teacher
from .models import load_checkpoint, save_checkpoint
from .pointcloud import Dataset, load_dataset, make_dataset, save_dataset

VARIANTS = ("baseline", "act", "intact")


def variant_config(cfg: ExperimentConfig, variant: str) -> StudentTrainConfig:
    """The three training recipes differ only in these documented fields."""
    base = cfg.student
    if variant == "baseline":
        return replace(base, perturb_mode="none", use_teacher=False, beta=0.0, gamma=0.0)
    if variant == "act":
        return replace(base, perturb_mode="static", use_teacher=False, gamma=0.0)
    if variant == "intact":
        return replace(base, perturb_mode="curriculum", use_teacher=True)
    raise ConfigError(f"unknown variant '{variant}', expected one of {VARIANTS}")


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    return make_dataset(
        cfg.dataset.classes, cfg.dataset.per_class, cfg.dataset.n_points, cfg.seed
    )


# -- artifact paths -----------------------------------------------------------


def dataset_dir(out: str) -> str:
    return os.path.join(out, "dataset")


def checkpoint_path(out: str, name: str) -> str:
    return os.path.join(out, "checkpoints", f"{name}.ckpt")


def reports_dir(out: str) -> str:
    return os.path.join(out, "reports")


def _ensure_dirs(out: str) -> None:
    os.makedirs(dataset_dir(out), exist_ok=True)
    os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
    os.makedirs(reports_dir(out), exist_ok=True)


def write_run_meta(cfg: ExperimentConfig) -> str:
    _ensure_dirs(cfg.out_dir)
    path = os.path.join(cfg.out_dir, "run_meta.txt")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"config_hash {cfg.config_hash()}\n")
        fh.write(f"seed {cfg.seed}\n")
        fh.write("canonical_config\n")
        for line in cfg.canonical.splitlines():
            fh.write(f"  {line}\n")
    return path


# -- pipeline steps -----------------------------------------------------------


def run_gen_data(cfg: ExperimentConfig) -> str:
    """Generate the dataset and write it under out/dataset; returns manifest path."""
    _ensure_dirs(cfg.out_dir)
    dataset = build_dataset(cfg)
    return save_dataset(dataset, dataset_dir(cfg.out_dir), config_hash=cfg.config_hash())


def load_run_dataset(cfg: ExperimentConfig) -> Dataset:
    manifest = os.path.join(dataset_dir(cfg.out_dir), "manifest.txt")
    if not os.path.exists(manifest):
        raise ConfigError(f"missing dataset manifest {manifest}; run gen-data first")
    return load_dataset(manifest)


def run_train_teacher(cfg: ExperimentConfig, dataset: Dataset):
    """Phase one; writes the teacher checkpoint and the query-loss log."""
    _ensure_dirs(cfg.out_dir)
    t = cfg.teacher
    teacher, log = train_teacher(
        dataset,
        seed=cfg.seed,
        meta_iterations=t.meta_iterations,
        tasks_per_batch=t.tasks_per_batch,
        k_inner=t.k_inner,
        lr_inner=t.lr_inner,
        lr_outer=t.lr_outer,
        subset_size=t.subset_size,
        k_support=t.k_support,
        k_query=t.k_query,
    )
    save_checkpoint(teacher, checkpoint_path(cfg.out_dir, "teacher"), cfg.config_hash())
    with open(os.path.join(reports_dir(cfg.out_dir), "teacher_log.tsv"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(log.to_tsv())
    return teacher, log


def run_train_student(cfg: ExperimentConfig, dataset: Dataset, variant: str,
                      teacher=None, dump_saliency: bool = False):
    """Phase two for one variant; writes checkpoint, report TSV, and figure."""
    _ensure_dirs(cfg.out_dir)
    scfg = variant_config(cfg, variant)
    if scfg.use_teacher and teacher is None:
        path = checkpoint_path(cfg.out_dir, "teacher")
        if not os.path.exists(path):
            raise ConfigError(f"variant '{variant}' needs a teacher checkpoint at {path}")
        teacher = load_checkpoint(path)
    student, report = closed_loop_train(
        dataset, teacher if scfg.use_teacher else None, scfg, cfg.seed
    )
    save_checkpoint(student, checkpoint_path(cfg.out_dir, f"student_{variant}"), cfg.config_hash())
    rpt_path = os.path.join(reports_dir(cfg.out_dir), f"train_{variant}.tsv")
    with open(rpt_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_tsv())
    render_training_figure(report, os.path.join(reports_dir(cfg.out_dir), f"train_{variant}.png"))
    if dump_saliency and scfg.use_teacher:
        _dump_stage_saliency(cfg, dataset, teacher)
    return student, report


def _dump_stage_saliency(cfg: ExperimentConfig, dataset: Dataset, teacher) -> None:
    out = os.path.join(reports_dir(cfg.out_dir), "saliency")
    os.makedirs(out, exist_ok=True)
    train = dataset.clouds_in("train")[:8]
    from .actstudent import teacher_saliency_maps

    maps = teacher_saliency_maps(teacher, train, cluster_k=cfg.student.cluster_k, seed=cfg.seed)
    for cloud in train:
        saliency.write_dump(maps[cloud.id], os.path.join(out, f"{cloud.id}.saliency.txt"))


def run_eval(cfg: ExperimentConfig, dataset: Dataset, models: dict | None = None) -> ReportTable:
    """Cross-product report over checkpointed (or given) models; writes files."""
    _ensure_dirs(cfg.out_dir)
    if models is None:
        models = {}
        for variant in VARIANTS:
            path = checkpoint_path(cfg.out_dir, f"student_{variant}")
            if not os.path.exists(path):
                raise ConfigError(f"missing checkpoint {path}; train '{variant}' first")
            models[variant] = load_checkpoint(path)
    table = robustness_report(
        models,
        eval_conditions(cfg),
        dataset,
        trials=cfg.eval.trials,
        master_seed=cfg.seed,
        config_hash=cfg.config_hash(),
    )
    write_report(table, reports_dir(cfg.out_dir))
    return table


def render_training_figure(report: TrainReport, path: str) -> None:
    """Loss components and probe accuracies over iterations."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    it = [r.iteration for r in report.records]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for key in ("l_ce", "l_robust", "l_diff", "total"):
        ax1.plot(it, [getattr(r.breakdown, key) for r in report.records], label=key, lw=1)
    ax1.set_yscale("log")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8, ncol=4)
    for key, label in (("probe_clean", "clean"), ("probe_noise", "noise"), ("probe_drop", "drop")):
        ax2.plot(it, [getattr(r, key) for r in report.records], label=label, lw=1)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("probe accuracy [%]")
    ax2.set_ylim(0, 102)
    ax2.legend(fontsize=8)
    for stage, _ in report.stage_budgets[1:]:
        first = next((r.iteration for r in report.records if r.stage == stage), None)
        if first is not None:
            ax1.axvline(first, color="gray", lw=0.5, alpha=0.5)
            ax2.axvline(first, color="gray", lw=0.5, alpha=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ordering_summary(table: ReportTable) -> str:
    """Human-readable margins for the robustness-ordering claim."""
    def cell(model, cond):
        return table.cell(model, cond).mean

    lines = ["robustness ordering (means over trials):"]
    noise = next((c for c in table.condition_names if c.startswith("noise")), None)
    drop = next((c for c in table.condition_names if c.startswith("drop")), None)
    if noise and {"baseline", "act", "intact"} <= set(table.model_names):
        lines.append(
            f"  {noise}: baseline {cell('baseline', noise):.1f}"
            f" | act {cell('act', noise):.1f} (margin {cell('act', noise) - cell('baseline', noise):+.1f})"
            f" | intact {cell('intact', noise):.1f} (margin {cell('intact', noise) - cell('act', noise):+.1f})"
        )
    if drop and {"baseline", "intact"} <= set(table.model_names):
        lines.append(
            f"  {drop}: baseline {cell('baseline', drop):.1f}"
            f" | intact {cell('intact', drop):.1f} (margin {cell('intact', drop) - cell('baseline', drop):+.1f})"
        )
    if "clean" in table.condition_names and {"baseline", "intact"} <= set(table.model_names):
        lines.append(
            f"  clean: baseline {cell('baseline', 'clean'):.1f}"
            f" | intact {cell('intact', 'clean'):.1f}"
            f" (gap {cell('intact', 'clean') - cell('baseline', 'clean'):+.1f})"
        )
    return "\n".join(lines) + "\n"


def run_all(cfg: ExperimentConfig, dump_saliency: bool = False) -> ReportTable:
    """gen-data -> train-teacher -> three students -> eval -> summary."""
    write_run_meta(cfg)
    run_gen_data(cfg)
    dataset = load_run_dataset(cfg)
    teacher, _ = run_train_teacher(cfg, dataset)
    models = {}
    for variant in VARIANTS:
        models[variant], _ = run_train_student(
            cfg, dataset, variant, teacher=teacher, dump_saliency=dump_saliency
        )
    table = run_eval(cfg, dataset, models)
    summary = ordering_summary(table)
    with open(os.path.join(reports_dir(cfg.out_dir), "summary.txt"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(table.to_text())
        fh.write("\n")
        fh.write(summary)
    return table


def robustness_suite(cfg: ExperimentConfig, seeds) -> dict:
    """The desk-scale ordering experiment across seeds (all in memory).

    Returns per-seed accuracy cells plus the median margins that the
    acceptance criteria check.
    """
    per_seed = {}
    for seed in seeds:
        scfg = replace(cfg, seed=seed)
        dataset = build_dataset(scfg)
        teacher, _ = train_teacher(
            dataset,
            seed=seed,
            meta_iterations=scfg.teacher.meta_iterations,
            tasks_per_batch=scfg.teacher.tasks_per_batch,
            k_inner=scfg.teacher.k_inner,
            lr_inner=scfg.teacher.lr_inner,
            lr_outer=scfg.teacher.lr_outer,
            subset_size=scfg.teacher.subset_size,
            k_support=scfg.teacher.k_support,
            k_query=scfg.teacher.k_query,
        )
        models = {}
        for variant in VARIANTS:
            vcfg = variant_config(scfg, variant)
            models[variant], _ = closed_loop_train(
                dataset, teacher if vcfg.use_teacher else None, vcfg, seed
            )
        table = robustness_report(
            models, eval_conditions(scfg), dataset,
            trials=scfg.eval.trials, master_seed=seed,
            config_hash=scfg.config_hash(),
        )
        per_seed[seed] = {
            (m, c): table.cell(m, c).mean
            for m in table.model_names
            for c in table.condition_names
        }
    cond_names = sorted({c for (_, c) in per_seed[seeds[0]]})
    noise = next(c for c in cond_names if c.startswith("noise"))
    drop = next(c for c in cond_names if c.startswith("drop"))
    margins = {
        "noise_act_vs_baseline": float(np.median(
            [per_seed[s][("act", noise)] - per_seed[s][("baseline", noise)] for s in seeds])),
        "noise_intact_vs_act": float(np.median(
            [per_seed[s][("intact", noise)] - per_seed[s][("act", noise)] for s in seeds])),
        "drop_intact_vs_baseline": float(np.median(
            [per_seed[s][("intact", drop)] - per_seed[s][("baseline", drop)] for s in seeds])),
        "clean_intact_vs_baseline": float(np.median(
            [per_seed[s][("intact", "clean")] - per_seed[s][("baseline", "clean")] for s in seeds])),
    }
    return {"per_seed": per_seed, "margins": margins}
