"""Experiment configuration: INI-style text with explicit keys.

One file drives a whole run. Every numeric bound is validated at load time
(all violations reported together), and the config hash covers everything
except the output paths, so artifacts from two runs of the same config are
stamped identically regardless of where they are written.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import dataclass, field

from .actstudent import StudentTrainConfig
from .errors import ConfigError
from .evalreport import EvalCondition
from .perturb import PerturbationSpec
from .pointcloud import SHAPE_KINDS

DEFAULT_CONFIG_TEXT = """\
[run]
seed = 7

[dataset]
classes = sphere, cube, cylinder, torus, plane, cone
per_class = 60
n_points = 512

[teacher]
meta_iterations = 60
tasks_per_batch = 4
k_inner = 4
lr_inner = 0.3
lr_outer = 0.7
subset_size = 3
k_support = 8
k_query = 8

[student]
stages = 8
epochs_per_stage = 2
batch_size = 16
lr = 0.02
beta = 1.0
gamma = 0.02
sigma0 = 0.02
delta_sigma = 0.014
frac_start = 0.9
frac_end = 0.5
drop_share = 0.6
lambda_bias = 0.5
disc_lr = 0.1
cluster_k = 8
probe_size = 24

[eval]
conditions = clean, drop:0.5, noise:0.1
trials = 5

[paths]
out = runs/default
"""


@dataclass
class DatasetConfig:
    classes: tuple = tuple(SHAPE_KINDS)
    per_class: int = 60
    n_points: int = 512


@dataclass
class TeacherConfig:
    meta_iterations: int = 60
    tasks_per_batch: int = 4
    k_inner: int = 4
    lr_inner: float = 0.3
    lr_outer: float = 0.7
    subset_size: int = 3
    k_support: int = 8
    k_query: int = 8


@dataclass
class EvalConfig:
    conditions: tuple = ("clean", "drop:0.5", "noise:0.1")
    trials: int = 5


@dataclass
class ExperimentConfig:
    seed: int
    dataset: DatasetConfig
    teacher: TeacherConfig
    student: StudentTrainConfig
    eval: EvalConfig
    out_dir: str
    canonical: str = field(repr=False, default="")

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical.encode("utf-8")).hexdigest()[:16]


def parse_condition(token: str, master_seed: int) -> EvalCondition:
    """clean | drop:<alpha> | noise:<sigma> -> a named EvalCondition."""
    token = token.strip()
    if token == "clean":
        return EvalCondition("clean", PerturbationSpec(), seed=master_seed)
    if ":" in token:
        kind, _, value = token.partition(":")
        try:
            v = float(value)
        except ValueError:
            raise ConfigError(f"bad condition value in '{token}'") from None
        if kind == "drop":
            name = f"drop{round(v * 100):02d}"
            return EvalCondition(name, PerturbationSpec(drop_fraction=v, spatial=True), seed=master_seed)
        if kind == "noise":
            name = f"noise{str(v).replace('.', '')[:4].ljust(3, '0')}"
            return EvalCondition(name, PerturbationSpec(sigma=v), seed=master_seed)
    raise ConfigError(f"unknown eval condition '{token}' (expected clean, drop:a, noise:s)")


def eval_conditions(cfg: ExperimentConfig) -> list:
    return [parse_condition(tok, cfg.seed) for tok in cfg.eval.conditions]


def _parse(parser: configparser.ConfigParser) -> ExperimentConfig:
    run = parser["run"] if parser.has_section("run") else {}
    ds = parser["dataset"] if parser.has_section("dataset") else {}
    tc = parser["teacher"] if parser.has_section("teacher") else {}
    st = parser["student"] if parser.has_section("student") else {}
    ev = parser["eval"] if parser.has_section("eval") else {}
    paths = parser["paths"] if parser.has_section("paths") else {}

    dataset = DatasetConfig(
        classes=tuple(s.strip() for s in ds.get("classes", ", ".join(SHAPE_KINDS)).split(",")),
        per_class=int(ds.get("per_class", 60)),
        n_points=int(ds.get("n_points", 512)),
    )
    teacher = TeacherConfig(
        meta_iterations=int(tc.get("meta_iterations", 60)),
        tasks_per_batch=int(tc.get("tasks_per_batch", 4)),
        k_inner=int(tc.get("k_inner", 4)),
        lr_inner=float(tc.get("lr_inner", 0.3)),
        lr_outer=float(tc.get("lr_outer", 0.7)),
        subset_size=int(tc.get("subset_size", 3)),
        k_support=int(tc.get("k_support", 8)),
        k_query=int(tc.get("k_query", 8)),
    )
    student = StudentTrainConfig(
        stages=int(st.get("stages", 8)),
        epochs_per_stage=int(st.get("epochs_per_stage", 2)),
        batch_size=int(st.get("batch_size", 16)),
        lr=float(st.get("lr", 0.02)),
        beta=float(st.get("beta", 1.0)),
        gamma=float(st.get("gamma", 0.02)),
        sigma0=float(st.get("sigma0", 0.02)),
        delta_sigma=float(st.get("delta_sigma", 0.014)),
        frac_start=float(st.get("frac_start", 0.9)),
        frac_end=float(st.get("frac_end", 0.5)),
        drop_share=float(st.get("drop_share", 0.6)),
        lambda_bias=float(st.get("lambda_bias", 0.5)),
        disc_lr=float(st.get("disc_lr", 0.1)),
        cluster_k=int(st.get("cluster_k", 8)),
        probe_size=int(st.get("probe_size", 24)),
    )
    evalc = EvalConfig(
        conditions=tuple(s.strip() for s in ev.get("conditions", "clean, drop:0.5, noise:0.1").split(",")),
        trials=int(ev.get("trials", 5)),
    )
    seed = int(run.get("seed", 7))
    out_dir = paths.get("out", "runs/default")

    canonical_lines = []
    for section in sorted(s for s in parser.sections() if s != "paths"):
        for key in sorted(parser[section]):
            canonical_lines.append(f"{section}.{key}={parser[section][key].strip()}")
    cfg = ExperimentConfig(
        seed=seed,
        dataset=dataset,
        teacher=teacher,
        student=student,
        eval=evalc,
        out_dir=out_dir,
        canonical="\n".join(canonical_lines),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    """Check every bound the modules will enforce; report all violations."""
    problems = []
    d, t, s = cfg.dataset, cfg.teacher, cfg.student
    if len(d.classes) < 2:
        problems.append("dataset.classes: need at least 2")
    for name in d.classes:
        if name not in SHAPE_KINDS:
            problems.append(f"dataset.classes: unknown kind '{name}'")
    if d.per_class < 3:
        problems.append("dataset.per_class: must be >= 3")
    if d.n_points < 16:
        problems.append("dataset.n_points: must be >= 16 so a 50% drop keeps 8 points")
    if t.meta_iterations < 0:
        problems.append("teacher.meta_iterations: must be >= 0")
    if not 2 <= t.subset_size <= len(d.classes):
        problems.append("teacher.subset_size: must be in [2, n_classes]")
    if t.k_support < 1 or t.k_query < 1:
        problems.append("teacher.k_support/k_query: must be >= 1")
    if t.lr_inner <= 0 or t.lr_outer <= 0:
        problems.append("teacher.lr_inner/lr_outer: must be > 0")
    if t.k_inner < 0:
        problems.append("teacher.k_inner: must be >= 0")
    if s.stages < 1:
        problems.append("student.stages: must be >= 1")
    if s.epochs_per_stage < 1:
        problems.append("student.epochs_per_stage: must be >= 1")
    if s.lr <= 0 or s.disc_lr < 0:
        problems.append("student.lr must be > 0 and disc_lr >= 0")
    if s.sigma0 < 0 or s.delta_sigma <= 0:
        problems.append("student.sigma0 must be >= 0 and delta_sigma > 0")
    if not 0 <= s.frac_end <= s.frac_start <= 1:
        problems.append("student.frac_start/frac_end: need 0 <= end <= start <= 1")
    if not 0 <= s.drop_share < 1:
        problems.append("student.drop_share: must be in [0, 1)")
    if not 0 <= s.lambda_bias <= 1:
        problems.append("student.lambda_bias: must be in [0, 1]")
    if s.beta < 0 or s.gamma < 0:
        problems.append("student.beta/gamma: must be >= 0")
    if s.cluster_k < 0:
        problems.append("student.cluster_k: must be >= 0")
    if cfg.eval.trials < 1:
        problems.append("eval.trials: must be >= 1")
    for tok in cfg.eval.conditions:
        try:
            parse_condition(tok, cfg.seed)
        except ConfigError as exc:
            problems.append(str(exc))
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))


def load_config(path: str | None = None, overrides=(), seed: int | None = None,
                out_dir: str | None = None) -> ExperimentConfig:
    """Load defaults, then a config file, then --set key=value overrides."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.read_string(DEFAULT_CONFIG_TEXT)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    for item in overrides:
        key, _, value = item.partition("=")
        if not _ or "." not in key:
            raise ConfigError(f"override must look like section.key=value, got '{item}'")
        section, _, name = key.partition(".")
        if not parser.has_section(section):
            parser.add_section(section)
        parser[section][name.strip()] = value.strip()
    if seed is not None:
        parser["run"]["seed"] = str(seed)
    if out_dir is not None:
        if not parser.has_section("paths"):
            parser.add_section("paths")
        parser["paths"]["out"] = out_dir
    return _parse(parser)


def write_default_config(path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(DEFAULT_CONFIG_TEXT)
