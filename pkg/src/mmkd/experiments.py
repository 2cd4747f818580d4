"""Experiment configuration, run directories and the lambda/gamma sweep.

Everything the command-line front end does lives here so it can be driven
from Python as well. Run directories always receive a ``resolved_config.json``
before any work starts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .distill import (PRESETS as DISTILL_PRESETS, DistillConfig, TeacherEnsemble, compute_teacher_weights,
                      estimate_teacher_errors)
from .errors import ConfigError, ContractError, MMKDError
from .metrics import NUM_BINS, TOP_N_CLASSES, MetricsReport
from .models import TASKS, ModalityModel, load_model
from .synthdata import (MODALITIES, PRESETS as DATA_PRESETS, SHARD_VERSION, DatasetConfig, build_splits,
                        read_shard, write_shard)
from .training import (OMNIVORE_KINDS, TrainConfig, TrainResult, distill_student, evaluate_model, train_omnivore,
                       train_teacher)

log = logging.getLogger("mmkd")

SPLITS = ("train", "holdout", "val")
GRID_ROWS: tuple[tuple[float, float | None], ...] = (
    (0.0, None), (1.0, 30.0), (0.8, 30.0), (0.8, 3.0), (1.0, 1.0), (0.8, 1.0), (0.8, 0.33),
)
DEFAULT_LAMBDAS = (0.0, 0.8, 1.0)
DEFAULT_GAMMAS = (0.33, 1.0, 3.0, 30.0)
CSV_COLUMNS = ("objective", "lambda", "gamma", "seed", "noun_top1", "verb_top1", "action_top1",
               "top1", "top5", "ece", "num_samples")
TTA_COLUMNS = ("model", "seed", "clips", "top1", "ece")
TTA_TOLERANCE = 0.005  # half a point of extra degradation is still a pass


class DataError(MMKDError, OSError):
    """Shards or checkpoints are missing or unreadable."""


def objective_name(lam: float) -> str:
    if lam == 0.0:
        return "L_CE"
    if lam == 1.0:
        return "L_KL"
    return "L_CE+L_KL"


def grid_rows(lambdas: Sequence[float], gammas: Sequence[float]) -> tuple[tuple[float, float | None], ...]:
    """Cross product of the axes; gamma is irrelevant without distillation so lambda 0 appears once."""
    rows: list[tuple[float, float | None]] = []
    for lam in lambdas:
        if lam == 0.0:
            rows.append((0.0, None))
        else:
            rows.extend((float(lam), float(g)) for g in gammas)
    return tuple(dict.fromkeys(rows))


def _check_keys(section: str, d: dict, known: set[str]) -> None:
    if not isinstance(d, dict):
        raise ConfigError(section or "config", f"expected an object, got {type(d).__name__}")
    for key in d:
        if key not in known:
            raise ConfigError(f"{section}.{key}" if section else key, "unknown key")


@dataclass(frozen=True)
class SweepSpec:
    rows: tuple[tuple[float, float | None], ...] = GRID_ROWS
    seeds: tuple[int, ...] = (0, 1, 2)
    cap: int = 64
    tta_clips: tuple[int, ...] = (1, 2, 4)
    reference: tuple[float, float] = (1.0, 30.0)
    omnivore: bool = True
    plots: bool = False

    def __post_init__(self):
        if not self.rows:
            raise ConfigError("sweep.rows", "must not be empty")
        if not self.seeds:
            raise ConfigError("sweep.seeds", "must not be empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("sweep.seeds", "seeds must be distinct")
        for lam, gamma in self.rows:
            if not 0.0 <= lam <= 1.0:
                raise ConfigError("sweep.rows", f"lambda {lam} outside [0, 1]")
            if lam > 0 and (gamma is None or not gamma > 0):
                raise ConfigError("sweep.rows", f"lambda {lam} needs a positive gamma, got {gamma}")
        if self.cap < 1:
            raise ConfigError("sweep.cap", "must be >= 1")
        if self.num_cells > self.cap:
            raise ConfigError("sweep.cap", f"{len(self.rows)} rows x {len(self.seeds)} seeds = {self.num_cells} "
                                           f"cells exceeds the cap of {self.cap}")
        if any(c < 1 for c in self.tta_clips):
            raise ConfigError("sweep.tta_clips", "clip counts must be >= 1")
        if (self.tta_clips or self.omnivore) and tuple(self.reference) not in self.distill_rows:
            raise ConfigError("sweep.reference", f"{list(self.reference)} is not one of the distillation rows")

    @property
    def num_cells(self) -> int:
        return len(self.rows) * len(self.seeds)

    @property
    def distill_rows(self) -> list[tuple[float, float]]:
        return [(lam, g) for lam, g in self.rows if lam > 0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rows"] = [list(r) for r in self.rows]
        d["seeds"] = list(self.seeds)
        d["tta_clips"] = list(self.tta_clips)
        d["reference"] = list(self.reference)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        _check_keys("sweep", d, {f.name for f in fields(cls)} | {"lambdas", "gammas"})
        d = dict(d)
        lambdas, gammas = d.pop("lambdas", None), d.pop("gammas", None)
        if lambdas is not None or gammas is not None:
            if "rows" in d:
                raise ConfigError("sweep.rows", "give either rows or lambdas/gammas, not both")
            d["rows"] = grid_rows(lambdas if lambdas is not None else DEFAULT_LAMBDAS,
                                  gammas if gammas is not None else DEFAULT_GAMMAS)
        if "rows" in d:
            rows = []
            for r in d["rows"]:
                if not isinstance(r, (list, tuple)) or len(r) != 2:
                    raise ConfigError("sweep.rows", f"each row is [lambda, gamma], got {r!r}")
                rows.append((float(r[0]), None if r[1] is None else float(r[1])))
            d["rows"] = tuple(rows)
        for key in ("seeds", "tta_clips"):
            if key in d:
                d[key] = tuple(int(x) for x in d[key])
        if "reference" in d:
            d["reference"] = tuple(float(x) for x in d["reference"])
        return cls(**d)


def _distill_from_dict(d: dict) -> DistillConfig:
    _check_keys("distill", d, {f.name for f in fields(DistillConfig)} | {"preset"})
    d = dict(d)
    base = DistillConfig()
    if "preset" in d:
        name = d.pop("preset")
        if name not in DISTILL_PRESETS:
            raise ConfigError("distill.preset", f"unknown preset {name!r}; known: {sorted(DISTILL_PRESETS)}")
        base = DISTILL_PRESETS[name]
    return replace(base, **d)


def _dataset_from_dict(d: dict) -> DatasetConfig:
    d = dict(d)
    name = d.pop("preset", "default")
    if name not in DATA_PRESETS:
        raise ConfigError("dataset.preset", f"unknown preset {name!r}; known: {sorted(DATA_PRESETS)}")
    merged = {**DATA_PRESETS[name], **d}
    return DatasetConfig.from_dict(merged)


EXPERIMENT_PRESETS: dict[str, dict] = {
    "compositional": {
        "dataset": {"preset": "compositional"},
        "task": "verb",
        "teachers": ["flow", "layout"],
    },
    "weak-spectro": {
        "dataset": {"preset": "weak-spectro"},
        "task": "dual",
        "teachers": ["appearance", "flow", "spectro"],
        "sweep": {"rows": [[0.0, None], [1.0, 30.0], [0.8, 1.0]], "tta_clips": [], "omnivore": False},
    },
}
DEFAULT_PRESET = "compositional"


@dataclass(frozen=True)
class ExperimentConfig:
    label: str = "run"
    preset: str = DEFAULT_PRESET
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    task: str = "verb"
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    teachers: tuple[str, ...] = ("flow", "layout")
    omnivore: tuple[str, ...] = OMNIVORE_KINDS
    sweep: SweepSpec = field(default_factory=SweepSpec)
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError("task", f"must be one of {TASKS}, got {self.task!r}")
        if not self.teachers:
            raise ConfigError("teachers", "at least one teacher modality is required")
        for m in self.teachers:
            if m not in MODALITIES:
                raise ConfigError("teachers", f"unknown modality {m!r}; known: {MODALITIES}")
        if len(set(self.teachers)) != len(self.teachers):
            raise ConfigError("teachers", "modalities must be distinct")
        for m in self.omnivore:
            if m not in OMNIVORE_KINDS:
                raise ConfigError("omnivore", f"unknown omnivore input {m!r}; known: {OMNIVORE_KINDS}")
        if self.omnivore and self.omnivore[0] != "appearance":
            raise ConfigError("omnivore", "the omnivore model is evaluated on appearance, which must come first")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")

    @property
    def teacher_order(self) -> tuple[str, ...]:
        """Teachers in modality enumeration order (the ensemble's fixed order)."""
        return tuple(m for m in MODALITIES if m in self.teachers)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment with ``seed`` driving the data, the initialisation and the training stream."""
        return replace(self, seed=seed, dataset=replace(self.dataset, seed=seed),
                       train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "preset": self.preset,
            "dataset": self.dataset.to_dict(),
            "task": self.task,
            "train": self.train.to_dict(),
            "distill": self.distill.to_dict(),
            "teachers": list(self.teachers),
            "omnivore": list(self.omnivore),
            "sweep": self.sweep.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict | None = None) -> "ExperimentConfig":
        """Strict loader: unknown keys anywhere raise ``ConfigError`` naming the field."""
        d = dict(d or {})
        _check_keys("", d, {f.name for f in fields(cls)})
        name = d.get("preset", DEFAULT_PRESET)
        if name not in EXPERIMENT_PRESETS:
            raise ConfigError("preset", f"unknown preset {name!r}; known: {sorted(EXPERIMENT_PRESETS)}")
        base = EXPERIMENT_PRESETS[name]
        kw: dict[str, Any] = {"preset": name}
        for key in ("label", "task", "seed"):
            if key in d or key in base:
                kw[key] = d.get(key, base.get(key))
        data = dict(base.get("dataset", {}))
        if "dataset" in d:
            _check_keys("dataset", d["dataset"], {f.name for f in fields(DatasetConfig)} | {"preset"})
            if "preset" in d["dataset"]:
                data = {}
            data.update(d["dataset"])
        kw["dataset"] = _dataset_from_dict(data)
        if "train" in d:
            kw["train"] = TrainConfig.from_dict(d["train"])
        kw["distill"] = _distill_from_dict({**base.get("distill", {}), **d.get("distill", {})})
        for key in ("teachers", "omnivore"):
            if key in d or key in base:
                kw[key] = tuple(d.get(key, base.get(key)))
        kw["sweep"] = SweepSpec.from_dict({**base.get("sweep", {}), **d.get("sweep", {})})
        cfg = cls(**kw)
        if "seed" in kw:
            cfg = cfg.with_seed(int(kw["seed"]))
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "ExperimentConfig":
        if path is None:
            return cls.from_dict({})
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise DataError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def fingerprint(self, *parts: Any) -> str:
        """Hash of everything that determines a trained model, used to reuse checkpoints."""
        payload = json.dumps([self.dataset.to_dict(), self.train.to_dict(), self.task, *parts], sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_json(path: str | Path, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"missing file: {path}") from exc


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def gen_data(cfg: DatasetConfig, data_dir: str | Path) -> dict:
    """Write the three shards and a manifest with their checksums."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    shards = dict(zip(SPLITS, build_splits(cfg)))
    files = {}
    for name, shard in shards.items():
        digest = write_shard(shard, data_dir / f"{name}.shard")
        files[name] = {"path": f"{name}.shard", "sha256": digest, "count": len(shard)}
    manifest = {
        "format_version": SHARD_VERSION,
        "config": cfg.to_dict(),
        "files": files,
        "holdout_size": cfg.holdout_size,
        "split_mode": cfg.split_mode,
        "train_nouns": list(cfg.train_nouns),
        "held_out_nouns": list(cfg.val_nouns) if cfg.split_mode == "compositional" else [],
    }
    write_json(data_dir / "manifest.json", manifest)
    return manifest


def load_data(data_dir: str | Path):
    """``(config, train, holdout, val)`` from a gen-data directory; the shard header is authoritative."""
    data_dir = Path(data_dir)
    shards = {}
    for name in SPLITS:
        path = data_dir / f"{name}.shard"
        if not path.exists():
            raise DataError(f"missing shard {path}; run gen-data first")
        shards[name] = read_shard(path)
    cfg = shards["train"].config
    for name in SPLITS[1:]:
        if shards[name].config != cfg:
            raise ContractError(f"shard {name} was generated with a different config than train")
    return cfg, shards["train"].examples, shards["holdout"].examples, shards["val"].examples


def _load_checkpoint(path: str | Path) -> ModalityModel:
    if not Path(path).exists():
        raise DataError(f"missing checkpoint {path}")
    return load_model(path)


def top_classes(report: MetricsReport, n: int = TOP_N_CLASSES) -> list[list]:
    order = sorted(report.per_class, key=lambda c: (-report.per_class[c][0], c))[:n]
    return [[c, report.per_class[c][0], report.per_class[c][1]] for c in order]


def report_payload(report: MetricsReport, **extra) -> dict:
    d = report.to_dict()
    d["top_classes"] = top_classes(report)
    d.update(extra)
    return d


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------

def _finish_run(run_dir: Path, result: TrainResult, cfg: DatasetConfig, val, extra: dict) -> dict:
    result.model.save(run_dir / "model.ckpt", extra=extra)
    report = evaluate_model(result.model, val, cfg)
    payload = report_payload(report, **extra)
    write_json(run_dir / "metrics.json", payload)
    return payload


def run_teacher(exp: ExperimentConfig, modality: str, data, run_dir: str | Path) -> dict:
    if modality not in MODALITIES:
        raise ConfigError("modality", f"unknown modality {modality!r}; known: {MODALITIES}")
    cfg, train, _, val = data
    run_dir = Path(run_dir)
    res = train_teacher(modality, train, val, cfg, exp.train, exp.task, log_path=run_dir / "log.jsonl")
    return _finish_run(run_dir, res, cfg, val, {"role": "teacher", "modality": modality,
                                                "fingerprint": exp.fingerprint("teacher", modality)})


def run_baseline(exp: ExperimentConfig, data, run_dir: str | Path) -> dict:
    cfg, train, _, val = data
    run_dir = Path(run_dir)
    res = train_teacher("appearance", train, val, cfg, exp.train, exp.task, log_path=run_dir / "log.jsonl")
    return _finish_run(run_dir, res, cfg, val, {"role": "baseline", "modality": "appearance",
                                                "fingerprint": exp.fingerprint("teacher", "appearance")})


def run_omnivore(exp: ExperimentConfig, data, run_dir: str | Path) -> dict:
    cfg, train, _, val = data
    run_dir = Path(run_dir)
    res = train_omnivore(train, val, cfg, exp.train, exp.task, exp.omnivore, log_path=run_dir / "log.jsonl")
    draws = Counter(res.modality_draws)
    meta = {
        "role": "omnivore",
        "modalities": list(exp.omnivore),
        "epoch_multiplier": len(exp.omnivore),
        "modality_draw_seed": exp.train.seed,
        "modality_draw_stream": "modality-draw",
        "modality_draw_counts": {k: draws.get(k, 0) for k in exp.omnivore},
    }
    write_json(run_dir / "manifest.json", meta)
    return _finish_run(run_dir, res, cfg, val, meta)


def weights_payload(members: Sequence[str], errors: np.ndarray, gamma: float, Z: int, holdout_seed: int,
                    checkpoints: Sequence[str] | None = None) -> dict:
    w = compute_teacher_weights(errors, gamma)
    teachers = {}
    for i, m in enumerate(members):
        teachers[m] = {"error": float(errors[i]), "weight": float(w[i])}
        if checkpoints is not None:
            teachers[m]["checkpoint"] = str(checkpoints[i])
    return {"gamma": gamma, "Z": Z, "holdout_seed": holdout_seed, "order": list(members), "teachers": teachers}


def estimate_weights(checkpoints: Sequence[str | Path], holdout, cfg: DatasetConfig, gamma: float) -> dict:
    models = [_load_checkpoint(p) for p in checkpoints]
    tasks = {m.task for m in models}
    if len(tasks) != 1:
        raise ContractError(f"teachers were trained for different tasks: {sorted(tasks)}")
    names = [m.modality for m in models]
    if len(set(names)) != len(names):
        raise ContractError(f"duplicate teacher modalities: {names}")
    for m in models:
        if m.modality not in MODALITIES:
            raise ContractError(f"checkpoint holds a {m.modality} model, not a modality teacher")
    order = sorted(range(len(models)), key=lambda i: MODALITIES.index(models[i].modality))
    models = [models[i] for i in order]
    paths = [str(checkpoints[i]) for i in order]
    errors = estimate_teacher_errors(models, holdout, cfg)
    return weights_payload([m.modality for m in models], errors, gamma, len(holdout), cfg.seed, paths)


def format_weights(payload: dict) -> str:
    lines = [f"gamma = {payload['gamma']:g}, Z = {payload['Z']}", f"{'modality':<12}{'error':>10}{'weight':>10}"]
    for m in payload["order"]:
        t = payload["teachers"][m]
        lines.append(f"{m:<12}{t['error']:>10.4f}{t['weight']:>10.4f}")
    return "\n".join(lines)


def ensemble_from_weights(payload: dict, dist: DistillConfig) -> TeacherEnsemble:
    """Load the members of a weights file, re-weighting from the stored errors if gamma differs."""
    order = payload["order"]
    members = [_load_checkpoint(payload["teachers"][m]["checkpoint"]) for m in order]
    for m, name in zip(members, order):
        if m.modality != name:
            raise ContractError(f"checkpoint for {name} holds a {m.modality} model")
    errors = np.array([payload["teachers"][m]["error"] for m in order], dtype=np.float64)
    if math.isclose(payload["gamma"], dist.gamma, rel_tol=0, abs_tol=1e-12):
        weights = np.array([payload["teachers"][m]["weight"] for m in order], dtype=np.float64)
    else:
        weights = compute_teacher_weights(errors, dist.gamma)
    return TeacherEnsemble(members, weights, errors, dist.tau)


def run_distill(exp: ExperimentConfig, ensemble: TeacherEnsemble, data, run_dir: str | Path) -> dict:
    cfg, train, _, val = data
    run_dir = Path(run_dir)
    if ensemble.members[0].task != exp.task:
        raise ContractError(f"teachers were trained for task {ensemble.members[0].task!r}, config asks {exp.task!r}")
    res = distill_student(ensemble, train, val, cfg, exp.distill, exp.train, exp.task, log_path=run_dir / "log.jsonl")
    extra = {"role": "student", "lambda": exp.distill.lam, "gamma": exp.distill.gamma, "tau": exp.distill.tau,
             "teachers": ensemble.modalities, "weights": ensemble.weights.tolist()}
    return _finish_run(run_dir, res, cfg, val, extra)


def run_evaluate(checkpoint: str | Path, shard_path: str | Path, clips: int = 1, crops: int = 1) -> dict:
    model = _load_checkpoint(checkpoint)
    if not Path(shard_path).exists():
        raise DataError(f"missing shard {shard_path}")
    shard = read_shard(shard_path)
    report = evaluate_model(model, shard.examples, shard.config, num_clips=clips, num_crops=crops)
    return report_payload(report, clips=clips, crops=crops, checkpoint=str(checkpoint), shard=str(shard_path))


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def csv_row(lam: float, gamma: float | None, seed: int, report: MetricsReport) -> dict:
    return {
        "objective": objective_name(lam),
        "lambda": lam,
        "gamma": gamma,
        "seed": seed,
        "noun_top1": report.noun_top1,
        "verb_top1": report.verb_top1,
        "action_top1": report.action_top1,
        "top1": report.top1,
        "top5": report.top5,
        "ece": report.ece,
        "num_samples": report.num_samples,
        "num_bins": report.num_bins,
    }


def _member(exp: ExperimentConfig, modality: str, train, val, cfg, run_dir: Path) -> ModalityModel:
    """Train a teacher or reuse a checkpoint with a matching fingerprint."""
    fp = exp.fingerprint("teacher", modality)
    ckpt = run_dir / "model.ckpt"
    if ckpt.exists() and (run_dir / "metrics.json").exists():
        if read_json(run_dir / "metrics.json").get("fingerprint") == fp:
            log.info("reusing %s", ckpt)
            return load_model(ckpt)
    log.info("training %s teacher (seed %d)", modality, exp.seed)
    run_teacher(exp, modality, (cfg, train, None, val), run_dir)
    return load_model(ckpt)


def run_seed(exp: ExperimentConfig, seed: int, seed_dir: str | Path) -> dict:
    """Every cell of the sweep for one seed: teachers, baseline, students, TTA and omnivore."""
    exp = exp.with_seed(seed)
    seed_dir = Path(seed_dir)
    write_json(seed_dir / "resolved_config.json", exp.to_dict())
    cfg = exp.dataset
    train, hold, val = (s.examples for s in build_splits(cfg))
    members = {m: _member(exp, m, train, val, cfg, seed_dir / "teachers" / m)
               for m in dict.fromkeys(("appearance",) + exp.teacher_order)}
    order = exp.teacher_order
    errors = estimate_teacher_errors([members[m] for m in order], hold, cfg)
    gammas = sorted({g for _, g in exp.sweep.distill_rows})
    weights = {}
    for g in gammas:
        weights[_fmt(g)] = weights_payload(order, errors, g, len(hold), cfg.seed)
        write_json(seed_dir / f"weights_gamma{g:g}.json", weights[_fmt(g)])
    rows, models = [], {}
    baseline = members["appearance"]
    for lam, gamma in exp.sweep.rows:
        if lam == 0.0:
            model = baseline
        else:
            dist = replace(exp.distill, lam=lam, gamma=gamma)
            w = compute_teacher_weights(errors, gamma)
            ens = TeacherEnsemble([members[m] for m in order], w, errors, dist.tau)
            run_dir = seed_dir / f"student_lam{lam:g}_gamma{gamma:g}"
            log.info("distilling lambda=%g gamma=%g (seed %d)", lam, gamma, seed)
            write_json(run_dir / "resolved_config.json", replace(exp, distill=dist).to_dict())
            model = distill_student(ens, train, val, cfg, dist, exp.train, exp.task,
                                    log_path=run_dir / "log.jsonl").model
        models[(lam, gamma)] = model
        rows.append(csv_row(lam, gamma, seed, evaluate_model(model, val, cfg)))
    tta = []
    if exp.sweep.tta_clips:
        student = models[tuple(exp.sweep.reference)]
        for name, model in (("baseline", baseline), ("student", student)):
            for clips in exp.sweep.tta_clips:
                rep = evaluate_model(model, val, cfg, num_clips=clips)
                tta.append({"model": name, "seed": seed, "clips": clips, "top1": rep.top1, "ece": rep.ece})
    omnivore = None
    if exp.sweep.omnivore:
        log.info("training omnivore model (seed %d)", seed)
        omnivore = run_omnivore(exp, (cfg, train, hold, val), seed_dir / "omnivore")
    return {"seed": seed, "rows": rows, "weights": weights, "tta": tta, "omnivore": omnivore}


def _mean_std(values: list[float]) -> tuple[float, float]:
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def summarize(exp: ExperimentConfig, results: Sequence[dict]) -> dict:
    rows = [r for res in results for r in res["rows"]]
    metrics = ("noun_top1", "verb_top1", "action_top1", "top1", "top5", "ece")
    cells = []
    for lam, gamma in exp.sweep.rows:
        sel = [r for r in rows if r["lambda"] == lam and r["gamma"] == gamma]
        cell = {"objective": objective_name(lam), "lambda": lam, "gamma": gamma, "n": len(sel),
                "mean": {}, "std": {}}
        for k in metrics:
            vals = [r[k] for r in sel if r[k] is not None]
            if vals:
                cell["mean"][k], cell["std"][k] = _mean_std(vals)
        cells.append(cell)

    def cell_mean(lam, gamma, key="top1"):
        for c in cells:
            if c["lambda"] == lam and c["gamma"] == gamma:
                return c["mean"].get(key)
        return None

    violations = [r for r in rows if None not in (r["noun_top1"], r["verb_top1"], r["action_top1"])
                  and r["action_top1"] > min(r["noun_top1"], r["verb_top1"]) + 1e-12]
    checks: dict[str, Any] = {
        "num_bins": {"value": sorted({r["num_bins"] for r in rows}),
                     "status": "pass" if all(r["num_bins"] == NUM_BINS for r in rows) else "fail"},
        "action_le_min_noun_verb": {"violations": len(violations), "status": "fail" if violations else "pass"},
    }
    ref = tuple(exp.sweep.reference)
    if (0.0, None) in exp.sweep.rows and ref in exp.sweep.rows:
        checks["student_vs_baseline"] = {
            "student": list(ref),
            "student_top1": cell_mean(*ref), "baseline_top1": cell_mean(0.0, None),
            "student_ece": cell_mean(*ref, key="ece"), "baseline_ece": cell_mean(0.0, None, key="ece"),
        }
    tta = [t for res in results for t in res["tta"]]
    if tta:
        lo, hi = min(exp.sweep.tta_clips), max(exp.sweep.tta_clips)
        curve = {}
        for name in ("baseline", "student"):
            curve[name] = {str(c): float(np.mean([t["top1"] for t in tta if t["model"] == name and t["clips"] == c]))
                           for c in exp.sweep.tta_clips}
        drop = {name: curve[name][str(hi)] - curve[name][str(lo)] for name in curve}
        checks["tta_degradation"] = {
            "clips": [hi, lo], "curve": curve, "student_drop": drop["student"], "baseline_drop": drop["baseline"],
            "tolerance": TTA_TOLERANCE,
            "status": "pass" if drop["student"] <= drop["baseline"] + TTA_TOLERANCE else "warn",
        }
    omni = [res["omnivore"]["top1"] for res in results if res["omnivore"]]
    if omni:
        student = cell_mean(*ref)
        checks["student_vs_omnivore"] = {
            "student_top1": student, "omnivore_top1": float(np.mean(omni)),
            "status": "pass" if student is not None and student >= float(np.mean(omni)) else "warn",
        }
    return {
        "config": exp.to_dict(),
        "seeds": [res["seed"] for res in results],
        "cells": cells,
        "weights": {str(res["seed"]): res["weights"] for res in results},
        "omnivore": {str(res["seed"]): res["omnivore"]["top1"] for res in results if res["omnivore"]},
        "checks": checks,
    }


def write_csv(path: str | Path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def read_csv(path: str | Path) -> list[dict]:
    if not Path(path).exists():
        raise DataError(f"missing file: {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_sweep(exp: ExperimentConfig, out_dir: str | Path, parallel: int = 1) -> dict:
    """Run every (lambda, gamma, seed) cell and write ``sweep.csv``, ``tta.csv`` and ``summary.json``.

    Cells of one seed share its teachers, so parallel workers take whole seeds.
    Results are collected in seed order, which keeps the outputs identical to a
    sequential run.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = exp.sweep.seeds
    dirs = [out_dir / f"seed{s}" for s in seeds]
    if parallel > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(parallel, len(seeds))) as pool:
            results = list(pool.map(run_seed, [exp] * len(seeds), seeds, dirs))
    else:
        results = [run_seed(exp, s, d) for s, d in zip(seeds, dirs)]
    rows = [r for res in results for r in res["rows"]]
    write_csv(out_dir / "sweep.csv", rows, CSV_COLUMNS)
    write_csv(out_dir / "tta.csv", [t for res in results for t in res["tta"]], TTA_COLUMNS)
    summary = summarize(exp, results)
    write_json(out_dir / "summary.json", summary)
    if exp.sweep.plots:
        write_plots(out_dir, summary, rows)
    return summary


# ---------------------------------------------------------------------------
# reports and plots
# ---------------------------------------------------------------------------

def _num(s: str) -> float | None:
    return None if s == "" else float(s)


def check_sweep_dir(sweep_dir: str | Path) -> list[str]:
    """Invariant violations in a finished sweep directory (empty list when clean)."""
    sweep_dir = Path(sweep_dir)
    problems = []
    rows = read_csv(sweep_dir / "sweep.csv")
    if not rows or tuple(rows[0].keys()) != CSV_COLUMNS:
        problems.append(f"sweep.csv columns differ from {CSV_COLUMNS}")
    for i, r in enumerate(rows):
        n, v, a = _num(r.get("noun_top1", "")), _num(r.get("verb_top1", "")), _num(r.get("action_top1", ""))
        if None not in (n, v, a) and a > min(n, v) + 1e-6:
            problems.append(f"row {i}: action {a} exceeds min(noun {n}, verb {v})")
    summary = read_json(sweep_dir / "summary.json")
    for name, chk in summary.get("checks", {}).items():
        if chk.get("status") == "fail":
            problems.append(f"check {name} failed")
    return problems


def format_report(summary: dict) -> str:
    lines = ["# Sweep report", "", "| objective | lambda | gamma | n | top1 | ece | noun | verb | action |",
             "|---|---|---|---|---|---|---|---|---|"]
    for c in summary["cells"]:
        m, s = c["mean"], c["std"]

        def cell(k):
            return f"{100 * m[k]:.1f} ± {100 * s[k]:.1f}" if k in m else "-"

        gamma = "-" if c["gamma"] is None else f"{c['gamma']:g}"
        lines.append(f"| {c['objective']} | {c['lambda']:g} | {gamma} | {c['n']} | {cell('top1')} | "
                     f"{cell('ece')} | {cell('noun_top1')} | {cell('verb_top1')} | {cell('action_top1')} |")
    lines += ["", "## Checks", ""]
    for name, chk in summary["checks"].items():
        status = chk.get("status", "info")
        detail = {k: v for k, v in chk.items() if k not in ("status", "curve")}
        lines.append(f"- {name}: {status} {json.dumps(detail, sort_keys=True)}")
    return "\n".join(lines) + "\n"


def write_plots(out_dir: str | Path, summary: dict, rows: Sequence[dict] | None = None) -> list[Path]:
    """Static SVG bar and line charts; needs matplotlib."""
    import matplotlib
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    written = []
    cells = summary["cells"]
    labels = [f"{c['objective']}\n{c['lambda']:g}/{'-' if c['gamma'] is None else format(c['gamma'], 'g')}"
              for c in cells]
    for key, title in (("top1", "top-1 accuracy"), ("ece", "expected calibration error")):
        fig, ax = plt.subplots(figsize=(8, 3.5))
        ax.bar(range(len(cells)), [c["mean"].get(key, 0.0) for c in cells],
               yerr=[c["std"].get(key, 0.0) for c in cells], color="#4c72b0")
        ax.set_xticks(range(len(cells)), labels, fontsize=7)
        ax.set_ylabel(title)
        fig.tight_layout()
        path = out_dir / f"{key}.svg"
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    tta = summary["checks"].get("tta_degradation")
    if tta:
        fig, ax = plt.subplots(figsize=(4, 3))
        for name, curve in tta["curve"].items():
            xs = sorted(int(k) for k in curve)
            ax.plot(xs, [curve[str(x)] for x in xs], marker="o", label=name)
        ax.set_xlabel("temporal clips")
        ax.set_ylabel("top-1 accuracy")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "tta.svg"
        fig.savefig(path, metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
