"""End-to-end pipeline: simulate, train, fit an estimator, solve recourse,
evaluate over time, check the stability bounds, and write a result bundle.

Every stage draws its seed from the repetition's master seed, so a bundle
is a pure function of its configuration.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import analysis, benchmarks, estimator, predictors, recourse
from .scm import Panel, ScmError, ScmSpec, simulate

ESTIMATOR_MODES = ("true-scm", "fitted", "perfect")
STAGES = ("simulate", "train", "fit-scm", "recourse", "evaluate", "bounds")
MANIFEST = "manifest.json"
_STAGE_KEYS = {name: i + 1 for i, name in enumerate(STAGES)}


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def stage_seed(master: int, stage: str, repetition: int = 0) -> int:
    ss = np.random.SeedSequence(int(master), spawn_key=(int(repetition), _STAGE_KEYS[stage]))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class MethodSpec:
    method: str
    epsilon: float = 0.0

    @property
    def label(self) -> str:
        return self.method if self.method == "t-sar" else f"{self.method}(eps={self.epsilon:g})"


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: str = "linear-anm"
    trend: str = "linear+seasonal"
    alpha: float = 1.0
    population: int = 2000
    horizon: int = 100
    train_fraction: float = 0.5
    seekers: int = 100
    methods: tuple = (MethodSpec("imf", 3.0), MethodSpec("car", 3.0), MethodSpec("sar", 3.0),
                      MethodSpec("t-sar"))
    taus: tuple = (0, 10, 25, 50)
    tsar_tau: int | None = None
    issue_time: int = 0
    train_time: int = 0
    repetitions: int = 5
    seed: int = 0
    estimator: str = "true-scm"
    fit_cutoff: int | None = None
    n_rollouts: int = 10
    evaluation: str = "native"
    feature_scale: str = "std"
    training: dict = field(default_factory=dict)
    recourse: dict = field(default_factory=dict)
    output_dir: str = "results"

    def __post_init__(self):
        benchmarks.BenchmarkId(self.benchmark, self.trend, self.alpha)
        if self.repetitions < 1:
            raise ScmError("repetitions must be at least 1")
        if not 0 < self.train_fraction < 1:
            raise ScmError("train_fraction must lie in (0, 1)")
        test_size = self.population - int(round(self.train_fraction * self.population))
        if not 1 <= self.seekers <= test_size:
            raise ScmError("seekers must be between 1 and the test split size")
        if self.estimator not in ESTIMATOR_MODES:
            raise ScmError(f"estimator must be one of {ESTIMATOR_MODES}")
        if not self.taus or min(self.taus) < 0:
            raise ScmError("taus must be a nonempty list of non-negative lags")
        if not 0 <= self.train_time <= self.horizon or self.issue_time < 0:
            raise ScmError("train_time and issue_time must lie within the horizon")
        if self.issue_time + max(self.taus) > self.horizon:
            raise ScmError("evaluation times exceed the simulated horizon")
        if self.evaluation not in ("counterfactual", "interventional", "native"):
            raise ScmError("evaluation must be 'counterfactual', 'interventional' or 'native'")
        if self.feature_scale not in ("std", "raw"):
            raise ScmError("feature_scale must be 'std' or 'raw'")
        methods = tuple(m if isinstance(m, MethodSpec) else MethodSpec(**m) for m in self.methods)
        for m in methods:
            if m.method not in recourse.METHODS:
                raise ScmError(f"unknown method {m.method!r}")
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "taus", tuple(int(t) for t in self.taus))
        predictors.TrainConfig(**self._train_kwargs())

    def _train_kwargs(self) -> dict:
        kw = dict(self.training)
        if "hidden" in kw:
            kw["hidden"] = tuple(kw["hidden"])
        return kw

    @property
    def planning_tau(self) -> int:
        return self.tsar_tau if self.tsar_tau is not None else max(max(self.taus), 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = [asdict(m) for m in self.methods]
        d["taus"] = list(self.taus)
        return d

    @staticmethod
    def from_dict(d) -> "ExperimentConfig":
        unknown = set(d) - set(ExperimentConfig.__dataclass_fields__)
        if unknown:
            raise ScmError(f"unknown config keys: {sorted(unknown)}")
        return ExperimentConfig(**d)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @staticmethod
    def loads(text: str) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(yaml.safe_load(text) or {})

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def split(n: int, train_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    k = int(round(train_fraction * n))
    idx = np.arange(n)
    return idx[:k], idx[k:]


def train_classifier(panel: Panel, t: int, train_idx, cfg: predictors.TrainConfig):
    if panel.labels is None:
        raise ScmError("the trajectories carry no labels")
    x = panel.states[train_idx, t]
    y = panel.labels[train_idx, t]
    return predictors.train_mlp(x, y, cfg)


def feature_scale(panel: Panel, scm: ScmSpec, t: int = 0) -> np.ndarray:
    """Population standard deviation per feature at ``t`` (1 where degenerate)."""
    s = panel.states[:, t].std(axis=0)
    s[s < 1e-9] = 1.0
    for j, v in enumerate(scm.variables):
        if v.categorical:
            s[j] = 1.0
    return s


def select_seekers(h, panel: Panel, t: int, candidates, count: int) -> np.ndarray:
    """The first ``count`` candidates the classifier rejects at time ``t``."""
    candidates = np.asarray(candidates)
    neg = candidates[h.predict(panel.states[candidates, t]) < 0.5]
    return neg[:count]


def recourse_config(spec: MethodSpec, tau: int, scale, base: dict) -> recourse.RecourseConfig:
    kw = dict(base)
    kw.update(method=spec.method, epsilon=spec.epsilon if spec.method != "t-sar" else 0.0,
              tau=tau if spec.method == "t-sar" else 0)
    if scale is not None:
        kw["feature_scale"] = tuple(float(v) for v in scale)
    return recourse.RecourseConfig.from_dict(kw)


def solve_methods(plan: ScmSpec, h, windows: np.ndarray, specs, tau: int, scale, base: dict,
                  seed: int, t: int, individuals) -> list:
    out = []
    for spec in specs:
        cfg = recourse_config(spec, tau, scale, base)
        out.extend(recourse.solve_batch(plan, windows, cfg, h, seed, t, individuals))
    return out


def bound_reports(panel: Panel, t: int, taus, outcomes, scm: ScmSpec, seed: int) -> list:
    """Linear-score and cost-variation bounds on the simulated data.

    Bounded least-squares scores are fitted at each time; states are the
    population's realized states and the issued shifts give the displacement.
    """
    x0 = panel.states[:, t]
    k = float(max(np.abs(panel.states).max(), 1.0))
    y0 = panel.labels[:, t] if panel.labels is not None else np.zeros(len(x0))
    b0 = predictors.fit_bounded_linear(x0, 2 * y0 - 1, k, max_iter=5000).beta
    theta = np.stack([o.dense(scm) for o in outcomes]) if outcomes else np.zeros((1, scm.d))
    theta = np.clip(theta, -k, k)
    reports = []
    for tau in taus:
        x1 = panel.states[:, t + tau]
        y1 = panel.labels[:, t + tau] if panel.labels is not None else np.zeros(len(x1))
        b1 = predictors.fit_bounded_linear(x1, 2 * y1 - 1, k, max_iter=5000).beta
        r = analysis.linear_invalidation_bound(k, b0, b1, x0, x1, t, tau)
        reports.append(("linear-score", r))
        rows = np.arange(len(x0)) % len(theta)
        w = np.ones(scm.d)
        c = analysis.cost_variation_bound(k, w, w, x0, x0 + theta[rows], x1, x1 + theta[rows], t, tau)
        reports.append(("cost-variation", c))
    return reports


# --------------------------------------------------------------------------
# the bundle
# --------------------------------------------------------------------------


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def outcomes_to_csv(outcomes) -> str:
    return analysis.records_to_csv(outcomes)


def outcomes_from_csv(text: str) -> list:
    """Inverse of :func:`outcomes_to_csv`."""
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        feats = tuple(f for f in r["features"].split(";") if f)
        theta = tuple(float(v) for v in r["theta"].split(";") if v)
        out.append(recourse.RecourseOutcome(
            feats, theta, r["converged"] == "True", int(r["issue_time"]), int(r["tau"]),
            int(r["epochs_used"]), float(r["expected_response"]), float(r["worst_case_response"]),
            float(r["cost"]), r["method"], float(r["epsilon"]), int(r["individual"])))
    return out


def bounds_to_csv(reports) -> str:
    rows = [{"kind": kind, **analysis._flat(r)} for kind, r in reports]
    if not rows:
        return ""
    keys = []
    for r in rows:
        keys.extend(k for k in r if k not in keys)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def run_repetition(cfg: ExperimentConfig, rep: int) -> dict:
    """Run every stage for one repetition; returns file name -> bytes."""
    files = {}
    stage = "simulate"
    try:
        world = benchmarks.build(cfg.benchmark, cfg.trend, cfg.alpha)
        panel = simulate(world, cfg.horizon, cfg.population, stage_seed(cfg.seed, "simulate", rep))
        files["trajectories.csv"] = panel.to_csv().encode()

        stage = "train"
        train_idx, test_idx = split(cfg.population, cfg.train_fraction)
        tcfg = predictors.TrainConfig(**{**cfg._train_kwargs(), "seed": stage_seed(cfg.seed, "train", rep)})
        h = train_classifier(panel, cfg.train_time, train_idx, tcfg)
        files["classifier.json"] = predictors.to_document(h).encode()

        stage = "fit-scm"
        plan = world
        if cfg.estimator == "fitted":
            fit_seed = stage_seed(cfg.seed, "fit-scm", rep)
            fit_panel = simulate(world, cfg.horizon, cfg.population, fit_seed, labels=False)
            est = estimator.fit(fit_panel, world, cfg.fit_cutoff, seed=fit_seed)
            plan = est.scm
            files["estimator.yaml"] = est.dumps().encode()

        stage = "recourse"
        seekers = select_seekers(h, panel, cfg.issue_time, test_idx, cfg.seekers)
        windows = panel.window(cfg.issue_time, world.lag)[seekers]
        scale = feature_scale(panel, world, cfg.issue_time) if cfg.feature_scale == "std" else None
        outcomes = solve_methods(plan, h, windows, cfg.methods, cfg.planning_tau, scale, cfg.recourse,
                                 stage_seed(cfg.seed, "recourse", rep), cfg.issue_time, seekers.tolist())
        files["outcomes.csv"] = outcomes_to_csv(outcomes).encode()

        stage = "evaluate"
        nm = len(cfg.methods)
        all_windows = np.concatenate([windows] * nm, axis=0) if nm else windows
        records = analysis.validity_over_time(world, h, outcomes, all_windows, cfg.taus, cfg.n_rollouts,
                                              stage_seed(cfg.seed, "evaluate", rep), mode=cfg.evaluation)
        files["validity.csv"] = analysis.records_to_csv(records).encode()

        stage = "bounds"
        reports = bound_reports(panel, cfg.issue_time, cfg.taus, outcomes, world,
                                stage_seed(cfg.seed, "bounds", rep))
        files["bounds.csv"] = bounds_to_csv(reports).encode()
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - annotate and re-raise with the stage name
        raise StageError(stage, exc) from exc
    return files


def _attempt(cfg: ExperimentConfig, rep: int):
    try:
        return run_repetition(cfg, rep)
    except StageError as err:
        return err


def run(cfg: ExperimentConfig, output_dir: str | os.PathLike | None = None, workers: int = 1) -> Path:
    """Write the full bundle; the manifest is written last.

    With ``workers > 1`` repetitions run in separate processes.  Every
    repetition is seeded independently, so the bundle does not depend on
    the worker count.
    """
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_hash": cfg.digest(),
        "config": cfg.to_dict() | {"output_dir": ""},
        "repetitions": [],
        "files": {},
        "complete": True,
    }
    (out / "config.yaml").write_text(cfg.dumps())
    manifest["files"]["config.yaml"] = _sha((out / "config.yaml").read_bytes())
    reps = range(cfg.repetitions)
    if workers > 1 and cfg.repetitions > 1:
        with ProcessPoolExecutor(max_workers=min(workers, cfg.repetitions)) as pool:
            results = list(pool.map(_attempt, [cfg] * cfg.repetitions, reps))
    else:
        results = (_attempt(cfg, rep) for rep in reps)
    for rep, files in zip(reps, results):
        seeds = {s: stage_seed(cfg.seed, s, rep) for s in STAGES}
        entry = {"index": rep, "seeds": seeds, "status": "ok"}
        if isinstance(files, StageError):
            entry["status"] = f"failed at {files.stage}: {files.cause}"
            manifest["complete"] = False
            manifest["repetitions"].append(entry)
            _write_manifest(out, manifest)
            raise files
        rdir = out / f"rep-{rep:02d}"
        rdir.mkdir(exist_ok=True)
        for name, data in files.items():
            (rdir / name).write_bytes(data)
            manifest["files"][f"rep-{rep:02d}/{name}"] = _sha(data)
        manifest["repetitions"].append(entry)
    _write_manifest(out, manifest)
    return out


def _write_manifest(out: Path, manifest: dict) -> None:
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------


class BundleError(RuntimeError):
    pass


def load_manifest(result_dir) -> dict:
    root = Path(result_dir)
    path = root / MANIFEST
    if not path.exists():
        raise BundleError(f"no manifest in {root}; nothing to report")
    manifest = json.loads(path.read_text())
    listed = set(manifest["files"])
    for p in root.rglob("*"):
        if p.is_file() and p.name != MANIFEST and not p.name.startswith("summary") \
                and not p.name.startswith("curves"):
            rel = p.relative_to(root).as_posix()
            if rel not in listed:
                raise BundleError(f"unlisted file {rel!r} in bundle")
    for rel, digest in manifest["files"].items():
        f = root / rel
        if not f.exists():
            raise BundleError(f"missing file {rel!r}")
        if _sha(f.read_bytes()) != digest:
            raise BundleError(f"content hash mismatch for {rel!r}")
    return manifest


def _read_csv(path: Path) -> list:
    with path.open() as fh:
        return list(csv.DictReader(fh))


def report(result_dir) -> dict:
    """Mean and standard deviation of validity across repetitions.

    Returns ``{"summary": rows, "curves": rows}`` and writes ``summary.csv``
    (method x epsilon x evaluation time) and ``curves.csv`` (long format, one
    row per repetition) into the bundle.
    """
    root = Path(result_dir)
    manifest = load_manifest(root)
    reps = [e for e in manifest["repetitions"] if e["status"] == "ok"]
    if not reps:
        raise BundleError("bundle contains no completed repetition")
    curves = []
    for e in reps:
        rel = f"rep-{e['index']:02d}/validity.csv"
        if rel not in manifest["files"]:
            raise BundleError(f"missing repetition file {rel!r}")
        for row in _read_csv(root / rel):
            curves.append({"repetition": e["index"], **row})
    groups = {}
    for row in curves:
        key = (row["method"], float(row["epsilon"]), int(row["eval_time"]))
        groups.setdefault(key, []).append(row)
    summary = []
    for (method, eps, t), rows in sorted(groups.items()):
        v = np.array([float(r["validity"]) for r in rows])
        c = np.array([float(r["mean_cost"]) for r in rows])
        c = c[~np.isnan(c)]
        summary.append({
            "method": method, "epsilon": eps, "eval_time": t, "repetitions": len(rows),
            "validity_mean": float(v.mean()), "validity_std": float(v.std()),
            "cost_mean": float(c.mean()) if c.size else float("nan"),
            "cost_std": float(c.std()) if c.size else float("nan"),
        })
    _write_rows(root / "summary.csv", summary)
    _write_rows(root / "curves.csv", curves)
    return {"summary": summary, "curves": curves}


def _write_rows(path: Path, rows: list) -> None:
    if not rows:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


__all__ = [
    "ExperimentConfig", "MethodSpec", "StageError", "BundleError", "ESTIMATOR_MODES", "stage_seed",
    "split", "train_classifier", "feature_scale", "select_seekers", "recourse_config",
    "solve_methods", "bound_reports", "outcomes_from_csv", "outcomes_to_csv", "bounds_to_csv", "run_repetition", "run", "report", "load_manifest",
]
