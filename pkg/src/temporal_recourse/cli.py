"""Command-line interface.

Each stage of the pipeline is a subcommand that reads and writes the same
files the full ``run`` produces, so a bundle can be rebuilt one step at a
time.  ``TEMPORAL_RECOURSE_OUTPUT`` overrides the output directory of
``run`` and ``TEMPORAL_RECOURSE_THREADS`` sets how many repetitions run at
once.
"""
from __future__ import annotations

import functools
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import analysis, benchmarks, estimator, experiment, predictors, recourse
from .scm import Panel, ScmError, simulate as simulate_panel

OUTPUT_ENV = "TEMPORAL_RECOURSE_OUTPUT"
THREADS_ENV = "TEMPORAL_RECOURSE_THREADS"

_ERRORS = (ScmError, predictors.PredictorError, experiment.StageError, experiment.BundleError,
           analysis.BoundPreconditionError, OSError)


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _ERRORS as exc:
            raise click.ClickException(str(exc)) from exc
    return wrapper


def _world_options(fn):
    fn = click.option("--alpha", type=float, default=0.0, show_default=True,
                      help="Trend strength.")(fn)
    fn = click.option("--trend", type=click.Choice(benchmarks.TREND_KINDS), default="linear+seasonal",
                      show_default=True)(fn)
    fn = click.option("--benchmark", type=click.Choice(benchmarks.BENCHMARKS), required=True)(fn)
    return fn


def _ints(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}") from exc


def _write(path: str, text: str) -> None:
    if path == "-":
        click.echo(text, nl=False)
        return
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)
    click.echo(f"wrote {p}", err=True)


def _load_panel(path: str, lag: int = 1) -> Panel:
    return Panel.from_csv(Path(path).read_text(), lag=lag)


def _load_classifier(path: str):
    return predictors.from_document(Path(path).read_text())


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Temporal causal algorithmic recourse experiments."""


@main.command()
@_world_options
@click.option("--horizon", type=int, default=100, show_default=True)
@click.option("-n", "--individuals", type=int, default=2000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--output", default="trajectories.csv", show_default=True, help="'-' for stdout.")
@_guard
def simulate(benchmark, trend, alpha, horizon, individuals, seed, output):
    """Sample labelled trajectories from a benchmark."""
    world = benchmarks.build(benchmark, trend, alpha)
    panel = simulate_panel(world, horizon, individuals, seed)
    _write(output, panel.to_csv())


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--t", "time", type=int, default=0, show_default=True, help="Training time step.")
@click.option("--train-fraction", type=float, default=0.5, show_default=True)
@click.option("--epochs", type=int, default=15, show_default=True)
@click.option("--batch-size", type=int, default=100, show_default=True)
@click.option("--learning-rate", type=float, default=0.001, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--output", default="classifier.json", show_default=True)
@_guard
def train(data, time, train_fraction, epochs, batch_size, learning_rate, seed, output):
    """Train the MLP classifier on the training split at one time step."""
    panel = _load_panel(data)
    train_idx, test_idx = experiment.split(panel.n, train_fraction)
    cfg = predictors.TrainConfig(batch_size, epochs, learning_rate, seed)
    h = experiment.train_classifier(panel, time, train_idx, cfg)
    if len(test_idx):
        acc = predictors.accuracy(h, panel.states[test_idx, time], panel.labels[test_idx, time])
        click.echo(f"test accuracy {acc:.3f}", err=True)
    _write(output, predictors.to_document(h))


@main.command("fit-scm")
@_world_options
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--cutoff", type=int, default=None, help="Last time step used (default: half the horizon).")
@click.option("--targets", type=click.Choice(estimator.TARGETS), default="actionable", show_default=True)
@click.option("--no-time", is_flag=True, help="Leave the time index out of the regressors.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--output", default="estimator.yaml", show_default=True)
@_guard
def fit_scm(benchmark, trend, alpha, data, cutoff, targets, no_time, seed, output):
    """Fit linear structural equations on the benchmark's causal graph."""
    graph = benchmarks.build(benchmark, trend, alpha)
    panel = _load_panel(data, graph.lag)
    est = estimator.fit(panel, graph, cutoff, use_time=not no_time, seed=seed, targets=targets)
    for f in est.fits:
        click.echo(f"{f.target}: residual variance {f.residual_variance:.4g}", err=True)
    _write(output, est.dumps())


@main.command("recourse")
@_world_options
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--classifier", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--estimator", "estimator_path", type=click.Path(exists=True, dir_okay=False),
              help="Plan with a fitted estimator instead of the true SCM.")
@click.option("--method", type=click.Choice(recourse.METHODS), default="t-sar", show_default=True)
@click.option("--epsilon", type=float, default=0.0, show_default=True)
@click.option("--tau", type=int, default=50, show_default=True, help="Planning lag for t-sar.")
@click.option("--t", "time", type=int, default=0, show_default=True, help="Issue time.")
@click.option("--seekers", type=int, default=100, show_default=True)
@click.option("--train-fraction", type=float, default=0.5, show_default=True)
@click.option("--eta", type=float, default=0.5, show_default=True)
@click.option("--lam", type=float, default=1.0, show_default=True)
@click.option("--scale", type=click.Choice(["std", "raw"]), default="std", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--output", default="outcomes.csv", show_default=True)
@_guard
def recourse_cmd(benchmark, trend, alpha, data, classifier, estimator_path, method, epsilon, tau, time,
                 seekers, train_fraction, eta, lam, scale, seed, output):
    """Solve recourse for negatively classified test individuals."""
    world = benchmarks.build(benchmark, trend, alpha)
    plan = estimator.Estimator.loads(Path(estimator_path).read_text()).scm if estimator_path else world
    panel = _load_panel(data, world.lag)
    h = _load_classifier(classifier)
    _, test_idx = experiment.split(panel.n, train_fraction)
    chosen = experiment.select_seekers(h, panel, time, test_idx, seekers)
    if not len(chosen):
        raise click.ClickException("no negatively classified individual in the test split")
    windows = panel.window(time, world.lag)[chosen]
    sc = experiment.feature_scale(panel, world, time) if scale == "std" else None
    spec = experiment.MethodSpec(method, epsilon)
    outcomes = experiment.solve_methods(plan, h, windows, [spec], tau, sc, {"eta": eta, "lam": lam},
                                        seed, time, chosen.tolist())
    conv = np.mean([o.converged for o in outcomes])
    click.echo(f"{len(outcomes)} individuals, converged {conv:.3f}", err=True)
    _write(output, experiment.outcomes_to_csv(outcomes))


@main.command()
@_world_options
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--classifier", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--outcomes", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--taus", default="0,10,25,50", show_default=True, help="Comma-separated lags.")
@click.option("--rollouts", type=int, default=10, show_default=True)
@click.option("--mode", type=click.Choice(["native", "counterfactual", "interventional"]), default="native",
              show_default=True, help="Uncertainty model the validity is judged under.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--output", default="validity.csv", show_default=True)
@_guard
def evaluate(benchmark, trend, alpha, data, classifier, outcomes, taus, rollouts, mode, seed, output):
    """Validity, cost and sparsity of issued recourse over time."""
    world = benchmarks.build(benchmark, trend, alpha)
    panel = _load_panel(data, world.lag)
    h = _load_classifier(classifier)
    outs = experiment.outcomes_from_csv(Path(outcomes).read_text())
    if not outs:
        raise click.ClickException("the outcome file is empty")
    times = {o.issue_time for o in outs}
    if len(times) != 1:
        raise click.ClickException("outcomes must share one issue time")
    t = times.pop()
    lags = _ints(taus)
    if t + max(lags) >= panel.states.shape[1]:
        raise click.ClickException("evaluation times exceed the simulated horizon")
    windows = panel.window(t, world.lag)[[o.individual for o in outs]]
    records = analysis.validity_over_time(world, h, outs, windows, lags, rollouts, seed, mode=mode)
    for r in records:
        click.echo(f"{r.method:6s} eps={r.epsilon:<6g} t={r.eval_time:<4d} validity {r.validity:.3f}", err=True)
    _write(output, analysis.records_to_csv(records))


@main.command()
@_world_options
@click.option("--data", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--outcomes", type=click.Path(exists=True, dir_okay=False),
              help="Issued interventions used as displacements in the cost bound.")
@click.option("--t", "time", type=int, default=0, show_default=True)
@click.option("--taus", default="0,10,25,50", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--output", default="bounds.csv", show_default=True)
@_guard
def bounds(benchmark, trend, alpha, data, outcomes, time, taus, seed, output):
    """Check the linear-score and cost-variation bounds on simulated data."""
    world = benchmarks.build(benchmark, trend, alpha)
    panel = _load_panel(data, world.lag)
    outs = experiment.outcomes_from_csv(Path(outcomes).read_text()) if outcomes else []
    lags = _ints(taus)
    if time + max(lags) >= panel.states.shape[1]:
        raise click.ClickException("evaluation times exceed the simulated horizon")
    reports = experiment.bound_reports(panel, time, lags, outs, world, seed)
    for kind, r in reports:
        status = "ok" if r.holds else "VIOLATED"
        click.echo(f"{kind:15s} tau={r.tau:<4d} empirical {r.empirical:.4g} bound {r.bound:.4g} {status}",
                   err=True)
    _write(output, experiment.bounds_to_csv(reports))


@main.command()
@click.argument("result_dir", type=click.Path(file_okay=False))
@_guard
def report(result_dir):
    """Aggregate a result bundle into summary.csv and curves.csv."""
    if not Path(result_dir).is_dir():
        raise experiment.BundleError(f"{result_dir} does not exist")
    out = experiment.report(result_dir)
    click.echo("method,epsilon,eval_time,validity_mean,validity_std")
    for r in out["summary"]:
        click.echo(f"{r['method']},{r['epsilon']:g},{r['eval_time']},"
                   f"{r['validity_mean']:.4f},{r['validity_std']:.4f}")


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--output", default=None, help=f"Output directory (overrides ${OUTPUT_ENV} and the config).")
@click.option("--workers", type=int, default=None, help=f"Concurrent repetitions (default ${THREADS_ENV} or 1).")
@_guard
def run(config, output, workers):
    """Run the full pipeline from a YAML config and write a result bundle."""
    cfg = experiment.ExperimentConfig.loads(Path(config).read_text())
    out = output or os.environ.get(OUTPUT_ENV) or cfg.output_dir
    if workers is None:
        try:
            workers = int(os.environ.get(THREADS_ENV, "1"))
        except ValueError as exc:
            raise click.ClickException(f"{THREADS_ENV} must be an integer") from exc
    path = experiment.run(cfg, out, workers=max(1, workers))
    click.echo(f"bundle written to {path}", err=True)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
