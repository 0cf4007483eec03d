"""Command-line operator surface: run, replay, bench, inspect."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .engine import ExperimentSpec, SpecError, run_experiment
from .util import fmt_cents


def load_spec_file(path: str | Path) -> ExperimentSpec:
    path = Path(path)
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    data = dict(doc.get("experiment", {}))
    if "id" in data:
        data["experiment_id"] = data.pop("id")
    scenario = doc.get("scenario")
    if scenario:
        data["scenario"] = {"name": scenario.get("name", "freeform"),
                            "params": scenario.get("params", {})}
    return ExperimentSpec.from_dict(data)


@click.group()
def main():
    """Generative social-simulation engine."""


@main.command()
@click.argument("spec_path", type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the spec seed.")
@click.option("--rounds", type=int, default=None, help="Override round count.")
@click.option("--groups", type=int, default=None, help="Override group count.")
@click.option("--out", type=click.Path(), default=None, help="Results directory.")
@click.option("--serve", is_flag=True, help="Expose the control API while running.")
@click.option("--port", type=int, default=8800, show_default=True)
def run(spec_path, seed, rounds, groups, out, serve, port):
    """Run an experiment from a TOML spec file."""
    path = Path(spec_path)
    if not path.exists():
        click.echo(f"error: spec file not found: {path}", err=True)
        sys.exit(2)
    try:
        spec = load_spec_file(path)
        if seed is not None:
            spec.seed = seed
        if rounds is not None:
            spec.round_count = rounds
        if groups is not None:
            spec.group_count = groups
        if out is not None:
            spec.output_dir = out
        spec.validate()
    except (SpecError, ValueError, KeyError) as exc:
        click.echo(f"error: invalid spec: {exc}", err=True)
        sys.exit(2)

    if serve:
        _run_serving(spec, port)
        return
    result = run_experiment(spec)
    click.echo(f"experiment {spec.experiment_id}: {result.rounds_run} rounds "
               f"in {result.duration_s:.1f}s, {result.error_count} errors")
    if spec.output_dir:
        click.echo(f"results: {spec.output_dir}")
    sys.exit(0 if result.error_count == 0 else 1)


def _run_serving(spec: ExperimentSpec, port: int) -> None:
    import uvicorn

    from .engine import Experiment, ScenarioConfig
    from .gateway import LiveController, create_app

    if spec.scenario.name != "freeform":
        from .scenarios import build_scenario_config
        config = build_scenario_config(spec.scenario.name, spec.scenario.params)
    else:
        config = ScenarioConfig()
    controller = LiveController(Experiment(spec, config))
    app = create_app({spec.experiment_id: controller})
    click.echo(f"serving live run on http://127.0.0.1:{port}")
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")


@main.command()
@click.argument("results_dir", type=click.Path())
@click.option("--port", type=int, default=8800, show_default=True)
def replay(results_dir, port):
    """Serve a recorded run read-only over the same API."""
    import uvicorn

    from .gateway import ReplayController, create_app

    path = Path(results_dir)
    if not path.exists():
        click.echo(f"error: results directory not found: {path}", err=True)
        sys.exit(2)
    controller = ReplayController(path)
    for warning in controller.warnings:
        click.echo(f"warning: {warning}", err=True)
    exp_id = controller.summary()["experiment_id"]
    app = create_app({exp_id: controller}, allow_create=False)
    click.echo(f"replaying {exp_id} on http://127.0.0.1:{port}")
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")


@main.group()
def bench():
    """Performance benchmarks."""


@bench.command("bus")
@click.option("--seconds", type=float, default=10.0, show_default=True)
@click.option("--payload", type=int, default=100, show_default=True)
@click.option("--fanout", type=int, default=10, show_default=True)
@click.option("--publishers", type=int, default=1, show_default=True)
@click.option("--agents", type=int, default=1000, show_default=True)
def bench_bus(seconds, payload, fanout, publishers, agents):
    """Sustained pub/sub throughput with per-agent topics."""
    from .bench import bus_throughput

    report = bus_throughput(seconds=seconds, payload_size=payload, fanout=fanout,
                            publishers=publishers, agents=agents)
    click.echo(json.dumps(report, indent=2))
    click.echo(f"throughput: {report['throughput_msg_s']:,.0f} msg/s")


@bench.command("env")
@click.option("--agents", type=int, default=1000, show_default=True)
@click.option("--ticks", type=int, default=100, show_default=True)
@click.option("--dt", type=float, default=1.0, show_default=True)
@click.option("--backend", type=click.Choice(["numba", "numpy", "both"]),
              default=None, help="Kernel backend (default: auto).")
def bench_env(agents, ticks, dt, backend):
    """Mean environment tick time with N moving agents."""
    from .bench import env_tick_benchmark
    from .urban import kernels

    backends = ["numpy"]
    if backend == "both":
        backends = list(kernels.get_backends())
    elif backend:
        backends = [backend]
    else:
        backends = [kernels.backend_name()]
    for name in backends:
        report = env_tick_benchmark(agents=agents, ticks=ticks, dt=dt, backend=name)
        click.echo(f"{name:>6}: mean {report['mean_ms']:.3f} ms "
                   f"± {report['sd_ms']:.3f} (max {report['max_ms']:.3f}) "
                   f"over {ticks} ticks, {report['moving']} moving")


@main.command()
@click.argument("results_dir", type=click.Path(exists=True))
def inspect(results_dir):
    """Summarize a recorded run."""
    path = Path(results_dir)
    meta = json.loads((path / "meta.json").read_text())
    spec = meta.get("spec", {})
    click.echo(f"experiment: {spec.get('experiment_id')}  ({meta.get('status')})")
    click.echo(f"scenario:   {meta.get('scenario')}  seed={spec.get('seed')}")
    click.echo(f"population: {spec.get('population_size')}  "
               f"rounds: {meta.get('rounds_run')}/{spec.get('round_count')}  "
               f"errors: {meta.get('error_count')}")
    rounds_file = path / "rounds.jsonl"
    if rounds_file.exists():
        rows = [json.loads(l) for l in rounds_file.read_text().splitlines() if l.strip()]
        if rows:
            mean_wall = sum(r["wall_time_ms"] for r in rows) / len(rows)
            sends = sum(r["counters"]["social_send"] for r in rows)
            click.echo(f"mean round wall time: {mean_wall:.1f} ms; "
                       f"social sends: {sends}")
    metrics_file = path / "metrics.jsonl"
    if metrics_file.exists():
        keys = {}
        for line in metrics_file.read_text().splitlines():
            if line.strip():
                row = json.loads(line)
                keys[row["key"]] = row["value"]
        for key, last in sorted(keys.items()):
            shown = fmt_cents(int(last)) if key.endswith("_cents") else f"{last:.3f}"
            click.echo(f"  {key}: {shown} (last)")


if __name__ == "__main__":
    main()
