#!/usr/bin/env python3
"""
reachsynth pipeline front-end.

    certify     storage-function certificate and epsilon bound
    abstract    finite abstraction of the shrunk specification
    synthesize  reach-avoid(-stay) controller on the abstraction
    simulate    Monte Carlo closed-loop runs, traces and a plot
    scenario    print or write a bundled scenario
    plot        re-render a plot from a saved trace

Stages share an output directory; each writes its artifact and a JSON
report there. Exit codes: 0 success, 1 usage/IO/config, 2 infeasible or
falsified.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from reachsynth import artifacts
from reachsynth.abstraction import build_abstraction
from reachsynth.config import ScenarioConfig, load_template, template_names
from reachsynth.errors import (
    ArtifactError,
    CertificationError,
    ConfigError,
    InfeasibleSpecificationError,
    LeftWinningSetError,
    UnboundedLevelSetError,
    UncontrollableError,
)
from reachsynth.funnel import FALSIFIED, VERIFIED, compute_epsilon, lyap_candidate, run_checks
from reachsynth.games import game_spec_from_sets, synthesize
from reachsynth.plotting import plot_run
from reachsynth.reachability import build_decomposition
from reachsynth.refine import HierarchicalController
from reachsynth.simulate import monte_carlo
from reachsynth.tracesheet import TraceSheetGenerator, trace_generator_for

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE = 0, 1, 2

CERTIFICATE_FILE = "certificate.txt"
EPSILON_FILE = "epsilon.json"
TS_FILE = "transitions.rsts"
CONTROLLER_FILE = "controller.rsct"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _load_config(args) -> ScenarioConfig:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    if not os.path.exists(args.config) and args.config in template_names():
        cfg = ScenarioConfig.from_template(args.config)
    else:
        cfg = ScenarioConfig.from_file(args.config)
    if args.eps_override:
        try:
            values = [float(v) for v in args.eps_override.split(",")]
        except ValueError as exc:
            raise ConfigError(f"--eps-override must be comma separated numbers: {exc}") from exc
        cfg = cfg.override_epsilon(values)
        logger.info(f"Epsilon overridden to {args.eps_override}")
    return cfg


def _out(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _epsilon(args, cfg: ScenarioConfig) -> np.ndarray:
    path = os.path.join(args.out, EPSILON_FILE)
    certified = None
    if os.path.exists(path):
        data = artifacts.read_json(path)
        if data.get("config_digest") != cfg.digest("certify"):
            raise ArtifactError(f"{path} was produced by a different config")
        certified = data.get("certified")
    elif cfg.epsilon.get("source", "certificate") == "certificate":
        raise ArtifactError(f"{path} not found; run certify first")
    return cfg.resolve_epsilon(certified)


def _print_verdicts(verdicts):
    for name, verdict in verdicts.items():
        print(f"  {name:<10} {verdict}")


def cmd_certify(args) -> int:
    cfg = _load_config(args)
    es = cfg.bundle.error_system
    settings = cfg.check_settings()
    imported = cfg.certificate.get("import")
    if imported:
        cert, _ = artifacts.read_certificate(imported)
        if cert.layout != es.layout:
            raise ConfigError(f"imported certificate has layout {cert.layout}, model needs {es.layout}")
        cert.verdicts = run_checks(cert, es, settings)
        logger.info(f"Checked imported certificate {imported}")
    else:
        cert = lyap_candidate(es, **cfg.candidate_options())
    certified = compute_epsilon(cert, settings)
    eps = cfg.resolve_epsilon(certified)

    digest = cfg.digest("certify")
    artifacts.write_certificate(_out(args, CERTIFICATE_FILE), cert, digest)
    artifacts.write_json(_out(args, EPSILON_FILE), {
        "config_digest": digest,
        "epsilon": eps.tolist(),
        "certified": certified.tolist(),
        "source": cfg.epsilon.get("source", "certificate"),
        "frame": cfg.epsilon.get("frame", "error"),
        "margin": cfg.margin(eps).tolist(),
    })
    report = {
        "config_digest": digest,
        "gamma": cert.gamma,
        "verdicts": {name: {"status": v.status, "witness": _jsonable(v.witness), "value": v.value}
                     for name, v in cert.last_verdicts.items()},
        "epsilon": eps.tolist(),
        "E0": cert.E0.to_json(),
        "meta": cert.meta,
    }
    artifacts.write_json(_out(args, "certify.json"), report)

    print(f"\nCertificate for {cfg.name}: gamma = {cert.gamma:.6g}")
    _print_verdicts(cert.last_verdicts)
    print(f"  epsilon    {np.array2string(eps, precision=6)}")

    statuses = [v.status for v in cert.last_verdicts.values()]
    if FALSIFIED in statuses:
        print("Certificate falsified.")
        return EXIT_INFEASIBLE
    if any(s != VERIFIED for s in statuses) and not args.allow_inconclusive:
        print("Certificate not verified; pass --allow-inconclusive to continue anyway.")
        return EXIT_INFEASIBLE
    return EXIT_OK


def _jsonable(witness):
    if witness is None:
        return None
    return {k: np.asarray(v).tolist() for k, v in witness.items()}


def cmd_abstract(args) -> int:
    cfg = _load_config(args)
    eps = _epsilon(args, cfg)
    spec = cfg.specification(eps)
    grid = cfg.grid(spec)
    inputs = cfg.input_grid(spec)
    bundle = cfg.bundle
    ts = build_abstraction(bundle.abstract, build_decomposition(bundle.abstract), grid, inputs, cfg.W_hat,
                           cfg.reach_settings(), cfg.avoid_mask(grid, spec), cfg.forbidden(grid, inputs, spec),
                           threads=args.threads, config_digest=cfg.digest("abstract"))
    artifacts.write_transition_system(_out(args, TS_FILE), ts)
    report = {
        "config_digest": ts.config_digest,
        "epsilon": eps.tolist(),
        "margin": spec.margin.tolist(),
        "stats": ts.stats,
        "wall_time": ts.wall_time,
    }
    artifacts.write_json(_out(args, "abstract.json"), report)

    print(f"\nAbstraction for {cfg.name}:")
    for key, value in ts.stats.items():
        print(f"  {key:<16} {value}")
    print(f"  {'wall time':<16} {ts.wall_time:.1f}s")
    return EXIT_OK


def _stage_epsilon(args, cfg: ScenarioConfig) -> np.ndarray:
    """Epsilon the abstraction in the output directory was built with."""
    report = artifacts.read_json(os.path.join(args.out, "abstract.json"))
    if report.get("config_digest") != cfg.digest("abstract"):
        raise ArtifactError("abstract.json was produced by a different config")
    return np.asarray(report["epsilon"], dtype=float)


def cmd_synthesize(args) -> int:
    cfg = _load_config(args)
    digest = cfg.digest("abstract")
    ts = artifacts.read_transition_system(os.path.join(args.out, TS_FILE), expected_digest=digest)
    spec = cfg.specification(_stage_epsilon(args, cfg))
    game = game_spec_from_sets(ts, spec.target_xhat, spec.target_uhat, cfg.mode)
    table = synthesize(ts, game)
    artifacts.write_controller(_out(args, CONTROLLER_FILE), table)
    report = {
        "config_digest": digest,
        "mode": cfg.mode,
        "target_cells": int(game.target.sum()),
        **table.stats,
    }
    artifacts.write_json(_out(args, "synthesize.json"), report)

    print(f"\nController for {cfg.name} ({cfg.mode}):")
    print(f"  target cells  {report['target_cells']}")
    print(f"  |S|           {table.stats['stay_cells']}")
    print(f"  |R|           {table.stats['win_cells']}")
    print(f"  coverage      {table.stats['coverage']:.2%}")
    print(f"  iterations    safety {table.stats['safety_iterations']}, reach {table.stats['reach_levels']}")
    return EXIT_OK


def _plot_options(cfg: ScenarioConfig) -> dict:
    if cfg.bundle.name == "ship":
        return {"dims": (0, 1), "heading_dim": 2, "labels": ("N", "E")}
    return {"dims": (0, 1), "heading_dim": None, "labels": ("x0", "x1")}


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    es = cfg.bundle.error_system
    cert, _ = artifacts.read_certificate(os.path.join(args.out, CERTIFICATE_FILE), cfg.digest("certify"))
    digest = cfg.digest("abstract")
    ts = artifacts.read_transition_system(os.path.join(args.out, TS_FILE), expected_digest=digest)
    table = artifacts.read_controller(os.path.join(args.out, CONTROLLER_FILE), expected_digest=digest)
    eps = _stage_epsilon(args, cfg)
    hc = HierarchicalController.from_artifacts(ts, table, cert, es)

    sim = cfg.simulation
    runs = args.runs if args.runs is not None else sim.get("runs", 10)
    seed = args.seed if args.seed is not None else sim.get("seed", 0)
    region = cfg.initial_region or ts.grid.domain
    record = sim.get("record", [0])
    report = monte_carlo(cfg.bundle, hc, cfg.monitor(), region, cfg.W, cfg.W_hat, runs, seed,
                         cfg.simulation_settings(), eps=eps, record=record)

    sheets = trace_generator_for(es)
    margin = cfg.margin(eps)
    for n, run in enumerate(sorted(report.traces)):
        concrete, abstract = report.traces[run]
        with open(_out(args, f"run_{run}.csv"), "w") as f:
            f.write(sheets.generate(concrete, abstract))
        if n == 0:
            plot_run(_out(args, f"run_{run}.svg"), cfg.X, cfg.X_a, cfg.X_r, margin, concrete, abstract,
                     T_s=cfg.T_s, title=f"{cfg.name} run {run}", **_plot_options(cfg))
    artifacts.write_json(_out(args, "simulate.json"), {"config_digest": digest, "seed": seed, **report.to_json()})

    summary = report.summary()
    print(f"\nSimulation of {cfg.name}: {runs} runs, seed {seed}")
    print(f"  {'run':>4}  {'status':<10} {'time':>8}  reason")
    for rec in report.records:
        t = f"{rec.time:.2f}" if rec.time is not None else "-"
        print(f"  {rec.run:>4}  {rec.status:<10} {t:>8}  {rec.reason}")
    print(f"  summary: {json.dumps(summary)}")
    return EXIT_INFEASIBLE if summary["violated"] else EXIT_OK


def cmd_scenario(args) -> int:
    data = load_template(args.name)
    text = json.dumps(data, indent=4) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
        print(f"Wrote scenario {args.name} to {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_plot(args) -> int:
    cfg = _load_config(args)
    try:
        with open(args.trace, "r") as f:
            concrete, abstract = TraceSheetGenerator.read(f.read())
    except OSError as exc:
        raise ArtifactError(f"cannot read {args.trace}: {exc}") from exc
    eps_path = os.path.join(os.path.dirname(os.path.abspath(args.trace)), "abstract.json")
    if os.path.exists(eps_path):
        margin = cfg.margin(artifacts.read_json(eps_path)["epsilon"])
    else:
        margin = np.zeros(cfg.X.dim)
    path = args.svg or os.path.splitext(args.trace)[0] + ".svg"
    plot_run(path, cfg.X, cfg.X_a, cfg.X_r, margin, concrete, abstract, T_s=cfg.T_s,
             title=f"{cfg.name} {os.path.basename(args.trace)}", **_plot_options(cfg))
    print(f"Wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Scenario config file or bundled scenario name.")
    common.add_argument("--out", default="out", help="Output directory shared by the stages (default: out)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="Worker threads for the abstraction (default: all cores)")
    common.add_argument("--seed", type=int, default=None, help="Monte Carlo seed (default: from config)")
    common.add_argument("--allow-inconclusive", action="store_true",
                        help="Exit 0 when a certificate check is inconclusive rather than verified.")
    common.add_argument("--eps-override", default=None, help="Comma separated epsilon replacing the configured one.")
    common.add_argument("-d", "--debug", action="store_true", help="Enable debug logging.")

    parser = _Parser(description="Hierarchical abstraction-based controller synthesis")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("certify", parents=[common], help="Build and check the funnel certificate.")
    sub.add_parser("abstract", parents=[common], help="Build the finite abstraction.")
    sub.add_parser("synthesize", parents=[common], help="Solve the game on the abstraction.")
    p = sub.add_parser("simulate", parents=[common], help="Run closed-loop Monte Carlo simulations.")
    p.add_argument("--runs", type=int, default=None, help="Number of runs (default: from config)")
    p = sub.add_parser("scenario", help="Print a bundled scenario.")
    p.add_argument("name", help=f"One of {', '.join(template_names()) or 'the bundled scenarios'}")
    p.add_argument("--out", default=None, help="Write the scenario to this file instead of printing it.")
    p.add_argument("-d", "--debug", action="store_true", help="Enable debug logging.")
    p = sub.add_parser("plot", parents=[common], help="Re-render the plot of a saved trace.")
    p.add_argument("trace", help="Trace CSV written by simulate.")
    p.add_argument("--svg", default=None, help="Output file (default: next to the trace)")
    return parser


COMMANDS = {
    "certify": cmd_certify,
    "abstract": cmd_abstract,
    "synthesize": cmd_synthesize,
    "simulate": cmd_simulate,
    "scenario": cmd_scenario,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    log_level = logging.DEBUG if args.debug else logging.INFO
    logging.basicConfig(level=log_level, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ArtifactError, OSError) as exc:
        logger.error(str(exc))
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InfeasibleSpecificationError, CertificationError, UncontrollableError,
            UnboundedLevelSetError, LeftWinningSetError) as exc:
        logger.error(str(exc))
        print(f"Error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
