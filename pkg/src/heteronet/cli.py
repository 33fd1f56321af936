"""Command line front end: analyze -> realize -> simulate / markov -> report.

Exit codes: 0 success (analyze: graph eligible), 1 error, 2 graph
ineligible, 3 too many unresolved samples, 4 verification mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    ChainAssemblyError,
    Thresholds,
    build_switching_chain,
    classify_node,
    derive_seed,
    equable_core,
    estimate_transitions,
    extract_itinerary,
    markov_config,
    sample_unstable_sphere,
)
from .digraph import (
    GraphParseError,
    cycle_decomposition,
    is_transitive,
    load_digraph,
    realization_gate,
    serialize_digraph,
    splitting_vertices,
    to_dot,
)
from .integrate import (
    IntegratorConfig,
    NoiseConfig,
    integrate_ode,
    integrate_sde,
    parse_predicate,
    section_crossings,
)
from .io import (
    dumps,
    load_system,
    matrix_csv,
    run_hash,
    sha256_bytes,
    sha256_file,
    states_csv,
    system_to_manifest,
    table_csv,
    write_files_atomic,
)
from .realize import IneligibleGraphError, RealizationParams, known_equilibria, realize

log = logging.getLogger("heteronet")

EXIT_OK, EXIT_ERROR, EXIT_INELIGIBLE, EXIT_UNRESOLVED, EXIT_MISMATCH = 0, 1, 2, 3, 4


class CommandError(Exception):
    def __init__(self, msg: str, code: int = EXIT_ERROR):
        super().__init__(msg)
        self.code = code


def _params(args: argparse.Namespace) -> dict:
    skip = {"func", "outdir", "verify", "command", "quiet"}
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        out[k] = v
    return out


def _inputs(args: argparse.Namespace) -> dict:
    found = {}
    for key in ("graph", "system", "markov"):
        path = getattr(args, key, None)
        if path:
            found[key] = {"path": str(Path(path).resolve()), "sha256": sha256_file(path)}
    return found


def _finish(args, argv: list[str], outputs: dict[str, bytes], tag: str) -> None:
    """Write outputs plus ``<command>.manifest.json`` in one atomic batch."""
    outdir = Path(args.outdir)
    manifest = {
        "schema_version": 1,
        "kind": "run-manifest",
        "command": args.command,
        "argv": argv,
        "parameters": _params(args),
        "inputs": _inputs(args),
        "seed": getattr(args, "seed", None),
        "tool_version": __version__,
        "run_hash": tag,
        "cwd": str(Path.cwd()),
        "outputs": {name: {"path": name, "sha256": sha256_bytes(data)} for name, data in sorted(outputs.items())},
    }
    files = {outdir / name: data for name, data in outputs.items()}
    files[outdir / f"{args.command}.manifest.json"] = dumps(manifest).encode()
    write_files_atomic(files)


def _tag(args) -> str:
    # input files enter through their content hash, not their path
    params = {k: v for k, v in _params(args).items() if k not in ("graph", "system", "markov")}
    return run_hash({"command": args.command, "parameters": params, "inputs": {k: v["sha256"] for k, v in _inputs(args).items()}, "version": __version__})


def _dot(g, tag: str, name: str = "G") -> bytes:
    return (f"// run_hash: {tag}\n" + to_dot(g, name)).encode()


def _strip_outdir(argv: list[str]) -> list[str]:
    out, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a in ("--outdir", "-o"):
            skip = True
            continue
        if a.startswith("--outdir="):
            continue
        out.append(a)
    return out


# ---------------------------------------------------------------- analyze


def cmd_analyze(args, argv) -> int:
    try:
        g = load_digraph(args.graph)
    except (OSError, GraphParseError) as exc:
        raise CommandError(f"cannot read graph: {exc}")
    gate = realization_gate(g)
    cycles = cycle_decomposition(g) if is_transitive(g) else []
    tag = _tag(args)
    doc = {
        "schema_version": 1,
        "kind": "analysis",
        "run_hash": tag,
        "graph": json.loads(serialize_digraph(g)),
        "gate": gate.to_dict(),
        "splitting_vertices": splitting_vertices(g),
        "cycles": [list(c) for c in cycles],
    }
    text = dumps(doc)
    if not args.quiet:
        sys.stdout.write(text)
    if args.outdir:
        _finish(args, argv, {"analysis.json": text.encode(), "graph.dot": _dot(g, tag)}, tag)
    return EXIT_OK if gate.eligible else EXIT_INELIGIBLE


# ---------------------------------------------------------------- realize


def cmd_realize(args, argv) -> int:
    try:
        g = load_digraph(args.graph)
    except (OSError, GraphParseError) as exc:
        raise CommandError(f"cannot read graph: {exc}")
    try:
        params = RealizationParams(args.epsilon, args.eta)
        system = realize(g, params, force=args.force)
    except IneligibleGraphError as exc:
        raise CommandError(f"{exc} (use --force to realize anyway)", EXIT_INELIGIBLE)
    except ValueError as exc:
        raise CommandError(str(exc))
    tag = _tag(args)
    doc = system_to_manifest(system, str(args.graph))
    doc["run_hash"] = tag
    _finish(args, argv, {"system.json": dumps(doc).encode()}, tag)
    if not args.quiet:
        print(f"wrote {Path(args.outdir) / 'system.json'} ({doc['status']}, {len(doc['equilibria'])} equilibria)")
    return EXIT_OK


# ---------------------------------------------------------------- simulate


def _initial_state(system, args) -> np.ndarray:
    if args.x0 is not None:
        try:
            x0 = np.array([float(v) for v in args.x0.split(",")])
        except ValueError:
            raise CommandError(f"cannot parse --x0 {args.x0!r}")
        if x0.shape != (system.n,) or not np.all(np.isfinite(x0)):
            raise CommandError(f"--x0 needs {system.n} finite comma-separated values")
        return x0
    if args.node is None:
        raise CommandError("give either --x0 or --node")
    try:
        jj = system.graph.index(args.node)
    except KeyError as exc:
        raise CommandError(str(exc))
    if not args.perturb > 0:
        raise CommandError("--perturb must be positive")
    return sample_unstable_sphere(system, jj, args.perturb, 1, derive_seed(args.seed, "x0", args.node))[0]


def cmd_simulate(args, argv) -> int:
    system = load_system(args.system)
    x0 = _initial_state(system, args)
    stochastic = args.sde is not None
    step = args.step if args.step is not None else (0.2 if stochastic else 0.01)
    try:
        cfg = IntegratorConfig(step=step, max_time=args.time)
        pred = parse_predicate(args.section) if args.section else None
        if stochastic:
            traj = integrate_sde(system, x0, cfg, NoiseConfig(args.sde, derive_seed(args.seed, "sde")), args.record_every)
        else:
            traj = integrate_ode(system, x0, cfg, args.record_every)
    except ValueError as exc:
        raise CommandError(str(exc))
    tag = _tag(args)
    itin = extract_itinerary(system, traj)
    status = {
        "schema_version": 1,
        "kind": "trajectory-status",
        "run_hash": tag,
        "scheme": "stochastic-heun" if stochastic else "rk4",
        "step": step,
        "alpha": args.sde,
        "x0": [float(v) for v in x0],
        "terminal": traj.terminal,
        "node": traj.node,
        "samples": len(traj),
        "final_time": float(traj.times[-1]),
        "itinerary": [[lab, t] for lab, t in itin.entries],
    }
    outputs = {"trajectory.csv": states_csv(traj.times, traj.states, tag)}
    if pred is not None:
        times, states = section_crossings(traj, pred)
        outputs["section.csv"] = states_csv(times, states, tag)
        status["section"] = {"predicate": args.section, "crossings": len(times)}
    outputs["trajectory.json"] = dumps(status).encode()
    _finish(args, argv, outputs, tag)
    if not args.quiet:
        print(f"{traj.terminal}: {len(traj)} samples to t={traj.times[-1]:g}")
    return EXIT_OK


# ---------------------------------------------------------------- markov


def cmd_markov(args, argv) -> int:
    system = load_system(args.system)
    cfg = IntegratorConfig(step=args.step, max_time=args.max_time)
    th = Thresholds(args.p_min, args.eps_escape, args.r_excl, args.max_unresolved)
    warnings = []
    if args.m < 100:
        warnings.append(f"low sample count m={args.m}: shares carry wide error bars")
        log.warning(warnings[-1])
    if not system.verified:
        warnings.append(
            "system realized under --force: the realization guarantees do not apply; "
            "sigma_star reflects the sampled measure only and needs interpretation"
        )
    estimates = {}
    for j, lab in enumerate(system.graph.labels):
        estimates[lab] = estimate_transitions(system, j, args.m, cfg, derive_seed(args.seed, "node", lab), args.delta)
    try:
        chain = build_switching_chain(system, estimates, th.max_unresolved)
    except ChainAssemblyError as exc:
        detail = {k: e.to_dict() for k, e in estimates.items()}
        sys.stderr.write(json.dumps(detail, indent=2) + "\n")
        raise CommandError(str(exc), EXIT_UNRESOLVED)
    classes = [classify_node(system, lab, estimates[lab], th) for lab in system.graph.labels]
    try:
        core = equable_core(system, estimates, th.p_min)
        core_doc = {"vertices": list(core.labels), "edges": [list(e) for e in core.edge_labels()]}
    except ValueError as exc:
        core_doc = None
        warnings.append(str(exc))
    tag = _tag(args)
    doc = {
        "schema_version": 1,
        "kind": "classification-report",
        "run_hash": tag,
        "system_status": "verified" if system.verified else "unverified",
        "equability_rule": "positive sampled share (>= p_min) on every prescribed and every reached connection",
        "orbit_merging": "targets identified up to coordinate sign flips",
        "thresholds": th.to_dict(),
        "sampling": {"m": args.m, "delta": args.delta, "seed": args.seed, "step": args.step, "max_time": args.max_time},
        "estimates": {k: e.to_dict() for k, e in estimates.items()},
        "chain": {"states": chain.states, "matrix": chain.matrix.tolist()},
        "classification": {c.node: c.to_dict() for c in classes},
        "sigma_star": core_doc,
        "warnings": warnings,
    }
    outputs = {"report.json": dumps(doc).encode(), "chain.csv": matrix_csv(chain.states, chain.matrix, tag)}
    _finish(args, argv, outputs, tag)
    if not args.quiet:
        for c in classes:
            print(
                f"{c.node}: dim={c.unstable_dim} almost_complete={c.almost_complete} "
                f"equable={c.equable} exclusive={c.exclusive} shares={c.fractions}"
            )
    return EXIT_OK


# ---------------------------------------------------------------- report


def cmd_report(args, argv) -> int:
    system = load_system(args.system)
    tag = _tag(args)
    rows = []
    for eq in known_equilibria(system):
        d = eq.to_dict(system)
        rows.append([d["id"], d["kind"], d["location"], d["eigenvalues"], d["stability"], d["residual"], d["unstable_directions"]])
    outputs = {
        "equilibria.csv": table_csv(["id", "kind", "location", "eigenvalues", "stability", "residual", "unstable_directions"], rows, tag),
        "graph.dot": _dot(system.graph, tag),
    }
    if args.markov:
        with open(args.markov, encoding="utf-8") as fh:
            rep = json.load(fh)
        if rep.get("kind") != "classification-report":
            raise CommandError("--markov must point to a classification report")
        crow = []
        for lab, c in sorted(rep["classification"].items()):
            crow.append([lab, c["unstable_dim"], c["almost_complete"], c["escape_fraction"], c["equable"], c["exclusive"], c["clearance"], c["splitting_order"]])
        outputs["classification.csv"] = table_csv(
            ["node", "unstable_dim", "almost_complete", "lost_fraction", "equable", "exclusive", "clearance", "splitting_order"], crow, tag
        )
        trow = []
        for lab, e in sorted(rep["estimates"].items()):
            for k, p in e["probabilities"].items():
                trow.append([lab, k, p, e["stderr"][k]])
        outputs["transitions.csv"] = table_csv(["source", "target", "probability", "stderr"], trow, tag)
        outputs["chain.csv"] = matrix_csv(rep["chain"]["states"], np.array(rep["chain"]["matrix"]), tag)
        if rep.get("sigma_star"):
            from .digraph import Digraph

            core = Digraph.from_edges([tuple(e) for e in rep["sigma_star"]["edges"]], rep["sigma_star"]["vertices"])
            outputs["sigma_star.dot"] = _dot(core, tag, "SigmaStar")
    _finish(args, argv, outputs, tag)
    if not args.quiet:
        print("wrote " + ", ".join(sorted(outputs)))
    return EXIT_OK


# ---------------------------------------------------------------- verify


def verify(manifest_path) -> int:
    """Re-run the recorded command into a scratch directory and byte-compare outputs."""
    manifest_path = Path(manifest_path)
    with open(manifest_path, encoding="utf-8") as fh:
        man = json.load(fh)
    argv = list(man["argv"])
    base = manifest_path.parent.resolve()
    here = Path.cwd()
    with tempfile.TemporaryDirectory() as tmp:
        os.chdir(man.get("cwd", here))
        try:
            code = main(argv + ["--outdir", tmp, "--quiet"])
        finally:
            os.chdir(here)
        if code not in (EXIT_OK, EXIT_INELIGIBLE):
            print(f"re-run failed with exit code {code}")
            return EXIT_MISMATCH
        bad = []
        for name, rec in man["outputs"].items():
            fresh = sha256_file(Path(tmp) / name)
            stored = sha256_file(base / name) if (base / name).exists() else None
            if fresh != rec["sha256"] or stored != rec["sha256"]:
                bad.append(name)
    if bad:
        print("mismatch: " + ", ".join(bad))
        return EXIT_MISMATCH
    print(f"verified {len(man['outputs'])} output(s) byte-identical")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heteronet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--verify", metavar="MANIFEST", help="re-run a recorded command and byte-compare its outputs")
    sub = p.add_subparsers(dest="command")

    def common(sp, outdir_default="."):
        sp.add_argument("--outdir", "-o", default=outdir_default)
        sp.add_argument("--quiet", "-q", action="store_true")

    a = sub.add_parser("analyze", help="gate report, splitting vertices and cycle decomposition")
    a.add_argument("graph")
    common(a, None)
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("realize", help="build the realizing vector field and its equilibrium table")
    r.add_argument("graph")
    r.add_argument("--epsilon", type=float, default=0.02)
    r.add_argument("--eta", type=float, default=0.05)
    r.add_argument("--force", action="store_true", help="realize graphs failing the gate (results unverified)")
    common(r)
    r.set_defaults(func=cmd_realize)

    s = sub.add_parser("simulate", help="ODE or SDE trajectory")
    s.add_argument("system")
    s.add_argument("--x0", help="comma-separated initial state")
    s.add_argument("--node", help="start on the unstable sphere of this node")
    s.add_argument("--perturb", type=float, default=1e-3)
    s.add_argument("--sde", type=float, default=None, metavar="ALPHA", help="noise amplitude; selects stochastic Heun")
    s.add_argument("--step", type=float, default=None, help="default 0.01 (RK4) or 0.2 (Heun)")
    s.add_argument("--time", type=float, default=1000.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--section", help='entry-event predicate, e.g. "x1^2<0.1"')
    s.add_argument("--record-every", type=int, default=1)
    common(s)
    s.set_defaults(func=cmd_simulate)

    d = markov_config()
    m = sub.add_parser("markov", help="Monte-Carlo switching probabilities and node classification")
    m.add_argument("system")
    m.add_argument("-m", type=int, default=1000, help="samples per node")
    m.add_argument("--delta", type=float, default=1e-3)
    m.add_argument("--p-min", type=float, default=0.01)
    m.add_argument("--eps-escape", type=float, default=0.005)
    m.add_argument("--r-excl", type=float, default=0.1)
    m.add_argument("--max-unresolved", type=float, default=0.01)
    m.add_argument("--step", type=float, default=d.step)
    m.add_argument("--max-time", type=float, default=d.max_time)
    m.add_argument("--seed", type=int, default=0)
    common(m)
    m.set_defaults(func=cmd_markov)

    rp = sub.add_parser("report", help="CSV/DOT tables from a system manifest and optional classification report")
    rp.add_argument("system")
    rp.add_argument("--markov", help="classification report JSON from the markov command")
    common(rp)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors, which here means "ineligible"
        return EXIT_OK if not exc.code else EXIT_ERROR
    if args.verify:
        try:
            return verify(args.verify)
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: cannot verify: {exc}", file=sys.stderr)
            return EXIT_ERROR
    if not args.command:
        parser.print_help()
        return EXIT_ERROR
    try:
        return args.func(args, _strip_outdir([a for a in argv if a not in ("--quiet", "-q")]))
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
