"""Command-line front end: ``ratemap simulate | fit | mcmc | analyze | compare``.

Every run directory gets a ``manifest.json`` holding the full configuration, seeds,
library versions and the SHA-256 of every numeric output.  Passing a manifest as
``--config`` replays the run.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import platform
import sys
import time
import warnings
from importlib import metadata
from pathlib import Path

import numpy as np

from . import fixtures
from .analysis import (RateConstantMap, data_overlap, intensity_map, l2_relative_error, moment_map,
                       peak_to_background, relative_wasserstein, tcm)
from .avba import AvbaConfig, run_avba
from .errors import NumericalError, ValidationError
from .io import fmt, read_nodal, read_sensorgrams, write_nodal, write_sensorgrams, write_table
from .kinetics import Domain, InjectionGrid, KineticsParams, SensorgramSet, generate_synthetic
from .mcmc import McmcChain, McmcConfig, export_chain, factor_correlations, run_mcmc
from .mesh import TriMesh, read_mesh, uniform_initial_mesh, write_mesh
from .operators import assemble_design
from .vb import HyperPriors, write_delta_history

log = logging.getLogger("ratemap")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_TIMECAP = 0, 2, 3, 4

TRUTHS = {
    "gaussian": lambda p: fixtures.gaussian_map,
    "two_peak": lambda p: (lambda x, y: fixtures.two_peak_map(
        x, y, p.get("width", fixtures.TWO_PEAK_WIDTH), p.get("height", fixtures.TWO_PEAK_HEIGHT))),
}


class TimeCapExceeded(Exception):
    pass


def default_config(preset: str = "gaussian") -> dict:
    """Full configuration tree for one of the built-in problems."""
    base = {
        "kinetics": {"t_inj": 2.0, "t0": 0.0, "dt_delay": 0.0},
        "truth": {"kind": preset},
        "simulate": {"delta": 0.01, "per_point_noise": False},
        "mesh": {"nx": 10, "ny": 10},
        "hyperpriors": {"alpha": 1.0, "beta": 1.0, "alpha_c": 1.0, "beta_c": 1.0},
        "avba": AvbaConfig().to_dict(),
        "mcmc": McmcConfig().to_dict(),
        "analysis": {"nu": 5.0, "moments": [0.5, 1, 2, 3, 4], "raster": 128},
        "seeds": {"data": 1, "vb": 0, "mcmc": 0},
    }
    if preset == "gaussian":
        base["domain"] = fixtures.GAUSSIAN_DOMAIN.to_dict()
        base["grid"] = {"times": {"start": 0.0, "stop": 4.0, "count": 150},
                        "concentrations": {"start": 0.001, "stop": 2.0, "count": 30, "spacing": "linear"}}
    elif preset == "two_peak":
        base["domain"] = fixtures.TWO_PEAK_DOMAIN.to_dict()
        base["kinetics"]["t_inj"] = fixtures.TWO_PEAK_KINETICS.t_inj
        base["grid"] = {"times": {"start": 0.0, "stop": 300.0, "count": 150},
                        "concentrations": {"start": 1214e-9, "stop": 9714e-9, "count": 6,
                                           "spacing": "geometric"}}
        base["mesh"] = {"nx": 20, "ny": 20}
        base["simulate"]["delta"] = 0.001
    else:
        raise ValidationError(f"unknown preset {preset!r}")
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        node = cfg
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValidationError(f"override {key!r} descends into a non-table value")
        node[parts[-1]] = _parse_value(val)
    return cfg


def load_config(path, preset: str | None, overrides):
    """Return ``(config, manifest_or_None)``."""
    manifest = None
    if path is not None:
        raw = json.loads(Path(path).read_text())
        if "config" in raw and "command" in raw:
            manifest = raw
            raw = raw["config"]
        cfg = default_config(raw.get("truth", {}).get("kind", preset or "gaussian")) if preset is None else default_config(preset)
        cfg = _merge(cfg, raw)
    else:
        cfg = default_config(preset or "gaussian")
    return apply_overrides(cfg, overrides), manifest


def _merge(base: dict, top: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _axis(spec, name):
    if isinstance(spec, list):
        return np.asarray(spec, dtype=float)
    try:
        lo, hi, n = float(spec["start"]), float(spec["stop"]), int(spec["count"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"grid.{name} needs start/stop/count or an explicit list") from exc
    if spec.get("spacing", "linear") == "geometric":
        return np.geomspace(lo, hi, n)
    return np.linspace(lo, hi, n)


class RunConfig:
    """Validated view of a configuration tree."""

    def __init__(self, cfg: dict):
        self.raw = cfg
        try:
            self.domain = Domain.from_dict(cfg["domain"])
            self.grid = InjectionGrid(_axis(cfg["grid"]["times"], "times"),
                                      _axis(cfg["grid"]["concentrations"], "concentrations"))
            self.kinetics = KineticsParams(**cfg["kinetics"])
            hp = cfg["hyperpriors"]
            self.hyperpriors = HyperPriors.uniform(self.grid.n_conc, hp["alpha"], hp["beta"],
                                                   hp["alpha_c"], hp["beta_c"])
            seeds = cfg["seeds"]
            self.seeds = {k: int(seeds[k]) for k in ("data", "vb", "mcmc")}
            self.avba = AvbaConfig(**{**cfg["avba"], "seed": self.seeds["vb"]})
            self.mcmc = McmcConfig(**{**cfg["mcmc"], "seed": self.seeds["mcmc"]})
            self.nx, self.ny = int(cfg["mesh"]["nx"]), int(cfg["mesh"]["ny"])
            an = cfg["analysis"]
            self.nu = float(an["nu"])
            self.moments = [float(p) for p in an["moments"]]
            self.raster = int(an["raster"])
            self.delta = float(cfg["simulate"]["delta"])
            self.per_point_noise = bool(cfg["simulate"].get("per_point_noise", False))
            truth = cfg.get("truth") or {}
            kind = truth.get("kind")
            if kind is not None and kind not in TRUTHS:
                raise ValidationError(f"unknown truth kind {kind!r}")
            self.truth = TRUTHS[kind](truth) if kind else None
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad configuration: {exc}") from exc
        if not 0 < self.nu < 100:
            raise ValidationError("analysis.nu must lie in (0, 100)")
        if any(p <= 0 for p in self.moments) or self.raster < 16:
            raise ValidationError("moments must be > 0 and raster >= 16")
        if self.delta < 0:
            raise ValidationError("simulate.delta must be >= 0")

    def initial_mesh(self) -> TriMesh:
        return uniform_initial_mesh(self.domain, self.nx, self.ny)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "numba", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def write_manifest(out: Path, command: str, cfg: dict, args: dict, inputs: dict) -> dict:
    files = sorted(p for p in out.rglob("*") if p.is_file()
                   and p.name not in ("manifest.json", "timings.json"))
    text = json.dumps(cfg, sort_keys=True)
    man = {
        "command": command,
        "config": cfg,
        "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
        "seeds": cfg.get("seeds", {}),
        "args": args,
        "versions": _versions(),
        "inputs": {k: _sha256(Path(v)) for k, v in inputs.items() if v is not None},
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")
    return man


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ValidationError(f"output directory {out} is not writable: {exc}") from exc
    return out


def cmd_simulate(rc: RunConfig, out: Path) -> dict:
    if rc.truth is None:
        raise ValidationError("simulate needs truth.kind")
    data = generate_synthetic(rc.truth, rc.grid, rc.kinetics, rc.delta, rc.seeds["data"], rc.domain,
                              per_point_noise=rc.per_point_noise)
    write_sensorgrams(data, out / "sensorgrams.csv")
    mesh = rc.initial_mesh()
    write_mesh(mesh, out / "mesh.txt")
    write_nodal(mesh, {"exact": rc.truth(mesh.nodes[:, 0], mesh.nodes[:, 1])}, out / "truth.csv")
    return {"rows": rc.grid.n_times, "columns": rc.grid.n_conc}


def _analysis_outputs(out: Path, mesh: TriMesh, mean, samples, rc: RunConfig, data=None, design=None):
    rm = RateConstantMap(mesh, mean)
    report = tcm(rm, rc.nu, contours=True)
    summary = {"tcm": report.to_dict(), "definitions": {
        "overlap": "100 * (1 - |observed - fitted| / |observed|), clipped to [0, 100]",
        "intensity_map": "piecewise-linear interpolant sampled on a regular raster"}}
    (out / "contours.json").write_text(json.dumps(report.contours) + "\n")
    moments = {}
    ratios = {}
    for p in rc.moments:
        mm = moment_map(samples, p, mesh)
        moments[f"m{p:g}"] = mm.values
        ratios[f"{p:g}"] = peak_to_background(mm)
        summary.setdefault("moment_tcm", {})[f"{p:g}"] = tcm(mm, rc.nu).region_count
    write_nodal(mesh, moments, out / "moments.csv")
    summary["peak_to_background"] = ratios
    xs, ys, Z = intensity_map(rm, rc.raster)
    rows = [[x] + list(Z[:, j]) for j, x in enumerate(xs)]
    write_table(out / "intensity.csv", ["x"] + [f"y={fmt(y)}" for y in ys], rows)
    if data is not None:
        fitted = SensorgramSet.from_stacked(data.grid, design.K @ mean)
        write_sensorgrams(fitted, out / "fitted.csv")
        summary["overlap_percent"] = data_overlap(data, fitted)
    if rc.truth is not None:
        summary["l2_relative_error"] = l2_relative_error(rm, rc.truth)
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    return summary


def cmd_fit(rc: RunConfig, data: SensorgramSet, out: Path) -> dict:
    res = run_avba(rc.initial_mesh(), data, rc.kinetics, rc.hyperpriors, rc.avba, run_dir=out / "iterations")
    final = out / "final"
    final.mkdir(exist_ok=True)
    write_mesh(res.mesh, final / "mesh.txt")
    write_nodal(res.mesh, {"mean": res.mean, "lower": res.lower, "upper": res.upper}, final / "maps.csv")
    np.save(final / "samples.npy", res.samples)
    write_delta_history(res.state, final / "delta.csv")
    write_table(out / "outer.csv", ["pass", "nodes", "triangles", "vb_iterations", "map_change", "residual", "marked"],
                [[k + 1, s.n_nodes, s.n_triangles, s.vb_iterations, s.map_change, s.residual, s.marked]
                 for k, s in enumerate(res.steps)])
    summary = _analysis_outputs(final, res.mesh, res.mean, res.samples, rc, data, res.design)
    summary["stop_reason"] = res.stop_reason
    summary["seconds"] = [s.seconds for s in res.steps]
    return summary


def _load_fit(run: Path):
    final = run / "final"
    if not (final / "maps.csv").exists():
        raise ValidationError(f"{run} is not a fit run directory")
    man = json.loads((run / "manifest.json").read_text()) if (run / "manifest.json").exists() else None
    domain = Domain.from_dict(man["config"]["domain"]) if man else None
    mesh = read_mesh(final / "mesh.txt", domain)
    maps = read_nodal(final / "maps.csv")
    return mesh, maps, np.load(final / "samples.npy"), man


def cmd_mcmc(rc: RunConfig, data: SensorgramSet, out: Path, vb_dir=None) -> dict:
    if vb_dir is not None:
        mesh, maps, vb_samples, man = _load_fit(Path(vb_dir))
        mesh = TriMesh(mesh.nodes, mesh.triangles, rc.domain)
    else:
        mesh, vb_samples, maps = rc.initial_mesh(), None, None
    design = assemble_design(mesh, data.grid, rc.kinetics, rc.avba.quad_order,
                             regularizer=rc.avba.regularizer, eps=rc.avba.reg_eps)
    chain = run_mcmc(design, data, rc.hyperpriors, rc.mcmc)
    export_chain(chain, out / "chain")
    write_mesh(mesh, out / "mesh.txt")
    summary = {"draws": len(chain), "steps": chain.steps, "timed_out": chain.timed_out}
    if len(chain) >= 100:
        corr = factor_correlations(chain)
        summary["correlations"] = {k: v for k, v in corr.items() if not isinstance(v, np.ndarray)}
    if vb_samples is not None and len(chain) >= 100:
        W = relative_wasserstein(vb_samples, chain.c)
        write_table(out / "wasserstein.csv", ["coord", "W"], [[i, w] for i, w in enumerate(W)])
        summary["wasserstein_median"] = float(np.median(W))
        summary["wasserstein_max"] = float(np.max(W))
        if rc.truth is not None:
            vb_err = l2_relative_error(RateConstantMap(mesh, maps["mean"]), rc.truth)
            mc_err = l2_relative_error(RateConstantMap(mesh, chain.mean), rc.truth)
            summary["relative_error"] = {"vb": vb_err, "mcmc": mc_err}
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    summary["seconds"] = chain.seconds
    if chain.timed_out:
        raise TimeCapExceeded(summary)
    return summary


def cmd_analyze(rc: RunConfig, run: Path, out: Path) -> dict:
    mesh, maps, samples, man = _load_fit(run)
    mesh = TriMesh(mesh.nodes, mesh.triangles, rc.domain)
    return _analysis_outputs(out, mesh, maps["mean"], samples, rc)


def _samples_of(run: Path):
    if (run / "final" / "samples.npy").exists():
        return np.load(run / "final" / "samples.npy")
    if (run / "chain" / "chain.json").exists():
        return McmcChain.load(run / "chain").c
    raise ValidationError(f"{run} holds neither VB samples nor an MCMC chain")


def cmd_compare(a: Path, b: Path, out: Path, minutes: dict | None = None) -> dict:
    sa, sb = _samples_of(a), _samples_of(b)
    W = relative_wasserstein(sa, sb)
    write_table(out / "wasserstein.csv", ["coord", "W"], [[i, w] for i, w in enumerate(W)])
    rows = []
    for run in (a, b):
        rep = {}
        if (run / "final" / "report.json").exists():
            rep = json.loads((run / "final" / "report.json").read_text())
        elif (run / "report.json").exists():
            rep = json.loads((run / "report.json").read_text())
        t = json.loads((run / "timings.json").read_text()) if (run / "timings.json").exists() else {}
        err = rep.get("l2_relative_error", rep.get("relative_error", {}).get("mcmc", float("nan")))
        rows.append([run.name, err, t.get("seconds", float("nan")) / 60.0])
    write_table(out / "runtime.csv", ["run", "relative_error", "minutes"], rows)
    summary = {"wasserstein_median": float(np.median(W)), "wasserstein_max": float(np.max(W))}
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ratemap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON configuration or a manifest.json to replay")
        sp.add_argument("--preset", choices=["gaussian", "two_peak"])
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. avba.tau=0.4")
        sp.add_argument("--out", required=True, help="run directory")
        if data:
            sp.add_argument("--data", help="sensorgram CSV (defaults to the manifest's input)")

    common(sub.add_parser("simulate", help="generate synthetic sensorgrams"), data=False)
    common(sub.add_parser("fit", help="adaptive variational Bayes fit"))
    sp = sub.add_parser("mcmc", help="Gibbs sampler baseline on a fixed mesh")
    common(sp)
    sp.add_argument("--vb", help="fit run directory to compare against (its final mesh is used)")
    sp = sub.add_parser("analyze", help="re-run peak analysis on a fit run directory")
    common(sp, data=False)
    sp.add_argument("run", nargs="?", help="fit run directory (defaults to the manifest's)")
    sp = sub.add_parser("compare", help="compare the samples of two run directories")
    sp.add_argument("run_a", nargs="?")
    sp.add_argument("run_b", nargs="?", help="reference run")
    sp.add_argument("--config", help="manifest.json of an earlier compare to replay")
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        out = _out_dir(args.out)
        if args.command == "compare":
            old = json.loads(Path(args.config).read_text()).get("args", {}) if args.config else {}
            run_a, run_b = args.run_a or old.get("run_a"), args.run_b or old.get("run_b")
            if run_a is None or run_b is None:
                raise ValidationError("compare needs two run directories")
            summary = cmd_compare(Path(run_a), Path(run_b), out)
            cfg, inputs = {}, {}
            margs = {"run_a": str(Path(run_a).resolve()), "run_b": str(Path(run_b).resolve())}
        else:
            cfg, manifest = load_config(args.config, args.preset, args.set)
            rc = RunConfig(cfg)
            margs, inputs = {}, {}
            data = None
            if getattr(args, "data", None) is not None or args.command in ("fit", "mcmc"):
                path = args.data or (manifest or {}).get("args", {}).get("data")
                if path is None:
                    raise ValidationError(f"{args.command} needs --data")
                data = read_sensorgrams(path)
                margs["data"] = str(Path(path).resolve())
                inputs["data"] = path
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                if args.command == "simulate":
                    summary = cmd_simulate(rc, out)
                elif args.command == "fit":
                    summary = cmd_fit(rc, data, out)
                elif args.command == "mcmc":
                    vb = args.vb or (manifest or {}).get("args", {}).get("vb")
                    margs["vb"] = str(Path(vb).resolve()) if vb else None
                    summary = cmd_mcmc(rc, data, out, vb)
                else:
                    run_dir = args.run or (manifest or {}).get("args", {}).get("run")
                    if run_dir is None:
                        raise ValidationError("analyze needs a fit run directory")
                    margs["run"] = str(Path(run_dir).resolve())
                    summary = cmd_analyze(rc, Path(run_dir), out)
            for w in caught:
                print(f"warning: {w.message}", file=sys.stderr)
        write_manifest(out, args.command, cfg, margs, inputs)
        (out / "timings.json").write_text(json.dumps({"seconds": time.perf_counter() - t0}) + "\n")
        print(json.dumps({k: v for k, v in summary.items() if k != "seconds"}, indent=2,
                         sort_keys=True, default=float))
        return EXIT_OK
    except TimeCapExceeded as exc:
        write_manifest(out, args.command, cfg, margs, inputs)
        print(f"error: wall-clock cap reached; partial chain written ({exc.args[0]['draws']} draws)",
              file=sys.stderr)
        return EXIT_TIMECAP
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
