"""Command-line runner: ``muloco {run,analyze,fit,cost}``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a bad config
or bad arguments. All outputs are deterministic; nothing time-dependent is
written.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import inspect
import itertools
import json
import math
import platform
import re
import sys
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from muloco import __version__, analytics, costmodel, engine, model_zoo, scaling_fit
from muloco.compress import CompressorSpec, EncodedDelta
from muloco.inner_optim import OptimConfig
from muloco.model_zoo import TASKS
from muloco.outer_optim import OuterConfig

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


# -- schema ---------------------------------------------------------------------

_RUN_KEYS = ("workers", "inner_steps", "rounds", "partitions", "global_batch", "seed", "lr_schedule",
             "reset_inner_state", "shard_mode", "ema_alpha")
_ANALYTICS_KEYS = {"dump": False, "record_steps": False}


def _defaults(cls, keys=None) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(cls):
        if keys is not None and f.name not in keys:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
    return out


SECTIONS: dict[str, dict[str, Any]] = {
    "run": _defaults(engine.RunConfig, _RUN_KEYS),
    "inner": _defaults(OptimConfig),
    "outer": _defaults(OuterConfig),
    "compressor": _defaults(CompressorSpec),
    "analytics": dict(_ANALYTICS_KEYS),
}


_TASK_CLASSES = {"quadratic_bowl": model_zoo.QuadraticBowl, "two_layer_mlp": model_zoo.TwoLayerMLP}


def _task_keys(name: str) -> dict[str, Any]:
    """Constructor arguments of a task with their defaults (``None`` when required)."""
    params = inspect.signature(_TASK_CLASSES[name]).parameters.values()
    return {p.name: None if p.default is p.empty else p.default for p in params}


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot or sign, such as ``1e-3``."""


_Loader.add_implicit_resolver("tag:yaml.org,2002:float",
                              re.compile(r"^[-+]?[0-9][0-9_]*(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
                              list("-+0123456789"))


def _node_value(node, source):
    """Python value of a scalar/sequence YAML node; mappings are rejected here."""
    if isinstance(node, yaml.MappingNode):
        raise ConfigError("expected a value, found a mapping", node.start_mark.line + 1, source)
    return yaml.load(yaml.serialize(node), Loader=_Loader)


def _check_type(value, default, key, line, source):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"key '{key}' expects true/false, got {value!r}", line, source)
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key '{key}' expects an integer, got {value!r}", line, source)
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key '{key}' expects a number, got {value!r}", line, source)
        value = float(value)
    elif isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"key '{key}' expects a string, got {value!r}", line, source)
    return value


def _known(section: str, task: str | None) -> dict[str, Any]:
    if section == "task":
        return {"name": None, **(_task_keys(task) if task else {})}
    return SECTIONS[section]


def parse_experiment(text: str, source: str = "<config>") -> dict:
    """Validate a run config and return it with every default filled in.

    Layout: optional sections ``task`` (with ``name``), ``run``, ``inner``,
    ``outer``, ``compressor``, ``analytics`` and ``sweep``. ``sweep`` maps
    dotted keys such as ``run.workers`` to lists of values.
    """
    try:
        root = yaml.compose(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          mark.line + 1 if mark else None, source) from None
    if root is None:
        root = yaml.MappingNode("tag:yaml.org,2002:map", [])
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError("top level must be a mapping", root.start_mark.line + 1, source)

    allowed = ("task", *SECTIONS, "sweep")
    raw: dict[str, tuple[Any, int]] = {}
    for k, v in root.value:
        if k.value not in allowed:
            raise ConfigError(f"unknown section '{k.value}' (expected one of {', '.join(allowed)})",
                              k.start_mark.line + 1, source)
        if not isinstance(v, yaml.MappingNode):
            raise ConfigError(f"section '{k.value}' must be a mapping", v.start_mark.line + 1, source)
        raw[k.value] = (v, k.start_mark.line + 1)

    task_name = "two_layer_mlp"
    if "task" in raw:
        for k, v in raw["task"][0].value:
            if k.value == "name":
                task_name = _node_value(v, source)
                if task_name not in TASKS:
                    raise ConfigError(f"unknown task '{task_name}' (expected one of {', '.join(TASKS)})",
                                      v.start_mark.line + 1, source)

    cfg: dict[str, dict] = {"task": {k: v for k, v in _task_keys(task_name).items()}}
    cfg["task"]["name"] = task_name
    for section, defaults in SECTIONS.items():
        cfg[section] = dict(defaults)
    cfg["sweep"] = {}

    for section, (node, _) in raw.items():
        if section == "sweep":
            for k, v in node.value:
                key = k.value
                line = k.start_mark.line + 1
                parts = key.split(".")
                if len(parts) != 2 or parts[0] not in cfg or parts[0] == "sweep":
                    raise ConfigError(f"sweep key '{key}' must look like 'section.key'", line, source)
                if parts[0] == "task" and parts[1] == "name":
                    raise ConfigError("sweeping over task.name is not supported", line, source)
                known = _known(parts[0], task_name)
                if parts[1] not in known:
                    raise ConfigError(f"unknown key '{parts[1]}' in sweep key '{key}'", line, source)
                values = _node_value(v, source)
                if not isinstance(values, list) or not values:
                    raise ConfigError(f"sweep key '{key}' needs a non-empty list", line, source)
                cfg["sweep"][key] = [_check_type(x, known[parts[1]], key, line, source) for x in values]
            continue
        known = _known(section, task_name)
        for k, v in node.value:
            line = k.start_mark.line + 1
            if k.value not in known:
                raise ConfigError(f"unknown key '{k.value}' in section '{section}'", line, source)
            if section == "task" and k.value == "name":
                continue
            cfg[section][k.value] = _check_type(_node_value(v, source), known[k.value], k.value, line, source)

    missing = [k for k, v in cfg["task"].items() if v is None and k != "cols"]
    if missing:
        raise ConfigError(f"task '{task_name}' needs keys: {', '.join(missing)}", None, source)
    for point in expand_grid(cfg):
        try:
            build_run(point)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid settings: {exc}", None, source) from None
    return cfg


def expand_grid(cfg: dict) -> list[dict]:
    """One resolved config per sweep point; keys vary in sorted order, values in listed order."""
    keys = sorted(cfg["sweep"])
    points = []
    for combo in itertools.product(*(cfg["sweep"][k] for k in keys)):
        point = {s: dict(v) for s, v in cfg.items() if s != "sweep"}
        for key, value in zip(keys, combo):
            section, name = key.split(".")
            point[section][name] = value
        point["sweep"] = {}
        points.append((point, dict(zip(keys, combo))))
    return [dict(p, _label=_label(lbl)) for p, lbl in points]


def _label(assign: dict) -> str:
    if not assign:
        return "run"
    parts = [f"{k}={v}" for k, v in assign.items()]
    return re.sub(r"[^A-Za-z0-9_.=+-]", "_", "__".join(parts))


def build_run(point: dict):
    task_kwargs = {k: v for k, v in point["task"].items() if k != "name"}
    task = TASKS[point["task"]["name"]](**task_kwargs)
    run = point["run"]
    cfg = engine.RunConfig(
        inner=OptimConfig(**point["inner"]),
        outer=OuterConfig(**point["outer"]),
        compressor=CompressorSpec(**point["compressor"]),
        record_pseudogradients=point["analytics"]["dump"],
        record_deltas=point["analytics"]["dump"],
        record_steps=point["analytics"]["dump"] and point["analytics"]["record_steps"],
        record_step_norms=point["analytics"]["record_steps"],
        **run,
    )
    return cfg, task


def _canonical(point: dict) -> dict:
    return {k: v for k, v in point.items() if not k.startswith("_") and k != "sweep"}


def config_hash(point: dict) -> str:
    blob = json.dumps(_canonical(point), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x) -> str:
    return repr(float(x))


ROUND_COLUMNS = ("round", "step", "eval_loss", "smoothed_loss", "train_loss", "comm_payload_bytes")


def _dump_matrix(path: Path, m: np.ndarray) -> None:
    mat = m if m.ndim == 2 else m.reshape(1, -1)
    path.write_bytes(EncodedDelta("none", mat.shape, 4 * mat.size, values=mat.ravel()).to_bytes())


def _load_matrix(path: Path) -> np.ndarray:
    return EncodedDelta.from_bytes(path.read_bytes()).decode()


def _write_dumps(run_dir: Path, logs, task) -> list[str]:
    files = []
    shapes = {d.name: d.shape for d in task.params}
    for log in logs:
        rdir = run_dir / "dumps" / f"round_{log.round_index:04d}"
        rdir.mkdir(parents=True, exist_ok=True)
        index = {"round": log.round_index, "workers": len(log.deltas), "shapes": {k: list(v) for k, v in shapes.items()},
                 "steps": []}
        for name, m in sorted(log.pseudogradients.items()):
            _dump_matrix(rdir / f"psi__{name}.bin", m)
        for k, d in enumerate(log.deltas):
            for name, m in sorted(d.items()):
                _dump_matrix(rdir / f"delta__w{k}__{name}.bin", m)
        for s in log.steps or ():
            if s.matrix is None:
                continue
            fname = f"step__w{s.worker}__t{s.step}__{s.name}.bin"
            _dump_matrix(rdir / fname, s.matrix)
            index["steps"].append({"worker": s.worker, "step": s.step, "name": s.name, "lr": s.lr, "file": fname})
        (rdir / "index.json").write_text(json.dumps(index, sort_keys=True, indent=1) + "\n")
        files.append(str(rdir.relative_to(run_dir)))
    return files


def _versions() -> dict:
    import scipy
    return {"muloco": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def execute_point(point: dict, out: Path, threads: int) -> dict:
    cfg, task = build_run(point)
    run_dir = out / point["_label"]
    run_dir.mkdir(parents=True, exist_ok=True)
    _, logs = engine.run(cfg, task, threads=threads)
    rows = [(log.round_index, log.step, _fmt(log.eval_loss), _fmt(log.smoothed_loss), _fmt(log.train_loss),
             log.comm_payload_bytes) for log in logs]
    _write_rows(run_dir / "rounds.csv", ROUND_COLUMNS, rows)
    files = ["rounds.csv"]
    if point["analytics"]["record_steps"]:
        trace = analytics.step_norm_trace(logs)
        _write_rows(run_dir / "step_norms.csv", ("parameter", "worker", "round", "step", "lr", "step_norm"),
                    [(r.parameter, r.worker, r.round, r.step, _fmt(r.lr), _fmt(r.step_norm)) for r in trace])
        files.append("step_norms.csv")
    if point["analytics"]["dump"]:
        files.extend(_write_dumps(run_dir, logs, task))
    manifest = {
        "config": _canonical(point),
        "config_hash": config_hash(point),
        "seed": point["run"]["seed"],
        "versions": _versions(),
        "files": files,
        "smoothed_final_loss": logs[-1].smoothed_loss,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def cmd_run(args) -> int:
    path = Path(args.config)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from None
    cfg = parse_experiment(text, str(path))
    if args.seed_override is not None:
        cfg["run"]["seed"] = args.seed_override
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for point in expand_grid(cfg):
        try:
            manifest = execute_point(point, out, args.threads)
        except engine.DivergenceError as exc:
            print(f"run '{point['_label']}' failed: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"{point['_label']}: smoothed final loss {manifest['smoothed_final_loss']:.6g}")
    return EXIT_OK


# -- analyze -----------------------------------------------------------------------

def load_dumps(run_dir: Path) -> list[dict]:
    rounds = sorted((run_dir / "dumps").glob("round_*"))
    if not rounds:
        raise FileNotFoundError(f"{run_dir}: no dumps found (run with analytics.dump: true)")
    out = []
    for rdir in rounds:
        index = json.loads((rdir / "index.json").read_text())
        shapes = {k: tuple(v) for k, v in index["shapes"].items()}
        psi = {n: _load_matrix(rdir / f"psi__{n}.bin").reshape(s) for n, s in shapes.items()}
        deltas = [{n: _load_matrix(rdir / f"delta__w{k}__{n}.bin").reshape(s) for n, s in shapes.items()}
                  for k in range(index["workers"])]
        steps = [dict(e, matrix=_load_matrix(rdir / e["file"]).reshape(shapes[e["name"]])) for e in index["steps"]]
        out.append({"round": index["round"], "psi": psi, "deltas": deltas, "steps": steps})
    return out


def analyze_run(run_dir: Path, out: Path) -> list[str]:
    rounds = load_dumps(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    logs = [engine.RoundLog(r["round"], 0, math.nan, math.nan, math.nan, pseudogradients=r["psi"],
                            deltas=r["deltas"],
                            steps=[engine.StepRecord(s["worker"], s["step"], s["name"], s["lr"],
                                                     float(np.linalg.norm(s["matrix"])), s["matrix"])
                                   for s in r["steps"]]) for r in rounds]
    matrices = sorted(n for n, v in rounds[0]["psi"].items() if v.ndim == 2)
    report = analytics.alignment_report(logs, parameters=matrices)
    analytics.write_csv(out / "alignment.csv", report.rows)

    spec_rows, audit_rows = [], []
    for r in rounds:
        spec_rows.extend(analytics.spectral_rows(analytics.spectra(r["deltas"]), r["round"]))
        workers = len(r["deltas"])
        for name in sorted(r["psi"]):
            if r["psi"][name].ndim != 2 or not r["steps"]:
                continue
            terms = [analytics.StepTerm(s["worker"], s["step"], s["lr"],
                                        s["matrix"] / s["lr"] if s["lr"] else np.zeros_like(s["matrix"]))
                     for s in r["steps"] if s["name"] == name]
            if not terms:
                continue
            mean_delta = sum((d[name] for d in r["deltas"][1:]), r["deltas"][0][name].copy()) / workers
            try:
                rec = analytics.nuclear_decomposition_audit(terms, mean_delta, workers, tol=1e-8)
            except ValueError:
                # Deltas of a partition synced mid-round do not decompose into this round's steps.
                continue
            for metric in ("lhs", "rhs", "rel_discrepancy", "rhs_orthonormal", "rel_discrepancy_orthonormal"):
                audit_rows.append(analytics.MetricRow(name, -1, r["round"], metric, getattr(rec, metric)))
            audit_rows.append(analytics.MetricRow(name, -1, r["round"], "degenerate", float(rec.degenerate)))
    analytics.write_csv(out / "spectra.csv", spec_rows)
    analytics.write_csv(out / "audit.csv", audit_rows)
    return ["alignment.csv", "spectra.csv", "audit.csv"]


def cmd_analyze(args) -> int:
    if not args.runs:
        raise ConfigError("analyze needs at least one run directory")
    for run in args.runs:
        run_dir = Path(run)
        out = Path(args.out) / run_dir.name if args.out else run_dir / "analysis"
        try:
            files = analyze_run(run_dir, out)
        except FileNotFoundError as exc:
            print(f"analyze failed: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"{run_dir}: wrote {', '.join(files)} to {out}")
    return EXIT_OK


# -- fit -----------------------------------------------------------------------------

def cmd_fit(args) -> int:
    try:
        records = scaling_fit.read_records(args.data)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read fit data: {exc}", None, str(args.data)) from None
    data = scaling_fit.records_to_data(records, args.x)
    seed = 0 if args.seed_override is None else args.seed_override
    if args.form == "joint_irr":
        fit = scaling_fit.fit_joint_irr(data, restarts=args.restarts, seed=seed)
    else:
        fit = scaling_fit.fit_power_law(data, args.form, restarts=args.restarts, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(m, _fmt(a), _fmt(alpha), _fmt(fit.offsets[m])) for m, (a, alpha) in sorted(fit.params.items())]
    _write_rows(out / "fit_params.csv", ("series", "a", "alpha", "offset"), rows)
    report = {"form": fit.form, "objective": fit.objective, "residual": fit.residual, "restarts": fit.restarts,
              "shared_offset": fit.shared_offset, "x": args.x, "seed": seed,
              "params": {m: {"a": a, "alpha": al, "offset": fit.offsets[m]} for m, (a, al) in fit.params.items()}}
    (out / "fit_report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(f"form={fit.form} objective={fit.objective:.6g} residual={fit.residual:.6g}")
    if fit.shared_offset is not None:
        print(f"shared offset={fit.shared_offset:.6g}")
    for m, a, alpha, c in rows:
        print(f"  {m}: a={float(a):.6g} alpha={float(alpha):.6g} offset={float(c):.6g}")
    return EXIT_OK


# -- cost ----------------------------------------------------------------------------

COST_KEYS = {"shapes": None, "step_compute_s": None, "optimizer_step_s": 0.0, "workers": None,
             "inner_steps": None, "steps_total": None, "collective": None, "partitions": 1,
             "bandwidths_gbps": None, "compressor": {}}


def parse_cost(text: str, source: str = "<config>") -> tuple[costmodel.CostConfig, list[float]]:
    """Cost config: the ``CostConfig`` fields (bandwidth given as a ``bandwidths_gbps`` list)."""
    try:
        root = yaml.compose(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}", None, source) from None
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError("top level must be a mapping", None, source)
    values = {}
    for k, v in root.value:
        if k.value not in COST_KEYS:
            raise ConfigError(f"unknown key '{k.value}'", k.start_mark.line + 1, source)
        if k.value == "compressor":
            comp = {}
            for ck, cv in v.value:
                if ck.value not in SECTIONS["compressor"]:
                    raise ConfigError(f"unknown key '{ck.value}' in section 'compressor'", ck.start_mark.line + 1,
                                      source)
                comp[ck.value] = _node_value(cv, source)
            values["compressor"] = comp
        else:
            values[k.value] = _node_value(v, source)
    missing = [k for k, d in COST_KEYS.items() if d is None and k not in values and k != "collective"]
    if missing:
        raise ConfigError(f"missing keys: {', '.join(missing)}", None, source)
    for k, d in COST_KEYS.items():
        if d is not None:
            values.setdefault(k, d)
    try:
        bands = [float(b) * 1e9 for b in values.pop("bandwidths_gbps")]
        spec = CompressorSpec(**(values.pop("compressor") or {}))
        shapes = tuple(tuple(int(x) for x in s) for s in values.pop("shapes"))
        cfg = costmodel.CostConfig(bandwidth_bps=bands[0], shapes=shapes, spec=spec, **values)
    except (TypeError, ValueError, IndexError) as exc:
        raise ConfigError(f"invalid settings: {exc}", None, source) from None
    return cfg, bands


def cmd_cost(args) -> int:
    path = Path(args.config)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, str(path)) from None
    cfg, bands = parse_cost(text, str(path))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for b in bands:
        wc = costmodel.estimate_wallclock(cfg.with_bandwidth(b))
        rows.append((_fmt(b), _fmt(wc.total_s), _fmt(wc.compute_s), _fmt(wc.comm_s), _fmt(wc.utilization),
                     wc.events, str(wc.peak_event_bytes)))
    _write_rows(out / "cost_curve.csv",
                ("bandwidth_bps", "total_s", "compute_s", "comm_s", "utilization", "events", "peak_event_bytes"), rows)
    for r in rows:
        print(f"{float(r[0]) / 1e9:g} Gbit/s: total {float(r[1]) / 3600:.4g} h, utilization {float(r[4]):.4f}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="muloco", description="Local-update distributed optimization laboratory.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train one config or a sweep grid")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--seed-override", type=int)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="alignment, spectra and audit CSVs from run dumps")
    a.add_argument("runs", nargs="*")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    f = sub.add_parser("fit", help="fit power laws to a run table")
    f.add_argument("data")
    f.add_argument("--form", choices=scaling_fit.FORMS, default="joint_irr")
    f.add_argument("--x", choices=("compute", "tokens", "batch_tokens"), default="compute")
    f.add_argument("--restarts", type=int, default=64)
    f.add_argument("--out", required=True)
    f.add_argument("--seed-override", type=int)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("cost", help="wall-clock and utilization curves")
    c.add_argument("--config", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cost)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report any runtime failure as exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
