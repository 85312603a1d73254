"""Command-line front end: scene building, simulation runs, comparisons.

Subcommands:
  scene build   OSM + terrain -> scene JSON
  run           TOML scenario config -> route/grid artifacts + stats
  compare       >= 2 configs sharing a route -> joined comparison CSV

Exit codes: 0 success, 1 I/O failure, 2 input/parse failure, 3 config
schema violation. Every failure prints one JSON object per problem on
stderr; schema problems carry the offending key path and are all
reported before any computation starts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import coverage, em, scene as scene_mod, tracer
from .antenna import AntennaSpec, load_pattern
from .coverage import _atomic_write

CONFIG_VERSION = 1

_EXIT_IO = 1
_EXIT_PARSE = 2
_EXIT_SCHEMA = 3


class CliError(Exception):
    """Failure with a JSON-ready payload and a process exit code."""

    def __init__(self, code, kind, message, **extra):
        super().__init__(message)
        self.code = code
        self.payload = {"error": kind, "message": message, **extra}


def _emit(payload):
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors as JSON like everything else."""

    def error(self, message):
        _emit({"error": "input", "message": message})
        raise SystemExit(_EXIT_PARSE)


# ----------------------------------------------------------------------
# scenario config schema

_num = lambda v: isinstance(v, (int, float)) and not isinstance(v, bool)  # noqa: E731
_int = lambda v: isinstance(v, int) and not isinstance(v, bool)  # noqa: E731


def _is_vec(v, n):
    return isinstance(v, list) and len(v) == n and all(_num(c) for c in v)


def _is_vec_list(v, n):
    return isinstance(v, list) and len(v) > 0 and all(_is_vec(r, n) for r in v)


def _check_antenna(tab, path, bad):
    if not isinstance(tab, dict):
        bad(path, "must be a table")
        return
    kind = tab.get("kind", "isotropic")
    if kind not in ("isotropic", "dipole", "pattern"):
        bad(f"{path}.kind", f"unknown antenna kind {kind!r}")
    if kind == "pattern" and not isinstance(tab.get("pattern_file"), str):
        bad(f"{path}.pattern_file", "pattern antennas need a pattern_file path")
    for key in ("yaw_deg", "pitch_deg", "roll_deg"):
        if key in tab and not _num(tab[key]):
            bad(f"{path}.{key}", "must be a number")


def validate_config(doc):
    """All schema violations as (key path, message) pairs; [] when valid."""
    probs = []

    def bad(path, msg):
        probs.append((path, msg))

    if not isinstance(doc, dict):
        return [("", "config root must be a table")]
    if doc.get("version") != CONFIG_VERSION:
        bad("version", f"must be {CONFIG_VERSION} (got {doc.get('version')!r})")
    if "name" in doc and not isinstance(doc["name"], str):
        bad("name", "must be a string")

    sc = doc.get("scene")
    if not isinstance(sc, dict):
        bad("scene", "required table is missing")
    else:
        has_file = isinstance(sc.get("file"), str)
        has_pair = isinstance(sc.get("osm"), str) and isinstance(sc.get("terrain"), str)
        if has_file == (sc.get("osm") is not None or sc.get("terrain") is not None):
            bad("scene", "give either file or the osm + terrain pair")
        elif not has_file and not has_pair:
            bad("scene", "osm and terrain must both be string paths")
        if "lod" in sc and sc["lod"] not in (1, 2):
            bad("scene.lod", "must be 1 or 2")

    tx = doc.get("tx")
    if not isinstance(tx, dict):
        bad("tx", "required table is missing")
    else:
        has_pos = "position" in tx
        has_xy = "x" in tx or "y" in tx
        if has_pos and has_xy:
            bad("tx", "give either position or x/y + height, not both")
        elif has_pos:
            if not _is_vec(tx["position"], 3):
                bad("tx.position", "must be a list of three numbers")
        elif has_xy:
            for key in ("x", "y"):
                if not _num(tx.get(key)):
                    bad(f"tx.{key}", "must be a number")
            above = [k for k in ("height_above_ground", "height_above_rooftop") if k in tx]
            if len(above) != 1:
                bad("tx", "give exactly one of height_above_ground/height_above_rooftop")
            elif not _num(tx[above[0]]):
                bad(f"tx.{above[0]}", "must be a number")
        else:
            bad("tx", "give position or x/y + height")
        if "antenna" in tx:
            _check_antenna(tx["antenna"], "tx.antenna", bad)
    rx = doc.get("rx", {})
    if not isinstance(rx, dict):
        bad("rx", "must be a table")
    elif "antenna" in rx:
        _check_antenna(rx["antenna"], "rx.antenna", bad)

    radio = doc.get("radio")
    if not isinstance(radio, dict):
        bad("radio", "required table is missing")
    else:
        f = radio.get("frequency_hz")
        if not _num(f):
            bad("radio.frequency_hz", "required number is missing")
        elif not 100e6 <= f <= 30e9:
            bad("radio.frequency_hz", "outside the 100 MHz - 30 GHz validity range")
        if "tx_power_dbm" in radio and not _num(radio["tx_power_dbm"]):
            bad("radio.tx_power_dbm", "must be a number")
        if radio.get("polarization", "V") not in ("V", "H"):
            bad("radio.polarization", "must be V or H")
        if radio.get("combine", "power") not in ("power", "coherent"):
            bad("radio.combine", "must be power or coherent")

    trace = doc.get("trace", {})
    if not isinstance(trace, dict):
        bad("trace", "must be a table")
    else:
        if "max_reflections" in trace and not (_int(trace["max_reflections"]) and trace["max_reflections"] >= 0):
            bad("trace.max_reflections", "must be an integer >= 0")
        if "max_diffractions" in trace and trace["max_diffractions"] not in (0, 1, 2):
            bad("trace.max_diffractions", "must be 0, 1 or 2")
        if "sbr_subdivision" in trace and not (_int(trace["sbr_subdivision"]) and trace["sbr_subdivision"] >= 2):
            bad("trace.sbr_subdivision", "must be an integer >= 2")
        if "rd_combos" in trace and not isinstance(trace["rd_combos"], bool):
            bad("trace.rd_combos", "must be a boolean")

    outs = doc.get("outputs")
    if not isinstance(outs, dict):
        bad("outputs", "required table is missing")
        return probs
    if "route" not in outs and "grid" not in outs:
        bad("outputs", "request route, grid, or both")

    route = outs.get("route")
    if route is not None:
        if not isinstance(route, dict):
            bad("outputs.route", "must be a table")
        else:
            has_points = "points" in route
            has_way = "waypoints" in route
            if has_points == has_way:
                bad("outputs.route", "give exactly one of points or waypoints")
            elif has_points and not _is_vec_list(route["points"], 3):
                bad("outputs.route.points", "must be a list of [x, y, z] rows")
            elif has_way:
                if not _is_vec_list(route["waypoints"], 2) or len(route["waypoints"]) < 2:
                    bad("outputs.route.waypoints", "must be >= 2 [x, y] rows")
                has_count = "count" in route
                has_spacing = "spacing" in route
                if has_count == has_spacing:
                    bad("outputs.route", "give exactly one of count or spacing")
                elif has_count and not (_int(route["count"]) and route["count"] >= 1):
                    bad("outputs.route.count", "must be an integer >= 1")
                elif has_spacing and not (_num(route["spacing"]) and route["spacing"] > 0):
                    bad("outputs.route.spacing", "must be a positive number")
            if "height" in route and not _num(route["height"]):
                bad("outputs.route.height", "must be a number")

    grid = outs.get("grid")
    if grid is not None:
        if not isinstance(grid, dict):
            bad("outputs.grid", "must be a table")
        else:
            for key in ("x0", "y0"):
                if not _num(grid.get(key)):
                    bad(f"outputs.grid.{key}", "required number is missing")
            for key in ("nx", "ny"):
                if not (_int(grid.get(key)) and grid.get(key, 0) >= 1):
                    bad(f"outputs.grid.{key}", "must be an integer >= 1")
            if "cell_size" in grid and not (_num(grid["cell_size"]) and grid["cell_size"] > 0):
                bad("outputs.grid.cell_size", "must be a positive number")
            if "height" in grid and not _num(grid["height"]):
                bad("outputs.grid.height", "must be a number")

    th = outs.get("thresholds")
    if th is not None:
        if not isinstance(th, dict):
            bad("outputs.thresholds", "must be a table")
        else:
            vals = [th.get(k) for k in ("excellent", "good", "fair")]
            if not all(_num(v) for v in vals):
                bad("outputs.thresholds", "needs numeric excellent/good/fair")
            elif not vals[0] > vals[1] > vals[2]:
                bad("outputs.thresholds", "bounds must be strictly descending")
    return probs


# ----------------------------------------------------------------------
# config realization


def _read_bytes(path):
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(_EXIT_IO, "io", f"cannot read {path}: {exc.strerror}", file=str(path))


def _load_toml(path):
    data = _read_bytes(path)
    try:
        return tomllib.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise CliError(_EXIT_PARSE, "parse", f"{path}: {exc}", file=str(path))


def _build_scene_from_files(osm_path, terrain_path, lod):
    try:
        terrain = scene_mod.load_terrain(_read_bytes(terrain_path))
    except ValueError as exc:
        raise CliError(_EXIT_PARSE, "parse", f"{terrain_path}: {exc}", file=str(terrain_path))
    try:
        footprints, foliage, warn = scene_mod.parse_osm(_read_bytes(osm_path))
    except ValueError as exc:
        raise CliError(_EXIT_PARSE, "parse", f"{osm_path}: {exc}", file=str(osm_path))
    built, more = scene_mod.build_scene(
        footprints, terrain, foliage_prims=foliage, lod=lod, project=True
    )
    return built, warn + more


def _antenna_from(tab, base_dir):
    kind = tab.get("kind", "isotropic")
    pattern = None
    if kind == "pattern":
        path = os.path.join(base_dir, tab["pattern_file"])
        try:
            pattern = load_pattern(_read_bytes(path))
        except ValueError as exc:
            raise CliError(_EXIT_PARSE, "parse", f"{path}: {exc}", file=str(path))
    return AntennaSpec(
        kind=kind,
        pattern=pattern,
        yaw_deg=float(tab.get("yaw_deg", 0.0)),
        pitch_deg=float(tab.get("pitch_deg", 0.0)),
        roll_deg=float(tab.get("roll_deg", 0.0)),
    )


def _resolve_tx(scene, tx):
    """Transmitter position from explicit coordinates or height rules."""
    if "position" in tx:
        return np.asarray(tx["position"], dtype=np.float64)
    x, y = float(tx["x"]), float(tx["y"])
    if "height_above_ground" in tx:
        z = float(scene.ground_height(x, y)) + float(tx["height_above_ground"])
        return np.array([x, y, z])
    if not scene.buildings:
        raise CliError(
            _EXIT_SCHEMA,
            "schema",
            "height_above_rooftop needs at least one building in the scene",
            path="tx.height_above_rooftop",
        )
    idx = scene.building_index()
    z_hi = max(float(m.vertices[:, 2].max()) for m in scene.buildings) + 10.0
    t, tri = idx.first_hits(np.array([[x, y, z_hi]]), np.array([[0.0, 0.0, -1.0]]))
    if not np.isfinite(t[0]):
        raise CliError(
            _EXIT_SCHEMA,
            "schema",
            f"no building roof under tx ({x}, {y})",
            path="tx.height_above_rooftop",
        )
    return np.array([x, y, z_hi - float(t[0]) + float(tx["height_above_rooftop"])])


class Scenario:
    """A validated config realized into engine objects."""

    def __init__(self, doc, base_dir, name):
        self.name = doc.get("name", name)
        sc = doc["scene"]
        if "file" in sc:
            path = os.path.join(base_dir, sc["file"])
            try:
                self.scene = scene_mod.load_scene(path)
            except OSError as exc:
                raise CliError(_EXIT_IO, "io", f"cannot read {path}: {exc.strerror}", file=path)
            except ValueError as exc:
                raise CliError(_EXIT_PARSE, "parse", f"{path}: {exc}", file=path)
            self.warnings = []
        else:
            self.scene, self.warnings = _build_scene_from_files(
                os.path.join(base_dir, sc["osm"]),
                os.path.join(base_dir, sc["terrain"]),
                sc.get("lod", 1),
            )
        self.tx = _resolve_tx(self.scene, doc["tx"])
        self.tx_ant = _antenna_from(doc["tx"].get("antenna", {}), base_dir)
        self.rx_ant = _antenna_from(doc.get("rx", {}).get("antenna", {}), base_dir)
        radio = doc["radio"]
        self.radio = em.RadioConfig(
            frequency=float(radio["frequency_hz"]),
            tx_power_dbm=float(radio.get("tx_power_dbm", 30.0)),
            polarization=radio.get("polarization", "V"),
            combine=radio.get("combine", "power"),
        )
        trace = doc.get("trace", {})
        self.trace = tracer.TraceConfig(
            max_reflections=trace.get("max_reflections", 2),
            max_diffractions=trace.get("max_diffractions", 1),
            sbr_subdivision=trace.get("sbr_subdivision", 4),
            rd_combos=trace.get("rd_combos", True),
        )
        outs = doc["outputs"]
        self.route_spec = None
        self.route_csv = "route.csv"
        if "route" in outs:
            r = outs["route"]
            if "points" in r:
                self.route_spec = coverage.RouteSpec(
                    points=np.asarray(r["points"], dtype=np.float64),
                    height=float(r.get("height", 1.6)),
                )
            else:
                self.route_spec = coverage.RouteSpec(
                    waypoints=np.asarray(r["waypoints"], dtype=np.float64),
                    count=r.get("count"),
                    spacing=r.get("spacing"),
                    height=float(r.get("height", 1.6)),
                )
            self.route_csv = r.get("csv", "route.csv")
        self.grid_spec = None
        self.grid_csv = "grid.csv"
        self.grid_ppm = "grid.ppm"
        self.hist_csv = "histogram.csv"
        if "grid" in outs:
            g = outs["grid"]
            self.grid_spec = coverage.GridSpec(
                x0=float(g["x0"]),
                y0=float(g["y0"]),
                nx=int(g["nx"]),
                ny=int(g["ny"]),
                cell_size=float(g.get("cell_size", 2.0)),
                height=float(g.get("height", 1.6)),
            )
            self.grid_csv = g.get("csv", "grid.csv")
            self.grid_ppm = g.get("ppm", "grid.ppm")
            self.hist_csv = g.get("histogram_csv", "histogram.csv")
        th = outs.get("thresholds")
        self.thresholds = (
            coverage.CategoryThresholds(th["excellent"], th["good"], th["fair"])
            if th
            else coverage.CategoryThresholds()
        )


def load_scenario(path):
    doc = _load_toml(path)
    probs = validate_config(doc)
    if probs:
        for key_path, msg in probs:
            _emit({"error": "schema", "path": key_path, "message": msg, "file": str(path)})
        raise SystemExit(_EXIT_SCHEMA)
    stem = os.path.splitext(os.path.basename(path))[0]
    return Scenario(doc, os.path.dirname(os.path.abspath(path)), stem)


# ----------------------------------------------------------------------
# commands


def _resolve_workers(args):
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("SITEWAVE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(_EXIT_PARSE, "parse", f"SITEWAVE_THREADS={env!r} is not an integer")
    return os.cpu_count() or 1


def _stats_line(name, label, values):
    good = values[~coverage._is_sentinel(values)]
    if not len(good):
        return f"{name} {label} mean n/a (no reachable receivers)"
    mean, sd = coverage.stats(good)
    return f"{name} {label} mean {mean:.2f} dBm sd {sd:.2f} dB"


def cmd_scene_build(args):
    built, warnings = _build_scene_from_files(args.osm, args.terrain, args.lod)
    try:
        scene_mod.save_scene(built, args.out)
    except OSError as exc:
        raise CliError(_EXIT_IO, "io", f"cannot write {args.out}: {exc.strerror}", file=args.out)
    for w in warnings:
        print(f"warning: {w}")
    tris = sum(len(m.triangles) for m in built.all_meshes())
    print(
        f"scene {args.out}: {len(built.buildings)} buildings, {tris} triangles, "
        f"{len(built.edges)} edges, {len(built.foliage)} foliage volumes, "
        f"{len(warnings)} warnings"
    )
    return 0


def cmd_run(args):
    scn = load_scenario(args.config)
    workers = _resolve_workers(args)
    os.makedirs(args.out_dir, exist_ok=True)
    for w in scn.warnings:
        print(f"warning: {w}")
    if scn.route_spec is not None:
        res = coverage.eval_route(
            scn.scene, scn.tx, scn.tx_ant, scn.rx_ant, scn.radio, scn.trace,
            scn.route_spec, workers=workers,
        )
        coverage.export_route_csv(res, os.path.join(args.out_dir, scn.route_csv))
        print(_stats_line(scn.name, "route", res.rss_dbm))
    if scn.grid_spec is not None:
        grid = coverage.eval_grid(
            scn.scene, scn.tx, scn.tx_ant, scn.rx_ant, scn.radio, scn.trace,
            scn.grid_spec, workers=workers,
        )
        coverage.export_grid_csv(grid, os.path.join(args.out_dir, scn.grid_csv))
        coverage.export_grid_ppm(grid, os.path.join(args.out_dir, scn.grid_ppm))
        hist = coverage.histogram(grid.rss_dbm, scn.thresholds)
        coverage.export_histogram_csv(hist, os.path.join(args.out_dir, scn.hist_csv))
        print(_stats_line(scn.name, "grid", grid.rss_dbm))
    return 0


def cmd_compare(args):
    if len(args.configs) < 2:
        raise CliError(_EXIT_PARSE, "input", "compare needs at least two configs")
    scenarios = [load_scenario(p) for p in args.configs]
    for scn, path in zip(scenarios, args.configs):
        if scn.route_spec is None:
            raise CliError(
                _EXIT_PARSE, "input", f"{path}: compare needs an outputs.route section"
            )
    workers = _resolve_workers(args)
    results = [
        coverage.eval_route(
            s.scene, s.tx, s.tx_ant, s.rx_ant, s.radio, s.trace, s.route_spec,
            workers=workers,
        )
        for s in scenarios
    ]
    n = len(results[0].positions)
    for scn, res in zip(scenarios[1:], results[1:]):
        if len(res.positions) != n:
            raise CliError(
                _EXIT_PARSE,
                "input",
                f"route length mismatch: {scenarios[0].name} has {n} receivers, "
                f"{scn.name} has {len(res.positions)}",
            )

    names = []
    for scn in scenarios:
        base = scn.name
        name = base
        k = 2
        while name in names:
            name = f"{base}_{k}"
            k += 1
        names.append(name)

    lines = ["index,x,y,z," + ",".join(f"rss_{n}" for n in names)]
    pos = results[0].positions
    for i in range(n):
        x, y, z = (float(v) for v in pos[i])
        row = [str(i), repr(x), repr(y), repr(z)]
        row += [repr(float(r.rss_dbm[i])) for r in results]
        lines.append(",".join(row))
    lines.append("scenario,mean_dbm,sd_db")
    entries = []
    for name, res in zip(names, results):
        good = res.rss_dbm[~coverage._is_sentinel(res.rss_dbm)]
        mean, sd = coverage.stats(good) if len(good) else (float("nan"), float("nan"))
        entries.append((name, mean, sd))
        lines.append(f"{name},{mean!r},{sd!r}")
    os.makedirs(args.out_dir, exist_ok=True)
    dest = os.path.join(args.out_dir, args.out)
    try:
        _atomic_write(dest, ("\n".join(lines) + "\n").encode())
    except OSError as exc:
        raise CliError(_EXIT_IO, "io", f"cannot write {dest}: {exc.strerror}", file=dest)
    for name, mean, sd in sorted(entries, key=lambda e: -e[1]):
        print(f"{name} mean {mean:.2f} dBm sd {sd:.2f} dB")
    return 0


# ----------------------------------------------------------------------
# entry point


def _build_parser():
    p = _Parser(prog="sitewave", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("scene", help="scene utilities")
    ssub = ps.add_subparsers(dest="scene_command", required=True)
    pb = ssub.add_parser("build", help="build a scene JSON from OSM + terrain")
    pb.add_argument("--osm", required=True, help="OSM XML file")
    pb.add_argument("--terrain", required=True, help="Esri ASCII grid file")
    pb.add_argument("--lod", type=int, choices=(1, 2), default=1)
    pb.add_argument("--out", default="scene.json")
    pb.set_defaults(func=cmd_scene_build)

    pr = sub.add_parser("run", help="run a scenario config")
    pr.add_argument("--config", required=True)
    pr.add_argument("--out-dir", default=".")
    pr.add_argument("--threads", type=int, default=None)
    pr.add_argument("--seed", type=int, default=0, help="reserved for stochastic features")
    pr.set_defaults(func=cmd_run)

    pc = sub.add_parser("compare", help="compare route RSS across configs")
    pc.add_argument("configs", nargs="+", help="scenario config files")
    pc.add_argument("--out-dir", default=".")
    pc.add_argument("--out", default="compare.csv")
    pc.add_argument("--threads", type=int, default=None)
    pc.add_argument("--seed", type=int, default=0, help="reserved for stochastic features")
    pc.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        _emit(exc.payload)
        return exc.code
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else _EXIT_PARSE
    except OSError as exc:
        _emit({"error": "io", "message": str(exc)})
        return _EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
