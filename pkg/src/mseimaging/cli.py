"""Command-line entry points: ``forward``, ``invert``, ``locate`` and ``report``.

Exit codes: 0 success, 2 configuration or input error, 3 solver failure,
4 non-convergence (results are still written). Errors are reported on stderr
as a one-line JSON object.
"""
import argparse
import csv
import dataclasses
import hashlib
import json
import logging
from pathlib import Path
import sys

import numpy as np

from .config import ConfigError, load_config
from .engine import run_inversion
from .grid import GridFormatError, write_grid, write_model
from .solvers import SolverError
from .synthesis import SyntheticEvent, read_data, synthesize_data, write_data

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_NOT_CONVERGED = 0, 2, 3, 4
DATA_NAME = "data.msd"


class OutputWriter:
    """Serializes all files of one command and records them in a MANIFEST."""

    def __init__(self, directory, command):
        self.directory = Path(directory)
        self.command = command
        self.files = []

    def path(self, name):
        p = self.directory / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def added(self, name):
        self.files.append(name)
        return self.directory / name

    def csv(self, name, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        self.added(name)

    def grid(self, name, values, h):
        write_grid(self.path(name), values, h)
        self.added(name)

    def model(self, name, model):
        write_model(model, self.path(name))
        self.added(name)

    def manifest(self, status, detail=""):
        lines = [f"command: {self.command}", f"status: {status}"]
        if detail:
            lines.append(f"detail: {detail}")
        lines.append("files:")
        for name in self.files:
            p = self.directory / name
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            lines.append(f"  {name}  {p.stat().st_size}  sha256:{digest}")
        self.path("MANIFEST").write_text("\n".join(lines) + "\n")


def _fmt(x):
    return repr(float(x))


def _output_dir(args, cfg):
    out = Path(args.output) if args.output else cfg.output_dir
    if out is None:
        raise ConfigError("no output directory: pass --output or set [paths] output")
    return out


def _data_path(cfg, out):
    return cfg.data_path if cfg.data_path is not None else out / DATA_NAME


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg.inversion = dataclasses.replace(cfg.inversion, threads=args.threads)
    return cfg


# --- commands --------------------------------------------------------------------

def cmd_forward(args):
    cfg = _load(args)
    out = _output_dir(args, cfg)
    if not cfg.events:
        raise ConfigError("[synthesis] events is empty")
    true_model = cfg.load_true_model()
    acq = cfg.acquisition_for()
    data = synthesize_data(
        true_model, cfg.events, acq, seed=cfg.seed, snr_db=cfg.snr_db,
        pml_velocity=cfg.inversion.pml_velocity,
    )
    writer = OutputWriter(out, "forward")
    data_path = _data_path(cfg, out)
    data_path.parent.mkdir(parents=True, exist_ok=True)
    write_data(data, data_path)
    try:
        writer.added(str(data_path.relative_to(out)))
    except ValueError:
        pass
    writer.model("true_model.grid", true_model)
    writer.manifest("complete")
    print(f"wrote {data.values.shape[0]} frequencies x {data.values.shape[1]} receivers to {data_path}")
    return EXIT_OK


def _event_rows(events, grid):
    rows = []
    for i, ((iz, ix), c) in enumerate(zip(events.cells(grid), events.confidence)):
        z, x = grid.coordinates(iz, ix)
        rows.append([i, _fmt(z), _fmt(x), _fmt(c)])
    return rows


EVENT_HEADER = ["event_id", "z [m]", "x [m]", "confidence [rel]"]
HISTORY_HEADER = [
    "iteration", "data_residual [rel]", "wave_residual [rel]", "source_change [rel]",
    "support [cells]", "n_events", "tv_converged",
]


def _history_rows(history):
    return [
        [r["iteration"], _fmt(r["data_residual"]), _fmt(r["wave_residual"]),
         _fmt(r["source_change"]) if np.isfinite(r["source_change"]) else "inf",
         r["support"], r["n_events"], "" if r["tv_converged"] is None else int(r["tv_converged"])]
        for r in history
    ]


def cmd_invert(args, update_model=None):
    cfg = _load(args)
    out = _output_dir(args, cfg)
    data_path = _data_path(cfg, out)
    if not data_path.exists():
        raise ConfigError(f"data file not found: {data_path}")
    data = read_data(data_path)
    acq = cfg.acquisition_for()
    try:
        data.check_acquisition(acq)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    model0 = cfg.load_initial_model()
    inv = cfg.inversion
    if update_model is not None:
        inv = dataclasses.replace(inv, update_model=update_model)
    grid = model0.grid
    command = "locate" if update_model is False else "invert"
    writer = OutputWriter(out, command)
    history = []

    def snapshot(state, record):
        history.append(record)
        if not args.snapshots:
            return
        it = record["iteration"]
        img = np.abs(grid.restrict(state.mean_source.values)).reshape(grid.shape)
        writer.grid(f"snapshots/mean_source_{it:03d}.grid", img, grid.h)
        writer.model(f"snapshots/model_{it:03d}.grid", state.model)
        writer.csv(f"snapshots/events_{it:03d}.csv", EVENT_HEADER, _event_rows(state.events, grid))

    try:
        result = run_inversion(model0, acq, data.values, inv, snapshot)
    except SolverError as exc:
        if history:
            writer.csv("history.csv", HISTORY_HEADER, _history_rows(history))
        if writer.files:
            writer.manifest("partial", f"{type(exc).__name__}: {exc}")
        raise

    omegas = acq.omegas
    ev = result.events
    writer.csv("events.csv", EVENT_HEADER, _event_rows(ev, grid))
    sig_rows = []
    for k, w in enumerate(omegas):
        for i in range(ev.p):
            s = ev.signatures[k, i]
            sig_rows.append([_fmt(w / (2 * np.pi)), i, _fmt(s.real), _fmt(s.imag), _fmt(abs(s)), _fmt(np.angle(s))])
    writer.csv(
        "signatures.csv",
        ["frequency [Hz]", "event_id", "real [arb]", "imag [arb]", "amplitude [arb]", "phase [rad]"],
        sig_rows,
    )
    writer.model("model.grid", result.model)
    writer.csv("history.csv", HISTORY_HEADER, _history_rows(result.history))
    status = "complete" if result.converged else "complete (not converged)"
    writer.manifest(status)
    print(f"{command}: {ev.p} events, {len(result.history)} iterations, converged={result.converged}")
    for row in _event_rows(ev, grid):
        print(f"  event {row[0]}: z={float(row[1]):.1f} m x={float(row[2]):.1f} m confidence={float(row[3]):.3f}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def _read_csv(path):
    if not path.exists():
        raise ConfigError(f"missing output file: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _truth(cfg, out):
    if cfg.events:
        return cfg.events
    data_path = _data_path(cfg, out)
    if data_path.exists():
        meta = read_data(data_path).metadata
        return [SyntheticEvent(**e) for e in meta.get("events", [])]
    return []


def cmd_report(args):
    cfg = _load(args)
    out = _output_dir(args, cfg)
    _, events = _read_csv(out / "events.csv")
    hist_header, history = _read_csv(out / "history.csv")
    picks = [(float(r[1]), float(r[2]), float(r[3])) for r in events]
    truth = _truth(cfg, out)
    h = cfg.grid.h
    print(f"picked events: {len(picks)}")
    for i, (z, x, c) in enumerate(picks):
        print(f"  {i}: z={z:.1f} m x={x:.1f} m confidence={c:.3f}")
    if truth:
        print(f"ground truth events: {len(truth)}")
        for e in truth:
            if picks:
                d = [np.hypot(z - e.z, x - e.x) for z, x, _ in picks]
                j = int(np.argmin(d))
                print(f"  z={e.z:.1f} m x={e.x:.1f} m -> pick {j}, error {d[j]:.1f} m ({d[j] / h:.2f} cells)")
            else:
                print(f"  z={e.z:.1f} m x={e.x:.1f} m -> no pick")
    print("residual history (CSV):")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(hist_header)
    w.writerows(history)
    return EXIT_OK


# --- entry point -------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="mseimaging", description="Microseismic event imaging by ADMM wavefield reconstruction.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("forward", "synthesize a data file from the configured model and events"),
        ("invert", "locate events and update the velocity model"),
        ("locate", "locate events with the model held fixed"),
        ("report", "summarize an invert/locate output directory"),
    ]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="run configuration (INI)")
        p.add_argument("--output", help="output directory (overrides [paths] output)")
        p.add_argument("--seed", type=int, help="noise seed (overrides [synthesis] seed)")
        p.add_argument("--threads", type=int, help="worker threads for per-frequency solves")
        p.add_argument("--snapshots", action="store_true", help="write per-iteration grids")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return parser


def _fail(kind, exc, code):
    print(json.dumps({"error": kind, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    commands = {
        "forward": cmd_forward,
        "invert": cmd_invert,
        "locate": lambda a: cmd_invert(a, update_model=False),
        "report": cmd_report,
    }
    try:
        return commands[args.command](args)
    except (ConfigError, GridFormatError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_CONFIG)
    except SolverError as exc:
        return _fail(type(exc).__name__, exc, EXIT_SOLVER)
    except (ValueError, OSError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
