"""Command-line interface: ``debateiv <command> [options]``.

Commands
--------
simulate     draw a synthetic debate panel (records.csv, truth.json, truth_debates.csv)
ingest       validate raw records and derive the analysis panel (panel.csv, describe.json)
features     TF-IDF features of the response texts (vocab.txt, tfidf.csv, tfidf_meta.json)
estimate     run one estimator (<estimator>.json and <estimator>.txt)
sweep-gamma  plausibly-exogenous instrument sweep (sweep.csv, sweep.json, sweep.txt)
report       re-render a result JSON as a table

``--config`` takes a JSON or YAML mapping. If it has a key named after the
command (e.g. ``simulate:``) that section is used, otherwise the whole
mapping. Every command writes ``run.json`` with the effective configuration,
its hash and the seed; outputs are written to a temporary file and renamed
into place. Exit status: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd
import yaml

from . import __version__, estimators, panel as panel_mod, plausexog, report, simgen, textfeat
from .errors import ConfigurationError, DebateIVError
from .estimators import ESTIMATOR_NAMES, MODERATORS

log = logging.getLogger("debateiv")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration and output helpers

def load_config(path: str | None, command: str) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {path}")
    text = p.read_text()
    data = yaml.safe_load(text) if p.suffix in (".yaml", ".yml") else json.loads(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError("config file must hold a key-value mapping")
    section = data.get(command)
    return dict(section) if isinstance(section, dict) else dict(data)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def atomic_write(path: Path, writer: Callable[[Path], None]) -> None:
    """Call ``writer(tmp_path)`` and rename the result onto ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        writer(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_text(path: Path, text: str) -> None:
    def _w(tmp: Path):
        with open(tmp, "w", newline="") as fh:
            fh.write(text)
    atomic_write(path, _w)


def atomic_dir(out_dir: Path, writer: Callable[[Path], None]) -> list[str]:
    """Run a directory writer in a scratch directory, then move each file into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(prefix=".staging-", dir=out_dir) as tmp:
        writer(Path(tmp))
        names = sorted(os.listdir(tmp))
        for name in names:
            os.replace(Path(tmp) / name, out_dir / name)
    return names


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _finish(out_dir: Path, command: str, config: dict, seed, outputs: list[str]) -> None:
    h = config_hash({"command": command, "seed": seed, "config": config})
    log.info("%s: seed=%s config_hash=%s", command, seed, h)
    manifest = {"command": command, "seed": seed, "config": config, "config_hash": h,
                "version": __version__, "outputs": sorted(outputs)}
    atomic_text(out_dir / "run.json", _json(manifest))


def read_panel(path: str | Path, s_mu: float | None = None) -> pd.DataFrame:
    """Read a derived panel CSV, or raw records (which are then derived)."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"input not found: {path}")
    if path.suffix in (".jsonl", ".ndjson"):
        frame = panel_mod.read_records(path)
    else:
        frame = pd.read_csv(path, dtype={"opinion_id": str, "user_id": str, "month": str,
                                         "response_text": str},
                            keep_default_na=False, na_values={"instrument": [""]})
    if not set(panel_mod.DERIVED_COLUMNS) <= set(frame.columns):
        frame = panel_mod.derive(frame, **({} if s_mu is None else {"s_mu": s_mu}))
    return frame


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(args, config: dict) -> None:
    if args.seed is not None:
        config["seed"] = args.seed
    cfg = simgen.SimConfig.from_dict(config)
    records, truth = simgen.simulate(cfg)
    out = Path(args.out_dir)

    def write(tmp: Path):
        records.to_csv(tmp / "records.csv", index=False)
        truth.write(tmp)
    outputs = atomic_dir(out, write)
    _finish(out, "simulate", cfg.to_dict(), cfg.seed, outputs)


def cmd_ingest(args, config: dict) -> None:
    records = panel_mod.read_records(_need_input(args))
    opts = {k: config[k] for k in ("s_mu", "keep_deleted") if k in config}
    derived = panel_mod.derive(records, **opts)
    out = Path(args.out_dir)
    desc = panel_mod.describe(derived)

    def write(tmp: Path):
        derived.to_csv(tmp / "panel.csv", index=False)
        (tmp / "describe.json").write_text(_json(desc))
    outputs = atomic_dir(out, write)
    _finish(out, "ingest", opts, None, outputs)


def cmd_features(args, config: dict) -> None:
    frame = read_panel(_need_input(args))
    opts = {k: config[k] for k in ("min_df", "max_df") if k in config}
    feats = textfeat.featurize(frame["response_text"].tolist(), **opts)
    out = Path(args.out_dir)
    outputs = atomic_dir(out, lambda tmp: textfeat.save_features(feats, tmp))
    _finish(out, "features", {**opts, "corpus_hash": feats.corpus_hash}, None, outputs)


def _text_matrix(args, frame: pd.DataFrame, config: dict):
    if args.features:
        feats = textfeat.load_features(args.features)
        if feats.matrix.shape[0] != len(frame):
            raise ConfigurationError(
                f"features have {feats.matrix.shape[0]} rows but the panel has {len(frame)}")
        want = textfeat.corpus_hash(frame["response_text"].tolist())
        if feats.corpus_hash != want:
            raise ConfigurationError("features were computed from a different corpus")
        return feats.matrix
    opts = {k: config.pop(k) for k in ("min_df", "max_df") if k in config}
    return textfeat.featurize(frame["response_text"].tolist(), **opts).matrix


def cmd_estimate(args, config: dict) -> None:
    name = args.estimator or config.pop("estimator", None)
    if name is None:
        raise UsageError("--estimator is required")
    if name not in ESTIMATOR_NAMES:
        raise UsageError(f"unknown estimator {name!r}; choose from {', '.join(ESTIMATOR_NAMES)}")
    config.pop("estimator", None)
    seed = args.seed if args.seed is not None else int(config.pop("seed", 0))
    config.pop("seed", None)
    frame = read_panel(_need_input(args), config.pop("s_mu", None))
    if args.moderator:
        config["moderator"] = args.moderator
    if args.gamma_grid:
        config["gamma_grid"] = args.gamma_grid
    effective = dict(config)
    text = _text_matrix(args, frame, config) if name.startswith("dml") else None
    result = estimators.run_estimator(name, frame, text_matrix=text, seed=seed, options=config)
    d = json.loads(_json(result.to_dict()))
    out = Path(args.out_dir)
    atomic_text(out / f"{name}.json", _json(d))
    table = report.render(d)
    atomic_text(out / f"{name}.txt", table)
    sys.stdout.write(table)
    _finish(out, "estimate", {"estimator": name, **effective}, seed, [f"{name}.json", f"{name}.txt"])


def cmd_sweep(args, config: dict) -> None:
    frame = read_panel(_need_input(args), config.pop("s_mu", None))
    grid_text = args.gamma_grid or config.get("gamma_grid")
    grid = plausexog.GammaGrid.parse(grid_text) if isinstance(grid_text, str) else (
        plausexog.GammaGrid(tuple(grid_text)) if grid_text is not None else None)
    est, sweep = estimators.plausexog_estimate(frame, grid)
    d = json.loads(_json(est.to_dict()))
    out = Path(args.out_dir)
    atomic_text(out / "sweep.csv", sweep.to_csv())
    atomic_text(out / "sweep.json", _json(d))
    table = report.render(d)
    atomic_text(out / "sweep.txt", table)
    sys.stdout.write(table)
    _finish(out, "sweep-gamma", {"gamma_grid": list(sweep.gammas)}, None,
            ["sweep.csv", "sweep.json", "sweep.txt"])


def cmd_report(args, config: dict) -> None:
    path = Path(_need_input(args))
    if not path.exists():
        raise UsageError(f"input not found: {path}")
    table = report.render_file(path)
    if args.out:
        atomic_text(Path(args.out), table)
    sys.stdout.write(table)


def _need_input(args) -> str:
    if not args.input:
        raise UsageError("--input is required")
    return args.input


COMMANDS = {"simulate": cmd_simulate, "ingest": cmd_ingest, "features": cmd_features,
            "estimate": cmd_estimate, "sweep-gamma": cmd_sweep, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="debateiv", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    needs_out = {"simulate", "ingest", "features", "estimate", "sweep-gamma"}
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON or YAML configuration file")
        if name != "simulate":
            p.add_argument("--input", help="input file")
        if name in needs_out:
            p.add_argument("--out-dir", required=True, help="output directory")
        if name in ("simulate", "estimate"):
            p.add_argument("--seed", type=int)
        if name == "estimate":
            p.add_argument("--estimator", choices=ESTIMATOR_NAMES)
            p.add_argument("--moderator", choices=sorted(MODERATORS))
            p.add_argument("--features", help="directory written by `debateiv features`")
        if name in ("estimate", "sweep-gamma"):
            p.add_argument("--gamma-grid", help="comma list or start:stop:num")
        if name == "report":
            p.add_argument("--out", help="also write the table here")
    return parser


def _join_option_values(argv: list[str]) -> list[str]:
    """Rewrite ``--gamma-grid -0.1:0.1:5`` as ``--gamma-grid=-0.1:0.1:5``.

    argparse would otherwise take a grid starting with a minus sign for an option.
    """
    out, i = [], 0
    while i < len(argv):
        if argv[i] == "--gamma-grid" and i + 1 < len(argv):
            out.append(f"--gamma-grid={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = _join_option_values(list(sys.argv[1:] if argv is None else argv))
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit 2, --help/--version exit 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = load_config(args.config, args.command)
        COMMANDS[args.command](args, config)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"debateiv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DebateIVError as exc:
        module = getattr(exc, "module", None) or type(exc).__module__
        print(f"debateiv: error [{module}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, KeyError, yaml.YAMLError) as exc:
        print(f"debateiv: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()
