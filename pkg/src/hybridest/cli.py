"""Command-line front end.

    hybridest simulate --preset award1_like --seed 1 --out run1
    hybridest classify run1/dataset.csv --out run1
    hybridest analyze --data run1/dataset.csv --kind all --seed 7 --out run1
    hybridest validate --preset j2r_correct --replications 200 --m 50 --seed 3

Settings come from (highest first) command-line flags, a flat ``key = value``
file given with ``--config``, then built-in defaults.  The default output
directory may be set with HYBRIDEST_OUTPUT_DIR.

Exit codes: 0 success, 2 input or configuration errors, 3 numerical failures.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__
from .data import DataError, read_csv, write_csv
from .estimands import EstimandKind, EstimandSpec, PipelineError, dataset_digest, estimate
from .ice import classify_dataset, summarize
from .imputation import ImputationError
from .mmrm import MmrmError, MmrmModelSpec
from .simulate import PRESETS, ConfigError, ScenarioConfig, calibrate_preset, simulate
from .validation import ValidationSettings, run_validation

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
OUTPUT_ENV = "HYBRIDEST_OUTPUT_DIR"

DEFAULTS = {
    "simulate": {"preset": "award1_like", "seed": 0, "set": ""},
    "classify": {"data": None, "arm_labels": ""},
    "analyze": {"data": None, "kind": "all", "delta": 0.0, "direction": "smaller", "visit": None,
                "m": 100, "seed": None, "alpha": 0.05, "per_arm_cov": False, "workers": 1,
                "arm_labels": "", "formats": "text,json"},
    "validate": {"preset": "j2r_correct", "replications": 200, "m": 100, "seed": 0, "delta": 0.0,
                 "kinds": "theoretic,defacto,hybrid", "workers": 1, "set": "", "alpha": 0.05},
}
CASTS = {"seed": int, "m": int, "replications": int, "workers": int, "visit": int,
         "delta": float, "alpha": float}


class InputError(Exception):
    pass


# ----------------------------------------------------------------- config

def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment; keys use '_' or '-'."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise InputError(f"cannot read config {path}: {e.strerror}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off", ""):
        return False
    raise InputError(f"not a boolean: {v!r}")


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults < config file < command line."""
    base = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        filed = read_config_file(args.config)
        unknown = sorted(set(filed) - set(base) - {"out"})
        if unknown:
            raise InputError(f"unknown config keys for {command}: {unknown}")
        base.update(filed)
    for k in list(base) + ["out"]:
        v = getattr(args, k, None)
        if v is not None:
            base[k] = v
    for k, cast in CASTS.items():
        if k in base and base[k] not in (None, ""):
            try:
                base[k] = cast(base[k])
            except (TypeError, ValueError):
                raise InputError(f"{k}: cannot convert {base[k]!r}") from None
        elif k in base and base[k] == "":
            base[k] = None
    if "per_arm_cov" in base:
        base["per_arm_cov"] = _bool(base["per_arm_cov"])
    base["out"] = base.get("out") or os.environ.get(OUTPUT_ENV) or "."
    return base


def _parse_overrides(text: str) -> dict:
    """'key=value;key=value' scenario overrides; values are JSON literals."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        if "=" not in part:
            raise InputError(f"override {part!r} is not key=value")
        k, v = (s.strip() for s in part.split("=", 1))
        if k not in {f.name for f in ScenarioConfig.__dataclass_fields__.values()}:
            raise InputError(f"unknown scenario field {k!r}")
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            raise InputError(f"override {k}: {v!r} is not a JSON literal") from None
    return out


def _scenario(cfg: dict) -> ScenarioConfig:
    try:
        return calibrate_preset(cfg["preset"], **_parse_overrides(cfg.get("set") or ""))
    except KeyError as e:
        raise InputError(str(e.args[0])) from None
    except TypeError as e:
        raise InputError(str(e)) from None


def config_digest(cfg: dict) -> str:
    keep = {k: v for k, v in cfg.items() if k not in ("out", "workers", "config")}
    return hashlib.sha256(json.dumps(keep, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _labels(text: str) -> dict:
    return {i: s.strip() for i, s in enumerate(text.split(",")) if s.strip()} if text else {}


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _write(outdir: Path, name: str, text: str) -> Path:
    outdir.mkdir(parents=True, exist_ok=True)
    p = outdir / name
    p.write_text(text, encoding="utf-8")
    return p


# ---------------------------------------------------------------- reports

def results_table(results: dict, ds, labels: dict) -> str:
    """Fixed-width table: one row per estimand, LS means (SE) per arm and
    differences versus arm 0 (95% CI)."""
    arms = ds.arms
    counts = ds.arm_counts()
    name = lambda a: labels.get(a, f"Arm {a}")  # noqa: E731
    heads = ["Estimand"] + [f"{name(a)} (N={counts[a]})" for a in arms] + \
            [f"{name(a)} - {name(arms[0])}" for a in arms[1:]]
    rows = []
    for kind, res in results.items():
        r = [kind.value.replace("defacto", "de facto")]
        r += [f"{res.arm_means[a].value:.2f} ({res.arm_means[a].se:.2f})" for a in arms]
        r += [f"{d.value:.2f} ({d.ci_low:.2f}, {d.ci_high:.2f})" for d in (res.differences[a] for a in arms[1:])]
        rows.append(r)
    w = [max(len(x) for x in col) for col in zip(heads, *rows)]
    fmt = lambda r: "  ".join(c.ljust(k) if j == 0 else c.rjust(k) for j, (c, k) in enumerate(zip(r, w)))  # noqa: E731
    res0 = next(iter(results.values()))
    note = (f"LS mean change from baseline (SE) at visit {res0.visit} (week {ds.schedule.weeks[res0.visit - 1]:g}); "
            f"differences with 95% CI")
    lines = [note, fmt(heads), "  ".join("-" * k for k in w)] + [fmt(r) for r in rows]
    if any(r.spec.delta > 0 for r in results.values()):
        lines.append("")
        for kind, res in results.items():
            for a in arms[1:]:
                lines.append(f"{kind.value}: one-sided p for H0 mu = {res.spec.delta:g} "
                             f"({name(a)}): {res.differences[a].p_value:.4f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg: dict) -> int:
    sc = _scenario(cfg).replace(master_seed=cfg["seed"])
    ds, truth = simulate(sc)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out / "dataset.csv")
    with open(out / "truth.csv", "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(truth.to_rows())
    meta = {"version": __version__, "preset": cfg["preset"], "scenario": sc.to_dict(),
            "scenario_digest": sc.digest(), "seed": cfg["seed"], "dataset_digest": dataset_digest(ds)}
    _write(out, "scenario.json", _dump(meta))
    print(f"wrote {out / 'dataset.csv'} ({ds.n_subjects} subjects), {out / 'truth.csv'}")
    return EXIT_OK


def _load(path, smaller_is_better=True, visit=None):
    if not path:
        raise InputError("no dataset given (--data)")
    if not Path(path).is_file():
        raise InputError(f"dataset {path} does not exist")
    return classify_dataset(read_csv(path, smaller_is_better=smaller_is_better, analysis_visit=visit))


def cmd_classify(cfg: dict) -> int:
    ds = _load(cfg["data"])
    tab = summarize(ds, arm_labels=_labels(cfg["arm_labels"]))
    out = Path(cfg["out"])
    _write(out, "ice_summary.txt", tab.to_text())
    _write(out, "ice_summary.csv", tab.to_csv())
    sys.stdout.write(tab.to_text())
    return EXIT_OK


def cmd_analyze(cfg: dict) -> int:
    if cfg["direction"] not in ("smaller", "larger"):
        raise InputError("direction must be 'smaller' or 'larger'")
    sib = cfg["direction"] == "smaller"
    kinds = list(EstimandKind) if cfg["kind"] == "all" else [EstimandKind(k) for k in str(cfg["kind"]).split(",")]
    if any(k is not EstimandKind.THEORETIC for k in kinds) and cfg["seed"] is None:
        raise InputError("multiple imputation needs an explicit --seed")
    formats = {f.strip() for f in str(cfg["formats"]).split(",") if f.strip()}
    if not formats <= {"text", "json"}:
        raise InputError(f"unknown report formats {sorted(formats - {'text', 'json'})}")
    ds = _load(cfg["data"], sib, cfg["visit"])
    mspec = MmrmModelSpec(per_arm_cov=cfg["per_arm_cov"])
    results = {}
    for k in kinds:
        spec = EstimandSpec(k, cfg["delta"], sib, cfg["visit"], cfg["alpha"])
        results[k] = estimate(ds, spec, cfg["m"], cfg["seed"], mmrm_spec=mspec, workers=cfg["workers"])
    labels = _labels(cfg["arm_labels"])
    record = {
        "version": __version__,
        "config": {k: v for k, v in cfg.items() if k not in ("out", "workers", "config")},
        "config_digest": config_digest(cfg),
        "input_digest": _file_digest(cfg["data"]),
        "seed": cfg["seed"],
        "results": {k.value: r.to_dict() for k, r in results.items()},
    }
    out = Path(cfg["out"])
    text = results_table(results, ds, labels)
    if "text" in formats:
        _write(out, "analysis.txt", text)
    if "json" in formats:
        _write(out, "analysis.json", _dump(record))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_validate(cfg: dict) -> int:
    sc = _scenario(cfg)
    kinds = tuple(EstimandKind(k.strip()) for k in cfg["kinds"].split(","))
    st = ValidationSettings(sc, cfg["replications"], cfg["m"], cfg["seed"], cfg["delta"], kinds, cfg["alpha"])
    rep = run_validation(st, cfg["workers"])
    d = rep.to_dict()
    d.update(version=__version__, preset=cfg["preset"], config_digest=config_digest(cfg))
    out = Path(cfg["out"])
    _write(out, "validation.txt", rep.to_text())
    _write(out, "validation.json", _dump(d))
    sys.stdout.write(rep.to_text())
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hybridest", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value settings file")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or .)")

    s = sub.add_parser("simulate", help="simulate one trial; writes dataset.csv and truth.csv")
    common(s)
    s.add_argument("--preset", choices=sorted(PRESETS))
    s.add_argument("--seed", type=int)
    s.add_argument("--set", help="scenario overrides 'field=json;field=json'")

    c = sub.add_parser("classify", help="classify ICEs and tabulate them by arm")
    common(c)
    c.add_argument("data", nargs="?")
    c.add_argument("--arm-labels", dest="arm_labels")

    a = sub.add_parser("analyze", help="estimate theoretic, de facto and/or hybrid effects")
    common(a)
    a.add_argument("--data")
    a.add_argument("--kind", help="theoretic, defacto, hybrid, a comma list, or all")
    a.add_argument("--delta", type=float, help="non-inferiority margin (>= 0)")
    a.add_argument("--direction", choices=("smaller", "larger"), help="which direction is better")
    a.add_argument("--visit", type=int, help="analysis visit (default last)")
    a.add_argument("--m", type=int, help="number of imputations")
    a.add_argument("--seed", type=int, help="master seed (required for MI)")
    a.add_argument("--alpha", type=float)
    a.add_argument("--per-arm-cov", dest="per_arm_cov", action="store_const", const=True)
    a.add_argument("--workers", type=int)
    a.add_argument("--arm-labels", dest="arm_labels")
    a.add_argument("--formats", help="comma list of text,json")

    v = sub.add_parser("validate", help="Monte-Carlo bias/coverage study on a preset")
    common(v)
    v.add_argument("--preset", choices=sorted(PRESETS))
    v.add_argument("--replications", "-R", type=int)
    v.add_argument("--m", type=int)
    v.add_argument("--seed", type=int)
    v.add_argument("--delta", type=float)
    v.add_argument("--kinds")
    v.add_argument("--alpha", type=float)
    v.add_argument("--workers", type=int)
    v.add_argument("--set", help="scenario overrides 'field=json;field=json'")
    return p


COMMANDS = {"simulate": cmd_simulate, "classify": cmd_classify, "analyze": cmd_analyze, "validate": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except PipelineError as e:
        numeric = isinstance(e.__cause__, (MmrmError, ImputationError, ArithmeticError))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC if numeric else EXIT_INPUT
    except (MmrmError, ImputationError, ArithmeticError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, DataError, ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
