"""Command-line entry point.

Exit codes: 0 success, 2 invalid input, 3 an assumption failed, 4 a bound
was violated.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np

from .causal import Task, load_model, save_model
from .congruity import CongruityConfig, VariantGenerator, congruity, congruity_matrix
from .equiv import (
    DistillationMap,
    check_thm1,
    check_thm2,
    check_thm3,
    default_distillation,
    equiv_report,
)
from .errors import InterpEquivError, MissingArtifact, MissingTerm, ValidationError
from .experiment import CSV_HEADER, ExperimentConfig, matrix_csv, report, run_bounds, run_calibration
from .implgen import (
    DEFAULT_STRATEGIES,
    VariantStrategy,
    generate_implementations,
    load_implementation_set,
    save_implementation_set,
)
from .rasp import CompileConfig, compile_program, interpret, parse_program
from .reprsim import LayerPooling, get_reprs, load_reprs, repr_dist, save_reprs

EXIT_OK, EXIT_VALIDATION, EXIT_ASSUMPTION, EXIT_BOUND = 0, 2, 3, 4
_EXIT_BY_CODE = {"validation": EXIT_VALIDATION, "assumption": EXIT_ASSUMPTION}


def _read_json(path: str | Path) -> Any:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{p} does not exist")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: invalid JSON ({exc})") from exc


def _emit(doc: Any, path: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _load_task(path: str) -> Task:
    return Task.from_json(_read_json(path))


def _load_strategies(path: str | None) -> tuple[VariantStrategy, ...]:
    if not path:
        return DEFAULT_STRATEGIES
    doc = _read_json(path)
    items = doc["strategies"] if isinstance(doc, dict) else doc
    return tuple(VariantStrategy.from_json(s) for s in items)


def _parse_sequence(text: str, alphabet: Sequence[Any]) -> list[Any]:
    by_name = {str(a): a for a in alphabet}
    tokens = text.replace(",", " ").split()
    return [by_name.get(t, t) for t in tokens]


# ---------------------------------------------------------------- commands

def cmd_rasp(args: argparse.Namespace) -> int:
    program = parse_program(Path(args.program).read_text())
    if args.rasp_cmd == "parse":
        _emit({
            "alphabet": [str(a) for a in program.alphabet],
            "output": program.output,
            "sops": list(program.sops),
            "nodes": len(program.nodes),
        }, args.json)
    elif args.rasp_cmd == "run":
        seq = _parse_sequence(args.input, program.alphabet)
        values = interpret(program, seq)
        _emit({"input": [str(s) for s in seq], "output": [v if isinstance(v, (int, float, bool)) else str(v)
                                                          for v in values]}, args.json)
    else:
        compiled = compile_program(program, CompileConfig(max_len=args.max_len, pad_seed=args.seed))
        save_model(compiled.model, args.out)
        _emit({"model": args.out, "layers": compiled.layers, "residual_width": compiled.residual_width},
              args.json)
    return EXIT_OK


def cmd_gen_impls(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    task = _load_task(args.task)
    impls = generate_implementations(model, task, args.count, _load_strategies(args.strategies),
                                     args.budget, seed=args.seed)
    save_implementation_set(impls, args.out, task)
    _emit({"out": args.out, "variants": len(impls.variants)}, args.json)
    return EXIT_OK


def cmd_reprs(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    rho = LayerPooling.from_json(_read_json(args.rho)) if args.rho else None
    R = get_reprs(model, _load_task(args.task), rho, model_id=Path(args.model).stem)
    save_reprs(R, args.out)
    _emit({"out": args.out, "widths": list(R.widths), "rows": R.n_rows}, args.json)
    return EXIT_OK


def cmd_reprdist(args: argparse.Namespace) -> int:
    _emit({"d_repr": repr_dist(load_reprs(args.a), load_reprs(args.b))}, args.json)
    return EXIT_OK


def cmd_congruity(args: argparse.Namespace) -> int:
    cfg = CongruityConfig(n_rounds=args.rounds, bootstrap_samples=args.bootstrap, seed=args.seed)
    gen = VariantGenerator(_load_strategies(args.impl_cfg))
    result = congruity(load_model(args.a), load_model(args.b), _load_task(args.task), cfg, gen)
    _emit(result.to_json(), args.json)
    return EXIT_OK


def cmd_congruity_matrix(args: argparse.Namespace) -> int:
    root = Path(args.groups)
    if not root.is_dir():
        raise MissingArtifact(f"{root} is not a directory")
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").exists())
    if len(dirs) < 2:
        raise ValidationError(f"{root} holds fewer than two implementation sets")
    task_path = args.task or dirs[0] / "task.json"
    task = _load_task(str(task_path))
    sets = [load_implementation_set(d) for d in dirs]
    cfg = CongruityConfig(n_rounds=args.rounds, bootstrap_samples=args.bootstrap, seed=args.seed)
    matrix = congruity_matrix(sets, task, cfg)
    text = matrix_csv([d.name for d in dirs], matrix)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_equiv(args: argparse.Namespace) -> int:
    phi = DistillationMap.from_json(_read_json(args.phi)) if args.phi else default_distillation()
    task = _load_task(args.task)
    result = equiv_report(load_implementation_set(args.set_a), load_implementation_set(args.set_b), phi, task)
    _emit(result.to_json(), args.json)
    return EXIT_OK


def _bundle_report(thm: str, bundle: dict, tol: float, safety: float, source: str):
    try:
        if thm == "1":
            return check_thm1(bundle, tol)
        if thm == "2":
            return check_thm2(bundle, tol, safety)
        missing = [k for k in ("within", "cross", "kappa", "d_interp") if k not in bundle]
        if missing:
            raise MissingTerm(f"bundle lacks {', '.join(missing)}")
        return check_thm3(np.asarray(bundle["within"]), np.asarray(bundle["cross"]), bundle["kappa"],
                          bundle["d_interp"], bundle.get("p_hat"), bundle.get("margin", 0.0))
    except MissingTerm as exc:
        raise MissingTerm(f"{source}: {exc}") from None


def cmd_bounds(args: argparse.Namespace) -> int:
    if args.bundle:
        if not args.thm:
            raise ValidationError("--thm is required with --bundle")
        bundle = _read_json(args.bundle)
        if not isinstance(bundle, dict):
            raise MissingTerm(f"{args.bundle}: bundle must be a JSON object")
        reports = [_bundle_report(args.thm, bundle, args.tol, args.lip_safety, args.bundle)]
        doc: Any = reports[0].to_json()
    else:
        cfg = _config(args)
        result = run_bounds(cfg, args.tol, lip_safety=args.lip_safety)
        reports = [e["report"] for e in result.entries if not args.thm or e["theorem"] == f"thm{args.thm}"]
        doc = result.to_json()
    _emit(doc, args.json)
    return EXIT_OK if all(r.holds for r in reports) else EXIT_BOUND


def _config(args: argparse.Namespace) -> ExperimentConfig:
    doc = _read_json(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in ("n", "variants", "rounds", "seed") if getattr(args, k, None) is not None}
    return ExperimentConfig.from_json({**doc, **overrides})


def cmd_calibrate(args: argparse.Namespace) -> int:
    result = run_calibration(_config(args), args.out, record_timestamps=args.timestamps)
    _emit({"out": args.out, "names": result.names, "summary": result.summary}, args.json)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    sys.stdout.write(report(args.artifacts, svg=not args.no_svg))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="interpequiv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, func, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--json", metavar="PATH", help="write the JSON result here instead of stdout")
        return p

    rasp = sub.add_parser("rasp", help="parse, run, or compile a RASP program")
    rasp_sub = rasp.add_subparsers(dest="rasp_cmd", required=True)
    for name, help_text in (("parse", "check a program"), ("run", "interpret a program on one input"),
                            ("compile", "compile to a causal model")):
        p = rasp_sub.add_parser(name, help=help_text)
        p.set_defaults(func=cmd_rasp)
        p.add_argument("program")
        p.add_argument("--json", metavar="PATH")
        if name == "run":
            p.add_argument("--input", required=True, help="space- or comma-separated tokens")
        if name == "compile":
            p.add_argument("--max-len", type=int, default=5)
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--out", required=True)

    p = command("gen-impls", cmd_gen_impls, "generate verified variants of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--strategies", help="JSON list of strategies")
    p.add_argument("--budget", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = command("reprs", cmd_reprs, "extract layer representations")
    p.add_argument("--model", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--rho", help="JSON layer pooling")
    p.add_argument("--out", required=True)

    p = command("reprdist", cmd_reprdist, "distance between two saved representations")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)

    p = command("congruity", cmd_congruity, "congruity between two models")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--bootstrap", type=int, default=20)
    p.add_argument("--impl-cfg", dest="impl_cfg", help="JSON list of strategies")
    p.add_argument("--seed", type=int, default=0)

    p = command("congruity-matrix", cmd_congruity_matrix, "pairwise congruity of implementation sets")
    p.add_argument("--groups", required=True, help="directory of implementation-set directories")
    p.add_argument("--task", help="defaults to the first set's task.json")
    p.add_argument("--rounds", type=int, default=100)
    p.add_argument("--bootstrap", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help=f"CSV with columns {', '.join(CSV_HEADER)}")

    p = command("equiv", cmd_equiv, "equivalence distance and compressions of two sets")
    p.add_argument("--set-a", dest="set_a", required=True)
    p.add_argument("--set-b", dest="set_b", required=True)
    p.add_argument("--phi", help="JSON distillation map (default: the output variable)")
    p.add_argument("--task", required=True)

    p = command("bounds", cmd_bounds, "check the theorem bounds")
    p.add_argument("--thm", choices=("1", "2", "3"))
    p.add_argument("--bundle", help="JSON bundle of measured terms")
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--lip-safety", dest="lip_safety", type=float, default=2.0)
    _experiment_args(p)

    p = command("calibrate", cmd_calibrate, "run the calibration study")
    _experiment_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--timestamps", action="store_true", help="record wall-clock times in the manifest")

    p = command("report", cmd_report, "summarise a calibration directory")
    p.add_argument("artifacts")
    p.add_argument("--no-svg", dest="no_svg", action="store_true")
    return parser


def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--n", type=int)
    p.add_argument("--variants", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except InterpEquivError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT_BY_CODE.get(exc.code, EXIT_VALIDATION)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (KeyError, TypeError) as exc:
        print(f"error: malformed input ({exc})", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
