"""Command line entry point: ``racl <command> [options]``.

Commands write only below ``--out``; each run directory also receives the
resolved ``config.toml`` so the run can be repeated from it.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from collections import defaultdict
from pathlib import Path

from . import verify as V
from .attacks import EPS_SWEEP, AttackConfig, accuracy, robust_accuracy, transfer_eval
from .dataio import (
    HISTORY_COLUMNS,
    RESULT_COLUMNS,
    load_config,
    load_genotype,
    read_csv,
    save_config,
    write_csv,
)
from .search import SearchConfig, build_dataset, load_model, retrain, save_model, search_loop

log = logging.getLogger("racl")

STEPS_SWEEP = (1, 5, 10, 20, 50, 100)
ABLATION_COLUMNS = ("run", "seed", "constrained", "eta", "rho", "epochs", "final_ce", "final_c",
                    "final_theta", "final_mu", "final_var", "prob_bound_le_lambda", "clean_acc", "adv_acc")
EPS_SWEEP_COLUMNS = ("run", "attack", "steps", "epsilon", "clean_acc", "adv_acc")
STEPS_SWEEP_COLUMNS = ("run", "attack", "epsilon", "steps", "clean_acc", "adv_acc")


class CliError(Exception):
    """Problem with the command line inputs; reported without a traceback."""


def _existing(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}")
    return p


def _config(args) -> SearchConfig:
    path = _existing(getattr(args, "config", None), "config file")
    cfg = load_config(path, SearchConfig) if path else SearchConfig()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------
# commands

def cmd_search(args) -> int:
    cfg = _config(args)
    resume = _existing(args.resume, "checkpoint")
    out = _out(args)
    save_config(out / "config.toml", cfg)
    genotype, history, run = search_loop(cfg, out, resume=resume)
    last = history[-1] if history else None
    if run.lambda_star is not None:
        cfg = dataclasses.replace(run.cfg, lambda_star=run.lambda_star)
        save_config(out / "config.toml", cfg)
    if last:
        log.info("final c=%.4g theta=%.4g mu=%.4f Pr=%.3f", last["c"], last["theta"], last["mu"],
                 last["prob_bound_le_lambda"])
    print(f"genotype written to {out / 'genotype.json'}")
    return 0


def cmd_retrain(args) -> int:
    genotype = load_genotype(_existing(args.genotype, "genotype"))
    cfg = _config(args)
    out = _out(args)
    save_config(out / "config.toml", cfg)
    curve_path = out / "curve.csv"
    curve: list[dict] = []

    def on_epoch(row):
        curve.append(row)
        write_csv(curve_path, ("epoch", "loss", "clean_acc"), curve)
        log.info("epoch %d loss=%.4f clean=%.4f", row["epoch"], row["loss"], row["clean_acc"])

    model, curve = retrain(genotype, cfg, adversarial=args.adv, on_epoch=on_epoch)
    save_model(out / "model.npz", model, genotype, cfg, len(curve), args.adv)
    print(f"model written to {out / 'model.npz'}")
    return 0


def cmd_attack(args) -> int:
    model, meta = load_model(_existing(args.model, "model"))
    cfg = SearchConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["config"].items()})
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    data = build_dataset(cfg)
    attack = AttackConfig(kind=args.attack, epsilon=args.eps, steps=args.steps, step_size=args.step_size,
                          seed=cfg.seed)
    out = _out(args)
    save_config(out / "config.toml", cfg)
    if args.source_model:
        source, _ = load_model(_existing(args.source_model, "source model"))
        acc = transfer_eval(source, model, data.x_test, data.y_test, attack)
        rows = [{"attack": f"transfer-{attack.kind}", "epsilon": attack.epsilon,
                 "steps": 1 if attack.kind == "fgsm" else attack.steps, "seed": attack.seed,
                 "clean_acc": accuracy(model, data.x_test, data.y_test), "adv_acc": acc}]
    else:
        steps = () if attack.kind == "fgsm" else STEPS_SWEEP
        res = robust_accuracy(model, data.x_test, data.y_test, attack, epsilons=EPS_SWEEP, steps_list=steps)
        rows = res["rows"]
    write_csv(out / "results.csv", RESULT_COLUMNS, rows)
    head = rows[0]
    print(f"{head['attack']} eps={head['epsilon']:.4f} steps={head['steps']}: "
          f"clean={head['clean_acc']:.4f} adv={head['adv_acc']:.4f}")
    return 0


def _report_cases(cases: list[V.Case], out: Path | None, name: str) -> int:
    failed = [c for c in cases if not c.ok]
    print(V.format_table(cases))
    if out is not None:
        write_csv(out / f"{name}.csv", ("suite", "name", "metric", "value", "tol", "ok"),
                  [{**dataclasses.asdict(c), "ok": c.ok} for c in cases])
    if failed:
        print(f"\n{len(failed)} of {len(cases)} checks outside tolerance:")
        print(V.format_table(failed))
        return 1
    print(f"\nall {len(cases)} checks within tolerance")
    return 0


def cmd_verify(args) -> int:
    kwargs = {"seed": args.seed}
    if args.n is not None:
        kwargs["n"] = args.n
    cases = V.SUITES[args.suite](**kwargs)
    return _report_cases(cases, _out(args) if args.out else None, f"verify_{args.suite}")


def cmd_gradcheck(args) -> int:
    targets = list(V.GRADCHECK_TARGETS) if args.target == "all" else [args.target]
    cases = []
    for t in targets:
        cases += V.GRADCHECK_TARGETS[t](seed=args.seed)
    return _report_cases(cases, _out(args) if args.out else None, f"gradcheck_{args.target}")


# ----------------------------------------------------------------------
# report

def _run_name(path: Path) -> str:
    return path.parent.name if path.is_file() else path.name


def _history_dir(p: Path) -> Path:
    return p.parent if p.is_file() else p


def ablation_rows(run_dirs: list[Path]) -> list[dict]:
    rows = []
    for d in run_dirs:
        history = read_csv(d / "history.csv", HISTORY_COLUMNS)
        cfg = load_config(d / "config.toml", SearchConfig) if (d / "config.toml").exists() else SearchConfig()
        last = history[-1] if history else {}
        row = {"run": d.name, "seed": cfg.seed, "constrained": cfg.constrained, "eta": cfg.eta,
               "rho": cfg.rho if cfg.constrained else 0.0, "epochs": len(history),
               "final_ce": last.get("ce", math.nan), "final_c": last.get("c", math.nan),
               "final_theta": last.get("theta", math.nan), "final_mu": last.get("mu", math.nan),
               "final_var": last.get("var", math.nan),
               "prob_bound_le_lambda": last.get("prob_bound_le_lambda", math.nan),
               "clean_acc": math.nan, "adv_acc": math.nan}
        results = d / "results.csv"
        if results.exists():
            res = read_csv(results, RESULT_COLUMNS)
            if res:
                row["clean_acc"], row["adv_acc"] = res[0]["clean_acc"], res[0]["adv_acc"]
        rows.append(row)
    return sorted(rows, key=lambda r: r["run"])


def sweep_rows(result_files: list[Path]) -> tuple[list[dict], list[dict]]:
    """Split result rows into an epsilon sweep and an iteration sweep.

    A group of rows that varies only in epsilon (same run, attack and steps)
    is an epsilon sweep; one that varies only in steps is an iteration sweep.
    """
    by_eps: dict[tuple, dict] = defaultdict(dict)
    by_steps: dict[tuple, dict] = defaultdict(dict)
    for f in result_files:
        run = _run_name(f)
        for r in read_csv(f, RESULT_COLUMNS):
            by_eps[(run, r["attack"], int(r["steps"]))][float(r["epsilon"])] = r
            by_steps[(run, r["attack"], float(r["epsilon"]))][int(r["steps"])] = r
    eps_rows, step_rows = [], []
    for (run, attack, steps), pts in sorted(by_eps.items()):
        if len(pts) < 2:
            continue
        for eps in sorted(pts):
            r = pts[eps]
            eps_rows.append({"run": run, "attack": attack, "steps": steps, "epsilon": eps,
                             "clean_acc": r["clean_acc"], "adv_acc": r["adv_acc"]})
    for (run, attack, eps), pts in sorted(by_steps.items()):
        if len(pts) < 2:
            continue
        for steps in sorted(pts):
            r = pts[steps]
            step_rows.append({"run": run, "attack": attack, "epsilon": eps, "steps": steps,
                              "clean_acc": r["clean_acc"], "adv_acc": r["adv_acc"]})
    return eps_rows, step_rows


def cmd_report(args) -> int:
    histories = [_existing(p, "history") for p in args.history or []]
    results = [_existing(p, "results") for p in args.results or []]
    out = _out(args)
    written = []
    if histories:
        dirs = [_history_dir(p) for p in histories]
        for d in dirs:
            _existing(str(d / "history.csv"), "history")
        write_csv(out / "ablation.csv", ABLATION_COLUMNS, ablation_rows(dirs))
        written.append("ablation.csv")
    if results:
        eps_rows, step_rows = sweep_rows(results)
        write_csv(out / "eps_sweep.csv", EPS_SWEEP_COLUMNS, eps_rows)
        write_csv(out / "steps_sweep.csv", STEPS_SWEEP_COLUMNS, step_rows)
        written += ["eps_sweep.csv", "steps_sweep.csv"]
    if not written:
        raise CliError("report needs --history and/or --results")
    print("wrote " + ", ".join(str(out / w) for w in written))
    return 0


# ----------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="racl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="run a (constrained) architecture search")
    s.add_argument("--config", help="TOML file with SearchConfig fields")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="continue from a search checkpoint")
    s.set_defaults(func=cmd_search)

    r = sub.add_parser("retrain", help="train a genotype from scratch")
    r.add_argument("--genotype", required=True)
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.add_argument("--adv", action="store_true", help="PGD adversarial training")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_retrain)

    a = sub.add_parser("attack", help="white-box or transfer evaluation of a model")
    a.add_argument("--model", required=True)
    a.add_argument("--attack", choices=("fgsm", "pgd", "mim"), default="pgd")
    a.add_argument("--eps", type=float, default=8 / 255)
    a.add_argument("--steps", type=int, default=20)
    a.add_argument("--step-size", type=float, default=2 / 255)
    a.add_argument("--source-model", help="craft examples on this model instead (transfer attack)")
    a.add_argument("--seed", type=int)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)

    v = sub.add_parser("verify", help="Monte Carlo oracle suites")
    v.add_argument("--suite", choices=tuple(V.SUITES), required=True)
    v.add_argument("--n", type=int, help="Monte Carlo sample count")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--target", choices=("all",) + tuple(V.GRADCHECK_TARGETS), default="all")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gradcheck)

    rp = sub.add_parser("report", help="sweep and ablation tables from finished runs")
    rp.add_argument("--history", nargs="+", help="run directories or their history.csv files")
    rp.add_argument("--results", nargs="+", help="results.csv files from the attack command")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"racl {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
