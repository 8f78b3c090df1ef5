"""Command-line entry point: ``oplrp <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 engine error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from typing import Any, Sequence

import numpy as np

from .engine import Engine, InitMode, init_relevance, oracle_propagate
from .errors import LRPError
from .graph import Graph, build_aux_graph
from .metrics import (
    OCCLUSIONS,
    abpc,
    comprehensiveness_sufficiency,
    coverage_report,
    heatmap_2d,
    mean_curve,
    morf_lerf,
    write_attribution_csv,
    write_curves_csv,
    write_pgm,
)
from .rules import COMPOSITES, RuleConfig
from .zoo import ZOO, ModelSpec, get_model, run_forward

log = logging.getLogger("oplrp")

UNSUPPORTED_KIND = "FancyNorm"


class UsageError(Exception):
    pass


def load_rules(spec: str | None, default: str = "epsilon") -> RuleConfig:
    """A composite name or a path to a rules JSON file."""
    spec = spec or default
    if spec in COMPOSITES:
        return COMPOSITES[spec]
    if not os.path.exists(spec):
        raise UsageError(f"--rules: {spec!r} is neither a composite {sorted(COMPOSITES)} nor a file")
    try:
        return RuleConfig.load(spec)
    except (ValueError, TypeError, json.JSONDecodeError) as e:
        raise UsageError(f"--rules {spec}: {e}") from None


def inject_unsupported(model: ModelSpec) -> ModelSpec:
    """Copy of ``model`` whose output passes through a kind with no rule."""

    def build(g: Graph, x: Any, p: dict) -> Any:
        out = model.build(g, x, p)
        return g.record_custom(UNSUPPORTED_KIND, lambda t: [t * 1.0], [out])[0]

    return ModelSpec(model.name + "+" + UNSUPPORTED_KIND, model.params, model.input_shape, build, model.layers)


def _model(args: argparse.Namespace) -> ModelSpec:
    try:
        m = get_model(args.model, seed=args.seed, bias=not getattr(args, "no_bias", False))
    except ValueError as e:
        raise UsageError(str(e)) from None
    if getattr(args, "inject_unsupported", False):
        m = inject_unsupported(m)
    return m


def _input(args: argparse.Namespace, model: ModelSpec) -> np.ndarray:
    path = getattr(args, "input", None)
    if not path:
        return model.sample_input(args.seed)
    try:
        if path.endswith(".npy"):
            x = np.load(path)
        else:
            with open(path) as fh:
                x = np.asarray(json.load(fh), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise UsageError(f"--input {path}: {e}") from None
    if x.shape != model.input_shape:
        raise UsageError(f"--input shape {x.shape} != model input shape {model.input_shape}")
    return x


def _out_dir(args: argparse.Namespace) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _write_json(path: str, data: Any) -> None:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2)


def _attribute(model: ModelSpec, x: np.ndarray, rules: RuleConfig, mode: str, target: int | None,
               lenient: bool, cache: bool) -> tuple[Any, Any, int]:
    out, g = run_forward(model, x)
    t = int(np.argmax(out)) if target is None else target
    r0 = init_relevance(out, t, mode)
    aux = build_aux_graph(g)
    res = Engine(g, rules, aux, lenient=lenient).run(r0)
    if cache:
        # second pass replays the recorded promise paths
        res = Engine(g, rules, aux, cache=res.cache, lenient=lenient).run(r0)
    return res, g, t


def cmd_attribute(args: argparse.Namespace) -> int:
    model = _model(args)
    x = _input(args, model)
    rules = load_rules(args.rules)
    res, g, t = _attribute(model, x, rules, args.mode, args.target, args.lenient, args.cache)
    out = _out_dir(args)
    write_attribution_csv(os.path.join(out, "attribution.csv"), res.relevance)
    write_pgm(os.path.join(out, "heatmap.pgm"), heatmap_2d(res.relevance))
    stats = res.stats.to_json()
    stats.update(target=t, conservative=res.conservative, cache_hit=res.cache_hit)
    _write_json(os.path.join(out, "stats.json"), stats)
    _write_json(os.path.join(out, "events.json"), res.events)
    print(f"wrote attribution.csv, heatmap.pgm, stats.json, events.json to {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = _model(args)
    rules = load_rules(args.rules, "gamma")
    n = int(np.prod(model.input_shape))
    per = args.occlude_per_step or max(1, n // args.steps)
    if args.steps * per > n:
        raise UsageError(f"{args.steps} steps x {per} features exceed {n} input features")
    rng = np.random.default_rng(args.seed)
    scores: dict[str, list[float]] = {"lrp": [], "random": []}
    comp_suff: dict[str, list[tuple[float, float]]] = {"lrp": [], "random": []}
    curves: dict[str, list] = {"morf": [], "lerf": []}
    for i in range(args.samples):
        x = model.sample_input(rng)
        res, _, t = _attribute(model, x, rules, args.mode, None, args.lenient, False)

        def score(z: np.ndarray, t: int = t) -> float:
            return float(run_forward(model, z)[0].ravel()[t])

        for name, attr in (("lrp", res.relevance), ("random", rng.standard_normal(x.shape))):
            morf, lerf = morf_lerf(score, x, attr, args.steps, per, args.occlusion)
            scores[name].append(abpc(morf, lerf))
            comp_suff[name].append(comprehensiveness_sufficiency(morf, lerf))
            if name == "lrp":
                curves["morf"].append(morf)
                curves["lerf"].append(lerf)
    out = _out_dir(args)
    write_curves_csv(os.path.join(out, "curves.csv"), mean_curve(curves["morf"], "MoRF"), mean_curve(curves["lerf"], "LeRF"))
    report: dict[str, Any] = {"samples": args.samples, "steps": args.steps, "occlude_per_step": per,
                              "occlusion": args.occlusion, "rules": rules.to_json()}
    for name in scores:
        s = np.asarray(scores[name])
        cs = np.asarray(comp_suff[name])
        report[name] = {
            "abpc": float(s.mean()),
            "abpc_stderr": float(s.std(ddof=1) / np.sqrt(s.size)) if s.size > 1 else 0.0,
            "comprehensiveness": float(cs[:, 0].mean()),
            "sufficiency": float(cs[:, 1].mean()),
        }
    _write_json(os.path.join(out, "metrics.json"), report)
    print(json.dumps({k: report[k]["abpc"] for k in scores}))
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    model = _model(args)
    x = _input(args, model)
    _, g = run_forward(model, x)
    g.save(args.graph_out, include_values=True)
    print(f"wrote {args.graph_out}")
    return 0


def cmd_coverage(args: argparse.Namespace) -> int:
    if args.graph:
        try:
            g = Graph.load(args.graph)
        except (OSError, ValueError, KeyError) as e:
            raise UsageError(f"--graph {args.graph}: {e}") from None
    elif args.model:
        model = _model(args)
        _, g = run_forward(model, model.sample_input(args.seed))
    else:
        raise UsageError("coverage needs --graph or --model")
    rep = coverage_report(g).to_json()
    print(json.dumps(rep, indent=2))
    if args.out:
        _write_json(os.path.join(_out_dir(args), "coverage.json"), rep)
    return 0


def cmd_stats(args: argparse.Namespace) -> int:
    model = _model(args)
    x = _input(args, model)
    res, _, _ = _attribute(model, x, load_rules(args.rules), args.mode, args.target, args.lenient, False)
    stats = res.stats.to_json()
    print(json.dumps(stats, indent=2))
    if args.out:
        _write_json(os.path.join(_out_dir(args), "stats.json"), stats)
    return 0


def cmd_selftest(args: argparse.Namespace) -> int:
    worst = 0.0
    t0 = time.perf_counter()
    names = [args.model] if args.model else sorted(ZOO)
    for name in names:
        for comp in ("epsilon", "gamma", "attnlrp"):
            for seed in range(args.seeds):
                model = get_model(name, seed=seed)
                x = model.sample_input(seed + 10_000)
                out, g = run_forward(model, x, shadow=True)
                r0 = init_relevance(out, int(np.argmax(out)), args.mode)
                aux = build_aux_graph(g)
                got = Engine(g, COMPOSITES[comp], aux).run(r0).relevance
                ref = oracle_propagate(g, COMPOSITES[comp], r0, aux=aux)
                worst = max(worst, float(np.max(np.abs(got - ref))))
    ok = worst <= 1e-9
    print(json.dumps({"max_abs_diff": worst, "pass": ok, "seconds": round(time.perf_counter() - t0, 3)}))
    return 0 if ok else 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", default="toy_cnn", help=f"zoo model: {', '.join(sorted(ZOO))}")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--rules", help="composite name or rules JSON path")
    common.add_argument("--mode", default=InitMode.TARGET_LOGIT_VALUE.value, choices=[m.value for m in InitMode])
    common.add_argument("--lenient", action="store_true", help="unsupported kinds propagate as identity")
    common.add_argument("--cache", action=argparse.BooleanOptionalAction, default=False,
                        help="replay recorded promise paths on a second pass")
    common.add_argument("--out", default="out")
    common.add_argument("--inject-unsupported", action="store_true", help=argparse.SUPPRESS)
    common.add_argument("--no-bias", action="store_true", help="build the bias-free model variant")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="oplrp", description="Operation-level relevance propagation with promises.")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("attribute", parents=[common], help="attribution CSV, PGM heatmap, stats JSON")
    a.add_argument("--input", help=".npy or JSON input fixture")
    a.add_argument("--target", type=int, help="flat output index (default: argmax)")
    a.set_defaults(fn=cmd_attribute)

    e = sub.add_parser("eval", parents=[common], help="MoRF/LeRF curves and ABPC")
    e.add_argument("--samples", type=int, default=200)
    e.add_argument("--steps", type=int, default=16)
    e.add_argument("--occlude-per-step", type=int)
    e.add_argument("--occlusion", default="mean-fill", choices=OCCLUSIONS)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("coverage", parents=[common], help="rule coverage of a graph JSON or zoo model")
    c.add_argument("--graph", help="graph JSON path")
    c.set_defaults(fn=cmd_coverage, model=None, out=None)

    s = sub.add_parser("stats", parents=[common], help="promise statistics JSON")
    s.add_argument("--input")
    s.add_argument("--target", type=int)
    s.set_defaults(fn=cmd_stats, out=None)

    x = sub.add_parser("export", parents=[common], help="write a zoo model's graph JSON")
    x.add_argument("--input")
    x.add_argument("graph_out")
    x.set_defaults(fn=cmd_export)

    t = sub.add_parser("selftest", parents=[common], help="promise engine vs oracle on the zoo")
    t.add_argument("--seeds", type=int, default=5)
    t.set_defaults(fn=cmd_selftest, model=None)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except LRPError as e:
        print(f"engine error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
