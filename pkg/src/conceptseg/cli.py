"""Command-line interface.

Subcommands: run, gen-stream, report, sweep, affinity, grad-check.
Exit codes: 0 success, 1 runtime failure (one-line cause on stderr),
2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .config import MODES, build_config
from .errors import ValidationError


def _add_run_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--stream", default=None)
    p.add_argument("--lam", dest="lam", type=float, default=None)
    p.add_argument("--tau-c", dest="tau_c", type=float, default=None)
    p.add_argument("--tau-i", dest="tau_i", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.add_argument("--run-id", dest="run_id", default=None)
    p.add_argument("--concepts", dest="concepts_path", default=None)
    p.add_argument("--stream-path", dest="stream_path", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="any other config key override (repeatable)")


def _overrides_from(args: argparse.Namespace) -> dict:
    keys = ("mode", "seed", "stream", "lam", "tau_c", "tau_i", "epochs",
            "out_dir", "run_id", "concepts_path", "stream_path")
    ov = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set needs KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = v.strip()
    return ov


def _cmd_run(args: argparse.Namespace) -> int:
    from .harness import run_continual
    from .metrics import bwt

    cfg = build_config(args.config, _overrides_from(args))
    result = run_continual(cfg)
    avg = result.ledger.average_dsc()
    line = f"run {cfg.run_id}: average DSC {avg:.2f}"
    if result.ledger.T >= 2:
        line += f", BWT {bwt(result.ledger, cfg.bwt_form):.2f}"
    print(line)
    print(f"artifacts in {result.out_dir}")
    return 0


def _cmd_gen_stream(args: argparse.Namespace) -> int:
    from .concepts import save_concept_matrix, synth_concepts
    from .stream import STOCK_STREAMS, save_stream_specs

    if args.stream not in STOCK_STREAMS:
        raise ValidationError(
            f"unknown stream {args.stream!r}; available: {sorted(STOCK_STREAMS)}")
    specs = STOCK_STREAMS[args.stream]()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_stream_specs(specs, out / "stream.json")
    cm = synth_concepts([s.to_profile() for s in specs], d_t=args.d_t,
                        seed=args.seed)
    save_concept_matrix(cm, out / "concepts.json")
    print(f"wrote {out / 'stream.json'} and {out / 'concepts.json'}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    from .harness import reemit_report

    paths = reemit_report(args.run, bwt_form=args.bwt_form)
    for kind, path in sorted(paths.items()):
        print(f"{kind}: {path}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    from .harness import run_continual
    from .metrics import bwt

    cfg_base = build_config(args.config, _overrides_from(args))
    rows = []
    if args.lambdas:
        values = [float(v) for v in args.lambdas.split(",")]
        for lam in values:
            cfg = build_config(args.config, {
                **_overrides_from(args), "lam": lam,
                "run_id": f"sweep_lam{lam:g}_s{cfg_base.seed}"})
            result = run_continual(cfg)
            rows.append({"lam": lam, "avg_dsc": result.ledger.average_dsc(),
                         "bwt": bwt(result.ledger, cfg.bwt_form)})
            print(f"lambda={lam:g}: avg DSC {rows[-1]['avg_dsc']:.2f}, "
                  f"BWT {rows[-1]['bwt']:.2f}")
        key = "lam"
    elif args.blocks:
        for group in args.blocks.split(";"):
            blocks = group.strip()
            cfg = build_config(args.config, {
                **_overrides_from(args), "expandable_blocks": blocks,
                "run_id": f"sweep_blk{blocks.replace(',', '-')}_s{cfg_base.seed}"})
            result = run_continual(cfg)
            rows.append({"blocks": blocks,
                         "avg_dsc": result.ledger.average_dsc(),
                         "bwt": bwt(result.ledger, cfg.bwt_form)})
            print(f"blocks={blocks}: avg DSC {rows[-1]['avg_dsc']:.2f}, "
                  f"BWT {rows[-1]['bwt']:.2f}")
        key = "blocks"
    else:
        raise ValidationError("sweep needs --lambda or --blocks")
    out = Path(cfg_base.out_dir) / "sweep_summary.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=[key, "avg_dsc", "bwt"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"sweep summary: {out}")
    return 0


def _cmd_affinity(args: argparse.Namespace) -> int:
    from .config import RunConfig
    from .harness import load_model
    from .routing import affinity_report

    model = load_model(args.checkpoint, RunConfig())
    for site in model.bb.sites():
        if site.K == 0:
            continue
        report = affinity_report(site, model.cm, min(args.top, model.cm.M))
        print(f"site {site.site_id[0]}.{site.site_id[1]}:")
        for k, entries in enumerate(report):
            names = ", ".join(f"{n}={v:+.3f}" for n, v in entries)
            print(f"  adapter {k} (task {site.adapters[k].birth_task}): {names}")
    return 0


def _cmd_grad_check(args: argparse.Namespace) -> int:
    from .gradsuite import run_gradient_suites

    results = run_gradient_suites(seeds=args.seeds)
    failed = False
    for name, err in results.items():
        status = "ok" if err < 1e-4 else "FAIL"
        if err >= 1e-4:
            failed = True
        print(f"{name}: max relative error {err:.3e} [{status}]")
    return 1 if failed else 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="conceptseg",
        description="Concept-routed adapter experts with demand-driven growth")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one continual-learning experiment")
    _add_run_overrides(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_gen = sub.add_parser("gen-stream", help="write stream + concept files")
    p_gen.add_argument("--stream", default="default12")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--d-t", dest="d_t", type=int, default=32)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=_cmd_gen_stream)

    p_rep = sub.add_parser("report", help="re-emit tables from run logs")
    p_rep.add_argument("--run", required=True, help="run directory")
    p_rep.add_argument("--bwt-form", dest="bwt_form", default="additive",
                       choices=("additive", "ratio"))
    p_rep.set_defaults(func=_cmd_report)

    p_sweep = sub.add_parser("sweep", help="grid over lambda or expandable blocks")
    _add_run_overrides(p_sweep)
    p_sweep.add_argument("--lambda", dest="lambdas", default=None,
                         help="comma list, e.g. 0,0.3,0.7,1.0")
    p_sweep.add_argument("--blocks", default=None,
                         help="semicolon list of comma groups, e.g. '3;2,3;1,2,3'")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_aff = sub.add_parser("affinity", help="top concepts per adapter")
    p_aff.add_argument("--checkpoint", required=True)
    p_aff.add_argument("--top", type=int, default=3)
    p_aff.set_defaults(func=_cmd_affinity)

    p_gc = sub.add_parser("grad-check", help="gradient validation suites")
    p_gc.add_argument("--seeds", type=int, default=20)
    p_gc.set_defaults(func=_cmd_grad_check)

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except Exception as e:  # one-line cause, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
