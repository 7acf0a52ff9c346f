"""Command line entry point: ``connectprune {train,prune,finetune,analyze,experiment,verify}``.

Exit status is 0 on success, 1 on usage errors and 2 when a run fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .. import network as nw
from ..connectivity import Mode, detect_collapse, node_connectivity, normalize
from ..pruning import METHODS, PruneSpec, build_mask, score
from ..training import PRESETS, RegularizerConfig, TrainConfig, evaluate, fine_tune, generate_toy, train
from .experiment import accuracy_summary, load_plan, run_experiment
from .properties import SUITES, run_property_suite

log = logging.getLogger("connectprune")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sizes(text: str) -> tuple[int, ...]:
    try:
        sizes = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if len(sizes) < 2 or min(sizes) < 1:
        raise argparse.ArgumentTypeError("need at least two positive layer sizes")
    return sizes


def _reg(args, default: str = "none") -> RegularizerConfig:
    base = PRESETS[getattr(args, "preset", None) or default]
    return RegularizerConfig(
        base.l1 if args.lambda1 is None else args.lambda1,
        base.connect if args.lambda2 is None else args.lambda2,
        base.l2 if args.lambda3 is None else args.lambda3,
    )


def _data(args):
    return generate_toy(args.n_train, args.data_seed, args.n_test)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="connectprune", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path)

    data = _Parser(add_help=False)
    data.add_argument("--n-train", type=int, default=10_000)
    data.add_argument("--n-test", type=int, default=2_000)
    data.add_argument("--data-seed", type=int, default=0)

    lambdas = _Parser(add_help=False)
    lambdas.add_argument("--lambda1", type=float, help="L1 coefficient")
    lambdas.add_argument("--lambda2", type=float, help="log-connectivity coefficient")
    lambdas.add_argument("--lambda3", type=float, help="squared L2 coefficient")

    p = sub.add_parser("train", parents=[common, data, lambdas], help="train a toy network")
    p.add_argument("--sizes", type=_sizes, default=(6, 5, 5, 5, 1))
    p.add_argument("--preset", choices=sorted(PRESETS), default="none")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--warmup-epochs", type=int, default=0)
    p.add_argument("--scaling", action="store_true", help="attach a scaling layer after every hidden layer")

    p = sub.add_parser("prune", parents=[common, data, lambdas], help="score and mask a model")
    p.add_argument("model", type=Path)
    p.add_argument("--prune-method", choices=METHODS, default="magnitude")
    p.add_argument("--prune-fraction", type=float, default=0.96)
    p.add_argument("--scope", choices=("local", "global"), default="local")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=None)
    p.add_argument("--granularity", choices=("weight", "node"), default="weight",
                   help="loss-aware grouping")
    p.add_argument("--conn-samples", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--emit-scores", type=Path)

    p = sub.add_parser("finetune", parents=[common, data, lambdas], help="fine-tune a masked model")
    p.add_argument("model", type=Path)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--keep-regularizers", action="store_true")

    p = sub.add_parser("analyze", help="report connectivity of a model")
    p.add_argument("model", type=Path)
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.NORMALIZED.value)
    p.add_argument("--out", type=Path, help="write the connectivity profile as JSON")

    p = sub.add_parser("experiment", help="multi-seed train/prune/fine-tune sweep")
    p.add_argument("--plan", default="default", help="plan file or shipped plan name")
    p.add_argument("--seeds", type=int, help="number of seeds (overrides the plan)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("verify", help="run a property suite")
    p.add_argument("suite", choices=sorted(SUITES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("."))
    return parser


def cmd_train(args) -> int:
    if args.out is None:
        raise UsageError("train needs --out")
    data = _data(args)
    net = nw.init_random(args.sizes, args.seed, scaling="hidden" if args.scaling else None)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                      warmup_epochs=args.warmup_epochs, seed=args.seed)
    trained, metrics = train(net, data, _reg(args), cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    nw.save(trained, args.out / "model.bin")
    (args.out / "metrics.jsonl").write_text(metrics.to_jsonl())
    last = metrics.epochs[-1]
    print(f"test_acc={last.test_acc:.4f} phi_tot={last.phi_tot:.6g} -> {args.out / 'model.bin'}")
    return 0


def cmd_prune(args) -> int:
    net = nw.load(args.model)
    data = _data(args)
    n = min(args.batch_size, data.x_train.shape[0])
    reg = _reg(args)
    kwargs = dict(x=data.x_train[:n], y=data.y_train[:n], lam=reg.connect,
                  granularity=args.granularity, conn_samples=args.conn_samples, seed=args.seed)
    if args.mode is not None:
        kwargs["mode"] = Mode(args.mode)
    table = score(net, args.prune_method, **kwargs)
    mask = build_mask(table, PruneSpec(args.prune_fraction, args.scope))
    pruned = nw.apply_mask(net, mask)
    out = args.out or args.model.with_name(args.model.stem + ".pruned.bin")
    nw.save(pruned, out)
    if args.emit_scores:
        args.emit_scores.write_text(json.dumps(table.to_dict(), indent=1) + "\n")
    report = detect_collapse(pruned)
    acc = evaluate(pruned, data.x_test, data.y_test)[1] if data.x_test.size else float("nan")
    print(f"kept={mask.kept()} phi_tot={report.phi_total:.6g} collapse={report.collapsed} test_acc={acc:.4f} -> {out}")
    return 0


def cmd_finetune(args) -> int:
    net = nw.load(args.model)
    data = _data(args)
    cfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    reg = _reg(args)
    tuned, metrics = fine_tune(net, data, cfg, reg, keep_regularizers=args.keep_regularizers)
    out_dir = args.out or args.model.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    nw.save(tuned, out_dir / "finetuned.bin")
    (out_dir / "finetune_metrics.jsonl").write_text(metrics.to_jsonl())
    last = metrics.epochs[-1]
    print(f"test_acc={last.test_acc:.4f} phi_tot={last.phi_tot:.6g} -> {out_dir / 'finetuned.bin'}")
    return 0


def cmd_analyze(args) -> int:
    net = nw.load(args.model)
    report = detect_collapse(net)
    profile = node_connectivity(normalize(net, args.mode))
    print(f"phi_tot ({args.mode}) = {profile.phi_total:.12g}")
    print(f"collapse = {report.collapsed}")
    for m in report.layers:
        flag = "  EMPTY" if m.collapsed else ""
        print(f"  {m.kind:5s} layer {m.layer}: l1_mass={m.l1_mass:.6g} surviving={m.surviving}/{m.size}{flag}")
    if args.out:
        payload = {"collapse": report.to_dict(), "profile": profile.to_dict()}
        args.out.write_text(json.dumps(payload, indent=1) + "\n")
    return 0


def cmd_experiment(args) -> int:
    plan = load_plan(args.plan)
    if args.seeds is not None:
        plan = plan.with_seeds(range(args.seeds))
    result = run_experiment(plan, str(args.out), workers=args.workers)
    for key, group in result.report.groups.items():
        summary = accuracy_summary(group["accuracies"])
        print(f"{key:24s} {group['counts']} mean_acc={summary.get('mean', float('nan')):.4f}")
    print(f"report -> {args.out / 'cluster_report.json'}")
    return 0


def cmd_verify(args) -> int:
    report = run_property_suite(args.suite, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / f"verify_{args.suite}.json"
    path.write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    status = "PASS" if report.passed else "FAIL"
    print(f"{args.suite}: {status} {report.n_passed}/{len(report.cases)} cases {report.summary} -> {path}")
    return 0 if report.passed else 2


COMMANDS = {
    "train": cmd_train,
    "prune": cmd_prune,
    "finetune": cmd_finetune,
    "analyze": cmd_analyze,
    "experiment": cmd_experiment,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"connectprune: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"connectprune: {args.command} failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
