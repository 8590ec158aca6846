"""Command-line entry point: ``fermatmon <verb> [options]``."""
import argparse
import json
import sys

from . import experiments as ex
from .fermat import FermatSketch


def _config(args, kind):
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    data["kind"] = kind
    for key in ("seed", "trials", "output"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    return ex.ExperimentConfig.from_dict(data)


def _emit(rows, cfg, writer):
    if cfg.output:
        writer(rows, cfg.output)
    else:
        writer(rows, sys.stdout)


def cmd_threshold_sweep(args):
    cfg = _config(args, "threshold-sweep")
    if args.flows:
        cfg.n_flows = args.flows
    rows = ex.run_threshold_sweep(cfg)
    _emit(rows, cfg, ex.write_csv)
    x = ex.crossing_point(rows)
    print(f"# 50% crossing at {x:.3f} buckets/flow" if x else "# no 50% crossing in range",
          file=sys.stderr)


def cmd_loss_sweep(args):
    cfg = _config(args, "loss-sweep")
    if args.axis:
        cfg.axes = args.axis
    _emit(ex.run_loss_sweep(cfg), cfg, ex.write_csv)


def cmd_shift_scenario(args):
    cfg = _config(args, "shift-scenario")
    records = ex.run_shift_scenario(cfg)
    _emit(records, cfg, ex.write_jsonl)
    for row in ex.settle_report(records):
        print(f"# phase {row['phase']}: {row['mode']}, settled after {row['latency']} epoch(s)",
              file=sys.stderr)


def cmd_accuracy(args):
    cfg = _config(args, "accuracy")
    if args.flows:
        cfg.n_flows = args.flows
    _emit(ex.run_accuracy(cfg), cfg, ex.write_csv)


def load_sketch(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:3] == b"FSK":
        return FermatSketch.from_bytes(blob)
    return FermatSketch.from_json(blob.decode())


def cmd_decode(args):
    out = load_sketch(args.sketch).decode()
    doc = {"status": out.status, "flows": {str(f): n for f, n in sorted(out.flowset.items())},
           "residual_nonzero_buckets": out.residual_nonzero_buckets}
    json.dump(doc, sys.stdout, indent=None if args.compact else 2)
    sys.stdout.write("\n")
    return 0 if out.success else 1


def build_parser():
    p = argparse.ArgumentParser(prog="fermatmon", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, trials=True):
        sp.add_argument("--config", help="JSON file with ExperimentConfig fields")
        sp.add_argument("--seed", type=int)
        if trials:
            sp.add_argument("--trials", type=int)
        sp.add_argument("--output", "-o", help="output file (default: stdout)")

    sp = sub.add_parser("threshold-sweep", help="decode success rate vs buckets per flow (CSV)")
    common(sp)
    sp.add_argument("--flows", type=int, help="flows per sketch (default 10000)")
    sp.set_defaults(func=cmd_threshold_sweep)

    sp = sub.add_parser("loss-sweep", help="minimum buckets for 99%% delta decoding (CSV)")
    common(sp)
    sp.add_argument("--axis", action="append", choices=["victims", "loss_rate", "flows"])
    sp.set_defaults(func=cmd_loss_sweep)

    sp = sub.add_parser("shift-scenario", help="scripted attention-shifting timeline (JSON lines)")
    common(sp, trials=False)
    sp.set_defaults(func=cmd_shift_scenario)

    sp = sub.add_parser("accuracy", help="measurement-task accuracy vs ground truth (CSV)")
    common(sp)
    sp.add_argument("--flows", type=int)
    sp.set_defaults(func=cmd_accuracy)

    sp = sub.add_parser("decode", help="decode a serialized FermatSketch (JSON or binary)")
    sp.add_argument("sketch")
    sp.add_argument("--compact", action="store_true")
    sp.set_defaults(func=cmd_decode)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
