"""Command-line entry point: synth, extract-graph, pretrain, finetune, evaluate, count-params, report.

Every option can also come from a flat ``key = value`` config file passed
with --config; command-line flags win.  Each run writes its resolved config
next to its outputs.  Exit codes: 0 ok, 1 usage error, 2 data or contract error.
"""
import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict

PROG = "vesselclip"
RESOLVED_NAME = "resolved_config.txt"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config files ---------------------------------------------------------------------

def read_config(path):
    """Parse ``key = value`` lines; '#' starts a comment.  Keys use underscores or dashes."""
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in out:
            raise UsageError(f"{path}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def write_config(path, resolved):
    with open(path, "w", encoding="utf-8") as fh:
        for k in sorted(resolved):
            v = resolved[k]
            if callable(v):
                continue
            fh.write(f"{k} = {'' if v is None else v}\n")


def _options(parser):
    return {a.dest: a for a in parser._actions if a.dest not in ("help", "config", "command")}


def resolve(parser, argv):
    """Parse ``argv`` with config-file values layered under explicit flags."""
    opts = _options(parser)
    defaults = {k: a.default for k, a in opts.items()}
    func = parser.get_default("func")
    parser.set_defaults(**{k: None for k in opts})
    ns = parser.parse_args(argv)
    resolved = dict(defaults)
    if ns.config:
        for key, raw in read_config(ns.config).items():
            if key not in opts:
                raise UsageError(f"unknown config key {key!r} (known: {', '.join(sorted(opts))})")
            resolved[key] = _convert(opts[key], raw, key)
    for k in opts:
        if getattr(ns, k) is not None:
            resolved[k] = getattr(ns, k)
    missing = [k for k, a in opts.items() if a.required is False and getattr(a, "_needed", False)
               and resolved[k] is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return argparse.Namespace(func=func, **resolved)


def _convert(action, raw, key):
    if isinstance(action, argparse._StoreTrueAction):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"config key {key!r}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    try:
        value = action.type(raw) if action.type else raw
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: {exc}") from exc
    if action.choices and value not in action.choices:
        raise UsageError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
    return value


def _need(action):
    # required in effect, but may be satisfied by a config file
    action._needed = True
    return action


# -- subcommands ------------------------------------------------------------------------

def _threads(args):
    return max(1, int(args.threads or 1))


def cmd_synth(args):
    from . import synthdata

    if args.n < 50:
        raise DataError(f"cohort needs at least 50 subjects, got {args.n}")
    t0 = time.perf_counter()
    cohort = synthdata.gen_cohort(args.n, args.seed, out=args.out, prevalence=args.prevalence,
                                  workers=_threads(args))
    write_config(os.path.join(args.out, RESOLVED_NAME), vars(args))
    print(f"wrote {args.n} subjects to {args.out} (prevalence {cohort.labels.mean():.4f}, "
          f"{time.perf_counter() - t0:.1f} s)")


def _extract_one(job):
    from .imageio import read_mask
    from .vesselgraph import extract_graph, save_graph

    src, dst, prune = job
    save_graph(extract_graph(read_mask(src), prune=prune), dst)


def cmd_extract_graph(args):
    if not os.path.isdir(args.input):
        raise DataError(f"mask directory not found: {args.input}")
    names = sorted(n for n in os.listdir(args.input) if n.lower().endswith((".pgm", ".png")))
    if not names:
        raise DataError(f"no .pgm/.png masks in {args.input}")
    os.makedirs(args.out, exist_ok=True)
    jobs = [(os.path.join(args.input, n), os.path.join(args.out, os.path.splitext(n)[0] + ".json"), args.prune)
            for n in names]
    if _threads(args) > 1:
        with ProcessPoolExecutor(_threads(args)) as ex:
            list(ex.map(_extract_one, jobs, chunksize=32))
    else:
        for j in jobs:
            _extract_one(j)
    write_config(os.path.join(args.out, RESOLVED_NAME), vars(args))
    print(f"extracted {len(jobs)} graphs into {args.out}")


def _load_data(path):
    from .tasks import load_cohort

    if not os.path.isfile(os.path.join(path, "cohort.csv")):
        raise DataError(f"{path}: no cohort.csv")
    return load_cohort(path)


def cmd_pretrain(args):
    from .contrastive import Architecture, ContrastiveConfig, PairedData, Pretrainer, ContrastiveModel
    from .encoders import GatConfig

    data = _load_data(args.data)
    if not data.has(args.modality):
        raise DataError(f"{args.data}: no {args.modality} data")
    fit = data.fit_rows  # unlabeled pretraining never sees test rows
    tab = data.tabular()[fit]
    if args.modality == "graph":
        feats = data.graph_features()
        paired = PairedData(tab, "graph", graphs=[feats[i] for i in fit])
    else:
        paired = PairedData(tab, args.modality, images=lambda idx: data.images(args.modality, fit[idx]))
    cfg = ContrastiveConfig(tau=args.tau, lam=args.lam, batch_size=args.batch_size, mode=args.mode,
                            epochs=args.epochs, lr=args.lr, seed=args.seed, augment=not args.no_augment)
    gat = asdict(GatConfig(pooling=args.pooling))
    arch = Architecture(args.modality, tab.shape[1], gat=gat)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    if args.resume:
        trainer = Pretrainer.load(args.resume, paired)
    else:
        trainer = Pretrainer(ContrastiveModel(arch, seed=args.seed), paired, cfg)
    log_path = args.log or os.path.splitext(args.out)[0] + ".log.jsonl"
    with open(log_path, "a" if args.resume else "w") as fh:
        def echo(rec):
            print(f"epoch {rec['epoch']}: loss {rec['mean_loss']:.4f} ({rec['wall_seconds']:.1f} s)")
        trainer.run(log_file=fh, on_epoch=echo, max_steps=args.max_steps)
    trainer.save(args.out)
    write_config(os.path.join(out_dir, RESOLVED_NAME), vars(args))
    print(f"checkpoint {args.out} after {trainer.step_count} steps")


def _ft_config(args):
    from .tasks import FinetuneConfig

    return FinetuneConfig(lr=args.lr, encoder_lr_scale=args.encoder_lr_scale, freeze_encoders=args.freeze,
                          batch_size=args.batch_size, max_epochs=args.epochs, patience=args.patience,
                          seed=args.seed, neg_ratio=args.neg_ratio, max_labels=args.max_labels,
                          from_scratch=args.from_scratch, permute_labels=args.permute_labels)


def cmd_finetune(args):
    from .tasks import finetune, save_finetuned

    data = _load_data(args.data)
    if args.method.startswith("cl-") and not args.checkpoint and not args.from_scratch:
        raise DataError(f"{args.method} needs --checkpoint (or --from-scratch)")
    if args.checkpoint and not os.path.isfile(args.checkpoint):
        raise DataError(f"checkpoint not found: {args.checkpoint}")
    os.makedirs(args.out, exist_ok=True)

    def echo(rec):
        print(f"epoch {rec['epoch']}: loss {rec['mean_loss']:.4f} val auroc {rec['val_auroc']:.4f}")

    res = finetune(data, args.method, _ft_config(args), checkpoint=args.checkpoint, log_fn=echo)
    res.report.save(os.path.join(args.out, "report.json"), roc_csv=os.path.join(args.out, "roc.csv"))
    save_finetuned(os.path.join(args.out, "model.bin"), res)
    with open(os.path.join(args.out, "history.jsonl"), "w") as fh:
        for h in res.history:
            fh.write(json.dumps(h, sort_keys=True) + "\n")
    write_config(os.path.join(args.out, RESOLVED_NAME), vars(args))
    print(f"{args.method}: test AUROC {res.report.auroc:.4f} (best epoch {res.best_epoch})")


def cmd_evaluate(args):
    from .tasks import CohortSplit, evaluate, load_finetuned

    data = _load_data(args.data)
    model, header = load_finetuned(args.model)
    if header["tab_dim"] != data.tabular().shape[1]:
        raise DataError(f"model expects {header['tab_dim']} tabular columns, cohort has {data.tabular().shape[1]}")
    split = CohortSplit.from_assignment(data.assignment, data.labels)
    idx = {"test": split.test, "val": split.val, "train": split.train}[args.split]
    cfg = header["config"]["finetune"]
    report = evaluate(model, data, idx, data.labels, header["method"], cfg["seed"], header["config_hash"])
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.model)), f"eval_{args.split}.json")
    report.save(out, roc_csv=os.path.splitext(out)[0] + ".csv")
    write_config(os.path.join(os.path.dirname(os.path.abspath(out)), RESOLVED_NAME), vars(args))
    print(f"{header['method']} on {args.split}: AUROC {report.auroc:.4f}")


def param_table(tab_dim, image_encoder="resnet50"):
    """Rows (label, pretrain params, finetune params) for the image and graph pipelines."""
    from .encoders import CnnConfig, pipeline_param_counts, resnet50_config

    cnn = resnet50_config() if image_encoder == "resnet50" else CnnConfig(in_channels=3)
    c = pipeline_param_counts(tab_dim, cnn_cfg=cnn)
    # fine-tuning drops both projectors and adds a 2-way affine head on the concatenated embeddings
    from .encoders import GatConfig

    gat_out = GatConfig().d_out
    tab_out = 1024
    ft_img = c["cnn"] + c["tabular"] + (cnn.d_out + tab_out) * 2 + 2
    ft_graph = c["gat"] + c["tabular"] + (gat_out + tab_out) * 2 + 2
    return [("cl-raw / cl-prob", c["image_pipeline"], ft_img), ("cl-graph", c["graph_pipeline"], ft_graph)]


def cmd_count_params(args):
    tab_dim = args.tab_dim
    if args.data:
        tab_dim = _load_data(args.data).tabular().shape[1]
    if not tab_dim:
        raise UsageError("give --tab-dim or --data")
    rows = param_table(tab_dim, args.image_encoder)
    head = ("method", "pretrain_params", "finetune_params")
    text = [f"{head[0]:<18}{head[1]:>16}{head[2]:>16}"]
    text += [f"{m:<18}{p:>16,}{f:>16,}" for m, p, f in rows]
    ratio = rows[1][1] / rows[0][1]
    text.append(f"graph / image pretraining parameters: {ratio:.3f}")
    print("\n".join(text))
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        from .dataprep import write_csv

        write_csv(args.out, list(head), [[m, str(p), str(f)] for m, p, f in rows])


def cmd_report(args):
    from .tasks import EvalReport, format_report

    paths = []
    for p in args.reports:
        if os.path.isdir(p):
            for root, _, files in os.walk(p):
                paths += [os.path.join(root, f) for f in files if f == "report.json"]
        else:
            paths.append(p)
    if not paths:
        raise DataError("no EvalReport files found")
    reports = []
    for p in sorted(paths):
        try:
            with open(p) as fh:
                reports.append(EvalReport.from_json(fh.read()))
        except (OSError, ValueError, TypeError, KeyError) as exc:
            raise DataError(f"{p}: not an EvalReport ({exc})") from exc
    text, rows = format_report(reports)
    print(text, end="")
    if args.out:
        from .dataprep import write_csv

        write_csv(args.out, rows[0], rows[1:])


# -- parser ------------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog=PROG, description="Vessel-graph / image + tabular contrastive learning pipeline.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="flat key = value file; flags override it")
        sp.add_argument("--threads", type=int, default=1, help="worker processes")
        sp.set_defaults(func=fn)
        return sp

    s = add("synth", cmd_synth, "generate a synthetic cohort directory")
    s.add_argument("--n", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=7)
    _need(s.add_argument("--out"))
    s.add_argument("--prevalence", type=float, default=0.10)

    s = add("extract-graph", cmd_extract_graph, "binary masks -> vessel graph JSON")
    _need(s.add_argument("--in", dest="input"))
    _need(s.add_argument("--out"))
    s.add_argument("--prune", type=float, default=3.0)

    s = add("pretrain", cmd_pretrain, "contrastive pretraining of imaging + tabular encoders")
    _need(s.add_argument("--data"))
    s.add_argument("--modality", choices=("raw", "prob", "graph"), default="graph")
    _need(s.add_argument("--out"))
    s.add_argument("--tau", type=float, default=0.1)
    s.add_argument("--lam", type=float, default=0.5)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--mode", choices=("as-written", "standard"), default="as-written")
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pooling", choices=("mean", "max", "sum"), default="mean")
    s.add_argument("--no-augment", action="store_true", default=False)
    s.add_argument("--resume", help="continue from a pretraining checkpoint")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--log", help="JSON-lines epoch log (default: next to --out)")

    s = add("finetune", cmd_finetune, "supervised fine-tuning and test evaluation")
    _need(s.add_argument("--data"))
    s.add_argument("--method", choices=("tabular-nn", "multimodal-nn", "cl-raw", "cl-prob", "cl-graph"),
                   default="cl-graph")
    s.add_argument("--checkpoint")
    _need(s.add_argument("--out"))
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--encoder-lr-scale", type=float, default=0.1)
    s.add_argument("--freeze", action="store_true", default=False)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--patience", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--neg-ratio", type=float, default=1.0)
    s.add_argument("--max-labels", type=int)
    s.add_argument("--from-scratch", action="store_true", default=False)
    s.add_argument("--permute-labels", action="store_true", default=False)

    s = add("evaluate", cmd_evaluate, "score a fine-tuned model on a split")
    _need(s.add_argument("--data"))
    _need(s.add_argument("--model"))
    s.add_argument("--split", choices=("test", "val", "train"), default="test")
    s.add_argument("--out")

    s = add("count-params", cmd_count_params, "trainable parameter table for both pipelines")
    s.add_argument("--tab-dim", type=int)
    s.add_argument("--data")
    s.add_argument("--image-encoder", choices=("resnet50", "desk"), default="resnet50")
    s.add_argument("--out")

    s = add("report", cmd_report, "aggregate EvalReports into a method table")
    s.add_argument("reports", nargs="+", help="report.json files or directories holding them")
    s.add_argument("--out", help="CSV path")
    return p


def run(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format=f"{PROG}: warning: %(message)s")
    parser = build_parser()
    try:
        if not argv or argv[0] not in parser._subparsers._group_actions[0].choices:
            if argv and argv[0] in ("-h", "--help"):
                parser.print_help()
                return 0
            raise UsageError(f"expected a subcommand, one of: {', '.join(parser._subparsers._group_actions[0].choices)}")
        sub = parser._subparsers._group_actions[0].choices[argv[0]]
        if any(a in ("-h", "--help") for a in argv[1:]):
            sub.print_help()
            return 0
        args = resolve(sub, argv[1:])
        args.command = argv[0]
        args.func(args)
        return 0
    except UsageError as exc:
        print(f"{PROG}: usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ValueError, KeyError, OSError) as exc:
        print(f"{PROG}: data error: {exc}", file=sys.stderr)
        return 2
    except AssertionError as exc:
        print(f"{PROG}: contract error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
