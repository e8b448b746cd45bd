"""Command-line interface: generate, train, eval, probe, report.

Exit codes: 0 success, 2 validation failure, 3 oracle disagreement,
4 diverged (non-finite) training loss.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

from . import checkpoint as ckpt
from .constraints import ConstraintError
from .corpus import (
    BREAK_TOKEN,
    BreakpointAnnotation,
    Dataset,
    DatasetError,
    Example,
    load_dataset,
    save_dataset,
    tokenize,
    validate_example,
)
from .evaluation import (
    ABLATION_TOGGLES,
    EvalError,
    MetricsReport,
    ablation_suite,
    build_dump,
    collect_conflict_pairs,
    em_accuracy,
    efficiency_report,
    global_consistency,
    learning_curve,
    prop_accuracy,
    rows_to_csv,
    tiered_eval,
)
from .model import ModelConfig, ModelError
from .report import ReportError, render_ablation_svg, render_curve_svg, render_metrics
from .training import TrainConfig, TrainingDivergedError, train
from .worldgen.kinship import (
    DEFAULT_NAME_POOLS,
    KinshipConfig,
    generate_kinship_dataset,
)
from .worldgen.microworld import (
    GenerationError,
    MicroworldConfig,
    SPLIT_SEED_OFFSET,
    gen_hard_split,
    generate_conflict_dataset,
    generate_microworld_dataset,
    split_cfg,
)
from .worldgen.oracles import (
    OracleDisagreement,
    check_conflict_pair,
    check_kinship_example,
    check_microworld_example,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ORACLE = 3
EXIT_DIVERGED = 4


def _default_seed() -> int:
    try:
        return int(os.environ.get("BPT_SEED", "0"))
    except ValueError:
        return 0


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bpt",
        description="Belief tracking lab: synthetic stories, a single-read "
        "breakpoint encoder, and consistency evaluation.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="JSON or key=value config file; flags override it")
    common.add_argument("--seed", type=int, default=_default_seed(),
                        help="base PRNG seed (env BPT_SEED is the fallback)")

    g = sub.add_parser("generate", parents=[common],
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                       help="generate a dataset with oracle validation")
    g.add_argument("task", choices=("kinship", "microworld", "conflict"))
    g.add_argument("--out", type=Path, required=True, help="output directory")
    g.add_argument("--train", type=int, default=500, help="training examples (or pairs)")
    g.add_argument("--dev", type=int, default=100, help="dev examples (or pairs)")
    g.add_argument("--test", type=int, default=100, help="test examples (or pairs)")
    g.add_argument("--k-train", type=_int_list, default=[2, 3, 4, 5],
                   help="kinship: comma list of train/dev chain lengths")
    g.add_argument("--k-test", type=_int_list, default=[6, 7, 8],
                   help="kinship: comma list of held-out test chain lengths")
    g.add_argument("--n-events", type=int, default=20,
                   help="micro-world: events (= breakpoints) per story")
    g.add_argument("--n-qa", type=int, default=2, help="QA pairs per micro-world story")
    g.add_argument("--held-out", default=None,
                   help="micro-world composition (e.g. coref.give) for a hardqa split")
    g.add_argument("--max-constraints", type=int, default=None,
                   help="override constraints per story")
    g.add_argument("--skip-oracle", action="store_true",
                   help="skip oracle re-derivation (testing only)")

    t = sub.add_parser("train", parents=[common],
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                       help="train a model; writes checkpoint + JSONL log")
    t.add_argument("--data", type=Path, required=True,
                   help="directory with train.jsonl and dev.jsonl")
    t.add_argument("--ckpt-out", type=Path, required=True, help="checkpoint path")
    t.add_argument("--log-out", type=Path, default=None,
                   help="training log path (default: <ckpt>.log.jsonl)")
    t.add_argument("--d-model", type=int, default=128, help="embedding width")
    t.add_argument("--n-layers", type=int, default=4, help="encoder depth")
    t.add_argument("--n-heads", type=int, default=4, help="attention heads")
    t.add_argument("--d-ffn", type=int, default=512, help="feed-forward width")
    t.add_argument("--dropout", type=float, default=0.1, help="dropout rate")
    t.add_argument("--max-len", type=int, default=256, help="maximum story tokens")
    t.add_argument("--decoder-layers", type=int, default=2, help="decoder depth")
    t.add_argument("--no-brk-self-attn", action="store_true",
                   help="ablate the breakpoint self-attention block")
    t.add_argument("--prop-pooling", choices=("prefix", "mean"), default="prefix",
                   help="proposition pooling position")
    t.add_argument("--lambda-prop", type=float, default=1.0, help="proposition loss weight")
    t.add_argument("--lambda-qa", type=float, default=1.0, help="QA loss weight")
    t.add_argument("--lambda-gen", type=float, default=0.1, help="generation loss weight")
    t.add_argument("--lr", type=float, default=3e-4, help="learning rate")
    t.add_argument("--batch-size", type=int, default=8, help="stories per batch")
    t.add_argument("--max-epochs", type=int, default=20, help="epoch budget")
    t.add_argument("--warmup-steps", type=int, default=500, help="linear LR warmup steps")
    t.add_argument("--qa-warmup-epochs", type=int, default=5,
                   help="epochs before the proposition loss turns on in joint QA runs")
    t.add_argument("--weight-decay", type=float, default=0.001, help="L2 weight decay")
    t.add_argument("--patience", type=int, default=5,
                   help="early stopping patience (0 disables)")
    t.add_argument("--multipass", action="store_true",
                   help="train the multi-pass baseline head instead")
    t.add_argument("--no-event-gen", action="store_true",
                   help="ablate the event-generation auxiliary loss")
    t.add_argument("--no-abstraction", action="store_true",
                   help="ablate the abstraction auxiliary loss")

    e = sub.add_parser("eval", parents=[common],
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                       help="evaluate a checkpoint; writes report + dump")
    e.add_argument("--data", type=Path, required=True, help="dataset file (.jsonl)")
    e.add_argument("--ckpt", type=Path, required=True, help="checkpoint path")
    e.add_argument("--mode", choices=("single", "multipass"), default="single",
                   help="belief prediction mode")
    e.add_argument("--out", type=Path, required=True, help="output directory")
    e.add_argument("--gold-as-pred", action="store_true",
                   help="self-test: score gold labels as if predicted")
    e.add_argument("--efficiency", action="store_true",
                   help="also measure both-mode encoder counts and wall-clock")
    e.add_argument("--curve", type=_float_list, default=None,
                   help="train-fraction list; runs the learning-curve harness "
                        "(needs train.jsonl/dev.jsonl next to --data)")
    e.add_argument("--ablations", default=None,
                   help=f"comma list from {','.join(ABLATION_TOGGLES)}; runs the "
                        "ablation harness")
    e.add_argument("--batch-size", type=int, default=8, help="evaluation batch size")

    p = sub.add_parser("probe", parents=[common],
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                       help="interactive belief probing over one story")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint path")
    p.add_argument("--story-file", type=Path, required=True,
                   help="text file containing a story with [B] markers")

    r = sub.add_parser("report", parents=[common],
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter,
                       help="render SVG charts and CSV tables from results")
    r.add_argument("--metrics", type=Path, default=None, help="metrics JSON to render")
    r.add_argument("--curve-csv", type=Path, default=None,
                   help="learning-curve CSV to render")
    r.add_argument("--ablation-csv", type=Path, default=None,
                   help="ablation table CSV to render")
    r.add_argument("--out", type=Path, required=True, help="output directory")
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    if "--config" not in argv:
        return argv
    path = Path(argv[argv.index("--config") + 1])
    if not path.exists():
        parser.error(f"config file {path} does not exist")
    text = path.read_text(encoding="utf-8")
    values: dict[str, str] = {}
    stripped = text.lstrip()
    if stripped.startswith("{"):
        values = {k: v for k, v in json.loads(text).items()}
    else:
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                parser.error(f"config file {path}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            values[k.strip()] = v.strip()
    # config-derived flags go right after the subcommand so that explicit
    # flags, parsed later, override them
    extra: list[str] = []
    for k, v in values.items():
        flag = "--" + str(k).replace("_", "-")
        if isinstance(v, bool):
            if v:
                extra.append(flag)
        else:
            extra.extend([flag, str(v)])
    return argv[:1] + extra + argv[1:]


def _write_meta(out: Path, payload: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "meta.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def cmd_generate(args) -> int:
    out: Path = args.out
    counts = {"train": args.train, "dev": args.dev, "test": args.test}
    files: dict[str, Dataset] = {}
    if args.task == "kinship":
        for split, count in counts.items():
            pools = DEFAULT_NAME_POOLS[split]
            cfg = KinshipConfig(
                names_female=tuple(pools["female"]),
                names_male=tuple(pools["male"]),
                seed=args.seed + SPLIT_SEED_OFFSET[split],
                split=split,
                **({"max_constraints": args.max_constraints}
                   if args.max_constraints is not None else {}),
            )
            ks = tuple(args.k_test if split == "test" else args.k_train)
            files[split] = generate_kinship_dataset(cfg, count, ks)
            if not args.skip_oracle:
                for ex in files[split].examples:
                    check_kinship_example(ex, cfg)
    else:
        base = MicroworldConfig(
            n_events=args.n_events,
            n_qa=args.n_qa,
            seed=args.seed,
            **({"max_constraints": args.max_constraints}
               if args.max_constraints is not None else {}),
        )
        if args.task == "microworld":
            if args.held_out:
                tr, dv, hard = gen_hard_split(
                    base, args.held_out, args.train, args.dev, args.test
                )
                files = {"train": tr, "dev": dv, "hardqa": hard}
            else:
                for split, count in counts.items():
                    files[split] = generate_microworld_dataset(split_cfg(base, split), count)
            if not args.skip_oracle:
                for ds in files.values():
                    cfg_check = replace(base, n_events=args.n_events)
                    for ex in ds.examples:
                        check_microworld_example(ex, cfg_check)
        else:  # conflict
            for split, count in counts.items():
                files[split] = generate_conflict_dataset(split_cfg(base, split), count)
            if not args.skip_oracle:
                for ds in files.values():
                    pairs = collect_conflict_pairs(ds)
                    for pair in pairs:
                        check_conflict_pair(pair.plausible, pair.implausible, base)
    for ds in files.values():
        for ex in ds.examples:
            violations = validate_example(ex)
            if violations:
                raise DatasetError(f"{ex.id}: {violations[0]}")
    out.mkdir(parents=True, exist_ok=True)
    for split, ds in files.items():
        save_dataset(ds, out / f"{split}.jsonl")
    meta = {
        "task": args.task,
        "seed": args.seed,
        "counts": {k: len(ds.examples) for k, ds in files.items()},
        "flags": {
            k: (str(v) if isinstance(v, Path) else v)
            for k, v in vars(args).items()
            if k not in ("command", "config") and v is not None
        },
    }
    _write_meta(out, meta)
    print(f"wrote {sum(len(d.examples) for d in files.values())} examples to {out}")
    return EXIT_OK


def _model_cfg(args) -> ModelConfig:
    return ModelConfig(
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_ffn=args.d_ffn,
        dropout=args.dropout,
        max_len=args.max_len,
        decoder_layers=args.decoder_layers,
        brk_self_attn=not args.no_brk_self_attn,
        prop_pooling=args.prop_pooling,
    )


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(
        lambda_prop=args.lambda_prop,
        lambda_qa=args.lambda_qa,
        lambda_gen=args.lambda_gen,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        warmup_steps=args.warmup_steps,
        qa_warmup_epochs=args.qa_warmup_epochs,
        weight_decay=args.weight_decay,
        early_stop_patience=args.patience,
        seed=args.seed,
        multipass=args.multipass,
        event_gen=not args.no_event_gen,
        abstraction=not args.no_abstraction,
    )


def cmd_train(args) -> int:
    train_ds = load_dataset(args.data / "train.jsonl")
    dev_ds = load_dataset(args.data / "dev.jsonl")
    model_cfg = _model_cfg(args)
    train_cfg = _train_cfg(args)
    log_path = args.log_out or args.ckpt_out.with_suffix(".log.jsonl")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    args.ckpt_out.parent.mkdir(parents=True, exist_ok=True)
    with log_path.open("w", encoding="utf-8", newline="\n") as fh:
        def log_cb(record: dict) -> None:
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")
            fh.flush()

        result = train(train_ds, dev_ds, model_cfg, train_cfg, callbacks=[log_cb])
    extra = {
        "flags": {
            k: (str(v) if isinstance(v, Path) else v)
            for k, v in vars(args).items()
            if k not in ("command", "config") and v is not None
        },
        "train_data": ckpt.file_hash(args.data / "train.jsonl"),
        "best_epoch": result.best_epoch,
        "best_metric": result.best_metric,
    }
    ckpt.save_checkpoint(result.model, args.ckpt_out, extra=extra)
    print(
        f"best dev metric {result.best_metric:.4f} at epoch {result.best_epoch}; "
        f"checkpoint {args.ckpt_out}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    model = ckpt.load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    provenance = {
        "checkpoint": ckpt.file_hash(args.ckpt),
        "dataset": ckpt.file_hash(args.data),
    }
    t0 = time.perf_counter()
    dump, encodes = build_dump(
        model, dataset, mode=args.mode, batch_size=args.batch_size,
        provenance=provenance, gold_as_pred=args.gold_as_pred,
    )
    wall = time.perf_counter() - t0
    report = MetricsReport(
        prop_accuracy=prop_accuracy(dump, dataset),
        em_accuracy=em_accuracy(dump, dataset),
        rho=global_consistency(dump, dataset),
        story_encodes_per_example=encodes,
        wall_clock_s=wall,
    )
    pairs = collect_conflict_pairs(dataset)
    if pairs:
        plaus, consist, verif = tiered_eval(pairs, dump)
        report.tiered = {
            "plausibility": plaus, "consistency": consist, "verifiability": verif,
        }
    if args.efficiency and not args.gold_as_pred:
        report.extra["efficiency"] = efficiency_report(model, dataset, args.batch_size)
    args.out.mkdir(parents=True, exist_ok=True)
    if args.curve or args.ablations:
        train_path = args.data.parent / "train.jsonl"
        dev_path = args.data.parent / "dev.jsonl"
        if not train_path.exists() or not dev_path.exists():
            raise EvalError("--curve/--ablations need train.jsonl and dev.jsonl beside --data")
        harness_train = load_dataset(train_path)
        harness_dev = load_dataset(dev_path)
        extra = ckpt.checkpoint_extra(args.ckpt).get("flags", {})
        model_cfg = model.cfg
        train_cfg = TrainConfig(
            lambda_prop=extra.get("lambda_prop", 1.0),
            lambda_qa=extra.get("lambda_qa", 0.0),
            lambda_gen=extra.get("lambda_gen", 0.1),
            learning_rate=extra.get("lr", 3e-4),
            batch_size=extra.get("batch_size", 8),
            max_epochs=extra.get("max_epochs", 10),
            warmup_steps=extra.get("warmup_steps", 100),
            qa_warmup_epochs=extra.get("qa_warmup_epochs", 0),
            early_stop_patience=0,
            seed=args.seed,
        )
        if args.curve:
            rows = learning_curve(harness_train, harness_dev, model_cfg, train_cfg,
                                  fractions=args.curve)
            rows_to_csv(rows, args.out / "curve.csv")
        if args.ablations:
            toggles = [t.strip() for t in args.ablations.split(",") if t.strip()]
            rows = ablation_suite(harness_train, harness_dev, model_cfg, train_cfg,
                                  toggles=toggles)
            rows_to_csv(rows, args.out / "ablation.csv")
    report.save(args.out / "report.json")
    dump.save(args.out / "dump.jsonl")
    print(json.dumps({k: v for k, v in report.to_dict().items() if v is not None},
                     sort_keys=True))
    return EXIT_OK


def cmd_probe(args) -> int:
    model = ckpt.load_checkpoint(args.ckpt)
    text = args.story_file.read_text(encoding="utf-8")
    story_tokens = tuple(tokenize(text))
    positions = [i for i, t in enumerate(story_tokens) if t == BREAK_TOKEN]
    if not positions:
        raise DatasetError(f"{args.story_file}: story contains no {BREAK_TOKEN} markers")
    example = Example(
        id="probe",
        story_tokens=story_tokens,
        breakpoints=tuple(
            BreakpointAnnotation(index=k, token_position=p, propositions=())
            for k, p in enumerate(positions, start=1)
        ),
        constraints=(),
        qa=(),
        meta={},
    )
    m = len(positions)
    print(f"story with {m} breakpoints; enter '<breakpoint> <proposition>' or :quit")
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        if line == ":quit":
            break
        head, _, rest = line.partition(" ")
        try:
            j = int(head)
        except ValueError:
            print(f"expected '<breakpoint index> <proposition text>', got {line!r}")
            continue
        if not 1 <= j <= m or not rest.strip():
            print(f"breakpoint index {j} out of range 1..{m}" if rest.strip()
                  else "empty proposition")
            continue
        belief = model.predict_beliefs(example, [(j, tokenize(rest))])[0]
        e, c, u = belief.probabilities
        print(f"{belief.label.value}  E={e:.4f} C={c:.4f} U={u:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    if not any((args.metrics, args.curve_csv, args.ablation_csv)):
        raise ReportError("report needs --metrics, --curve-csv, or --ablation-csv")
    args.out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if args.metrics:
        written.extend(render_metrics(args.metrics, args.out))
    if args.curve_csv:
        out_svg = args.out / "curve.svg"
        render_curve_svg(args.curve_csv, out_svg)
        written.append(out_svg)
    if args.ablation_csv:
        out_svg = args.out / "ablation.svg"
        render_ablation_svg(args.ablation_csv, out_svg)
        written.append(out_svg)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


_HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    argv = _apply_config_file(parser, argv)
    args = parser.parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except OracleDisagreement as err:
        print(f"oracle disagreement: {err}", file=sys.stderr)
        return EXIT_ORACLE
    except TrainingDivergedError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetError, ConstraintError, EvalError, ModelError, ReportError,
            GenerationError, ckpt.CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
