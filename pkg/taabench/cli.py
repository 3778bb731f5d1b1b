#!/usr/bin/env python3
"""
Command-line entry point.

    taabench train    --config plan.yaml [--out DIR] [--export-dataset]
    taabench attack   --config plan.yaml --attack NAME [--surrogate NAME] [--samples N]
    taabench bench    --config plan.yaml [--seed N] [--threads N] [--out DIR]
    taabench list
    taabench selftest

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from taabench import dataset, harness
from taabench.attacks import ATTACKS, get_attack
from taabench.config import LOG_FORMAT, LOG_LEVEL, OUTPUT_DIR
from taabench.errors import ConfigError, UnknownNameError
from taabench.experiment_config import ExperimentPlan, default_attack, load_plan
from taabench.model_zoo import ARCHITECTURES
from taabench.utils.seeding import pick_samples

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
MAX_SEED = 2 ** 64


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taabench", description="Transferable adversarial attack bench")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment YAML file")
    common.add_argument("--seed", type=int, help="master seed (u64); overrides run.seed")
    common.add_argument("--out", type=Path, default=Path(OUTPUT_DIR), help="output directory")
    common.add_argument("--threads", type=int, help="worker threads; overrides run.threads")

    train = sub.add_parser("train", parents=[common], help="build and persist the model roster")
    train.add_argument("--export-dataset", action="store_true", help="also write the dataset as PGM files")

    attack = sub.add_parser("attack", parents=[common], help="run one attack on one surrogate and dump examples")
    attack.add_argument("--attack", required=True, help="attack label from the plan, or a registered attack name")
    attack.add_argument("--surrogate", help="surrogate model name (default: first surrogate)")
    attack.add_argument("--samples", type=int, help="number of test samples (default: run.samples)")

    sub.add_parser("bench", parents=[common], help="run the full plan and write reports")
    sub.add_parser("list", parents=[common], help="list attacks and architectures with their settings")
    sub.add_parser("selftest", parents=[common], help="run the invariant suite")
    return parser


def _plan(args) -> ExperimentPlan:
    if args.config is None:
        raise ConfigError(f"'{args.command}' needs --config <path>")
    if args.seed is not None and not 0 <= args.seed < MAX_SEED:
        raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {args.seed}")
    if args.threads is not None and args.threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {args.threads}")
    plan = load_plan(args.config, seed=args.seed)
    if args.threads is not None:
        plan = plan.model_copy(update={"run": plan.run.model_copy(update={"threads": args.threads})})
    return plan


def cmd_train(args) -> int:
    plan = _plan(args)
    spec = plan.dataset
    data = dataset.generate(spec.seed, spec.n_train, spec.n_test)
    if args.export_dataset:
        data.export(args.out / "dataset")
    roster = harness.build_roster(plan, data, args.out / "models")
    for name, model in roster.items():
        logger.info(f"📦 {name}: test accuracy {model.test_accuracy:.4f}")
    return EXIT_OK


def _resolve_attack_arg(plan: ExperimentPlan, name: str):
    for attack in plan.attacks:
        if attack.label == name:
            return attack
    for attack in plan.attacks:
        if attack.name == name:
            return attack
    if name in ATTACKS:
        return default_attack(plan, name)
    raise UnknownNameError("attack", name, set(ATTACKS) | {a.label for a in plan.attacks}, key="--attack")


def cmd_attack(args) -> int:
    plan = _plan(args)
    attack = _resolve_attack_arg(plan, args.attack)
    surrogates = [m.name for m in plan.surrogates]
    surrogate = args.surrogate or surrogates[0]
    if surrogate not in surrogates:
        raise UnknownNameError("surrogate", surrogate, surrogates, key="--surrogate")
    if args.samples is not None:
        if args.samples < 1:
            raise ConfigError(f"--samples must be >= 1, got {args.samples}")
        plan = plan.model_copy(update={"run": plan.run.model_copy(update={"samples": args.samples})})

    entry = get_attack(attack.name)
    needed = set(surrogates) if entry.multi_model else {surrogate}
    plan = plan.model_copy(update={"models": [m for m in plan.models if m.name in needed]})

    runner = harness.BenchRunner(plan, args.out, plan.run.threads)
    data = runner.prepare_dataset()
    runner.prepare_models()
    state = None
    if entry.prepare is not None:
        ctx = harness.attack_context(plan, attack, surrogate, runner.roster)
        logger.info(f"🧪 Preparing {attack.label} on {surrogate}")
        state = entry.prepare(ctx, data)

    sample_ids = pick_samples(len(data.test_labels), plan.run.samples, plan.run.seed)
    row, examples = runner.craft_row(attack, surrogate, sample_ids, state)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    x = np.stack([e.x for e in examples])
    x_adv = np.stack([e.x_adv for e in examples])
    np.savez_compressed(out / "examples.npz", x=x, x_adv=x_adv, delta=x_adv - x,
                        labels=np.array([e.label for e in examples]), sample_ids=sample_ids)
    fooled = sum(e.fooled_surrogate for e in examples)
    summary = {
        "attack": attack.label,
        "name": attack.name,
        "params": attack.params,
        "surrogate": surrogate,
        "members": row.members,
        "seed": plan.run.seed,
        "samples": len(examples),
        "white_box_fooled": fooled,
        "white_box_rate": fooled / len(examples),
        "max_linf": max(r.linf for r in row.records),
        "budget": plan.budget.model_dump(mode="json"),
        "records": [{"sample_id": r.sample_id, "label": r.label, "before": r.surrogate_before,
                     "after": r.surrogate_after, "linf": r.linf, "l2": r.l2, "stationary": r.stationary}
                    for r in row.records],
    }
    (out / "examples.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    logger.info(f"✅ {attack.label} on {surrogate}: fooled {fooled}/{len(examples)}; examples in {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    plan = _plan(args)
    report = harness.run(plan, threads=plan.run.threads, out_dir=args.out)
    harness.write_report(report, args.out)
    return EXIT_OK


def _describe_schema(schema) -> str:
    fields = []
    for name, info in schema.model_fields.items():
        default = info.get_default(call_default_factory=True)
        if hasattr(default, "model_dump"):
            default = default.model_dump()
        fields.append(f"{name}={default!r}")
    return ", ".join(fields) or "(no parameters)"


def cmd_list(args) -> int:
    print("Attacks:")
    for name, entry in ATTACKS.items():
        print(f"  {name:<10} [{entry.family}] {entry.description}")
        print(f"  {'':<10} params: {_describe_schema(entry.params_schema)}")
    print("\nArchitectures:")
    for arch_id, arch in ARCHITECTURES.items():
        kind = "adversarially trained" if arch.adversarial else "standard"
        print(f"  {arch_id:<14} {arch.parameter_count:>7} params, {kind}; taps: {', '.join(arch.tap_names)} "
              f"(default {arch.default_tap})")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from taabench.selftest import run_selftest

    return EXIT_OK if run_selftest(seed=args.seed or 0) else EXIT_RUNTIME


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "bench": cmd_bench,
    "list": cmd_list,
    "selftest": cmd_selftest,
}


def cli_main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=LOG_LEVEL, format=LOG_FORMAT)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        logger.error(f"❌ Configuration error: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return EXIT_RUNTIME


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
