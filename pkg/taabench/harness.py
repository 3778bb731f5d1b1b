"""
Benchmark engine: builds the model roster, crafts adversarial examples once
per (attack, surrogate) row and scores every target on the same x' set.

Phases run in order (dataset, models, generative attack preparation, rows)
and each logs its own start and completion. Samples inside a row are crafted
in parallel; every sample draws from its own seeded generator, so the
report does not depend on the thread count.
"""

import json
import logging
import time
import traceback
from concurrent.futures import ThreadPoolExecutor, as_completed
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pytz

from taabench import dataset, model_zoo
from taabench.attacks import AttackContext, get_attack
from taabench.config import OUTPUT_DIR, RUN_LOG_NAME
from taabench.dataset import GlyphDataset
from taabench.errors import BudgetViolationError, UnknownNameError
from taabench.experiment_config import ExperimentPlan, ModelSection, ResolvedAttack
from taabench.model_zoo import Model, predict
from taabench.models import (AdversarialExample, AttackBudget, AttackRow, SampleRecord, TransferCell,
                             TransferReport)
from taabench.utils.report_files import matrix_csv, report_json, summary_text
from taabench.utils.seeding import pick_samples, sample_rng

logger = logging.getLogger(__name__)

REPORT_FILES = ("matrix.csv", "report.json", "summary.txt")

# (attack, baseline): transfer of the first is expected to match or beat the second
DIRECTIONAL_CHECKS = (("mifgsm", "ifgsm"), ("ssa", "ifgsm"))


def build_roster(plan: ExperimentPlan, data: GlyphDataset, model_dir: Optional[Path] = None) -> Dict[str, Model]:
    """Load every model that names a weight file, train the rest (saving them under model_dir)."""
    roster: Dict[str, Model] = {}
    for section in plan.models:
        roster[section.name] = _obtain_model(section, data, plan, model_dir)
    return roster


def _obtain_model(section: ModelSection, data: GlyphDataset, plan: ExperimentPlan,
                  model_dir: Optional[Path]) -> Model:
    if section.path:
        model = model_zoo.load(section.path, expected_arch=section.arch)
        logger.info(f"📂 Loaded {section.name} ({section.arch}) from {section.path}")
    else:
        arch = model_zoo.get_architecture(section.arch)
        logger.info(f"🏋️ Training {section.name} ({section.arch}, {section.epochs} epochs, seed {section.seed})")
        if arch.adversarial:
            budget = AttackBudget(epsilon=section.adv_epsilon, iterations=section.adv_iterations)
            model = model_zoo.train_adversarial(arch, data, section.epochs, section.lr, section.seed, budget,
                                                section.batch_size)
        else:
            model = model_zoo.train(arch, data, section.epochs, section.lr, section.seed, section.batch_size)
    model.name = section.name
    if model_dir is not None and not section.path:
        model_zoo.save(model, Path(model_dir) / f"{section.name}.taaw")
    return model


def attack_context(plan: ExperimentPlan, attack: ResolvedAttack, surrogate: str,
                   roster: Dict[str, Model]) -> AttackContext:
    """Bind one resolved attack to one surrogate (and its ensemble partners)."""
    entry = get_attack(attack.name)
    params = entry.params_schema.model_validate(attack.params)
    partners: List[Model] = []
    if entry.multi_model:
        names = params.partners
        if names is None:
            names = [m.name for m in plan.surrogates]
        partners = [roster[name] for name in names if name != surrogate]
    if getattr(params, "layer", None) is not None:
        roster[surrogate].arch.check_tap(params.layer)
    return AttackContext(roster[surrogate], plan.budget.to_budget(), params, partners)


class BenchRunner:
    def __init__(self, plan: ExperimentPlan, out_dir=None, threads: Optional[int] = None,
                 roster: Optional[Dict[str, Model]] = None, data: Optional[GlyphDataset] = None):
        self.plan = plan
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.threads = threads or plan.run.threads
        self.roster = dict(roster) if roster else None
        self.data = data
        self.session_id = f"bench_{datetime.now(pytz.utc).strftime('%Y%m%d_%H%M%S')}"
        self.budget = plan.budget.to_budget()

    # ------------------------------------------------------------------ phases

    def prepare_dataset(self) -> GlyphDataset:
        if self.data is None:
            spec = self.plan.dataset
            logger.info(f"🧩 Generating dataset (seed {spec.seed}, {spec.n_train} train / {spec.n_test} test)")
            self.data = dataset.generate(spec.seed, spec.n_train, spec.n_test)
        return self.data

    def prepare_models(self) -> Dict[str, Model]:
        if self.roster is None:
            model_dir = self.out_dir / "models" if self.out_dir is not None else None
            self.roster = build_roster(self.plan, self.prepare_dataset(), model_dir)
        missing = [m.name for m in self.plan.models if m.name not in self.roster]
        if missing:
            raise UnknownNameError("model", missing[0], self.roster)
        return self.roster

    def prepare_states(self) -> Dict[Tuple[str, str], object]:
        """Train or load generators; one per (attack label, surrogate)."""
        states: Dict[Tuple[str, str], object] = {}
        for attack in self.plan.attacks:
            entry = get_attack(attack.name)
            if entry.prepare is None:
                continue
            for surrogate in self.plan.surrogates:
                ctx = attack_context(self.plan, attack, surrogate.name, self.roster)
                logger.info(f"🧪 Preparing {attack.label} on {surrogate.name}")
                states[(attack.label, surrogate.name)] = entry.prepare(ctx, self.prepare_dataset())
        return states

    # -------------------------------------------------------------------- rows

    def craft_row(self, attack: ResolvedAttack, surrogate: str, sample_ids: np.ndarray,
                  state=None) -> Tuple[AttackRow, List[AdversarialExample]]:
        entry = get_attack(attack.name)
        ctx = attack_context(self.plan, attack, surrogate, self.roster)
        ctx.state = state
        images, labels = self.data.test_images, self.data.test_labels
        master = self.plan.run.seed

        def craft(position: int) -> Tuple[int, AdversarialExample]:
            idx = int(sample_ids[position])
            rng = sample_rng(master, idx, attack.label)
            return position, entry.craft(ctx, images[idx], int(labels[idx]), rng)

        start = time.time()
        results: List[Tuple[int, AdversarialExample]] = []
        with ThreadPoolExecutor(max_workers=self.threads) as executor:
            futures = [executor.submit(craft, position) for position in range(len(sample_ids))]
            for future in as_completed(futures):
                results.append(future.result())
        results.sort(key=lambda item: item[0])
        examples = [example for _, example in results]
        wall_time = time.time() - start

        for idx, example in zip(sample_ids, examples):
            if not self.budget.holds(example.x_adv, example.x):
                raise BudgetViolationError(attack.label, int(idx), example.linf, self.budget.epsilon)

        row = AttackRow(
            attack=attack.label,
            surrogate=surrogate,
            members=[m.name for m in ctx.members] if entry.multi_model else [surrogate],
            wall_time=wall_time,
            settings={"name": attack.name, "params": attack.params},
        )
        for idx, example in zip(sample_ids, examples):
            row.records.append(SampleRecord(
                sample_id=int(idx),
                label=example.label,
                surrogate_before=example.surrogate_pred_before,
                surrogate_after=example.surrogate_pred_after,
                linf=example.linf,
                l2=example.l2,
                stationary=example.stationary,
                member_preds=dict(example.member_preds),
            ))
        logger.info(f"⚔️ {attack.label} on {surrogate}: {len(examples)} samples in {wall_time:.2f}s, "
                    f"white-box fooled {sum(e.fooled_surrogate for e in examples)}")
        return row, examples

    def score_row(self, row: AttackRow, examples: List[AdversarialExample],
                  clean_preds: Dict[str, np.ndarray]) -> List[TransferCell]:
        labels = np.array([e.label for e in examples])
        adv = np.stack([e.x_adv for e in examples])
        mean_linf = float(np.mean([r.linf for r in row.records]))
        mean_l2 = float(np.mean([r.l2 for r in row.records]))
        cells = []
        for target in self.plan.targets:
            clean = clean_preds[target.name]
            after = predict(self.roster[target.name], adv)
            for record, before, now in zip(row.records, clean, after):
                record.target_clean[target.name] = int(before)
                record.target_adv[target.name] = int(now)
            correct = clean == labels
            fooled = correct & (after != labels)
            n_correct = int(correct.sum())
            cells.append(TransferCell(
                attack=row.attack,
                surrogate=row.surrogate,
                target=target.name,
                asr=int(fooled.sum()) / n_correct if n_correct else None,
                asr_unfiltered=float(np.mean(after != labels)),
                clean_accuracy=float(correct.mean()),
                clean_correct=n_correct,
                fooled=int(fooled.sum()),
                mean_linf=mean_linf,
                mean_l2=mean_l2,
                wall_time=row.wall_time,
            ))
            if n_correct == 0:
                logger.warning(f"⚠️ {target.name} misclassifies every clean sample; "
                               f"{row.attack}/{row.surrogate} cell is undefined")
        return cells

    def directional_flags(self, report: TransferReport) -> List[dict]:
        by_name: Dict[str, List[str]] = {}
        for attack in self.plan.attacks:
            by_name.setdefault(attack.name, []).append(attack.label)
        flags = []
        for name, baseline in DIRECTIONAL_CHECKS:
            for label in by_name.get(name, []):
                for base_label in by_name.get(baseline, []):
                    for surrogate in self.plan.surrogates:
                        for target in self.plan.targets:
                            if target.name == surrogate.name:
                                continue
                            a = report.cell(label, surrogate.name, target.name).asr
                            b = report.cell(base_label, surrogate.name, target.name).asr
                            if a is None or b is None:
                                continue
                            holds = a >= b
                            flags.append({"attack": label, "baseline": base_label, "surrogate": surrogate.name,
                                          "target": target.name, "attack_asr": a, "baseline_asr": b,
                                          "holds": holds})
                            if not holds:
                                logger.warning(f"⚠️ {label} transfers worse than {base_label} on "
                                               f"{surrogate.name} -> {target.name}: {a:.4f} < {b:.4f}")
        return flags

    # --------------------------------------------------------------------- run

    def run(self) -> TransferReport:
        plan = self.plan
        logger.info(f"🔄 Starting bench run - Session: {self.session_id}")
        logger.info(f"📊 {len(plan.attacks)} attacks x {len(plan.surrogates)} surrogates x "
                    f"{len(plan.targets)} targets, {plan.run.samples} samples, {self.threads} threads")
        start = time.time()
        try:
            data = self.prepare_dataset()
            self.prepare_models()
            states = self.prepare_states()

            sample_ids = pick_samples(len(data.test_labels), plan.run.samples, plan.run.seed)
            clean_images = data.test_images[sample_ids]
            clean_preds = {t.name: predict(self.roster[t.name], clean_images) for t in plan.targets}

            report = TransferReport(plan=plan.model_dump(mode="json"), targets=[t.name for t in plan.targets])
            for attack in plan.attacks:
                for surrogate in plan.surrogates:
                    state = states.get((attack.label, surrogate.name))
                    row, examples = self.craft_row(attack, surrogate.name, sample_ids, state)
                    report.rows.append(row)
                    report.cells.extend(self.score_row(row, examples, clean_preds))
            report.flags = self.directional_flags(report)
            report.generated_at = datetime.now(pytz.utc).isoformat()

            elapsed = time.time() - start
            self._save_log_entry({
                "timestamp": report.generated_at,
                "session_id": self.session_id,
                "task": "bench",
                "success": True,
                "seed": plan.run.seed,
                "results": {"rows": len(report.rows), "cells": len(report.cells),
                            "flagged": sum(not f["holds"] for f in report.flags),
                            "execution_time_seconds": elapsed},
                "error": None,
            })
            logger.info(f"✅ Bench run completed: {len(report.cells)} cells")
            logger.info(f"⏱️ Execution time: {elapsed:.2f} seconds")
            return report
        except Exception as e:
            logger.error(f"❌ Bench run failed: {e}")
            logger.error(f"Full traceback: {traceback.format_exc()}")
            self._save_log_entry({
                "timestamp": datetime.now(pytz.utc).isoformat(),
                "session_id": self.session_id,
                "task": "bench",
                "success": False,
                "seed": plan.run.seed,
                "results": None,
                "error": str(e),
            })
            raise

    def _save_log_entry(self, log_entry: dict):
        """Append one JSON line to the run log in the output directory."""
        if self.out_dir is None:
            return
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            with open(self.out_dir / RUN_LOG_NAME, "a") as f:
                f.write(json.dumps(log_entry, sort_keys=True) + "\n")
        except OSError as e:
            logger.error(f"Failed to save log entry: {e}")


def run(plan: ExperimentPlan, threads: Optional[int] = None, out_dir=None,
        roster: Optional[Dict[str, Model]] = None, data: Optional[GlyphDataset] = None) -> TransferReport:
    return BenchRunner(plan, out_dir, threads, roster, data).run()


def write_report(report: TransferReport, directory=OUTPUT_DIR) -> Dict[str, Path]:
    """Write matrix.csv, report.json and summary.txt; IO failures name the path."""
    directory = Path(directory)
    contents = dict(zip(REPORT_FILES, (matrix_csv(report), report_json(report), summary_text(report))))
    written = {}
    for name, text in contents.items():
        path = directory / name
        try:
            directory.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
        except OSError as e:
            raise OSError(e.errno, f"cannot write report file: {e.strerror or e}", str(path)) from e
        written[name] = path
    logger.info(f"📝 Report written to {directory}")
    return written
