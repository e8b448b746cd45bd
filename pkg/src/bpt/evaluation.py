"""Metrics, prediction dumps, efficiency accounting, and experiment harnesses.

Covers proposition accuracy, exact-match QA accuracy, the story-level
constraint-violation rate (lower is better), the three-tier conflict cascade,
single-read vs multi-pass encoder call counting, learning curves over
training-set fractions, and the feature ablation suite.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .constraints import parse_constraint, atoms_of, story_violations
from .corpus import Dataset, Example, TruthLabel
from .model import BeliefDistribution, BreakpointModel, LABEL_ORDER, ModelConfig
from .training import (
    TrainConfig,
    decode_answers,
    evaluate_prop_accuracy,
    prepare_examples,
    train,
)


class EvalError(Exception):
    pass


@dataclass
class PredictionDump:
    """Predicted label + probabilities for every gold-labeled proposition and
    a generated answer for every QA pair, with provenance."""

    provenance: dict = field(default_factory=dict)
    props: dict = field(default_factory=dict)  # id -> {(bp, text): (label, probs)}
    qa: dict = field(default_factory=dict)  # id -> [answer, ...]

    def label_of(self, example_id: str, breakpoint_index: int, text: str) -> TruthLabel:
        try:
            return self.props[example_id][(breakpoint_index, text)][0]
        except KeyError:
            raise EvalError(
                f"dump has no prediction for {example_id!r} breakpoint "
                f"{breakpoint_index} {text!r}"
            ) from None

    def assignment(self, example_id: str) -> dict:
        return {key: value[0] for key, value in self.props.get(example_id, {}).items()}

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"provenance": self.provenance}, sort_keys=True,
                                separators=(",", ":")) + "\n")
            for ex_id in self.props:
                rec = {
                    "id": ex_id,
                    "props": [
                        {
                            "breakpoint": bp,
                            "text": text,
                            "label": label.value,
                            "probs": [round(p, 8) for p in probs],
                        }
                        for (bp, text), (label, probs) in self.props[ex_id].items()
                    ],
                    "qa": self.qa.get(ex_id, []),
                }
                fh.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PredictionDump":
        dump = cls()
        with Path(path).open("r", encoding="utf-8") as fh:
            first = json.loads(fh.readline())
            dump.provenance = first.get("provenance", {})
            for line in fh:
                rec = json.loads(line)
                dump.props[rec["id"]] = {
                    (p["breakpoint"], p["text"]): (
                        TruthLabel.from_str(p["label"]),
                        tuple(p["probs"]),
                    )
                    for p in rec["props"]
                }
                dump.qa[rec["id"]] = rec.get("qa", [])
        return dump


@dataclass
class MetricsReport:
    prop_accuracy: float | None = None
    em_accuracy: float | None = None
    rho: float | None = None
    tiered: dict | None = None
    story_encodes_per_example: float | None = None
    wall_clock_s: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "prop_accuracy": self.prop_accuracy,
            "em_accuracy": self.em_accuracy,
            "rho": self.rho,
            "tiered": self.tiered,
            "story_encodes_per_example": self.story_encodes_per_example,
            "wall_clock_s": self.wall_clock_s,
            "extra": self.extra,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )


def build_dump(
    model: BreakpointModel,
    dataset: Dataset,
    mode: str = "single",
    batch_size: int = 8,
    provenance: dict | None = None,
    gold_as_pred: bool = False,
) -> tuple[PredictionDump, float]:
    """Predict every labeled proposition and QA pair; returns the dump and the
    average number of story-encoder calls per example for the belief pass."""
    if mode not in ("single", "multipass"):
        raise EvalError(f"unknown mode {mode!r}")
    prepared = prepare_examples(dataset)
    dump = PredictionDump(provenance=dict(provenance or {}))
    dump.provenance["mode"] = mode
    if gold_as_pred:
        for it in prepared:
            one_hot = {0: (1.0, 0.0, 0.0), 1: (0.0, 1.0, 0.0), 2: (0.0, 0.0, 1.0)}
            dump.props[it.example.id] = {
                (bp, text): (LABEL_ORDER[l], one_hot[l])
                for (bp, text), l in zip(it.props, it.labels)
            }
            dump.qa[it.example.id] = [a for _, a in
                                      ((q.question, q.answer) for q in it.example.qa)]
        return dump, 0.0
    model.reset_counters()
    _, all_probs = evaluate_prop_accuracy(
        model, prepared, batch_size, multipass=(mode == "multipass")
    )
    encodes_per_example = model.counters["story_encodes"] / max(1, len(prepared))
    for it, probs in zip(prepared, all_probs):
        dump.props[it.example.id] = {
            (bp, text): (
                LABEL_ORDER[int(np.argmax(row))],
                tuple(float(x) for x in row),
            )
            for (bp, text), row in zip(it.props, probs)
        }
    answers = decode_answers(model, prepared)
    for it, ans in zip(prepared, answers):
        dump.qa[it.example.id] = ans
    return dump, encodes_per_example


# ---------------------------------------------------------------------------
# metrics


def prop_accuracy(dump: PredictionDump, dataset: Dataset) -> float:
    """Micro-average over every gold-labeled (breakpoint, proposition) pair."""
    correct = 0
    total = 0
    for e in dataset.examples:
        for bp in e.breakpoints:
            for p in bp.propositions:
                predicted = dump.label_of(e.id, bp.index, p.text)
                correct += int(predicted == p.label)
                total += 1
    if total == 0:
        raise EvalError("no labeled propositions to score")
    return correct / total


def _norm_answer(s: str) -> str:
    return s.strip().casefold()


def em_accuracy(dump: PredictionDump, dataset: Dataset) -> float | None:
    """Exact string match after trimming and case-folding; None without QA."""
    hits = 0
    total = 0
    for e in dataset.examples:
        answers = dump.qa.get(e.id)
        for k, qa in enumerate(e.qa):
            if answers is None or k >= len(answers):
                raise EvalError(f"dump has no answer for {e.id!r} QA #{k}")
            hits += int(_norm_answer(answers[k]) == _norm_answer(qa.answer))
            total += 1
    return hits / total if total else None


def global_consistency(dump: PredictionDump, dataset: Dataset) -> float | None:
    """Fraction of stories whose predicted labels violate >= 1 constraint,
    over stories carrying at least one constraint. Lower is better."""
    violated_stories = 0
    with_constraints = 0
    for e in dataset.examples:
        if not e.constraints:
            continue
        with_constraints += 1
        a = dump.assignment(e.id)
        for expr_src in e.constraints:
            for atom in atoms_of(parse_constraint(expr_src)):
                if (atom.breakpoint_index, atom.proposition_text) not in a:
                    raise EvalError(
                        f"{e.id}: prediction missing for constraint atom "
                        f"({atom.predicate} {atom.breakpoint_index} "
                        f"{atom.proposition_text!r})"
                    )
        violated, _ = story_violations(e, a)
        violated_stories += int(violated >= 1)
    return violated_stories / with_constraints if with_constraints else None


def kclass_resolve(candidates: Sequence[tuple[str, BeliefDistribution]]) -> int:
    """Index of the candidate with the highest entailed probability; ties go to
    the lowest index."""
    if not candidates:
        raise EvalError("kclass_resolve requires at least one candidate")
    scores = [d.probabilities[0] for _, d in candidates]
    return int(np.argmax(scores))


@dataclass(frozen=True)
class ConflictPair:
    pair_id: str
    plausible: Example
    implausible: Example
    conflict: tuple[int, int]
    relevant: tuple[tuple[int, str, str], ...]


def collect_conflict_pairs(dataset: Dataset) -> list[ConflictPair]:
    by_pair: dict[str, dict[str, Example]] = {}
    for e in dataset.examples:
        pid = e.meta.get("pair_id")
        if pid:
            by_pair.setdefault(pid, {})[e.meta.get("member", "?")] = e
    out = []
    for pid in sorted(by_pair):
        members = by_pair[pid]
        if "plausible" not in members or "implausible" not in members:
            continue
        imp = members["implausible"]
        i, j = (int(x) for x in imp.meta["conflict"].split(","))
        relevant = tuple(tuple(r) for r in json.loads(imp.meta["relevant"]))
        out.append(ConflictPair(pid, members["plausible"], imp, (i, j), relevant))
    return out


def tiered_eval(
    pairs: Sequence[ConflictPair], dump: PredictionDump
) -> tuple[float, float, float]:
    """(plausibility, consistency, verifiability): each tier requires all
    earlier tiers to be correct for the same pair."""
    if not pairs:
        raise EvalError("tiered evaluation requires at least one story pair")
    t1 = t2 = t3 = 0
    for pair in pairs:
        answers = dump.qa.get(pair.implausible.id, [])
        gold = [qa.answer for qa in pair.implausible.qa]
        if len(answers) < 2 or len(gold) < 2:
            raise EvalError(f"{pair.pair_id}: missing task-1/2 answers in dump")
        task1 = _norm_answer(answers[0]) == _norm_answer(gold[0])
        task2 = _norm_answer(answers[1]) == _norm_answer(gold[1])
        states = all(
            dump.label_of(pair.implausible.id, bp, text) == TruthLabel.from_str(label)
            for bp, text, label in pair.relevant
        )
        t1 += int(task1)
        t2 += int(task1 and task2)
        t3 += int(task1 and task2 and states)
    n = len(pairs)
    return t1 / n, t2 / n, t3 / n


def efficiency_report(
    model: BreakpointModel, dataset: Dataset, batch_size: int = 8
) -> dict:
    """Story-encoder invocations and wall-clock for both modes over one split."""
    prepared = prepare_examples(dataset)
    n = len(prepared)
    breakpoints = sum(len(it.markers) for it in prepared)

    model.reset_counters()
    t0 = time.perf_counter()
    evaluate_prop_accuracy(model, prepared, batch_size, multipass=False)
    single_wall = time.perf_counter() - t0
    single_encodes = model.counters["story_encodes"]
    cache_hits = model.counters["prop_cache_hits"]
    prop_encodes = model.counters["prop_encodes"]

    model.reset_counters()
    t0 = time.perf_counter()
    evaluate_prop_accuracy(model, prepared, batch_size, multipass=True)
    multi_wall = time.perf_counter() - t0
    multi_encodes = model.counters["story_encodes"]

    if single_encodes != n:
        raise EvalError(f"single-read encode counter {single_encodes} != {n} examples")
    if multi_encodes != breakpoints:
        raise EvalError(
            f"multi-pass encode counter {multi_encodes} != {breakpoints} breakpoints"
        )
    return {
        "examples": n,
        "single_story_encodes_per_example": single_encodes / n,
        "multipass_story_encodes_per_example": multi_encodes / n,
        "single_wall_clock_s": single_wall,
        "multipass_wall_clock_s": multi_wall,
        "prop_encodes": prop_encodes,
        "prop_cache_hit_rate": cache_hits / max(1, cache_hits + prop_encodes),
    }


# ---------------------------------------------------------------------------
# harnesses


def _subset_in_order(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    n = len(dataset.examples)
    take = max(1, int(round(fraction * n)))
    rng = np.random.Generator(np.random.Philox(seed))
    chosen = sorted(rng.permutation(n)[:take])
    return Dataset(examples=[dataset.examples[i] for i in chosen], meta=dict(dataset.meta))


def learning_curve(
    train_ds: Dataset,
    dev_ds: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    fractions: Sequence[float] = (0.2, 0.4, 0.6, 0.8, 1.0),
) -> list[dict]:
    """One training run per train-set fraction, evaluated on the fixed dev set."""
    for f in fractions:
        if not 0 < f <= 1:
            raise EvalError(f"fraction {f} outside (0, 1]")
    rows = []
    for f in fractions:
        subset = _subset_in_order(train_ds, f, train_cfg.seed)
        result = train(subset, dev_ds, model_cfg, train_cfg)
        dump, _ = build_dump(result.model, dev_ds)
        rows.append(
            {
                "fraction": f,
                "n_train": len(subset.examples),
                "prop_accuracy": prop_accuracy(dump, dev_ds),
                "rho": global_consistency(dump, dev_ds),
            }
        )
    return rows


ABLATION_TOGGLES = ("brk_self_attn", "event_gen", "abstraction")


def ablation_suite(
    train_ds: Dataset,
    dev_ds: Dataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    toggles: Sequence[str] = ABLATION_TOGGLES,
) -> list[dict]:
    """Base row plus one (ablated - base) delta row per toggle, same seed."""
    for t in toggles:
        if t not in ABLATION_TOGGLES:
            raise EvalError(f"unknown ablation toggle {t!r}")

    def run(mc: ModelConfig, tc: TrainConfig) -> tuple[float, float | None]:
        result = train(train_ds, dev_ds, mc, tc)
        dump, _ = build_dump(result.model, dev_ds)
        return prop_accuracy(dump, dev_ds), global_consistency(dump, dev_ds)

    base_acc, base_rho = run(model_cfg, train_cfg)
    rows = [{"variant": "base", "prop_accuracy": base_acc, "rho": base_rho,
             "delta_accuracy": 0.0, "delta_rho": 0.0}]
    for toggle in toggles:
        mc, tc = model_cfg, train_cfg
        if toggle == "brk_self_attn":
            mc = replace(model_cfg, brk_self_attn=False)
        elif toggle == "event_gen":
            tc = replace(train_cfg, event_gen=False)
        else:
            tc = replace(train_cfg, abstraction=False)
        acc, rho = run(mc, tc)
        rows.append(
            {
                "variant": f"-{toggle}",
                "prop_accuracy": acc,
                "rho": rho,
                "delta_accuracy": acc - base_acc,
                "delta_rho": (rho - base_rho) if rho is not None and base_rho is not None
                else None,
            }
        )
    return rows


def rows_to_csv(rows: Sequence[dict], path: str | Path) -> None:
    """Plot-ready CSV with a stable column order."""
    if not rows:
        raise EvalError("no rows to write")
    fields = list(rows[0].keys())
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
