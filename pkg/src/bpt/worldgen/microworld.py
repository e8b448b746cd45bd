"""Micro-world story generator: agents moving, grabbing, dropping, giving.

Every sentence is an event followed by a breakpoint. Labels are derived from
a deterministic world simulation; only determined facts are emitted, so all
labels are entailed or contradicted. Conflict pairs inject one event whose
precondition contradicts earlier state, with precondition propositions in
past tense and effect propositions in present tense.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from ..corpus import (
    BREAK_TOKEN,
    BreakpointAnnotation,
    Dataset,
    Example,
    Proposition,
    QAPair,
    TruthLabel,
    detokenize,
    example_rng,
    tokenize,
)
from ..constraints import Atom, Implies, render_constraint


class PreconditionError(Exception):
    """An event's precondition does not hold in the state it executes in."""


class GenerationError(Exception):
    pass


PERSON_GENDER = {
    "John": "male",
    "Daniel": "male",
    "Bill": "male",
    "Mary": "female",
    "Sandra": "female",
    "Julie": "female",
}
PRONOUN = {"male": "He", "female": "She"}

DEFAULT_PERSONS = ("John", "Mary", "Daniel", "Sandra")
DEFAULT_OBJECTS = ("apple", "ball", "book", "milk")
DEFAULT_LOCATIONS = ("kitchen", "garden", "hallway", "office", "bedroom")

BASE_EVENT_TYPES = ("move", "grab", "drop", "give")

DEFAULT_EVENT_MIX = {
    "move": 3.0,
    "grab": 2.5,
    "drop": 1.0,
    "give": 1.5,
    "coref_move": 1.0,
    "coref_grab": 1.0,
}

# deterministic per-split seed derivation so splits never share example streams
SPLIT_SEED_OFFSET = {"train": 0, "dev": 1_000_003, "test": 2_000_003}

_SURFACES = {
    "move": ("{s} moved to the {l} .", "{s} went to the {l} .", "{s} journeyed to the {l} ."),
    "grab": ("{s} picked up the {o} .", "{s} grabbed the {o} .", "{s} took the {o} ."),
    "drop": ("{s} dropped the {o} .", "{s} put down the {o} .", "{s} discarded the {o} ."),
    "give": (
        "{s} gave the {o} to {q} .",
        "{s} handed the {o} to {q} .",
        "{s} passed the {o} to {q} .",
    ),
}

_ABSTRACTION = {
    "move": "{p} went somewhere",
    "grab": "{p} took something",
    "drop": "{p} put something down",
    "give": "{p} gave something away",
}


@dataclass(frozen=True)
class Event:
    kind: str  # move | grab | drop | give
    subject: str
    obj: str | None = None
    location: str | None = None
    receiver: str | None = None
    pronoun: bool = False

    def surface(self, template_idx: int) -> str:
        s = PRONOUN[PERSON_GENDER[self.subject]] if self.pronoun else self.subject
        t = _SURFACES[self.kind][template_idx % len(_SURFACES[self.kind])]
        return t.format(s=s, l=self.location, o=self.obj, q=self.receiver)


@dataclass
class WorldState:
    person_location: dict = field(default_factory=dict)
    holder: dict = field(default_factory=dict)
    object_location: dict = field(default_factory=dict)
    last_mentioned: dict = field(default_factory=dict)

    def copy(self) -> "WorldState":
        return WorldState(
            dict(self.person_location),
            dict(self.holder),
            dict(self.object_location),
            dict(self.last_mentioned),
        )


def event_preconditions(ev: Event, s: WorldState) -> list[tuple[str, bool]]:
    """(past-tense proposition text, holds-in-pre-state) pairs for an event."""
    if ev.kind == "move":
        return []
    if ev.kind == "grab":
        return [(f"no one had the {ev.obj}", s.holder.get(ev.obj) is None)]
    return [(f"{ev.subject} had the {ev.obj}", s.holder.get(ev.obj) == ev.subject)]


def precondition_violations(ev: Event, s: WorldState) -> list[str]:
    out = [text for text, holds in event_preconditions(ev, s) if not holds]
    if ev.kind == "move" and s.person_location.get(ev.subject) == ev.location:
        out.append(f"{ev.subject} was already in the {ev.location}")
    if ev.kind == "grab" and s.holder.get(ev.obj) is None:
        oloc = s.object_location.get(ev.obj)
        ploc = s.person_location.get(ev.subject)
        if oloc is not None and ploc is not None and oloc != ploc:
            out.append(f"{ev.subject} was not in the {oloc}")
    return out


def apply_event(s: WorldState, ev: Event, force: bool = False) -> WorldState:
    """Fold one event into the state; raises unless preconditions hold or force."""
    if not force:
        bad = precondition_violations(ev, s)
        if bad:
            raise PreconditionError(f"{ev.kind} by {ev.subject}: {bad[0]}")
    s = s.copy()
    if ev.kind == "move":
        s.person_location[ev.subject] = ev.location
        for o, h in s.holder.items():
            if h == ev.subject:
                s.object_location[o] = ev.location
    elif ev.kind == "grab":
        s.holder[ev.obj] = ev.subject
        s.object_location[ev.obj] = s.person_location.get(ev.subject)
    elif ev.kind == "drop":
        s.holder[ev.obj] = None
        s.object_location[ev.obj] = s.person_location.get(ev.subject)
    elif ev.kind == "give":
        s.holder[ev.obj] = ev.receiver
        s.object_location[ev.obj] = s.person_location.get(ev.receiver)
    else:
        raise GenerationError(f"unknown event kind {ev.kind}")
    s.last_mentioned[PERSON_GENDER[ev.subject]] = ev.subject
    if ev.receiver is not None:
        s.last_mentioned[PERSON_GENDER[ev.receiver]] = ev.receiver
    return s


def simulate_state(events: Sequence[Event], upto: int | None = None) -> WorldState:
    """Deterministic fold of effects with frame persistence for untouched fluents."""
    s = WorldState()
    for ev in events[: len(events) if upto is None else upto]:
        s = apply_event(s, ev)
    return s


def event_effects(ev: Event, post: WorldState) -> list[tuple[str, TruthLabel]]:
    """Present-tense effect propositions, labeled against the post-state."""
    out: list[tuple[str, TruthLabel]] = []
    if ev.kind == "move":
        out.append((f"{ev.subject} is in the {ev.location}", TruthLabel.ENTAILED))
    elif ev.kind == "grab":
        label = TruthLabel.ENTAILED if post.holder.get(ev.obj) == ev.subject \
            else TruthLabel.CONTRADICTED
        out.append((f"{ev.subject} has the {ev.obj}", label))
    elif ev.kind == "drop":
        out.append((f"{ev.subject} has the {ev.obj}", TruthLabel.CONTRADICTED))
        loc = post.object_location.get(ev.obj)
        if loc is not None:
            out.append((f"the {ev.obj} is in the {loc}", TruthLabel.ENTAILED))
    elif ev.kind == "give":
        out.append((f"{ev.receiver} has the {ev.obj}", TruthLabel.ENTAILED))
        out.append((f"{ev.subject} has the {ev.obj}", TruthLabel.CONTRADICTED))
    return out


@dataclass(frozen=True)
class EventRecord:
    surface: tuple[str, ...]
    semantics: Event
    preconditions: tuple[Proposition, ...]
    effects: tuple[Proposition, ...]


def event_record(ev: Event, template_idx: int, pre: WorldState) -> EventRecord:
    post = apply_event(pre, ev)
    return EventRecord(
        surface=tuple(tokenize(ev.surface(template_idx))),
        semantics=ev,
        preconditions=tuple(
            Proposition(t, TruthLabel.ENTAILED if holds else TruthLabel.CONTRADICTED)
            for t, holds in event_preconditions(ev, pre)
        ),
        effects=tuple(Proposition(t, l) for t, l in event_effects(ev, post)),
    )


@dataclass(frozen=True)
class MicroworldConfig:
    persons: tuple[str, ...] = DEFAULT_PERSONS
    objects: tuple[str, ...] = DEFAULT_OBJECTS
    locations: tuple[str, ...] = DEFAULT_LOCATIONS
    n_events: int = 20
    event_mix: tuple[tuple[str, float], ...] = tuple(sorted(DEFAULT_EVENT_MIX.items()))
    n_qa: int = 2
    carryover_fluents: int = 3
    max_constraints: int = 12
    seed: int = 0
    split: str = "train"

    def mix(self) -> dict[str, float]:
        weights = dict(self.event_mix)
        if any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
            raise GenerationError("event mix weights must be nonnegative with positive sum")
        return weights


def split_cfg(cfg: MicroworldConfig, split: str) -> MicroworldConfig:
    offset = SPLIT_SEED_OFFSET.get(split, 3_000_017)
    return replace(cfg, split=split, seed=cfg.seed + offset)


def _feasible_events(cfg: MicroworldConfig, s: WorldState, kind: str) -> list[Event]:
    base = kind.removeprefix("coref_")
    pronoun = kind.startswith("coref_")
    if pronoun:
        subjects = sorted(
            {p for p in s.last_mentioned.values() if p is not None and p in cfg.persons}
        )
    else:
        subjects = list(cfg.persons)
    out: list[Event] = []
    for p in subjects:
        if base == "move":
            for l in cfg.locations:
                if s.person_location.get(p) != l:
                    out.append(Event("move", p, location=l, pronoun=pronoun))
        elif base == "grab":
            for o in cfg.objects:
                if s.holder.get(o) is not None:
                    continue
                oloc = s.object_location.get(o)
                if oloc is None or s.person_location.get(p) == oloc:
                    out.append(Event("grab", p, obj=o, pronoun=pronoun))
        elif base == "drop":
            for o in cfg.objects:
                if s.holder.get(o) == p:
                    out.append(Event("drop", p, obj=o, pronoun=pronoun))
        elif base == "give":
            for o in cfg.objects:
                if s.holder.get(o) != p:
                    continue
                for q in cfg.persons:
                    if q != p:
                        out.append(Event("give", p, obj=o, receiver=q, pronoun=pronoun))
    return out


def sample_events(
    cfg: MicroworldConfig, rng: np.random.Generator, allowed: Iterable[str] | None = None
) -> list[Event]:
    weights = cfg.mix()
    if allowed is not None:
        weights = {k: w for k, w in weights.items() if k in set(allowed)}
    events: list[Event] = []
    s = WorldState()
    for _ in range(cfg.n_events):
        kinds = sorted(k for k, w in weights.items() if w > 0)
        feasible = {k: _feasible_events(cfg, s, k) for k in kinds}
        kinds = [k for k in kinds if feasible[k]]
        if not kinds:
            raise GenerationError("no feasible event at this step")
        w = np.array([weights[k] for k in kinds], dtype=float)
        kind = kinds[rng.choice(len(kinds), p=w / w.sum())]
        choices = feasible[kind]
        ev = choices[rng.integers(len(choices))]
        events.append(ev)
        s = apply_event(s, ev)
    return events


def _fluent_label(fluent: tuple, s: WorldState) -> TruthLabel | None:
    kind = fluent[0]
    if kind == "ploc":
        _, p, l = fluent
        loc = s.person_location.get(p)
        if loc is None:
            return None
        return TruthLabel.ENTAILED if loc == l else TruthLabel.CONTRADICTED
    if kind == "oloc":
        _, o, l = fluent
        loc = s.object_location.get(o)
        if loc is None:
            return None
        return TruthLabel.ENTAILED if loc == l else TruthLabel.CONTRADICTED
    _, p, o = fluent
    return TruthLabel.ENTAILED if s.holder.get(o) == p else TruthLabel.CONTRADICTED


def _fluent_text(fluent: tuple) -> str:
    kind = fluent[0]
    if kind == "ploc":
        return f"{fluent[1]} is in the {fluent[2]}"
    if kind == "oloc":
        return f"the {fluent[1]} is in the {fluent[2]}"
    return f"{fluent[1]} has the {fluent[2]}"


def render_story(events: Sequence[Event], template_choices: Sequence[int]) -> list[str]:
    tokens: list[str] = []
    for ev, idx in zip(events, template_choices):
        tokens.extend(tokenize(ev.surface(idx)))
        tokens.append(BREAK_TOKEN)
    return tokens


def annotate_events(
    cfg: MicroworldConfig,
    events: Sequence[Event],
    rng: np.random.Generator,
    include_preconditions: bool = False,
    force: bool = False,
) -> list[dict[str, TruthLabel]]:
    """Per-breakpoint {proposition text: label} derived from the simulation."""
    per_bp: list[dict[str, TruthLabel]] = []
    states = [WorldState()]
    for ev in events:
        states.append(apply_event(states[-1], ev, force=force))

    known_fluents: list[tuple] = []
    fluent_set: set[tuple] = set()
    prev_emitted: list[tuple] = []

    for t, ev in enumerate(events, start=1):
        pre, post = states[t - 1], states[t]
        here: dict[str, TruthLabel] = {}
        emitted: list[tuple] = []

        def emit_fluent(fluent: tuple) -> None:
            label = _fluent_label(fluent, post)
            if label is None:
                return
            text = _fluent_text(fluent)
            if text not in here:
                here[text] = label
                emitted.append(fluent)
                if fluent not in fluent_set:
                    fluent_set.add(fluent)
                    known_fluents.append(fluent)

        if include_preconditions:
            for text, holds in event_preconditions(ev, pre):
                here[text] = TruthLabel.ENTAILED if holds else TruthLabel.CONTRADICTED

        if ev.kind == "move":
            emit_fluent(("ploc", ev.subject, ev.location))
        elif ev.kind == "grab":
            emit_fluent(("has", ev.subject, ev.obj))
        elif ev.kind == "drop":
            emit_fluent(("has", ev.subject, ev.obj))
            if post.object_location.get(ev.obj) is not None:
                emit_fluent(("oloc", ev.obj, post.object_location[ev.obj]))
        elif ev.kind == "give":
            emit_fluent(("has", ev.receiver, ev.obj))
            emit_fluent(("has", ev.subject, ev.obj))

        here[_ABSTRACTION[ev.kind].format(p=ev.subject)] = TruthLabel.ENTAILED
        if rng.random() < 0.5:
            others = sorted(set(_ABSTRACTION) - {ev.kind})
            wrong = others[rng.integers(len(others))]
            here.setdefault(
                _ABSTRACTION[wrong].format(p=ev.subject), TruthLabel.CONTRADICTED
            )

        if ev.pronoun:
            pron = PRONOUN[PERSON_GENDER[ev.subject]]
            here[f"{pron} refers to {ev.subject}"] = TruthLabel.ENTAILED
            same_gender = [
                p
                for p in cfg.persons
                if p != ev.subject and PERSON_GENDER[p] == PERSON_GENDER[ev.subject]
            ]
            if same_gender and rng.random() < 0.5:
                other = same_gender[rng.integers(len(same_gender))]
                here[f"{pron} refers to {other}"] = TruthLabel.CONTRADICTED

        # carryover: re-assert recent fluents first, then older ones
        budget = cfg.carryover_fluents
        recent = [f for f in prev_emitted if f not in emitted]
        if recent and budget:
            take = min(2, budget, len(recent))
            for i in rng.choice(len(recent), size=take, replace=False):
                emit_fluent(recent[i])
                budget -= 1
        older = [f for f in known_fluents if f not in emitted]
        if older and budget > 0:
            take = min(budget, len(older))
            for i in rng.choice(len(older), size=take, replace=False):
                emit_fluent(older[i])

        # uniqueness negatives for entailed fluents
        for fluent in list(emitted):
            if here.get(_fluent_text(fluent)) != TruthLabel.ENTAILED:
                continue
            kind = fluent[0]
            if kind in ("ploc", "oloc"):
                others = [l for l in cfg.locations if l != fluent[2]]
                alt = (kind, fluent[1], others[int(rng.integers(len(others)))])
            else:
                others = [p for p in cfg.persons if p != fluent[1]]
                alt = ("has", others[int(rng.integers(len(others)))], fluent[2])
            emit_fluent(alt)

        per_bp.append(here)
        prev_emitted = emitted
    return per_bp


def _microworld_constraints(
    cfg: MicroworldConfig,
    per_bp: list[dict[str, TruthLabel]],
    rng: np.random.Generator,
) -> tuple[str, ...]:
    candidates: list[str] = []
    n = len(per_bp)
    for j in range(1, n + 1):
        here = per_bp[j - 1]
        entailed = sorted(t for t, l in here.items() if l == TruthLabel.ENTAILED)
        contradicted = sorted(t for t, l in here.items() if l == TruthLabel.CONTRADICTED)
        for p in entailed:
            for q in contradicted:
                if _same_family(p, q):
                    candidates.append(
                        render_constraint(Implies(Atom("E", j, p), Atom("C", j, q)))
                    )
            if j < n and per_bp[j].get(p) == TruthLabel.ENTAILED:
                candidates.append(
                    render_constraint(Implies(Atom("E", j, p), Atom("E", j + 1, p)))
                )
    candidates = list(dict.fromkeys(candidates))
    if not candidates:
        return ()
    take = min(cfg.max_constraints, len(candidates))
    idx = sorted(rng.choice(len(candidates), size=take, replace=False))
    return tuple(candidates[i] for i in idx)


def _same_family(p: str, q: str) -> bool:
    """Two fluent texts competing for the same location or possession slot."""
    ps, qs = p.split(), q.split()
    if "is" in ps and "in" in ps and "is" in qs and "in" in qs:
        return ps[: ps.index("is")] == qs[: qs.index("is")]
    if "has" in ps and "has" in qs:
        return ps[ps.index("has") :] == qs[qs.index("has") :]
    return False


def _final_qa(
    cfg: MicroworldConfig, events: Sequence[Event], rng: np.random.Generator
) -> tuple[QAPair, ...]:
    final = simulate_state(events)
    options: list[QAPair] = []
    for p in cfg.persons:
        loc = final.person_location.get(p)
        if loc is not None:
            options.append(QAPair(f"where is {p} ?", loc))
    for o in cfg.objects:
        loc = final.object_location.get(o)
        if loc is not None:
            options.append(QAPair(f"where is the {o} ?", loc))
        h = final.holder.get(o)
        if h is not None:
            options.append(QAPair(f"who has the {o} ?", h))
    if not options:
        return ()
    take = min(cfg.n_qa, len(options))
    idx = sorted(rng.choice(len(options), size=take, replace=False))
    return tuple(options[i] for i in idx)


def _assemble(
    example_id: str,
    story_tokens: list[str],
    per_bp: list[dict[str, TruthLabel]],
    constraints: tuple[str, ...],
    qa: tuple[QAPair, ...],
    meta: dict,
) -> Example:
    positions = [i for i, t in enumerate(story_tokens) if t == BREAK_TOKEN]
    breakpoints = tuple(
        BreakpointAnnotation(
            index=j,
            token_position=positions[j - 1],
            propositions=tuple(
                Proposition(text, label) for text, label in sorted(per_bp[j - 1].items())
            ),
        )
        for j in range(1, len(per_bp) + 1)
    )
    return Example(
        id=example_id,
        story_tokens=tuple(story_tokens),
        breakpoints=breakpoints,
        constraints=constraints,
        qa=qa,
        meta=meta,
    )


def gen_microworld_example(
    cfg: MicroworldConfig,
    example_index: int = 0,
    id_prefix: str = "micro",
    allowed: Iterable[str] | None = None,
) -> Example:
    rng = example_rng(cfg.seed, example_index)
    for _ in range(20):
        try:
            events = sample_events(cfg, rng, allowed=allowed)
        except GenerationError:
            continue
        template_choices = [int(rng.integers(3)) for _ in events]
        story_tokens = render_story(events, template_choices)
        per_bp = annotate_events(cfg, events, rng)
        constraints = _microworld_constraints(cfg, per_bp, rng)
        qa = _final_qa(cfg, events, rng)
        meta = {
            "task": "microworld",
            "n_events": str(cfg.n_events),
            "split": cfg.split,
            "seed": str(cfg.seed),
        }
        return _assemble(
            f"{id_prefix}-{cfg.split}-{example_index:05d}",
            story_tokens, per_bp, constraints, qa, meta,
        )
    raise GenerationError("could not sample a feasible event sequence")


def generate_microworld_dataset(
    cfg: MicroworldConfig, count: int, id_prefix: str = "micro",
    allowed: Iterable[str] | None = None,
) -> Dataset:
    examples = [
        gen_microworld_example(cfg, i, id_prefix=id_prefix, allowed=allowed)
        for i in range(count)
    ]
    meta = {"task": "microworld", "split": cfg.split, "seed": cfg.seed, "count": count}
    return Dataset(examples=examples, meta=meta)


def _conflict_candidates(events: Sequence[Event], cfg: MicroworldConfig):
    """(i, j, replacement) tuples where the replacement's precondition contradicts
    the holder state established by sentence i and still in force before j."""
    states = [WorldState()]
    for ev in events:
        states.append(apply_event(states[-1], ev))
    establishes: dict[str, int] = {}
    out = []
    for j in range(1, len(events) + 1):
        pre = states[j - 1]
        for o in cfg.objects:
            holder = pre.holder.get(o)
            if holder is None or o not in establishes:
                continue
            i = establishes[o]
            for x in cfg.persons:
                if x != holder:
                    out.append((i, j, Event("drop", x, obj=o)))
                    for q in cfg.persons:
                        if q != x:
                            out.append((i, j, Event("give", x, obj=o, receiver=q)))
                out.append((i, j, Event("grab", x, obj=o)))
        ev = events[j - 1]
        if ev.kind in ("grab", "give"):
            establishes[ev.obj] = j
        elif ev.kind == "drop":
            establishes.pop(ev.obj, None)
    return out


def _forced_violation_indices(events: Sequence[Event]) -> list[int]:
    s = WorldState()
    out = []
    for t, ev in enumerate(events, start=1):
        if precondition_violations(ev, s):
            out.append(t)
        s = apply_event(s, ev, force=True)
    return out


def gen_conflict_pair(
    cfg: MicroworldConfig, example_index: int = 0, id_prefix: str = "conflict"
) -> tuple[Example, Example, tuple[int, int], list[tuple[int, str, str]]]:
    """(plausible, implausible, (i, j), relevant) with 1-based sentence ordinals.

    relevant lists (breakpoint, proposition text, gold label value): the effect
    proposition of sentence i in present tense and the violated precondition of
    sentence j in past tense. The two stories share every sentence except j.
    """
    rng = example_rng(cfg.seed, example_index)
    for _ in range(30):
        try:
            # pronouns are excluded: replacing a sentence must not be able to
            # shift a later pronoun's antecedent
            events = sample_events(cfg, rng, allowed=BASE_EVENT_TYPES)
        except GenerationError:
            continue
        candidates = _conflict_candidates(events, cfg)
        if not candidates:
            continue
        # keep only injections that break exactly one precondition, at j
        order = rng.permutation(len(candidates))
        chosen = None
        for idx in order:
            i, j, injected = candidates[idx]
            trial = list(events)
            trial[j - 1] = injected
            if _forced_violation_indices(trial) == [j]:
                chosen = (i, j, injected, trial)
                break
        if chosen is None:
            continue
        i, j, injected, bad_events = chosen

        template_choices = [int(rng.integers(3)) for _ in events]
        plaus_tokens = render_story(events, template_choices)
        bad_tokens = render_story(bad_events, template_choices)

        plaus_bp = annotate_events(cfg, events, rng, include_preconditions=True)
        bad_bp = annotate_events(
            cfg, bad_events, rng, include_preconditions=True, force=True
        )

        pre_state = simulate_state(events, j - 1)
        violated = [t for t, holds in event_preconditions(injected, pre_state) if not holds]
        if not violated:
            continue
        pre_text = violated[0]
        holder = pre_state.holder[injected.obj]
        effect_text = f"{holder} has the {injected.obj}"
        if plaus_bp[i - 1].get(effect_text) != TruthLabel.ENTAILED:
            continue
        if bad_bp[i - 1].get(effect_text) != TruthLabel.ENTAILED:
            continue
        if bad_bp[j - 1].get(pre_text) != TruthLabel.CONTRADICTED:
            continue
        relevant = [
            (i, effect_text, TruthLabel.ENTAILED.value),
            (j, pre_text, TruthLabel.CONTRADICTED.value),
        ]

        implausible_is_a = bool(rng.random() < 0.5)
        story_a, story_b = (
            (bad_tokens, plaus_tokens) if implausible_is_a else (plaus_tokens, bad_tokens)
        )
        plaus_q = (
            "( A ) " + detokenize(story_a) + " ( B ) " + detokenize(story_b) + " $plaus"
        )
        plaus_answer = "A" if implausible_is_a else "B"
        numbered: list[str] = []
        sent: list[str] = []
        ordinal = 1
        for tok in bad_tokens:
            if tok == BREAK_TOKEN:
                numbered.extend(sent + [str(ordinal), BREAK_TOKEN])
                sent = []
                ordinal += 1
            else:
                sent.append(tok)
        conflict_q = detokenize(numbered) + " $conflict"
        conflict_answer = f"{i} , {j}"

        pair_id = f"{id_prefix}-{cfg.split}-{example_index:05d}"
        base_meta = {
            "task": "conflict",
            "pair_id": pair_id,
            "split": cfg.split,
            "seed": str(cfg.seed),
            "conflict": f"{i},{j}",
            "relevant": json.dumps(relevant, separators=(",", ":")),
        }
        constraints_p = _microworld_constraints(cfg, plaus_bp, rng)
        constraints_b = _microworld_constraints(cfg, bad_bp, rng)
        plausible = _assemble(
            pair_id + "-p", plaus_tokens, plaus_bp, constraints_p, (),
            {**base_meta, "member": "plausible"},
        )
        implausible = _assemble(
            pair_id + "-i", bad_tokens, bad_bp, constraints_b,
            (QAPair(plaus_q, plaus_answer), QAPair(conflict_q, conflict_answer)),
            {**base_meta, "member": "implausible"},
        )
        return plausible, implausible, (i, j), relevant
    raise GenerationError("no injectable conflict found")


def generate_conflict_dataset(cfg: MicroworldConfig, count: int) -> Dataset:
    examples: list[Example] = []
    for idx in range(count):
        plausible, implausible, _, _ = gen_conflict_pair(cfg, idx)
        examples.extend([plausible, implausible])
    meta = {"task": "conflict", "split": cfg.split, "seed": cfg.seed, "pairs": count}
    return Dataset(examples=examples, meta=meta)


def parse_held_out(spec: str) -> str:
    """e.g. "coref.give" -> the composed event kind "coref_give"."""
    parts = spec.split(".")
    if len(parts) != 2 or parts[0] != "coref" or parts[1] not in BASE_EVENT_TYPES:
        raise GenerationError(f"unsupported held-out composition {spec!r}")
    return f"coref_{parts[1]}"


def gen_hard_split(
    cfg: MicroworldConfig,
    held_out: str,
    n_train: int,
    n_dev: int,
    n_test: int,
) -> tuple[Dataset, Dataset, Dataset]:
    """Train/dev exclude the held-out composition; every test story contains it."""
    composed = parse_held_out(held_out)
    base_kinds = set(DEFAULT_EVENT_MIX) - {composed}
    train = generate_microworld_dataset(split_cfg(cfg, "train"), n_train, allowed=base_kinds)
    dev = generate_microworld_dataset(split_cfg(cfg, "dev"), n_dev, allowed=base_kinds)

    mix = dict(cfg.event_mix)
    mix[composed] = max(mix.values())
    test_cfg = replace(split_cfg(cfg, "test"), event_mix=tuple(sorted(mix.items())))
    examples = []
    idx = 0
    while len(examples) < n_test:
        ex = gen_microworld_example(test_cfg, idx, id_prefix="micro-hard")
        idx += 1
        if _contains_composition(ex, composed):
            examples.append(ex)
        if idx > max(50, n_test * 50):
            raise GenerationError(f"could not realize {held_out} in test stories")
    for ds in (train, dev):
        ds.meta["held_out"] = held_out
        for e in ds.examples:
            e.meta["held_out"] = held_out
    test = Dataset(
        examples=examples,
        meta={"task": "microworld", "split": "test", "held_out": held_out,
              "seed": cfg.seed, "count": n_test},
    )
    for e in test.examples:
        e.meta["held_out"] = held_out
        e.meta["tag"] = "hardqa"
    return train, dev, test


def _contains_composition(e: Example, composed: str) -> bool:
    base = composed.removeprefix("coref_")
    keywords = {
        "move": ("moved", "went", "journeyed"),
        "grab": ("picked", "grabbed", "took"),
        "drop": ("dropped", "put", "discarded"),
        "give": ("gave", "handed", "passed"),
    }[base]
    sentences: list[list[str]] = [[]]
    for tok in e.story_tokens:
        if tok == BREAK_TOKEN:
            sentences.append([])
        else:
            sentences[-1].append(tok)
    for sent in sentences:
        if sent and sent[0] in ("he", "she") and any(k in sent for k in keywords):
            return True
    return False
