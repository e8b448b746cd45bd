"""Family-relation story generator with deductive closure labels.

Stories are chains of k facts over fresh persons. At each breakpoint every
relation derivable from the prefix (directly, by composition, or by
inversion) is labeled entailed; sampled mutually-exclusive alternatives are
labeled contradicted; sampled well-typed but underivable relations are
labeled unknown. Entailed/contradicted labels persist once assigned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..corpus import (
    BREAK_TOKEN,
    BreakpointAnnotation,
    Example,
    Proposition,
    QAPair,
    TruthLabel,
    example_rng,
    tokenize,
)
from ..constraints import Atom, And, Implies, render_constraint


class GenerationError(Exception):
    """Generator could not satisfy its own constraints within the retry budget."""


FEMALE = "female"
MALE = "male"

# (category, gender) -> surface relation
_REL_OF = {
    ("parent", FEMALE): "mother",
    ("parent", MALE): "father",
    ("child", FEMALE): "daughter",
    ("child", MALE): "son",
    ("sibling", FEMALE): "sister",
    ("sibling", MALE): "brother",
    ("spouse", FEMALE): "wife",
    ("spouse", MALE): "husband",
    ("grandparent", FEMALE): "grandmother",
    ("grandparent", MALE): "grandfather",
    ("grandchild", FEMALE): "granddaughter",
    ("grandchild", MALE): "grandson",
    ("pibling", FEMALE): "aunt",
    ("pibling", MALE): "uncle",
    ("nibling", FEMALE): "niece",
    ("nibling", MALE): "nephew",
}

RELATIONS = tuple(sorted(_REL_OF.values()))
RELATION_CATEGORY = {rel: cat for (cat, _), rel in _REL_OF.items()}
RELATION_GENDER = {rel: g for (_, g), rel in _REL_OF.items()}

_INVERSE_CATEGORY = {
    "parent": "child",
    "child": "parent",
    "sibling": "sibling",
    "spouse": "spouse",
    "grandparent": "grandchild",
    "grandchild": "grandparent",
    "pibling": "nibling",
    "nibling": "pibling",
}

# Marriages in this micro-genealogy are heterosexual and siblings are full
# siblings; only compositions that are unambiguous under those assumptions
# appear here. Keys are (category of "Y rel Z", category of "X rel Y");
# the value is the category of the derived "X rel Z".
_CATEGORY_COMPOSE = {
    ("parent", "parent"): "grandparent",
    ("parent", "sibling"): "pibling",
    ("parent", "child"): "sibling",
    ("parent", "spouse"): "parent",
    ("sibling", "parent"): "parent",
    ("sibling", "sibling"): "sibling",
    ("sibling", "child"): "nibling",
    ("sibling", "grandparent"): "grandparent",
    ("sibling", "pibling"): "pibling",
    ("child", "child"): "grandchild",
    ("child", "sibling"): "child",
    ("child", "nibling"): "grandchild",
    ("spouse", "child"): "child",
    ("spouse", "grandchild"): "grandchild",
    ("grandparent", "spouse"): "grandparent",
    ("grandchild", "sibling"): "grandchild",
    ("grandchild", "pibling"): "child",
    ("pibling", "spouse"): "pibling",
    ("pibling", "parent"): "grandparent",
    ("nibling", "sibling"): "nibling",
}

# Spouse-typed second arguments force opposite genders.
_HETERO_RULES = {("parent", "spouse"), ("grandparent", "spouse"), ("pibling", "spouse")}


def _build_composition_rules() -> dict[tuple[str, str], str]:
    rules: dict[tuple[str, str], str] = {}
    for r1 in RELATIONS:
        for r2 in RELATIONS:
            key = (RELATION_CATEGORY[r1], RELATION_CATEGORY[r2])
            cat = _CATEGORY_COMPOSE.get(key)
            if cat is None:
                continue
            if key in _HETERO_RULES and RELATION_GENDER[r1] == RELATION_GENDER[r2]:
                continue
            rules[(r1, r2)] = _REL_OF[(cat, RELATION_GENDER[r2])]
    return rules


COMPOSITION_RULES = _build_composition_rules()

# Relations that can never hold simultaneously for one ordered person pair:
# the opposite-gender counterpart and every same-gender relation.
MUTEX_GROUPS = tuple(
    [frozenset({_REL_OF[(c, FEMALE)], _REL_OF[(c, MALE)]}) for c in _INVERSE_CATEGORY]
    + [
        frozenset(r for r in RELATIONS if RELATION_GENDER[r] == FEMALE),
        frozenset(r for r in RELATIONS if RELATION_GENDER[r] == MALE),
    ]
)

# Relations whose *object* must have a specific gender.
_OBJECT_GENDER = {"wife": MALE, "husband": FEMALE}

DEFAULT_NAME_POOLS = {
    "train": {
        FEMALE: ["Qiana", "Lisa", "Janice", "Susan", "Emily", "Karen", "Paula",
                 "Rachel", "Wendy", "Gloria", "Norma", "Tina"],
        MALE: ["Derick", "Jerry", "John", "Frank", "Oscar", "Peter", "Vince",
               "Harold", "Marvin", "Stan", "Leon", "Greg"],
    },
    "dev": {
        FEMALE: ["Beatrix", "Clara", "Dora", "Fiona", "Greta", "Hattie",
                 "Irene", "Josie", "Kendra", "Lucille", "Mona", "Nelly"],
        MALE: ["Albert", "Bruno", "Cedric", "Dmitri", "Ernest", "Felix",
               "Gideon", "Hector", "Irwin", "Jonas", "Kurt", "Lester"],
    },
    "test": {
        FEMALE: ["Ingrid", "Jolene", "Katya", "Lorna", "Maeve", "Nadia",
                 "Opal", "Priya", "Quilla", "Renata", "Sonia", "Talia"],
        MALE: ["Gustav", "Horace", "Ivan", "Jasper", "Klaus", "Lionel",
               "Magnus", "Nolan", "Orson", "Pavel", "Quentin", "Rufus"],
    },
}

_FACT_TEMPLATES = (
    "{x} is the {r} of {z}",
    "{z} has a {r} named {x}",
)


def compose_relations(r1: str, r2: str) -> str | None:
    """Derived relation of X to Z given "Y is r1 of Z" and "X is r2 of Y"."""
    for r in (r1, r2):
        if r not in RELATION_CATEGORY:
            raise GenerationError(f"unknown relation {r!r}")
    return COMPOSITION_RULES.get((r1, r2))


def invert_relation(r: str, subject_gender: str, object_gender: str) -> str:
    """Relation of the object back to the subject, e.g. (mother, object male) -> son."""
    if r not in RELATION_CATEGORY:
        raise GenerationError(f"unknown relation {r!r}")
    if subject_gender != RELATION_GENDER[r]:
        raise GenerationError(f"{r} implies a {RELATION_GENDER[r]} subject, got {subject_gender}")
    return _REL_OF[(_INVERSE_CATEGORY[RELATION_CATEGORY[r]], object_gender)]


@dataclass(frozen=True)
class KinshipConfig:
    k: int = 3
    names_female: tuple[str, ...] = tuple(DEFAULT_NAME_POOLS["train"][FEMALE])
    names_male: tuple[str, ...] = tuple(DEFAULT_NAME_POOLS["train"][MALE])
    unknowns_per_breakpoint: int = 2
    mutex_samples_per_derived: int = 1
    max_constraints: int = 15
    seed: int = 0
    split: str = "train"


def _rel_prop(x: str, r: str, z: str) -> str:
    return f"{x} is the {r} of {z}"


def closure(
    facts: list[tuple[str, str, str]], genders: dict[str, str]
) -> dict[tuple[str, str], str]:
    """Fixpoint of composition + inversion over (subject, object) -> relation.

    Raises if two rules derive different relations for one ordered pair,
    which would make the story world inconsistent.
    """
    derived: dict[tuple[str, str], str] = {}

    def add(x: str, r: str, z: str) -> bool:
        prev = derived.get((x, z))
        if prev is not None:
            if prev != r:
                raise GenerationError(
                    f"inconsistent closure: {x}->{z} both {prev} and {r}"
                )
            return False
        derived[(x, z)] = r
        return True

    for x, r, z in facts:
        add(x, r, z)
    changed = True
    while changed:
        changed = False
        for (x, z), r in list(derived.items()):
            inv = invert_relation(r, genders[x], genders[z])
            if add(z, inv, x):
                changed = True
        for (y, z), r1 in list(derived.items()):
            for (x, y2), r2 in list(derived.items()):
                if y2 != y or x == z:
                    continue
                r = COMPOSITION_RULES.get((r1, r2))
                if r is not None and add(x, r, z):
                    changed = True
    return derived


def _sample_chain(cfg: KinshipConfig, rng: np.random.Generator):
    """Chain of k facts over fresh persons whose full fold is derivable."""
    females = list(cfg.names_female)
    males = list(cfg.names_male)
    if len(females) < cfg.k + 1 or len(males) < cfg.k + 1:
        raise GenerationError("name pool too small for requested story length")
    rng.shuffle(females)
    rng.shuffle(males)
    pools = {FEMALE: females, MALE: males}

    genders: dict[str, str] = {}
    base_gender = FEMALE if rng.random() < 0.5 else MALE
    persons = [pools[base_gender].pop()]
    genders[persons[0]] = base_gender

    facts: list[tuple[str, str, str]] = []
    cumulative: str | None = None
    for i in range(cfg.k):
        obj = persons[-1]
        candidates = []
        for r in RELATIONS:
            need = _OBJECT_GENDER.get(r)
            if need is not None and need != genders[obj]:
                continue
            if i > 0 and COMPOSITION_RULES.get((cumulative, r)) is None:
                continue
            candidates.append(r)
        if not candidates:
            raise GenerationError("dead-end chain: no composable relation")
        r = candidates[rng.integers(len(candidates))]
        subj = pools[RELATION_GENDER[r]].pop()
        genders[subj] = RELATION_GENDER[r]
        persons.append(subj)
        facts.append((subj, r, obj))
        cumulative = r if i == 0 else COMPOSITION_RULES[(cumulative, r)]
    return facts, genders, persons, cumulative


def gen_kinship_example(cfg: KinshipConfig) -> Example:
    rng = example_rng(cfg.seed, 0)
    return _gen_kinship(cfg, rng, example_id=f"kinship-{cfg.split}-{cfg.seed}")


def _gen_kinship(cfg: KinshipConfig, rng: np.random.Generator, example_id: str) -> Example:
    if cfg.k < 1:
        raise GenerationError("k must be >= 1")
    last_error = None
    for _ in range(20):
        try:
            facts, genders, persons, target_rel = _sample_chain(cfg, rng)
            return _realize_kinship(cfg, rng, example_id, facts, genders, persons, target_rel)
        except GenerationError as err:
            last_error = err
    raise GenerationError(f"kinship generation failed after retries: {last_error}")


def _realize_kinship(cfg, rng, example_id, facts, genders, persons, target_rel) -> Example:
    story_tokens: list[str] = []
    fact_props: list[str] = []
    for x, r, z in facts:
        template = _FACT_TEMPLATES[rng.integers(len(_FACT_TEMPLATES))]
        story_tokens.extend(tokenize(template.format(x=x, r=r, z=z)))
        story_tokens.append(BREAK_TOKEN)
        fact_props.append(_rel_prop(x, r, z))

    marker_positions = [i for i, t in enumerate(story_tokens) if t == BREAK_TOKEN]

    # labels[j] maps proposition text -> label at breakpoint j (1-based)
    labels: list[dict[str, TruthLabel]] = []
    closure_at: list[dict[tuple[str, str], str]] = []
    carried: dict[str, TruthLabel] = {}
    unknown_pairs: set[tuple[str, str, str]] = set()
    for j in range(1, cfg.k + 1):
        derived = closure(facts[:j], genders)
        closure_at.append(derived)
        mentioned = sorted({p for f in facts[:j] for p in (f[0], f[2])})

        def status(x: str, r: str, z: str) -> TruthLabel:
            got = derived.get((x, z))
            if got == r:
                return TruthLabel.ENTAILED
            if got is not None and any(
                r in g and got in g for g in MUTEX_GROUPS
            ):
                return TruthLabel.CONTRADICTED
            return TruthLabel.UNKNOWN

        here: dict[str, TruthLabel] = {}
        # everything derivable is entailed
        for (x, z), r in sorted(derived.items()):
            here[_rel_prop(x, r, z)] = TruthLabel.ENTAILED
        # sampled mutex conflicts of newly derived relations
        prev = closure_at[j - 2] if j >= 2 else {}
        new_pairs = [p for p in sorted(derived) if p not in prev]
        for x, z in new_pairs:
            r = derived[(x, z)]
            conflicts = sorted(
                {other for g in MUTEX_GROUPS if r in g for other in g if other != r}
            )
            take = min(cfg.mutex_samples_per_derived, len(conflicts))
            for idx in rng.choice(len(conflicts), size=take, replace=False):
                here[_rel_prop(x, conflicts[idx], z)] = TruthLabel.CONTRADICTED
        # sampled unknowns: well-typed, underivable relations between mentioned persons
        tries = 0
        added = 0
        while added < cfg.unknowns_per_breakpoint and tries < 50 and len(mentioned) >= 2:
            tries += 1
            x, z = (mentioned[i] for i in rng.choice(len(mentioned), size=2, replace=False))
            opts = [r for r in RELATIONS if RELATION_GENDER[r] == genders[x]]
            r = opts[rng.integers(len(opts))]
            if status(x, r, z) != TruthLabel.UNKNOWN:
                continue
            text = _rel_prop(x, r, z)
            if text in here or text in carried:
                continue
            unknown_pairs.add((x, r, z))
            added += 1
        # carry forward every previously labeled proposition; unknowns may flip
        for text, label in carried.items():
            if text not in here:
                here[text] = label
        for x, r, z in sorted(unknown_pairs):
            text = _rel_prop(x, r, z)
            if text not in here or carried.get(text) == TruthLabel.UNKNOWN:
                here[text] = status(x, r, z)
        labels.append(here)
        for text, label in here.items():
            if label != TruthLabel.UNKNOWN:
                carried[text] = label
            elif text not in carried:
                carried[text] = TruthLabel.UNKNOWN

    constraints = _kinship_constraints(cfg, rng, facts, genders, labels, closure_at)

    breakpoints = tuple(
        BreakpointAnnotation(
            index=j,
            token_position=marker_positions[j - 1],
            propositions=tuple(
                Proposition(text, label) for text, label in sorted(labels[j - 1].items())
            ),
        )
        for j in range(1, cfg.k + 1)
    )
    head, tail = facts[-1][0], facts[0][2]
    qa = (QAPair(question=f"How is {head} related to {tail} ?", answer=target_rel),)
    meta = {
        "task": "kinship",
        "k": str(cfg.k),
        "split": cfg.split,
        "seed": str(cfg.seed),
    }
    return Example(
        id=example_id,
        story_tokens=tuple(story_tokens),
        breakpoints=breakpoints,
        constraints=constraints,
        qa=qa,
        meta=meta,
    )


def _kinship_constraints(cfg, rng, facts, genders, labels, closure_at) -> tuple[str, ...]:
    k = len(facts)
    out: list[str] = []

    def present(j: int, text: str) -> bool:
        return text in labels[j - 1]

    # proof-step compositions: prefix fold + next fact => new fold
    cumulative = facts[0][1]
    cum_prop = _rel_prop(facts[0][0], cumulative, facts[0][2])
    for j in range(2, k + 1):
        x, r, z = facts[j - 1]
        nxt = COMPOSITION_RULES[(cumulative, r)]
        nxt_prop = _rel_prop(x, nxt, facts[0][2])
        expr = Implies(
            And((Atom("E", j - 1, cum_prop), Atom("E", j, _rel_prop(x, r, z)))),
            Atom("E", j, nxt_prop),
        )
        if present(j - 1, cum_prop) and present(j, nxt_prop):
            out.append(render_constraint(expr))
        cumulative, cum_prop = nxt, nxt_prop

    candidates: list[str] = []
    for j in range(1, k + 1):
        derived = closure_at[j - 1]
        for (x, z), r in sorted(derived.items()):
            text = _rel_prop(x, r, z)
            inv = invert_relation(r, genders[x], genders[z])
            inv_text = _rel_prop(z, inv, x)
            if present(j, text) and present(j, inv_text):
                candidates.append(
                    render_constraint(Implies(Atom("E", j, text), Atom("E", j, inv_text)))
                )
            for g in MUTEX_GROUPS:
                if r not in g:
                    continue
                for other in sorted(g - {r}):
                    text2 = _rel_prop(x, other, z)
                    if labels[j - 1].get(text2) == TruthLabel.CONTRADICTED:
                        candidates.append(
                            render_constraint(Implies(Atom("E", j, text), Atom("C", j, text2)))
                        )
        if j < k:
            for text, label in labels[j - 1].items():
                if label == TruthLabel.UNKNOWN or not present(j + 1, text):
                    continue
                pred = "E" if label == TruthLabel.ENTAILED else "C"
                candidates.append(
                    render_constraint(Implies(Atom(pred, j, text), Atom(pred, j + 1, text)))
                )
    seen = set(out)
    candidates = [c for c in dict.fromkeys(candidates) if c not in seen]
    budget = max(0, cfg.max_constraints - len(out))
    if candidates and budget:
        take = min(budget, len(candidates))
        idx = sorted(rng.choice(len(candidates), size=take, replace=False))
        out.extend(candidates[i] for i in idx)
    return tuple(out)


def generate_kinship_dataset(
    cfg: KinshipConfig, count: int, k_values: tuple[int, ...], id_prefix: str = "kinship"
):
    """Deterministic list of examples cycling over k_values, seeded per index."""
    from ..corpus import Dataset

    examples = []
    for i in range(count):
        k = k_values[i % len(k_values)]
        sub = KinshipConfig(
            k=k,
            names_female=cfg.names_female,
            names_male=cfg.names_male,
            unknowns_per_breakpoint=cfg.unknowns_per_breakpoint,
            mutex_samples_per_derived=cfg.mutex_samples_per_derived,
            max_constraints=cfg.max_constraints,
            seed=cfg.seed,
            split=cfg.split,
        )
        rng = example_rng(cfg.seed, i)
        examples.append(_gen_kinship(sub, rng, example_id=f"{id_prefix}-{cfg.split}-{i:05d}"))
    meta = {
        "task": "kinship",
        "split": cfg.split,
        "seed": cfg.seed,
        "count": count,
        "k_values": list(k_values),
    }
    return Dataset(examples=examples, meta=meta)
