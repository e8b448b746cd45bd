from .kinship import (
    KinshipConfig,
    compose_relations,
    gen_kinship_example,
    invert_relation,
    RELATIONS,
    COMPOSITION_RULES,
    MUTEX_GROUPS,
)
from .microworld import (
    MicroworldConfig,
    WorldState,
    EventRecord,
    PreconditionError,
    gen_conflict_pair,
    gen_hard_split,
    gen_microworld_example,
    simulate_state,
)
from .oracles import (
    OracleDisagreement,
    check_conflict_pair,
    check_kinship_example,
    check_microworld_example,
)

__all__ = [
    "KinshipConfig",
    "MicroworldConfig",
    "WorldState",
    "EventRecord",
    "PreconditionError",
    "OracleDisagreement",
    "RELATIONS",
    "COMPOSITION_RULES",
    "MUTEX_GROUPS",
    "compose_relations",
    "invert_relation",
    "gen_kinship_example",
    "gen_microworld_example",
    "gen_conflict_pair",
    "gen_hard_split",
    "simulate_state",
    "check_kinship_example",
    "check_microworld_example",
    "check_conflict_pair",
]
