"""Incremental-learning strategies and their registry."""
from .base import Learner, LearnerError, NonFiniteLossError, TaskOrderError, replay_batch_mix
from .strategies import (ACIL, DER, EWC, GEM, WA, BiC, Finetune, ICaRL, LwF, MetaSC, PODNet,
                         Replay, fewshot_fit)

LEARNERS = {cls.name: cls for cls in (Finetune, Replay, EWC, LwF, ICaRL, GEM, BiC, WA,
                                      PODNet, DER, ACIL, MetaSC)}
UNIMPLEMENTED = ("coil", "pan", "amfo")


class UnknownLearnerError(LearnerError):
    pass


def get_learner(name: str):
    if name in LEARNERS:
        return LEARNERS[name]
    if name in UNIMPLEMENTED:
        raise UnknownLearnerError(
            f"learner {name!r} is declared but not implemented; available: {sorted(LEARNERS)}"
        )
    raise UnknownLearnerError(
        f"unknown learner {name!r}; available: {sorted(LEARNERS)}; "
        f"declared but unimplemented: {sorted(UNIMPLEMENTED)}"
    )


def build_learner(name: str, **kwargs) -> Learner:
    return get_learner(name)(**kwargs)


__all__ = ["LEARNERS", "UNIMPLEMENTED", "Learner", "LearnerError", "NonFiniteLossError",
           "TaskOrderError", "UnknownLearnerError", "build_learner", "fewshot_fit",
           "get_learner", "replay_batch_mix"]
