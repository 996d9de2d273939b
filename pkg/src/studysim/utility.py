"""Per-pair utility estimation via two perturbations of the study set.

For each pair the learner is simulated with only that pair (single-one
gain) and with everything except it (all-but-one gain); both gains are
measured against shared baselines (empty set, full set) and averaged.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

from .domain import QAPair, UtilityRecord
from .errors import EmptyStudySetError, StudySimError
from .simulator import ExamSimulator, StudySet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PairConditions:
    qa_id: str
    single: StudySet
    all_but_one: StudySet


@dataclass(frozen=True)
class PerturbationPlan:
    empty: StudySet
    full: StudySet
    per_pair: tuple[PairConditions, ...]

    def conditions(self) -> list[StudySet]:
        """The planned evaluation conditions: the two shared baselines, one
        single-pair set per pair, and one leave-one-out set per pair. A
        leave-one-out set that collapses to the empty set (the one-pair
        case) folds into the empty baseline, giving 3 conditions for n=1
        and 2n+2 otherwise.
        """
        roster = [self.empty, self.full]
        roster.extend(pc.single for pc in self.per_pair)
        roster.extend(
            pc.all_but_one for pc in self.per_pair if pc.all_but_one.id != self.empty.id
        )
        return roster

    def unique_study_sets(self) -> dict[str, StudySet]:
        """Conditions deduplicated by study-set id; each is simulated once."""
        unique: dict[str, StudySet] = {}
        for condition in self.conditions():
            unique.setdefault(condition.id, condition)
        return unique


def plan_perturbations(pairs: Sequence[QAPair]) -> PerturbationPlan:
    if not pairs:
        raise EmptyStudySetError("cannot plan perturbations for zero pairs")
    empty = StudySet.of(())
    full = StudySet.of(pairs)
    per_pair = []
    for pair in pairs:
        removed = full.without(pair.id)
        per_pair.append(
            PairConditions(
                qa_id=pair.id,
                single=StudySet.of((pair,)),
                # Reuse the shared empty condition when removal empties the set.
                all_but_one=empty if not removed.pairs else removed,
            )
        )
    return PerturbationPlan(empty=empty, full=full, per_pair=tuple(per_pair))


def estimate_utilities(
    pairs: Sequence[QAPair],
    simulate: Callable[[StudySet], float],
    workers: int = 1,
) -> list[UtilityRecord]:
    """Score every planned condition once and assemble utility records.

    `simulate` maps a study set to its trial-mean exam score; it is invoked
    exactly once per distinct study-set id, concurrently when workers > 1.
    """
    plan = plan_perturbations(pairs)
    unique = plan.unique_study_sets()
    ordered_ids = list(unique)

    scores: dict[str, float] = {}
    if workers > 1 and len(ordered_ids) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = pool.map(lambda sid: (sid, simulate(unique[sid])), ordered_ids)
            scores = dict(results)
    else:
        for sid in ordered_ids:
            scores[sid] = simulate(unique[sid])

    records = []
    for pc in plan.per_pair:
        try:
            records.append(
                UtilityRecord.from_scores(
                    qa_id=pc.qa_id,
                    s_empty=scores[plan.empty.id],
                    s_full=scores[plan.full.id],
                    s_single=scores[pc.single.id],
                    s_all_but_one=scores[pc.all_but_one.id],
                )
            )
        except StudySimError as exc:
            raise type(exc)(f"pair {pc.qa_id}: {exc}") from exc
    return records


def simulate_with(
    simulator: ExamSimulator, trials: int, base_seed: int
) -> Callable[[StudySet], float]:
    """Standard condition scorer: same trial count and seed offsets for every
    condition so the means stay comparable."""

    def run(study: StudySet) -> float:
        return simulator.simulate(study, trials, base_seed).mean

    return run
