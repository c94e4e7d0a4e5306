"""Sample-count-weighted parameter averaging and the plain (chainless) federated loop."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import HospitalDataset, WindowConfig
from .learners import (
    Hyperparams,
    ParamVector,
    Predictor,
    init_model,
    set_params,
    train_local,
)
from .seeding import derive_seed


@dataclass(frozen=True, eq=False)
class LocalUpdate:
    participant_id: int
    round: int
    params: ParamVector
    n_k: int

    def __post_init__(self):
        if self.n_k < 1:
            raise ValueError("n_k must be >= 1")


@dataclass(frozen=True, eq=False)
class GlobalModel:
    round: int
    params: ParamVector


def aggregate(updates: Sequence[LocalUpdate]) -> ParamVector:
    """Componentwise weighted mean with weights n_k / sum(n_k).

    All updates must share one architecture and one round. Summation is
    numpy's pairwise reduction over the weighted stack, so reordering the
    updates moves the result by at most ~1e-16 per component.
    """
    if not updates:
        raise ValueError("no updates to aggregate")
    first = updates[0].params
    rounds = {u.round for u in updates}
    if len(rounds) != 1:
        raise ValueError(f"updates span multiple rounds: {sorted(rounds)}")
    for u in updates:
        if u.params.arch != first.arch or u.params.dims != first.dims:
            raise ValueError("updates mix architectures")
    total = sum(u.n_k for u in updates)
    weights = np.array([u.n_k / total for u in updates])
    stacked = np.stack([w * u.params.values for w, u in zip(weights, updates)])
    return ParamVector(stacked.sum(axis=0), first.arch, first.dims)


def round_seed(train_seed: int, round_index: int, participant_id: int) -> int:
    """Per-(round, participant) training seed; parallel and serial runs agree."""
    return derive_seed("local-train", train_seed, round_index, participant_id)


def _train_one(
    hospital: HospitalDataset,
    global_params: ParamVector,
    template: Predictor,
    h: Hyperparams,
    train_seed: int,
    round_index: int,
    target_scale: tuple[float, float] | None,
) -> LocalUpdate:
    p = set_params(template, global_params)
    trained = train_local(
        p,
        hospital.train,
        hospital.val,
        h,
        round_seed(train_seed, round_index, hospital.hospital_id),
        target_scale=hospital.target_scale if target_scale is None else target_scale,
    )
    return LocalUpdate(
        participant_id=hospital.hospital_id,
        round=round_index,
        params=trained.params,
        n_k=hospital.n_train,
    )


def local_updates(
    hospitals: Sequence[HospitalDataset],
    global_params: ParamVector,
    template: Predictor,
    h: Hyperparams,
    train_seed: int,
    round_index: int,
    max_workers: int = 1,
    target_scale: tuple[float, float] | None = None,
) -> list[LocalUpdate]:
    """One round of local trainings, optionally threaded; output order is fixed.

    target_scale is the shared output frame; None lets every hospital use its
    own training-data glucose statistics.
    """
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [
                pool.submit(
                    _train_one, hosp, global_params, template, h, train_seed, round_index,
                    target_scale,
                )
                for hosp in hospitals
            ]
            return [f.result() for f in futures]
    return [
        _train_one(hosp, global_params, template, h, train_seed, round_index, target_scale)
        for hosp in hospitals
    ]


def run_fedavg(
    hospitals: Sequence[HospitalDataset],
    arch: str,
    cfg: WindowConfig,
    h: Hyperparams,
    rounds: int,
    init_seed: int,
    train_seed: int,
    lstm_hidden: int = 16,
    nnpg_hidden: int = 10,
    max_workers: int = 1,
    target_scale: tuple[float, float] | None = None,
    on_round: Callable[[int, ParamVector], None] | None = None,
) -> GlobalModel:
    """FedAvg with full participation: every hospital trains every round.

    Round 1 starts from the shared initial model; later rounds start from the
    previous round's aggregate. Returns the final aggregated model.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    if not hospitals:
        raise ValueError("hospitals must be non-empty")
    template = init_model(arch, cfg, init_seed, lstm_hidden=lstm_hidden, nnpg_hidden=nnpg_hidden)
    global_params = template.params
    for r in range(1, rounds + 1):
        updates = local_updates(
            hospitals, global_params, template, h, train_seed, r, max_workers, target_scale
        )
        global_params = aggregate(updates)
        if on_round is not None:
            on_round(r, global_params)
    return GlobalModel(round=rounds, params=global_params)
