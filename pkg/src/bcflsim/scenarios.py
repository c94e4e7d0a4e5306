"""Scenario orchestration: worlds, the seven training methods, and the suite.

A *world* is the deterministic product of the config seeds: per-hospital
train/val/test datasets, the optional malicious hospital, and per-patient
evaluation sets. Every method is evaluated the same way — test windows
normalized by the evaluated patient's own first-week statistics, predictions
denormalized by that patient's first-week glucose mean/std — so metric
differences come from the trained parameters alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .chain import (
    ContentStore,
    RoundRecord,
    TokenLedger,
    Vote,
    _event,
    assign_roles,
    decide_vote,
    finalize_model,
    round_beacon,
    submit_update,
    voter_evaluate,
    vrf_keygen,
)
from .config import ScenarioConfig
from .data import (
    STEPS_PER_DAY,
    HospitalDataset,
    NormStats,
    generate_malicious_series,
    generate_patient,
    make_windows,
    split_dataset,
    stack_samples,
)
from .fedavg import aggregate, local_updates, round_seed, run_fedavg
from .learners import (
    ParamVector,
    Predictor,
    digest as param_digest,
    init_model,
    predict_batch,
    train_local,
    val_loss,
)
from .metrics import MetricsResult, delta_avg, evaluate
from .seeding import derive_seed

MALICIOUS_PATIENT_BASE = 900


@dataclass(frozen=True)
class PatientEval:
    patient_id: int
    X: np.ndarray  # (n, L, 4) test windows, patient-normalized
    y: np.ndarray  # raw mg/dL references
    target_steps: np.ndarray
    target_scale: tuple[float, float]


@dataclass
class World:
    cfg: ScenarioConfig
    hospitals: list[HospitalDataset]
    malicious: HospitalDataset | None
    eval_sets: dict[int, PatientEval]


@dataclass
class RunResult:
    method: str
    params: ParamVector
    per_patient: dict[int, MetricsResult]
    seen: dict[int, bool]
    round_val_losses: list[float] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    aborted: bool = False


def resolve_workers(cfg: ScenarioConfig) -> int:
    """Thread count for per-round trainings; BCFL_SIM_THREADS caps it (0 = auto)."""
    want = cfg.max_workers
    env = os.environ.get("BCFL_SIM_THREADS")
    if env is not None:
        cap = int(env)
        want = cap if want == 0 else (min(want, cap) if cap > 0 else want)
    if want == 0:
        want = min(4, os.cpu_count() or 1)
    return max(1, want)


def shared_stats(cfg: ScenarioConfig) -> NormStats:
    """The federation's fixed preprocessing constants as channel statistics."""
    return NormStats(
        mean=np.array([cfg.target_center, 0.0, 0.0]),
        std=np.array([cfg.target_spread, cfg.carbs_scale, cfg.insulin_scale]),
    )


def _patient_eval(cfg: ScenarioConfig, patient_id: int) -> PatientEval:
    series = generate_patient(patient_id, cfg.days, cfg.seeds.data)
    train_end = cfg.train_days * STEPS_PER_DAY
    windows = make_windows(series, cfg.window, shared_stats(cfg), start=train_end)
    X, y = stack_samples(windows)
    steps = np.array([w.target_step for w in windows])
    return PatientEval(
        patient_id=patient_id,
        X=X,
        y=y,
        target_steps=steps,
        target_scale=cfg.target_scale,
    )


def build_world(cfg: ScenarioConfig) -> World:
    """Hospitals, optional malicious participant, and per-patient eval sets."""
    stats = shared_stats(cfg)
    hospitals = []
    for k in range(1, cfg.num_hospitals + 1):
        series = [
            generate_patient(pid, cfg.days, cfg.seeds.data) for pid in cfg.hospital_patient_ids(k)
        ]
        hospitals.append(
            split_dataset(
                series,
                cfg.window,
                split_seed=derive_seed("split", cfg.seeds.data, k),
                hospital_id=k,
                train_days=cfg.train_days,
                val_fraction=cfg.val_fraction,
                stats=stats,
            )
        )

    malicious = None
    if cfg.malicious_hospitals:
        mal_id = cfg.num_hospitals + 1
        series = [
            generate_malicious_series(
                cfg.days,
                seed=derive_seed("malicious", cfg.seeds.data, i),
                patient_id=MALICIOUS_PATIENT_BASE + i,
            )
            for i in range(1, cfg.patients_per_hospital + 1)
        ]
        # The malicious participant follows the honest pipeline to the letter
        # (shared preprocessing frame, validation split); the attack is purely
        # the fabricated data, whose near-zero glucose sits several spreads
        # below any real series in the shared frame.
        malicious = split_dataset(
            series,
            cfg.window,
            split_seed=derive_seed("split", cfg.seeds.data, mal_id),
            hospital_id=mal_id,
            train_days=cfg.train_days,
            val_fraction=cfg.val_fraction,
            stats=stats,
        )

    eval_ids = sorted(set(cfg.selected_patients) | set(cfg.unseen_patient_ids))
    eval_sets = {pid: _patient_eval(cfg, pid) for pid in eval_ids}
    return World(cfg=cfg, hospitals=hospitals, malicious=malicious, eval_sets=eval_sets)


def _template(cfg: ScenarioConfig) -> Predictor:
    return init_model(
        cfg.arch,
        cfg.window,
        cfg.seeds.init,
        lstm_hidden=cfg.lstm_hidden,
        nnpg_hidden=cfg.nnpg_hidden,
    )


def evaluate_model(params: ParamVector, eval_sets: dict[int, PatientEval]) -> dict[int, MetricsResult]:
    out = {}
    for pid in sorted(eval_sets):
        ev = eval_sets[pid]
        predictor = Predictor(params, *ev.target_scale)
        preds = predict_batch(predictor, ev.X)
        out[pid] = evaluate(preds, ev.y)
    return out


def _seen_map(world: World, trained_patient_ids: set[int]) -> dict[int, bool]:
    return {pid: pid in trained_patient_ids for pid in sorted(world.eval_sets)}


def pooled_training_set(hospitals: Sequence[HospitalDataset]):
    train = [w for h in hospitals for w in h.train]
    val = [w for h in hospitals for w in h.val]
    return train, val


def _participants(world: World, include_malicious: bool) -> list[HospitalDataset]:
    out = list(world.hospitals)
    if include_malicious:
        if world.malicious is None:
            raise ValueError("world has no malicious hospital")
        out.append(world.malicious)
    return out


def run_single(cfg: ScenarioConfig, world: World, k: int | None = None) -> RunResult:
    k = cfg.hospital if k is None else k
    if not (1 <= k <= cfg.num_hospitals):
        raise ValueError(f"hospital index {k} out of range 1..{cfg.num_hospitals}")
    hosp = world.hospitals[k - 1]
    trained = train_local(
        _template(cfg),
        hosp.train,
        hosp.val,
        cfg.hyper,
        round_seed(cfg.seeds.train, 1, hosp.hospital_id),
        target_scale=cfg.target_scale,
    )
    return RunResult(
        method=f"H{k}Single",
        params=trained.params,
        per_patient=evaluate_model(trained.params, world.eval_sets),
        seen=_seen_map(world, set(hosp.patient_ids)),
    )


def run_central(cfg: ScenarioConfig, world: World, include_malicious: bool = False) -> RunResult:
    parts = _participants(world, include_malicious)
    train, val = pooled_training_set(parts)
    trained = train_local(
        _template(cfg),
        train,
        val,
        cfg.hyper,
        derive_seed("central", cfg.seeds.train, int(include_malicious)),
        target_scale=cfg.target_scale,
    )
    seen = {pid for h in world.hospitals for pid in h.patient_ids}
    return RunResult(
        method="TotalCentral w/ mal" if include_malicious else "TotalCentral",
        params=trained.params,
        per_patient=evaluate_model(trained.params, world.eval_sets),
        seen=_seen_map(world, seen),
    )


def run_fedavg_scenario(
    cfg: ScenarioConfig, world: World, include_malicious: bool = False
) -> RunResult:
    parts = _participants(world, include_malicious)
    losses: list[float] = []

    def on_round(_r: int, params: ParamVector) -> None:
        losses.append(_mean_honest_val_loss(world, params, cfg.target_scale))

    model = run_fedavg(
        parts,
        cfg.arch,
        cfg.window,
        cfg.hyper,
        cfg.rounds,
        init_seed=cfg.seeds.init,
        train_seed=cfg.seeds.train,
        lstm_hidden=cfg.lstm_hidden,
        nnpg_hidden=cfg.nnpg_hidden,
        max_workers=resolve_workers(cfg),
        target_scale=cfg.target_scale,
        on_round=on_round,
    )
    seen = {pid for h in world.hospitals for pid in h.patient_ids}
    return RunResult(
        method="FedAvg w/ mal" if include_malicious else "FedAvg",
        params=model.params,
        per_patient=evaluate_model(model.params, world.eval_sets),
        seen=_seen_map(world, seen),
        round_val_losses=losses,
    )


def _mean_honest_val_loss(world: World, params: ParamVector, scale: tuple[float, float]) -> float:
    vals = []
    for h in world.hospitals:
        vals.append(val_loss(Predictor(params, *scale), h.val))
    return float(np.mean(vals))


def run_mcgp(cfg: ScenarioConfig, world: World, include_malicious: bool = False) -> RunResult:
    """The staked, voted, VRF-scheduled federated loop (one call = one full task)."""
    parts = _participants(world, include_malicious)
    datasets = {h.hospital_id: h for h in parts}
    mal_id = world.malicious.hospital_id if (include_malicious and world.malicious) else None

    ledger = TokenLedger({h.hospital_id: cfg.initial_balance for h in parts})
    for pid in sorted(datasets):
        ledger.stake(pid, cfg.stake.stake_amount, round_index=0)
    keys = {pid: vrf_keygen(derive_seed("vrf-key", cfg.seeds.chain, pid)) for pid in datasets}

    store = ContentStore()
    template = _template(cfg)
    finalized = template.params
    finalized_digest = store.put(finalized)
    workers = resolve_workers(cfg)
    losses: list[float] = []
    records: list[RoundRecord] = []
    aborted = False

    for r in range(1, cfg.rounds + 1):
        ledger.prune_ineligible(cfg.stake.eligibility_threshold, r)
        if len(ledger.active) < 2:
            aborted = True
            break
        beacon = round_beacon(finalized_digest, r)
        assignment = assign_roles(r, ledger.active, beacon, keys)
        record = RoundRecord(round=r)

        updates = local_updates(
            [datasets[t] for t in assignment.trainers],
            finalized,
            template,
            cfg.hyper,
            cfg.seeds.train,
            r,
            max_workers=workers,
            target_scale=cfg.target_scale,
        )
        for u in updates:
            d = submit_update(store, assignment, record, u.participant_id, u.params)
            ledger.log_event(_event(r, "submit", participant=u.participant_id, digest=d))

        proposed = aggregate(updates)
        proposed_digest = store.put(proposed)

        votes: dict[int, Vote] = {}
        for v in assignment.voters:
            if v == mal_id:
                votes[v] = Vote.OPPOSE  # persistently malicious: sabotage every vote
            else:
                ds = datasets[v]
                votes[v] = voter_evaluate(
                    store,
                    updates,
                    proposed_digest,
                    finalized,
                    loss_fn=lambda pv, _ds=ds: val_loss(
                        Predictor(pv, *cfg.target_scale), _ds.val
                    ),
                    tolerance=cfg.stake.vote_tolerance,
                )
            ledger.log_event(_event(r, "vote", participant=v, vote=votes[v].value))

        majority = decide_vote(votes)
        ledger.log_event(_event(r, "majority", majority=majority.value))
        record.votes = votes
        record.majority = majority
        record.ledger_delta = ledger.settle_round(assignment, votes, majority, cfg.stake, r)

        finalized = finalize_model(majority, proposed, finalized)
        finalized_digest = param_digest(finalized)
        record.finalized_digest = finalized_digest
        ledger.log_event(_event(r, "finalize", majority=majority.value, digest=finalized_digest))
        records.append(record)
        losses.append(_mean_honest_val_loss(world, finalized, cfg.target_scale))

    seen = {pid for h in world.hospitals for pid in h.patient_ids}
    return RunResult(
        method="MCGP w/ mal" if include_malicious else "MCGP",
        params=finalized,
        per_patient=evaluate_model(finalized, world.eval_sets),
        seen=_seen_map(world, seen),
        round_val_losses=losses,
        events=list(ledger.events),
        aborted=aborted,
    )


def run_mode(cfg: ScenarioConfig, world: World | None = None) -> RunResult:
    world = build_world(cfg) if world is None else world
    mal = bool(cfg.malicious_hospitals)
    if cfg.mode == "single":
        return run_single(cfg, world)
    if cfg.mode == "central":
        return run_central(cfg, world, include_malicious=mal)
    if cfg.mode == "fedavg":
        return run_fedavg_scenario(cfg, world, include_malicious=mal)
    return run_mcgp(cfg, world, include_malicious=mal)


@dataclass
class SuiteResult:
    cfg: ScenarioConfig
    results: list[RunResult]

    def result(self, method: str) -> RunResult:
        for r in self.results:
            if r.method == method:
                return r
        raise KeyError(method)

    def cohort_ids(self, cohort: str) -> list[int]:
        if cohort == "current":
            return sorted(self.cfg.selected_patients)
        return list(self.cfg.unseen_patient_ids)

    def average(self, method: str, cohort: str, metric: str) -> float:
        res = self.result(method)
        vals = [getattr(res.per_patient[pid], metric) for pid in self.cohort_ids(cohort)]
        return float(np.mean(vals))

    def patient_rows(self) -> list[dict]:
        rows = []
        for res in self.results:
            for cohort in ("current", "unseen"):
                for pid in self.cohort_ids(cohort):
                    m = res.per_patient[pid]
                    rows.append(
                        {
                            "method": res.method,
                            "patient_id": pid,
                            "seen": res.seen[pid],
                            "rmse": m.rmse,
                            "mard": m.mard,
                        }
                    )
        return rows

    def summary_rows(self) -> list[dict]:
        rows = []
        for res in self.results:
            for cohort in ("current", "unseen"):
                avg_rmse = self.average(res.method, cohort, "rmse")
                avg_mard = self.average(res.method, cohort, "mard")
                rows.append(
                    {
                        "method": res.method,
                        "avg_rmse": avg_rmse,
                        "avg_mard": avg_mard,
                        "delta_avg_rmse": delta_avg(self.average("MCGP", cohort, "rmse"), avg_rmse),
                        "delta_avg_mard": delta_avg(self.average("MCGP", cohort, "mard"), avg_mard),
                        "cohort": cohort,
                    }
                )
        return rows


def run_suite(cfg: ScenarioConfig, world: World | None = None) -> SuiteResult:
    """Every method on one shared world; Δ_avg columns are measured against MCGP."""
    world = build_world(cfg) if world is None else world

    results = [run_single(cfg, world, k) for k in range(1, cfg.num_hospitals + 1)]
    results.append(run_central(cfg, world, include_malicious=False))
    if cfg.malicious_hospitals:
        results.append(run_central(cfg, world, include_malicious=True))
        results.append(run_fedavg_scenario(cfg, world, include_malicious=True))
    else:
        results.append(run_fedavg_scenario(cfg, world, include_malicious=False))
    results.append(run_mcgp(cfg, world, include_malicious=False))
    if cfg.malicious_hospitals:
        results.append(run_mcgp(cfg, world, include_malicious=True))
    return SuiteResult(cfg=cfg, results=results)
