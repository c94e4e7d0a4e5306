"""Simulated on-chain layer: token ledger, staking/slashing, VRF role draw, voting.

Every state change appends a JSON-serializable event, and replaying an event
log reconstructs the ledger exactly — token amounts are integers so there is
no accumulation drift. The VRF is a keyed-hash stand-in with a public verify
function: honest evaluations round-trip and any single-bit tamper of input,
output, or proof is rejected. It is not forgery-resistant the way a real
elliptic-curve VRF is, which is irrelevant for an in-process simulation where
all evaluations come from the simulator itself.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

from .fedavg import LocalUpdate, aggregate
from .learners import ParamVector, digest as param_digest, deserialize, serialize


class ProtocolError(RuntimeError):
    """A participant attempted something its role or state forbids."""


class QuorumError(RuntimeError):
    """Fewer than two eligible participants remain; the round cannot run."""


class Vote(str, Enum):
    SUPPORT = "support"
    OPPOSE = "oppose"


@dataclass(frozen=True)
class StakeConfig:
    stake_amount: int = 10
    eligibility_threshold: int = 2
    reward: int = 1
    slash: int = 2
    vote_tolerance: float = 0.05

    def __post_init__(self):
        if not self.stake_amount > self.eligibility_threshold >= 0:
            raise ValueError("require stake_amount > eligibility_threshold >= 0")
        if self.reward <= 0 or self.slash <= 0:
            raise ValueError("reward and slash must be positive")
        if self.vote_tolerance < 0:
            raise ValueError("vote_tolerance must be >= 0")


@dataclass
class LedgerDelta:
    rewarded: dict[int, int] = field(default_factory=dict)
    slashed: dict[int, int] = field(default_factory=dict)


def _event(round_index, event_type, participant=None, amount=None, vote=None, majority=None, digest=None) -> dict:
    return {
        "round": round_index,
        "event_type": event_type,
        "participant": participant,
        "amount": amount,
        "vote": vote,
        "majority": majority,
        "digest": digest,
    }


class TokenLedger:
    """Per-participant balances and stakes; a single serialized state machine.

    Conservation invariant, in integer tokens:
    sum(balances) + sum(staked) == initial_total + minted_total - burned_total.
    """

    def __init__(self, initial_balances: Mapping[int, int]):
        self.balances: dict[int, int] = {int(p): int(b) for p, b in initial_balances.items()}
        if any(b < 0 for b in self.balances.values()):
            raise ValueError("initial balances must be non-negative")
        self.staked: dict[int, int] = {p: 0 for p in self.balances}
        self.active: set[int] = set()
        self.expelled: set[int] = set()
        self.minted_total = 0
        self.burned_total = 0
        self.initial_total = sum(self.balances.values())
        self.events: list[dict] = []
        for p in sorted(self.balances):
            self.events.append(_event(0, "genesis", participant=p, amount=self.balances[p]))

    def total_held(self) -> int:
        return sum(self.balances.values()) + sum(self.staked.values())

    def conservation_holds(self) -> bool:
        return self.total_held() == self.initial_total + self.minted_total - self.burned_total

    def stake(self, participant: int, amount: int, round_index: int = 0) -> None:
        if participant not in self.balances:
            raise ProtocolError(f"unknown participant {participant}")
        if participant in self.expelled:
            raise ProtocolError(f"participant {participant} was expelled")
        if participant in self.active:
            raise ProtocolError(f"participant {participant} already staked")
        if self.balances[participant] < amount:
            raise ProtocolError(
                f"participant {participant} holds {self.balances[participant]} < stake {amount}"
            )
        self.balances[participant] -= amount
        self.staked[participant] += amount
        self.active.add(participant)
        self.events.append(_event(round_index, "stake", participant=participant, amount=amount))

    def _reward(self, participant: int, amount: int, round_index: int) -> None:
        self.balances[participant] += amount
        self.minted_total += amount
        self.events.append(_event(round_index, "reward", participant=participant, amount=amount))

    def _slash(self, participant: int, amount: int, round_index: int) -> int:
        taken = min(amount, self.staked[participant])
        self.staked[participant] -= taken
        self.burned_total += taken
        self.events.append(_event(round_index, "slash", participant=participant, amount=taken))
        return taken

    def settle_round(
        self,
        assignment: "RoleAssignment",
        votes: Mapping[int, Vote],
        majority: Vote,
        cfg: StakeConfig,
        round_index: int,
    ) -> LedgerDelta:
        """Reward majority voters, slash minority voters; trainers rise or fall together."""
        for voter in votes:
            if voter not in assignment.voters:
                raise ProtocolError(f"vote from non-voter {voter}")
        delta = LedgerDelta()
        for voter in sorted(votes):
            if votes[voter] == majority:
                self._reward(voter, cfg.reward, round_index)
                delta.rewarded[voter] = cfg.reward
            else:
                delta.slashed[voter] = self._slash(voter, cfg.slash, round_index)
        for trainer in sorted(assignment.trainers):
            if majority == Vote.SUPPORT:
                self._reward(trainer, cfg.reward, round_index)
                delta.rewarded[trainer] = cfg.reward
            else:
                delta.slashed[trainer] = self._slash(trainer, cfg.slash, round_index)
        return delta

    def prune_ineligible(self, threshold: int, round_index: int) -> set[int]:
        """Expel every active participant whose stake fell to the threshold or below."""
        removed = {p for p in self.active if self.staked[p] <= threshold}
        for p in sorted(removed):
            self.active.discard(p)
            self.expelled.add(p)
            self.events.append(
                _event(round_index, "prune", participant=p, amount=self.staked[p])
            )
        return removed

    def log_event(self, event: dict) -> None:
        self.events.append(event)


def replay_events(events: Iterable[dict]) -> TokenLedger:
    """Rebuild a ledger from its event log; must match the live ledger exactly."""
    events = list(events)
    genesis = {e["participant"]: e["amount"] for e in events if e["event_type"] == "genesis"}
    ledger = TokenLedger(genesis)
    ledger.events.clear()
    for e in events:
        ledger.events.append(e)
        kind = e["event_type"]
        p = e.get("participant")
        if kind == "genesis":
            continue
        if kind == "stake":
            ledger.balances[p] -= e["amount"]
            ledger.staked[p] += e["amount"]
            ledger.active.add(p)
        elif kind == "reward":
            ledger.balances[p] += e["amount"]
            ledger.minted_total += e["amount"]
        elif kind == "slash":
            ledger.staked[p] -= e["amount"]
            ledger.burned_total += e["amount"]
        elif kind == "prune":
            ledger.active.discard(p)
            ledger.expelled.add(p)
    return ledger


def events_to_jsonl(events: Iterable[dict]) -> str:
    return "".join(json.dumps(e, sort_keys=True) + "\n" for e in events)


def events_from_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


# --- VRF mock -----------------------------------------------------------------

@dataclass(frozen=True)
class VrfKeyPair:
    secret: bytes
    public: bytes


def vrf_keygen(seed: int) -> VrfKeyPair:
    sk = hashlib.sha256(b"vrf-secret|" + str(seed).encode()).digest()
    return VrfKeyPair(secret=sk, public=hashlib.sha256(sk).digest())


def vrf_eval(sk: bytes, data: bytes) -> tuple[bytes, bytes]:
    """Deterministic (output, proof) for this key and input."""
    pk = hashlib.sha256(sk).digest()
    proof = hmac.new(sk, data, hashlib.sha256).digest()
    output = hashlib.sha256(pk + data + proof).digest()
    return output, proof


def vrf_verify(pk: bytes, data: bytes, output: bytes, proof: bytes) -> bool:
    if len(output) != 32 or len(proof) != 32:
        return False
    expect = hashlib.sha256(pk + data + proof).digest()
    return hmac.compare_digest(expect, output)


@dataclass(frozen=True)
class RoleAssignment:
    round: int
    trainers: tuple[int, ...]
    voters: tuple[int, ...]
    proofs: dict[int, tuple[bytes, bytes]]  # participant -> (output, proof)
    beacon: bytes


def assign_roles(
    round_index: int,
    active: Iterable[int],
    beacon: bytes,
    keys: Mapping[int, VrfKeyPair],
) -> RoleAssignment:
    """Sort participants by their VRF output on (beacon, round); low half trains.

    With n active participants the first ceil(n/2) become trainers and the
    rest voters. Every proof is checked before the assignment is accepted.
    """
    active = sorted(active)
    if len(active) < 2:
        raise QuorumError(f"need at least 2 active participants, have {len(active)}")
    data = beacon + round_index.to_bytes(8, "little")
    draws = {}
    for p in active:
        out, proof = vrf_eval(keys[p].secret, data)
        if not vrf_verify(keys[p].public, data, out, proof):
            raise ProtocolError(f"VRF proof for participant {p} failed verification")
        draws[p] = (out, proof)
    ranked = sorted(active, key=lambda p: (draws[p][0], p))
    n_train = math.ceil(len(active) / 2)
    return RoleAssignment(
        round=round_index,
        trainers=tuple(ranked[:n_train]),
        voters=tuple(ranked[n_train:]),
        proofs=draws,
        beacon=beacon,
    )


def round_beacon(previous_digest: str, round_index: int) -> bytes:
    """Per-round randomness: hash of the last finalized model digest and the index."""
    return hashlib.sha256(bytes.fromhex(previous_digest) + round_index.to_bytes(8, "little")).digest()


# --- content-addressed update store --------------------------------------------

class ContentStore:
    """Digest-addressed blob store standing in for a public file network."""

    def __init__(self):
        self._blobs: dict[str, bytes] = {}

    def put(self, params: ParamVector) -> str:
        d = param_digest(params)
        self._blobs.setdefault(d, serialize(params))
        return d

    def get(self, d: str) -> ParamVector:
        if d not in self._blobs:
            raise KeyError(f"digest {d} not in store")
        return deserialize(self._blobs[d])

    def __contains__(self, d: str) -> bool:
        return d in self._blobs

    def __len__(self) -> int:
        return len(self._blobs)


@dataclass
class RoundRecord:
    round: int
    update_digests: dict[int, str] = field(default_factory=dict)
    votes: dict[int, Vote] = field(default_factory=dict)
    majority: Vote | None = None
    finalized_digest: str | None = None
    ledger_delta: LedgerDelta | None = None


def submit_update(
    store: ContentStore,
    assignment: RoleAssignment,
    record: RoundRecord,
    trainer: int,
    params: ParamVector,
) -> str:
    if trainer not in assignment.trainers:
        raise ProtocolError(f"participant {trainer} is not a trainer this round")
    if trainer in record.update_digests:
        raise ProtocolError(f"trainer {trainer} already submitted this round")
    d = store.put(params)
    record.update_digests[trainer] = d
    return d


def voter_evaluate(
    store: ContentStore,
    updates: Sequence[LocalUpdate],
    proposed_digest: str,
    previous: ParamVector,
    loss_fn: Callable[[ParamVector], float],
    tolerance: float,
) -> Vote:
    """Recompute the aggregate from stored updates, then compare validation losses.

    Oppose on any integrity failure (missing update blobs, digest mismatch);
    otherwise support iff the proposed model's loss is within (1 + tolerance)
    of the previous model's.
    """
    fetched = []
    for u in updates:
        d = param_digest(u.params)
        if d not in store:
            return Vote.OPPOSE
        fetched.append(LocalUpdate(u.participant_id, u.round, store.get(d), u.n_k))
    recomputed = aggregate(fetched)
    if param_digest(recomputed) != proposed_digest:
        return Vote.OPPOSE
    if loss_fn(recomputed) <= loss_fn(previous) * (1.0 + tolerance):
        return Vote.SUPPORT
    return Vote.OPPOSE


def decide_vote(votes: Mapping[int, Vote]) -> Vote:
    """Strict majority; a tie counts as oppose."""
    if not votes:
        raise QuorumError("no votes cast")
    support = sum(1 for v in votes.values() if v == Vote.SUPPORT)
    oppose = len(votes) - support
    return Vote.SUPPORT if support > oppose else Vote.OPPOSE


def finalize_model(majority: Vote, proposed: ParamVector, previous: ParamVector) -> ParamVector:
    return proposed if majority == Vote.SUPPORT else previous
