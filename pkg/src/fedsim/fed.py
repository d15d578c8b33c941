"""FedAvg protocol core: aggregation, client local rounds, and the server state machine.

One federated round is broadcast -> local training -> update collection ->
aggregation. The server is a pure transition function over an immutable
ServerState, so it can be driven identically by an in-process loop, a socket
loop, or an exhaustive model-checking test.

Aggregation runs in exact rational arithmetic per element and rounds once at
the end. That buys three bitwise guarantees the protocol tests rely on:
permutation invariance (beyond the canonical client sort), averaging K
identical updates returns them unchanged, and sample weighting with equal
counts is literally the uniform result. At desk scale the cost is irrelevant.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from .data import ClientDataset
from .nn import EpochCheckpoint, ModelSpec, TrainConfig, train_local
from .params import ParameterSet, require_compatible
from .rng import derive_seed

__all__ = [
    "ProtocolError",
    "AVERAGING_MODES",
    "ModelUpdate",
    "FederationConfig",
    "ClientRole",
    "ServerPhase",
    "RoundRecord",
    "ServerState",
    "Start",
    "BroadcastDone",
    "UpdateReceived",
    "Aggregate",
    "Timeout",
    "SendGlobalModel",
    "SendRoundComplete",
    "SendShutdown",
    "federated_average",
    "client_round_seed",
    "client_local_round",
    "server_handle",
]


class ProtocolError(Exception):
    """A federation rule was violated (wrong round, unknown client, timeout...)."""


AVERAGING_MODES = ("uniform", "sample_weighted")


@dataclass(frozen=True)
class ModelUpdate:
    """What a client sends back after one local round."""

    client_id: str
    round_index: int
    params: ParameterSet
    num_train_samples: int
    best_val_loss: float

    def __post_init__(self):
        if not self.client_id:
            raise ValueError("client_id must be non-empty")
        if self.round_index < 0:
            raise ValueError(f"round_index must be >= 0, got {self.round_index}")
        if self.num_train_samples < 1:
            raise ValueError(f"num_train_samples must be >= 1, got {self.num_train_samples}")
        self.params.validate()
        if not np.isfinite(self.best_val_loss):
            raise ValueError(f"best_val_loss must be finite, got {self.best_val_loss}")


@dataclass(frozen=True)
class FederationConfig:
    """Round structure, averaging mode, and the training config broadcast to clients."""

    model: ModelSpec
    num_rounds: int = 5
    local_epochs: int = 4
    averaging_mode: str = "uniform"
    train: TrainConfig = field(default_factory=TrainConfig)
    expected_clients: tuple[str, ...] = ()
    round_timeout: float | None = None  # None = wait forever (in-process default)
    submit_final_epoch: bool = False  # ablation: send last-epoch weights, not best-val

    def __post_init__(self):
        object.__setattr__(self, "expected_clients", tuple(self.expected_clients))
        if self.num_rounds < 1:
            raise ValueError(f"num_rounds must be >= 1, got {self.num_rounds}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.averaging_mode not in AVERAGING_MODES:
            raise ValueError(
                f"averaging_mode must be one of {AVERAGING_MODES}, got {self.averaging_mode!r}"
            )
        if not self.expected_clients:
            raise ValueError("expected_clients must be non-empty")
        if len(set(self.expected_clients)) != len(self.expected_clients):
            raise ValueError(f"duplicate client ids in {self.expected_clients}")
        if self.round_timeout is not None and self.round_timeout <= 0:
            raise ValueError(f"round_timeout must be positive, got {self.round_timeout}")

    @property
    def total_local_epochs(self) -> int:
        return self.num_rounds * self.local_epochs


@dataclass(frozen=True)
class ClientRole:
    """One participant: identity, local data, and training settings."""

    client_id: str
    dataset: ClientDataset
    train: TrainConfig


def federated_average(updates: Sequence[ModelUpdate], mode: str = "uniform") -> ParameterSet:
    """Per-element mean of the client parameter sets.

    uniform: arithmetic mean. sample_weighted: weighted by each client's
    num_train_samples. Updates are sorted by client_id first, and each element
    is accumulated as an exact rational and rounded once, so the result is
    bitwise independent of input order.
    """
    if not updates:
        raise ValueError("cannot average an empty update list")
    if mode not in AVERAGING_MODES:
        raise ValueError(f"averaging_mode must be one of {AVERAGING_MODES}, got {mode!r}")
    rounds = {u.round_index for u in updates}
    if len(rounds) > 1:
        raise ProtocolError(f"updates span multiple rounds: {sorted(rounds)}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client ids in updates: {ids}")
    base = ordered[0].params
    for u in ordered[1:]:
        require_compatible(base, u.params)

    if mode == "uniform":
        weights = [Fraction(1, len(ordered))] * len(ordered)
    else:
        total = sum(u.num_train_samples for u in ordered)
        weights = [Fraction(u.num_train_samples, total) for u in ordered]

    layers = []
    for layer_index, (name, first) in enumerate(base):
        columns = [u.params.arrays[layer_index] for u in ordered]
        out = np.empty(first.size)
        for j in range(first.size):
            acc = Fraction(0)
            for column, w in zip(columns, weights):
                acc += Fraction(float(column[j])) * w
            out[j] = float(acc)
        layers.append((name, out))
    return ParameterSet(layers)


def client_round_seed(base_seed: int, round_index: int, client_id: str) -> int:
    """The training seed a client uses in a given round.

    Derived from (base seed, round, client id) so results cannot depend on
    scheduling, transport, or the order clients are started in.
    """
    return derive_seed(base_seed, round_index, client_id)


def client_local_round(
    global_params: ParameterSet,
    role: ClientRole,
    round_index: int,
    local_epochs: int,
    submit_final_epoch: bool = False,
) -> ModelUpdate:
    """Train locally from the broadcast weights and package the reply."""
    update, _ = client_local_round_with_history(
        global_params, role, round_index, local_epochs, submit_final_epoch
    )
    return update


def client_local_round_with_history(
    global_params: ParameterSet,
    role: ClientRole,
    round_index: int,
    local_epochs: int,
    submit_final_epoch: bool = False,
) -> tuple[ModelUpdate, list[EpochCheckpoint]]:
    """Like client_local_round, but also returns the per-epoch checkpoints."""
    if local_epochs < 1:
        raise ValueError(f"local_epochs must be >= 1, got {local_epochs}")
    if round_index < 0:
        raise ValueError(f"round_index must be >= 0, got {round_index}")
    cfg = replace(
        role.train,
        epochs=local_epochs,
        seed=client_round_seed(role.train.seed, round_index, role.client_id),
    )
    best, history = train_local(global_params, role.dataset, cfg)
    chosen = history[-1] if submit_final_epoch else best
    update = ModelUpdate(
        client_id=role.client_id,
        round_index=round_index,
        params=chosen.params,
        num_train_samples=len(role.dataset.train),
        best_val_loss=best.val_loss,
    )
    return update, history


class ServerPhase(enum.Enum):
    IDLE = "idle"
    BROADCASTING = "broadcasting"
    COLLECTING = "collecting"
    AGGREGATING = "aggregating"
    FINISHED = "finished"


_PHASE_ORDER = {
    ServerPhase.IDLE: 0,
    ServerPhase.BROADCASTING: 1,
    ServerPhase.COLLECTING: 2,
    ServerPhase.AGGREGATING: 3,
    ServerPhase.FINISHED: 4,
}


@dataclass(frozen=True)
class RoundRecord:
    """What one completed round produced."""

    round_index: int
    updates: tuple[ModelUpdate, ...]  # sorted by client_id
    global_params: ParameterSet


@dataclass(frozen=True)
class ServerState:
    """Immutable server snapshot; transitions happen only through server_handle."""

    config: FederationConfig
    phase: ServerPhase
    current_round: int
    global_params: ParameterSet
    pending_clients: frozenset[str]
    round_updates: tuple[ModelUpdate, ...]
    history: tuple[RoundRecord, ...]

    @staticmethod
    def initial(config: FederationConfig, global_params: ParameterSet) -> "ServerState":
        return ServerState(
            config=config,
            phase=ServerPhase.IDLE,
            current_round=0,
            global_params=global_params.validate(),
            pending_clients=frozenset(),
            round_updates=(),
            history=(),
        )

    def progress_key(self) -> tuple[int, int]:
        """(round, phase order): non-decreasing along any legal event sequence."""
        return (self.current_round, _PHASE_ORDER[self.phase])


# Events.
@dataclass(frozen=True)
class Start:
    """Begin round 0 (legal only in IDLE)."""


@dataclass(frozen=True)
class BroadcastDone:
    """The transport has handed the round's global model to every client."""


@dataclass(frozen=True)
class UpdateReceived:
    update: ModelUpdate


@dataclass(frozen=True)
class Aggregate:
    """Fold the collected updates into the next global model."""


@dataclass(frozen=True)
class Timeout:
    """The collection deadline fired."""


Event = Start | BroadcastDone | UpdateReceived | Aggregate | Timeout


# Outbound directives; the runner maps these onto transport messages.
@dataclass(frozen=True)
class SendGlobalModel:
    client_id: str
    round_index: int
    params: ParameterSet


@dataclass(frozen=True)
class SendRoundComplete:
    client_id: str
    round_index: int


@dataclass(frozen=True)
class SendShutdown:
    client_id: str
    reason: str


Outbound = SendGlobalModel | SendRoundComplete | SendShutdown


def _illegal(state: ServerState, event: Event) -> ProtocolError:
    return ProtocolError(
        f"event {type(event).__name__} is illegal in phase {state.phase.value}"
    )


def server_handle(state: ServerState, event: Event) -> tuple[ServerState, list[Outbound]]:
    """Pure transition function. Illegal events raise and leave state untouched."""
    cfg = state.config
    clients = sorted(cfg.expected_clients)

    if isinstance(event, Start):
        if state.phase is not ServerPhase.IDLE:
            raise _illegal(state, event)
        out = [SendGlobalModel(c, 0, state.global_params) for c in clients]
        return replace(state, phase=ServerPhase.BROADCASTING, current_round=0), out

    if isinstance(event, BroadcastDone):
        if state.phase is not ServerPhase.BROADCASTING:
            raise _illegal(state, event)
        return (
            replace(
                state,
                phase=ServerPhase.COLLECTING,
                pending_clients=frozenset(cfg.expected_clients),
                round_updates=(),
            ),
            [],
        )

    if isinstance(event, UpdateReceived):
        if state.phase is not ServerPhase.COLLECTING:
            raise _illegal(state, event)
        update = event.update
        if update.client_id not in cfg.expected_clients:
            raise ProtocolError(f"update from unknown client {update.client_id!r}")
        if update.client_id not in state.pending_clients:
            raise ProtocolError(
                f"duplicate update from {update.client_id!r} in round {state.current_round}"
            )
        if update.round_index != state.current_round:
            raise ProtocolError(
                f"update from {update.client_id!r} is for round {update.round_index}, "
                f"server is collecting round {state.current_round}"
            )
        pending = state.pending_clients - {update.client_id}
        next_phase = ServerPhase.AGGREGATING if not pending else ServerPhase.COLLECTING
        return (
            replace(
                state,
                phase=next_phase,
                pending_clients=pending,
                round_updates=state.round_updates + (update,),
            ),
            [],
        )

    if isinstance(event, Aggregate):
        if state.phase is not ServerPhase.AGGREGATING:
            raise _illegal(state, event)
        new_global = federated_average(state.round_updates, cfg.averaging_mode)
        record = RoundRecord(
            round_index=state.current_round,
            updates=tuple(sorted(state.round_updates, key=lambda u: u.client_id)),
            global_params=new_global,
        )
        history = state.history + (record,)
        if state.current_round + 1 < cfg.num_rounds:
            next_round = state.current_round + 1
            out = [SendGlobalModel(c, next_round, new_global) for c in clients]
            return (
                replace(
                    state,
                    phase=ServerPhase.BROADCASTING,
                    current_round=next_round,
                    global_params=new_global,
                    pending_clients=frozenset(),
                    round_updates=(),
                    history=history,
                ),
                out,
            )
        out = [SendRoundComplete(c, state.current_round) for c in clients]
        out += [SendShutdown(c, "federation complete") for c in clients]
        return (
            replace(
                state,
                phase=ServerPhase.FINISHED,
                global_params=new_global,
                pending_clients=frozenset(),
                round_updates=(),
                history=history,
            ),
            out,
        )

    if isinstance(event, Timeout):
        if state.phase is not ServerPhase.COLLECTING:
            raise _illegal(state, event)
        missing = ", ".join(sorted(state.pending_clients))
        raise ProtocolError(
            f"round {state.current_round} timed out waiting for clients: {missing}"
        )

    raise TypeError(f"unknown event type {type(event).__name__}")
