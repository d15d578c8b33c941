"""Federation orchestration over a transport.

The server loop drives the pure state machine in fed.py and owns the join
handshake; the client loop is the mirror image and is the exact code path the
socket deployment runs, so an in-process simulation and a real multi-process
run differ only in how bytes move. Training configuration is server-
authoritative: clients take the ModelSpec and TrainConfig from their JoinAck,
which is how both transports are guaranteed to compute the same thing.
"""

from __future__ import annotations

import threading
from dataclasses import replace
from typing import Callable, Sequence

from . import fed, transport as tp
from .data import ClientDataset
from .nn import EpochCheckpoint, init_params
from .params import ParameterSet

__all__ = ["server_loop", "client_loop", "run_federation", "LocalHistoryHook"]

# (client_id, round_index, per-epoch checkpoints) after each local round.
LocalHistoryHook = Callable[[str, int, list[EpochCheckpoint]], None]


def _dispatch(endpoint, peers: dict[str, int], outbound: Sequence[fed.Outbound]) -> None:
    for item in outbound:
        if isinstance(item, fed.SendGlobalModel):
            msg: tp.Message = tp.GlobalModel(item.round_index, item.params)
        elif isinstance(item, fed.SendRoundComplete):
            msg = tp.RoundComplete(item.round_index)
        elif isinstance(item, fed.SendShutdown):
            msg = tp.Shutdown(item.reason)
        else:
            raise TypeError(f"unknown outbound directive {type(item).__name__}")
        endpoint.send(peers[item.client_id], msg)


def server_loop(
    cfg: fed.FederationConfig,
    endpoint,
    initial_params: ParameterSet | None = None,
) -> tuple[ParameterSet, tuple[fed.RoundRecord, ...]]:
    """Run the whole federation from the server side over an open endpoint.

    Joins are accepted until every expected client is present, then rounds
    proceed per the state machine. A client missing at the round timeout fails
    the federation; there is no partial aggregation.
    """
    if initial_params is None:
        initial_params = init_params(cfg.model, cfg.train.seed)
    expected = set(cfg.expected_clients)
    ack_train = replace(cfg.train, epochs=cfg.local_epochs)
    peers: dict[str, int] = {}

    def recv():
        try:
            return endpoint.recv(cfg.round_timeout)
        except tp.TransportTimeout:
            return None

    while set(peers) != expected:
        item = recv()
        if item is None:
            missing = ", ".join(sorted(expected - set(peers)))
            raise fed.ProtocolError(f"timed out waiting for clients to join: {missing}")
        peer, msg = item
        if isinstance(msg, tp.PeerDisconnected):
            joined = {cid for cid, p in peers.items() if p == peer}
            if joined:
                raise fed.ProtocolError(
                    f"client {joined.pop()!r} disconnected before the federation started"
                )
            continue
        if not isinstance(msg, tp.JoinRequest):
            raise fed.ProtocolError(
                f"expected JoinRequest during join phase, got {type(msg).__name__}"
            )
        if msg.client_id not in expected:
            raise fed.ProtocolError(f"join from unknown client {msg.client_id!r}")
        if msg.client_id in peers:
            raise fed.ProtocolError(f"duplicate join from {msg.client_id!r}")
        peers[msg.client_id] = peer
        endpoint.send(peer, tp.JoinAck(msg.client_id, cfg.model, ack_train))

    peer_to_client = {p: c for c, p in peers.items()}
    state = fed.ServerState.initial(cfg, initial_params)
    state, outbound = fed.server_handle(state, fed.Start())
    _dispatch(endpoint, peers, outbound)
    state, _ = fed.server_handle(state, fed.BroadcastDone())

    while state.phase is not fed.ServerPhase.FINISHED:
        if state.phase is fed.ServerPhase.COLLECTING:
            item = recv()
            if item is None:
                fed.server_handle(state, fed.Timeout())  # always raises here
                raise AssertionError("Timeout event must raise")
            peer, msg = item
            if isinstance(msg, tp.PeerDisconnected):
                client = peer_to_client.get(peer, f"peer {peer}")
                raise fed.ProtocolError(
                    f"client {client!r} disconnected during round {state.current_round}"
                    + (f": {msg.reason}" if msg.reason else "")
                )
            if not isinstance(msg, tp.ClientUpdate):
                raise fed.ProtocolError(
                    f"expected ClientUpdate in round {state.current_round}, "
                    f"got {type(msg).__name__}"
                )
            if peer_to_client.get(peer) != msg.update.client_id:
                raise fed.ProtocolError(
                    f"peer for {peer_to_client.get(peer)!r} sent an update claiming to be "
                    f"{msg.update.client_id!r}"
                )
            state, outbound = fed.server_handle(state, fed.UpdateReceived(msg.update))
            _dispatch(endpoint, peers, outbound)
        elif state.phase is fed.ServerPhase.AGGREGATING:
            state, outbound = fed.server_handle(state, fed.Aggregate())
            _dispatch(endpoint, peers, outbound)
            if state.phase is fed.ServerPhase.BROADCASTING:
                state, _ = fed.server_handle(state, fed.BroadcastDone())
        else:  # pragma: no cover - unreachable by construction
            raise fed.ProtocolError(f"server loop stuck in phase {state.phase.value}")

    return state.global_params, state.history


def client_loop(
    channel,
    client_id: str,
    dataset: ClientDataset,
    history_hook: LocalHistoryHook | None = None,
    submit_final_epoch: bool = False,
    timeout: float | None = None,
) -> int:
    """Join, train every round we are asked to, stop on Shutdown.

    Returns the number of local rounds completed.
    """
    channel.send(tp.JoinRequest(client_id))
    ack = channel.recv(timeout)
    if not isinstance(ack, tp.JoinAck) or ack.client_id != client_id:
        raise fed.ProtocolError(f"client {client_id!r}: expected JoinAck, got {ack!r}")
    expected_signature = ack.model_spec.param_signature()
    role = fed.ClientRole(client_id, dataset, ack.train_config)
    rounds_done = 0
    try:
        while True:
            msg = channel.recv(timeout)
            if isinstance(msg, tp.GlobalModel):
                if msg.params.shape_signature() != expected_signature:
                    raise fed.ProtocolError(
                        f"client {client_id!r}: broadcast weights do not match the "
                        f"advertised model"
                    )
                update, history = fed.client_local_round_with_history(
                    msg.params,
                    role,
                    msg.round_index,
                    ack.train_config.epochs,
                    submit_final_epoch,
                )
                if history_hook is not None:
                    history_hook(client_id, msg.round_index, history)
                channel.send(tp.ClientUpdate(update))
                rounds_done += 1
            elif isinstance(msg, tp.RoundComplete):
                continue
            elif isinstance(msg, tp.Shutdown):
                return rounds_done
            else:
                raise fed.ProtocolError(
                    f"client {client_id!r}: unexpected {type(msg).__name__}"
                )
    finally:
        channel.close()


def run_federation(
    cfg: fed.FederationConfig,
    clients: Sequence[fed.ClientRole],
    transport: str | tp.TransportPair = "in_process",
    initial_params: ParameterSet | None = None,
    history_hook: LocalHistoryHook | None = None,
) -> tuple[ParameterSet, tuple[fed.RoundRecord, ...]]:
    """Run a complete federation with the given clients in one process.

    Clients run in their own threads against the chosen transport ("in_process"
    or "socket", or a prebuilt TransportPair), training concurrently exactly as
    separate processes would. The result is bitwise independent of the
    transport and of client scheduling.
    """
    role_ids = sorted(r.client_id for r in clients)
    if role_ids != sorted(cfg.expected_clients):
        raise ValueError(
            f"client roles {role_ids} do not match expected_clients "
            f"{sorted(cfg.expected_clients)}"
        )
    pair = tp.transport_pair(transport) if isinstance(transport, str) else transport
    errors: dict[str, BaseException] = {}

    def client_main(role: fed.ClientRole) -> None:
        try:
            channel = pair.connect()
            client_loop(
                channel,
                role.client_id,
                role.dataset,
                history_hook=history_hook,
                submit_final_epoch=cfg.submit_final_epoch,
            )
        except BaseException as exc:  # surfaced after the server loop ends
            errors[role.client_id] = exc

    threads = [
        threading.Thread(target=client_main, args=(role,), daemon=True, name=role.client_id)
        for role in clients
    ]
    try:
        for thread in threads:
            thread.start()
        try:
            final, history = server_loop(cfg, pair.endpoint, initial_params)
        except fed.ProtocolError:
            if errors:
                client, exc = sorted(errors.items())[0]
                raise fed.ProtocolError(f"client {client!r} failed: {exc}") from exc
            raise
        for thread in threads:
            thread.join(timeout=cfg.round_timeout)
        if errors:
            client, exc = sorted(errors.items())[0]
            raise fed.ProtocolError(f"client {client!r} failed: {exc}") from exc
        return final, history
    finally:
        pair.endpoint.close()
