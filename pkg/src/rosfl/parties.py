"""Client, computation-server, and aggregation-server state machines.

A training round: the aggregation server broadcasts head/tail weights,
every client runs E local epochs of split forward/backward against its
own body replica on the computation server, clients upload head/tail
weights, and both servers aggregate (and optionally correct) their
parts, which become the next broadcast and the next drift anchors.

The same ClientNode serves the parallel protocol and the sequential
relay baseline; only the server behaviors differ. All cross-party
interaction goes through wire messages; a party's state never contains
parameters of a part it does not own.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .errors import ProtocolMisuseError
from .fedops import AnchorStore, aggregate, correct, normalized_weights
from .metrics import MetricRecord
from .nn.optim import make_optimizer
from .nn.params import ParamSet
from .nn.rng import stream
from .unet import BodyModel, HeadModel, TailModel
from .wire import Kind, WireMessage

AGG, COMPUTE = "agg", "compute"


def client_peer(n: int) -> str:
    return f"client/{n}"


class MetricsSink:
    """Thread-safe collector shared by all parties of one run."""

    def __init__(self):
        self._lock = threading.Lock()
        self.records: list[MetricRecord] = []
        self.timing: list[tuple[str, int, float]] = []
        self.errors: list[tuple[str, BaseException]] = []

    def add_metric(self, round_index: int, client: str, name: str, value: float) -> None:
        with self._lock:
            self.records.append(MetricRecord(round_index, client, name, float(value)))

    def add_timing(self, party: str, round_index: int, t: float) -> None:
        with self._lock:
            self.timing.append((party, round_index, t))

    def add_error(self, party: str, exc: BaseException) -> None:
        with self._lock:
            self.errors.append((party, exc))


def params_to_payload(pset: ParamSet) -> dict[str, np.ndarray]:
    return {f"{pset.part}/{name}": arr for name, arr in pset.tensors.items()}


def payload_to_params(payload: dict[str, np.ndarray], part: str, round_index: int) -> ParamSet:
    prefix = part + "/"
    tensors = {name[len(prefix):]: arr for name, arr in payload.items()
               if name.startswith(prefix)}
    if not tensors:
        raise ProtocolMisuseError(f"payload carries no {part!r} tensors")
    return ParamSet(part, tensors, round_index)


def _expect(msg: WireMessage, kind: Kind, **fields) -> WireMessage:
    if msg.kind != kind:
        raise ProtocolMisuseError(f"expected {kind.name}, got {Kind(msg.kind).name}")
    for name, value in fields.items():
        if getattr(msg, name) != value:
            raise ProtocolMisuseError(
                f"{kind.name}: field {name}={getattr(msg, name)} != expected {value}")
    return msg


def shuffled_batches(n_samples: int, batch_size: int, seed: int, client_id: int,
                     round_index: int, epoch: int) -> list[np.ndarray]:
    """Per-epoch shard order; decorrelated across clients and rounds."""
    order = stream(seed, "shuffle", client_id, round_index, epoch).permutation(n_samples)
    return [order[i:i + batch_size] for i in range(0, n_samples, batch_size)]


def stack_batch(shard, idx) -> tuple[np.ndarray, np.ndarray]:
    xs = np.stack([shard[i][0] for i in idx])
    ys = np.stack([shard[i][1] for i in idx])
    return xs, ys


@dataclass
class ClientNode:
    """Owns the head and tail sub-models plus a local data shard; never
    holds body parameters and never sends inputs, labels, outputs, or
    skip activations."""

    client_id: int
    cfg: ExperimentConfig
    head: HeadModel
    tail: TailModel
    shard: list
    loss_fn: object
    endpoint: object
    sink: MetricsSink

    def _load_weights(self, round_index: int) -> None:
        msg_h = _expect(self.endpoint.recv(AGG), Kind.WEIGHTS_DOWN, round_index=round_index)
        self.head.load_params(payload_to_params(msg_h.payload, "head", round_index).tensors)
        msg_t = _expect(self.endpoint.recv(AGG), Kind.WEIGHTS_DOWN, round_index=round_index)
        self.tail.load_params(payload_to_params(msg_t.payload, "tail", round_index).tensors)

    def _train_batch(self, k: int, epoch: int, batch_id: int, xs, ys,
                     head_opt, tail_opt) -> float:
        n, timing = self.client_id, self.cfg.timing.effective()
        bs = xs.shape[0]
        clock = self.endpoint.clock

        clock.advance(timing.head_forward * bs)
        y_h, ctx = self.head.forward(xs, key=(k, epoch, batch_id))
        self.endpoint.send(COMPUTE, WireMessage(
            Kind.ACT_UP, k, n, epoch, batch_id, {"boundary": y_h}))

        msg = _expect(self.endpoint.recv(COMPUTE), Kind.ACT_DOWN,
                      round_index=k, client_id=n, epoch=epoch, batch=batch_id)
        y_b = msg.payload["boundary"]

        clock.advance((timing.tail_forward + timing.tail_backward) * bs)
        out = self.tail.forward(y_b, ctx)
        loss, grad_out = self.loss_fn.value_and_grad(out, ys)
        g_yb, g_skips = self.tail.backward(grad_out)
        tail_opt.step(self.tail.params, self.tail.grads)

        self.endpoint.send(COMPUTE, WireMessage(
            Kind.GRAD_UP, k, n, epoch, batch_id, {"boundary": g_yb}))
        msg = _expect(self.endpoint.recv(COMPUTE), Kind.GRAD_DOWN,
                      round_index=k, client_id=n, epoch=epoch, batch=batch_id)
        g_yh = msg.payload["boundary"]

        clock.advance(timing.head_backward * bs)
        self.head.backward(g_yh, g_skips, ctx, key=(k, epoch, batch_id))
        head_opt.step(self.head.params, self.head.grads)
        return loss

    def run(self) -> None:
        cfg, n = self.cfg, self.client_id
        for k in range(1, cfg.topology.rounds + 1):
            self._load_weights(k - 1)
            opt = cfg.optimizer
            head_opt = make_optimizer(opt.kind, opt.lr, opt.weight_decay)
            tail_opt = make_optimizer(opt.kind, opt.lr, opt.weight_decay)
            self.endpoint.send(COMPUTE, WireMessage(Kind.ROUND_BEGIN, k, n))
            losses = []
            for epoch in range(1, cfg.topology.local_epochs + 1):
                batches = shuffled_batches(len(self.shard), cfg.topology.batch_size,
                                           cfg.seed, n, k, epoch)
                for batch_id, idx in enumerate(batches):
                    xs, ys = stack_batch(self.shard, idx)
                    losses.append(self._train_batch(k, epoch, batch_id, xs, ys,
                                                    head_opt, tail_opt))
            self.endpoint.send(COMPUTE, WireMessage(Kind.ROUND_END, k, n))
            self.endpoint.send(AGG, WireMessage(
                Kind.WEIGHTS_UP, k, n, payload=params_to_payload(self.head.param_set())))
            self.endpoint.send(AGG, WireMessage(
                Kind.WEIGHTS_UP, k, n, payload=params_to_payload(self.tail.param_set())))
            self.sink.add_metric(k, str(n), "train_loss", float(np.mean(losses)))
            self.sink.add_timing(client_peer(n), k, self.endpoint.clock.t)
        _expect(self.endpoint.recv(AGG), Kind.SHUTDOWN)
        self.endpoint.send(COMPUTE, WireMessage(Kind.SHUTDOWN, client_id=n))


class ComputationServerNode:
    """Hosts one body replica per client; replicas are reset to the
    broadcast body weights at every round start and aggregated (plus
    optionally corrected) at round end."""

    def __init__(self, cfg: ExperimentConfig, replicas: list[BodyModel],
                 init_body: ParamSet, endpoint, sink: MetricsSink,
                 checkpoint_cb=None, sequential: bool = False):
        self.cfg = cfg
        self.replicas = replicas
        self.body = init_body.copy(round_index=0)
        self.endpoint = endpoint
        self.sink = sink
        self.checkpoint_cb = checkpoint_cb or (lambda k, pset: None)
        self.sequential = sequential
        self.anchors = AnchorStore()
        self._session_clocks = [0.0] * len(replicas)

    def _session(self, n: int, k: int, endpoint, clock_start: float) -> None:
        """Serve one client's round-k traffic against its replica (the
        single shared body in sequential mode)."""
        cfg = self.cfg
        replica = self.replicas[0] if self.sequential else self.replicas[n]
        opt = cfg.optimizer
        body_opt = make_optimizer(opt.kind, opt.lr, opt.weight_decay)
        peer = client_peer(n)
        timing = cfg.timing.effective()
        clock = endpoint.clock
        clock.merge(clock_start)
        _expect(endpoint.recv(peer), Kind.ROUND_BEGIN, round_index=k, client_id=n)
        while True:
            msg = endpoint.recv(peer)
            if msg.kind == Kind.ROUND_END:
                _expect(msg, Kind.ROUND_END, round_index=k, client_id=n)
                break
            _expect(msg, Kind.ACT_UP, round_index=k, client_id=n)
            bs = msg.payload["boundary"].shape[0]
            clock.advance(timing.body_forward * bs)
            y_b = replica.forward(msg.payload["boundary"])
            endpoint.send(peer, WireMessage(
                Kind.ACT_DOWN, k, n, msg.epoch, msg.batch, {"boundary": y_b}))
            grad_msg = _expect(endpoint.recv(peer), Kind.GRAD_UP, round_index=k,
                               client_id=n, epoch=msg.epoch, batch=msg.batch)
            clock.advance(timing.body_backward * bs)
            g_yh = replica.backward(grad_msg.payload["boundary"])
            body_opt.step(replica.params, replica.grads)
            endpoint.send(peer, WireMessage(
                Kind.GRAD_DOWN, k, n, msg.epoch, msg.batch, {"boundary": g_yh}))

    def _run_sessions(self, k: int) -> None:
        n_clients = self.cfg.topology.clients
        if self.sequential:
            # shared endpoint and clock: one client engages the server at a time
            for n in range(n_clients):
                self._session(n, k, self.endpoint, self.endpoint.clock.t)
            return
        start = self.endpoint.clock.t
        threads = []
        errors = []

        def guarded(n):
            try:
                view = self.endpoint.session_view()
                self._session(n, k, view, start)
                self._session_clocks[n] = view.clock.t
            except BaseException as exc:  # noqa: BLE001 - surfaced to the runner
                errors.append(exc)

        for n in range(n_clients):
            t = threading.Thread(target=guarded, args=(n,), name=f"compute-session-{n}")
            t.start()
            threads.append(t)
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        # replicas ran in parallel: the round ends when the slowest finishes
        self.endpoint.clock.merge(max(self._session_clocks))

    def run(self) -> None:
        cfg = self.cfg
        n_clients = cfg.topology.clients
        weights = normalized_weights([cfg.data.train_per_client] * n_clients)
        self.anchors.put("body", self.body)
        for k in range(1, cfg.topology.rounds + 1):
            for replica in self.replicas:
                replica.load_params(self.body.tensors)  # reset to broadcast weights
            self._run_sessions(k)
            if self.sequential:
                agg = self.replicas[0].param_set()
                agg.round_index = k
            else:
                agg = aggregate([r.param_set() for r in self.replicas], weights,
                                round_index=k)
            if cfg.dwcs_enabled:
                agg = correct(agg, self.anchors.get("body"), cfg.dwcs, k)
                agg.round_index = k
            self.anchors.put("body", agg)
            self.body = agg
            self.checkpoint_cb(k, agg)
            self.sink.add_timing(COMPUTE, k, self.endpoint.clock.t)
        for n in range(n_clients):
            _expect(self.endpoint.recv(client_peer(n)), Kind.SHUTDOWN)


class AggregationServerNode:
    """Aggregates (and optionally corrects) client-part weights and
    broadcasts identical head/tail models to every client."""

    def __init__(self, cfg: ExperimentConfig, init_head: ParamSet, init_tail: ParamSet,
                 endpoint, sink: MetricsSink, checkpoint_cb=None):
        self.cfg = cfg
        self.head = init_head.copy(round_index=0)
        self.tail = init_tail.copy(round_index=0)
        self.endpoint = endpoint
        self.sink = sink
        self.checkpoint_cb = checkpoint_cb or (lambda k, h, t: None)
        self.anchors = AnchorStore()

    def _broadcast(self, round_index: int, clients) -> None:
        for n in clients:
            self.endpoint.send(client_peer(n), WireMessage(
                Kind.WEIGHTS_DOWN, round_index, n, payload=params_to_payload(self.head)))
            self.endpoint.send(client_peer(n), WireMessage(
                Kind.WEIGHTS_DOWN, round_index, n, payload=params_to_payload(self.tail)))

    def run(self) -> None:
        cfg = self.cfg
        n_clients = cfg.topology.clients
        weights = normalized_weights([cfg.data.train_per_client] * n_clients)
        self.anchors.put("head", self.head)
        self.anchors.put("tail", self.tail)
        self._broadcast(0, range(n_clients))
        for k in range(1, cfg.topology.rounds + 1):
            heads, tails = [], []
            for n in range(n_clients):  # ascending order fixes the summation order
                msg = _expect(self.endpoint.recv(client_peer(n)), Kind.WEIGHTS_UP,
                              round_index=k, client_id=n)
                heads.append(payload_to_params(msg.payload, "head", k))
                msg = _expect(self.endpoint.recv(client_peer(n)), Kind.WEIGHTS_UP,
                              round_index=k, client_id=n)
                tails.append(payload_to_params(msg.payload, "tail", k))
            head = aggregate(heads, weights, round_index=k)
            tail = aggregate(tails, weights, round_index=k)
            if cfg.dwcs_enabled:
                head = correct(head, self.anchors.get("head"), cfg.dwcs, k)
                tail = correct(tail, self.anchors.get("tail"), cfg.dwcs, k)
            self.anchors.put("head", head)
            self.anchors.put("tail", tail)
            self.head, self.tail = head, tail
            self.checkpoint_cb(k, head, tail)
            self.sink.add_timing(AGG, k, self.endpoint.clock.t)
            if k < cfg.topology.rounds:
                self._broadcast(k, range(n_clients))
        for n in range(n_clients):
            self.endpoint.send(client_peer(n), WireMessage(Kind.SHUTDOWN, client_id=n))


class RelayAggregationServerNode:
    """Sequential-relay variant: client n+1 starts from client n's
    head/tail weights; no aggregation, no correction."""

    def __init__(self, cfg: ExperimentConfig, init_head: ParamSet, init_tail: ParamSet,
                 endpoint, sink: MetricsSink, checkpoint_cb=None):
        self.cfg = cfg
        self.head = init_head.copy(round_index=0)
        self.tail = init_tail.copy(round_index=0)
        self.endpoint = endpoint
        self.sink = sink
        self.checkpoint_cb = checkpoint_cb or (lambda k, h, t: None)

    def _send_parts(self, n: int, round_index: int) -> None:
        self.endpoint.send(client_peer(n), WireMessage(
            Kind.WEIGHTS_DOWN, round_index, n, payload=params_to_payload(self.head)))
        self.endpoint.send(client_peer(n), WireMessage(
            Kind.WEIGHTS_DOWN, round_index, n, payload=params_to_payload(self.tail)))

    def run(self) -> None:
        cfg = self.cfg
        n_clients = cfg.topology.clients
        self._send_parts(0, 0)
        for k in range(1, cfg.topology.rounds + 1):
            for n in range(n_clients):
                msg = _expect(self.endpoint.recv(client_peer(n)), Kind.WEIGHTS_UP,
                              round_index=k, client_id=n)
                self.head = payload_to_params(msg.payload, "head", k)
                msg = _expect(self.endpoint.recv(client_peer(n)), Kind.WEIGHTS_UP,
                              round_index=k, client_id=n)
                self.tail = payload_to_params(msg.payload, "tail", k)
                if n < n_clients - 1:
                    self._send_parts(n + 1, k - 1)  # hand-off within round k
            self.checkpoint_cb(k, self.head, self.tail)
            self.sink.add_timing(AGG, k, self.endpoint.clock.t)
            if k < cfg.topology.rounds:
                self._send_parts(0, k)
        for n in range(n_clients):
            self.endpoint.send(client_peer(n), WireMessage(Kind.SHUTDOWN, client_id=n))
