"""Experiment runners: the split-federated protocol, the sequential
relay baseline, federated averaging, and centralized training.

Every runner produces the same run-directory layout: a config snapshot,
per-round part checkpoints, metrics.csv, and summary.json. Task metrics
are evaluated after the run by reassembling the full model from each
checkpoint and scoring every client's held-out shard, so evaluation
never rides on the training protocol.
"""

from __future__ import annotations

import csv
import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ExperimentConfig, config_to_toml
from .datagen import gen_restoration_shard, gen_segmentation_shard
from .errors import ConfigurationError
from .fedops import aggregate, normalized_weights
from .metrics import MetricRecord, cap_for_csv, macro_dice, make_loss, psnr
from .nn.optim import make_optimizer
from .nn.params import ParamSet
from .parties import (
    AGG,
    COMPUTE,
    AggregationServerNode,
    ClientNode,
    ComputationServerNode,
    MetricsSink,
    RelayAggregationServerNode,
    shuffled_batches,
    stack_batch,
)
from .transport import InProcHub, TcpClientEndpoint, TcpServerEndpoint
from .unet import UNet, build_unet, split_unet

FINAL_WINDOW = 5  # rounds averaged into the summary statistic


@dataclass
class RunResult:
    cfg: ExperimentConfig
    final_parts: dict[str, ParamSet]
    metrics: list[MetricRecord] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    out_dir: Path | None = None
    trace: object = None


def make_shards(cfg: ExperimentConfig, split: str):
    """Per-client data shards plus per-client clamp rates (restoration)."""
    count = cfg.data.train_per_client if split == "train" else cfg.data.test_per_client
    shards, clamp_rates = [], []
    for n in range(cfg.topology.clients):
        if cfg.task == "restoration":
            pairs, clamp = gen_restoration_shard(cfg.data.phantom, cfg.seed, n, count, split)
            clamp_rates.append(clamp)
        else:
            pairs = gen_segmentation_shard(cfg.data.phantom, cfg.seed, n, count, split)
            clamp_rates.append(0.0)
        shards.append(pairs)
    return shards, clamp_rates


def evaluate_global(model_forward, cfg: ExperimentConfig, test_shards, round_index: int,
                    sink_records: list[MetricRecord]) -> None:
    """Score one model on every client's test shard."""
    per_client = []
    for n, shard in enumerate(test_shards):
        xs, ys = stack_batch(shard, range(len(shard)))
        preds = model_forward(xs)
        if cfg.task == "restoration":
            value = float(np.mean([min(psnr(preds[i], ys[i]), 99.0) for i in range(len(shard))]))
            name = "psnr"
        else:
            n_classes = cfg.data.phantom.n_classes
            pred_masks = preds.argmax(axis=1)
            value = float(np.mean([macro_dice(pred_masks[i], ys[i], n_classes)
                                   for i in range(len(shard))]))
            name = "dice"
        per_client.append(value)
        sink_records.append(MetricRecord(round_index, str(n), name, value))
    sink_records.append(MetricRecord(round_index, "global", name, float(np.mean(per_client))))
    sink_records.append(MetricRecord(round_index, "global", name + "_spread",
                                     float(max(per_client) - min(per_client))))


def _prepare_out_dir(cfg: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(config_to_toml(cfg))
    return out


def _client_ckpt_path(out: Path, k: int) -> Path:
    return out / "checkpoints" / f"round_{k:05d}.client.ckpt"


def _body_ckpt_path(out: Path, k: int) -> Path:
    return out / "checkpoints" / f"round_{k:05d}.body.ckpt"


def _full_ckpt_path(out: Path, k: int) -> Path:
    return out / "checkpoints" / f"round_{k:05d}.full.ckpt"


def write_metrics_csv(path, records: list[MetricRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "client", "name", "value"])
        for rec in records:
            writer.writerow([rec.round_index, rec.client, rec.name,
                             repr(cap_for_csv(rec.value))])


def _round_times(sink: MetricsSink, rounds: int) -> list[float]:
    """Per-round simulated durations from the parties' virtual clocks."""
    latest: dict[int, float] = {}
    for _, k, t in sink.timing:
        latest[k] = max(latest.get(k, 0.0), t)
    times, prev = [], 0.0
    for k in range(1, rounds + 1):
        t = latest.get(k, prev)
        times.append(t - prev)
        prev = t
    return times


def _summarize(cfg: ExperimentConfig, records: list[MetricRecord], sink: MetricsSink,
               wall_seconds: float) -> dict:
    metric = "psnr" if cfg.task == "restoration" else "dice"
    rounds_seen = sorted({r.round_index for r in records
                          if r.client == "global" and r.name == metric})
    window = rounds_seen[-min(FINAL_WINDOW, len(rounds_seen)):]

    def mean_over_window(client: str, name: str) -> float:
        vals = [r.value for r in records
                if r.client == client and r.name == name and r.round_index in window]
        return float(np.mean(vals)) if vals else math.nan

    per_client = {str(n): mean_over_window(str(n), metric)
                  for n in range(cfg.topology.clients)}
    finite = [v for v in per_client.values() if not math.isnan(v)]
    summary = {
        "method": cfg.method,
        "task": cfg.task,
        "seed": cfg.seed,
        "rounds": cfg.topology.rounds,
        "metric": metric,
        "final_rounds_window": window,
        f"final_{metric}_global": mean_over_window("global", metric),
        f"final_{metric}_per_client": per_client,
        f"final_{metric}_spread": (max(finite) - min(finite)) if finite else math.nan,
        "wall_seconds": wall_seconds,
    }
    times = _round_times(sink, cfg.topology.rounds)
    if any(t > 0 for t in times):
        summary["sim_round_times"] = times
        summary["sim_mean_round_time"] = float(np.mean(times))
    clamp = [r.value for r in records if r.name == "clamp_rate"]
    if clamp:
        summary["clamp_rate_mean"] = float(np.mean(clamp))
    return summary


def _finalize(cfg, out, sink, eval_rounds, load_forward, test_shards, extra_records,
              wall_start) -> tuple[list[MetricRecord], dict]:
    records = list(sink.records) + list(extra_records)
    for k in eval_rounds:
        forward = load_forward(k)
        evaluate_global(forward, cfg, test_shards, k, records)
    records.sort(key=lambda r: (r.round_index, r.client, r.name))
    summary = _summarize(cfg, records, sink, time.time() - wall_start)
    write_metrics_csv(out / "metrics.csv", records)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return records, summary


def _assemble_forward(cfg: ExperimentConfig, parts: dict[str, ParamSet]):
    """Full-model forward from part checkpoints (evaluation only)."""
    model = build_unet(cfg.model, cfg.seed)
    tensors = {}
    for pset in parts.values():
        tensors.update(pset.tensors)
    model.load_params(tensors)
    return model.forward


def _input_stat_records(cfg, test_shards) -> list[MetricRecord]:
    records = []
    if cfg.task != "restoration":
        return records
    for n, shard in enumerate(test_shards):
        vals = [min(psnr(noisy, clean), 99.0) for noisy, clean in shard]
        records.append(MetricRecord(0, str(n), "input_psnr", float(np.mean(vals))))
    return records


def _spawn(party, name: str, sink: MetricsSink, peers: list[str]):
    def guarded():
        try:
            party.run()
        except BaseException as exc:  # noqa: BLE001 - reported by the runner
            sink.add_error(name, exc)
            for peer in peers:
                try:
                    party.endpoint.close_to(peer)
                except Exception:
                    pass

    thread = threading.Thread(target=guarded, name=name)
    thread.start()
    return thread


def _check_errors(sink: MetricsSink) -> None:
    if sink.errors:
        party, exc = sink.errors[0]
        raise RuntimeError(f"run aborted: party {party} failed: {exc!r}") from exc


def _checkpoint_rounds(cfg: ExperimentConfig) -> list[int]:
    interval = cfg.output.checkpoint_interval
    rounds = cfg.topology.rounds
    ks = [k for k in range(1, rounds + 1) if k % interval == 0]
    if rounds not in ks:
        ks.append(rounds)
    return ks


def _run_protocol(cfg: ExperimentConfig, out_dir, sequential: bool,
                  record_payloads: bool = False) -> RunResult:
    cfg.validate()
    if cfg.dwcs_enabled and sequential:
        raise ConfigurationError("the sequential baseline does not use weight correction")
    wall_start = time.time()
    out = _prepare_out_dir(cfg, out_dir)
    n_clients = cfg.topology.clients
    loss_fn = make_loss(cfg.task)

    monolithic = build_unet(cfg.model, cfg.seed)
    split = split_unet(monolithic, cfg.split)
    init = split.param_sets()

    train_shards, clamp_rates = make_shards(cfg, "train")
    test_shards, _ = make_shards(cfg, "test")

    sink = MetricsSink()
    for n, rate in enumerate(clamp_rates):
        if cfg.task == "restoration":
            sink.add_metric(0, str(n), "clamp_rate", rate)

    ckpt_rounds = set(_checkpoint_rounds(cfg))

    def client_ckpt_cb(k, head, tail):
        if k in ckpt_rounds:
            ckpt.save_param_sets(_client_ckpt_path(out, k), {"head": head, "tail": tail})

    def body_ckpt_cb(k, body):
        if k in ckpt_rounds:
            ckpt.save_param_sets(_body_ckpt_path(out, k), {"body": body})

    latency = cfg.timing.message_latency if cfg.timing.enabled else 0.0
    use_tcp = cfg.transport == "tcp"
    hub = None
    if use_tcp:
        agg_ep = TcpServerEndpoint()
        compute_ep = TcpServerEndpoint()
        servers = {AGG: agg_ep.address, COMPUTE: compute_ep.address}
    else:
        hub = InProcHub(latency=latency, record_trace=True, record_payloads=record_payloads)
        agg_ep = hub.endpoint(AGG)
        compute_ep = hub.endpoint(COMPUTE)

    n_replicas = 1 if sequential else n_clients
    replicas = []
    for _ in range(n_replicas):
        replica = split_unet(monolithic, cfg.split).body
        replica.load_params(init["body"].tensors)
        replicas.append(replica)

    compute = ComputationServerNode(cfg, replicas, init["body"], compute_ep, sink,
                                    checkpoint_cb=body_ckpt_cb, sequential=sequential)
    if sequential:
        agg = RelayAggregationServerNode(cfg, init["head"], init["tail"], agg_ep, sink,
                                         checkpoint_cb=client_ckpt_cb)
    else:
        agg = AggregationServerNode(cfg, init["head"], init["tail"], agg_ep, sink,
                                    checkpoint_cb=client_ckpt_cb)

    clients = []
    for n in range(n_clients):
        part = split_unet(monolithic, cfg.split)
        part.load_param_sets({"head": init["head"], "tail": init["tail"]})
        if use_tcp:
            endpoint = None  # connected inside the client thread
        else:
            endpoint = hub.endpoint(f"client/{n}")
        clients.append(ClientNode(n, cfg, part.head, part.tail, train_shards[n],
                                  loss_fn, endpoint, sink))

    threads = []
    if use_tcp:
        def server_ready(server_ep, party, name, peers):
            def guarded():
                try:
                    server_ep.wait_for_clients(n_clients)
                    party.run()
                except BaseException as exc:  # noqa: BLE001
                    sink.add_error(name, exc)
                    server_ep.close()
            t = threading.Thread(target=guarded, name=name)
            t.start()
            return t

        threads.append(server_ready(agg_ep, agg, AGG, []))
        threads.append(server_ready(compute_ep, compute, COMPUTE, []))

        def client_main(node):
            try:
                node.endpoint = TcpClientEndpoint(node.client_id, servers)
                node.run()
                node.endpoint.close()
            except BaseException as exc:  # noqa: BLE001
                sink.add_error(f"client/{node.client_id}", exc)
                if node.endpoint is not None:
                    node.endpoint.close()

        for node in clients:
            t = threading.Thread(target=client_main, args=(node,),
                                 name=f"client/{node.client_id}")
            t.start()
            threads.append(t)
    else:
        threads.append(_spawn(agg, AGG, sink, [f"client/{n}" for n in range(n_clients)]))
        threads.append(_spawn(compute, COMPUTE, sink,
                              [f"client/{n}" for n in range(n_clients)]))
        for node in clients:
            threads.append(_spawn(node, f"client/{node.client_id}", sink, [AGG, COMPUTE]))

    for t in threads:
        t.join()
    if use_tcp:
        agg_ep.close()
        compute_ep.close()
    _check_errors(sink)

    def load_forward(k):
        parts = ckpt.load_param_sets(_client_ckpt_path(out, k), k)
        parts.update(ckpt.load_param_sets(_body_ckpt_path(out, k), k))
        return _assemble_forward(cfg, parts)

    eval_rounds = _checkpoint_rounds(cfg)
    extra = _input_stat_records(cfg, test_shards)
    records, summary = _finalize(cfg, out, sink, eval_rounds, load_forward, test_shards,
                                 extra, wall_start)

    final_parts = ckpt.load_param_sets(_client_ckpt_path(out, cfg.topology.rounds))
    final_parts.update(ckpt.load_param_sets(_body_ckpt_path(out, cfg.topology.rounds)))
    return RunResult(cfg, final_parts, records, summary, out,
                     trace=hub.trace if hub else None)


def run_rosfl(cfg: ExperimentConfig, out_dir, record_payloads: bool = False) -> RunResult:
    if cfg.method != "rosfl":
        raise ConfigurationError(f"config method is {cfg.method!r}, expected rosfl")
    return _run_protocol(cfg, out_dir, sequential=False, record_payloads=record_payloads)


def run_sequential_sl(cfg: ExperimentConfig, out_dir, record_payloads: bool = False) -> RunResult:
    if cfg.method != "sl":
        raise ConfigurationError(f"config method is {cfg.method!r}, expected sl")
    return _run_protocol(cfg, out_dir, sequential=True, record_payloads=record_payloads)


def train_locally(model, shard, loss_fn, opt, seed: int, client_id: int,
                  round_index: int, epochs: int, batch_size: int) -> float:
    """E local epochs on one model; returns the mean batch loss."""
    losses = []
    for epoch in range(1, epochs + 1):
        for idx in shuffled_batches(len(shard), batch_size, seed, client_id,
                                    round_index, epoch):
            xs, ys = stack_batch(shard, idx)
            out = model.forward(xs)
            loss, grad = loss_fn.value_and_grad(out, ys)
            model.backward(grad)
            opt.step(model.params, model.grads)
            losses.append(loss)
    return float(np.mean(losses))


def fedavg_core(make_model, shards, loss_fn, opt_cfg, seed: int, rounds: int,
                epochs: int, batch_size: int, weights, on_round=None):
    """Generic federated averaging over any model with the step-model
    surface (forward/backward/params/grads/load_params)."""
    global_model = make_model()
    global_params = ParamSet("full", {k: v.copy() for k, v in global_model.params.items()})
    locals_model = make_model()
    for k in range(1, rounds + 1):
        local_sets = []
        losses = []
        for n, shard in enumerate(shards):
            locals_model.load_params(global_params.tensors)
            opt = make_optimizer(opt_cfg.kind, opt_cfg.lr, opt_cfg.weight_decay)
            losses.append(train_locally(locals_model, shard, loss_fn, opt, seed, n,
                                        k, epochs, batch_size))
            local_sets.append(ParamSet("full", {key: v.copy() for key, v
                                                in locals_model.params.items()}))
        global_params = aggregate(local_sets, weights, round_index=k)
        if on_round is not None:
            on_round(k, global_params, losses)
    return global_params


def run_fedavg(cfg: ExperimentConfig, out_dir) -> RunResult:
    if cfg.method != "fedavg":
        raise ConfigurationError(f"config method is {cfg.method!r}, expected fedavg")
    cfg.validate()
    if cfg.dwcs_enabled:
        raise ConfigurationError("weight correction applies to the rosfl method only")
    wall_start = time.time()
    out = _prepare_out_dir(cfg, out_dir)
    loss_fn = make_loss(cfg.task)
    train_shards, clamp_rates = make_shards(cfg, "train")
    test_shards, _ = make_shards(cfg, "test")
    weights = normalized_weights([len(s) for s in train_shards])

    sink = MetricsSink()
    for n, rate in enumerate(clamp_rates):
        if cfg.task == "restoration":
            sink.add_metric(0, str(n), "clamp_rate", rate)

    ckpt_rounds = set(_checkpoint_rounds(cfg))

    def on_round(k, params, losses):
        for n, loss in enumerate(losses):
            sink.add_metric(k, str(n), "train_loss", loss)
        if k in ckpt_rounds:
            ckpt.save_param_sets(_full_ckpt_path(out, k), {"full": params})

    final = fedavg_core(lambda: build_unet(cfg.model, cfg.seed), train_shards, loss_fn,
                        cfg.optimizer, cfg.seed, cfg.topology.rounds,
                        cfg.topology.local_epochs, cfg.topology.batch_size, weights,
                        on_round=on_round)

    def load_forward(k):
        parts = ckpt.load_param_sets(_full_ckpt_path(out, k), k)
        return _assemble_forward(cfg, parts)

    extra = _input_stat_records(cfg, test_shards)
    records, summary = _finalize(cfg, out, sink, _checkpoint_rounds(cfg), load_forward,
                                 test_shards, extra, wall_start)
    return RunResult(cfg, {"full": final}, records, summary, out)


def run_centralized(cfg: ExperimentConfig, out_dir) -> RunResult:
    """Single monolithic model on the union of all client shards; round k
    runs the same (round, epoch) shuffle streams as a one-client run."""
    if cfg.method != "central":
        raise ConfigurationError(f"config method is {cfg.method!r}, expected central")
    cfg.validate()
    if cfg.dwcs_enabled:
        raise ConfigurationError("weight correction applies to the rosfl method only")
    wall_start = time.time()
    out = _prepare_out_dir(cfg, out_dir)
    loss_fn = make_loss(cfg.task)
    train_shards, clamp_rates = make_shards(cfg, "train")
    test_shards, _ = make_shards(cfg, "test")
    union = [pair for shard in train_shards for pair in shard]

    sink = MetricsSink()
    for n, rate in enumerate(clamp_rates):
        if cfg.task == "restoration":
            sink.add_metric(0, str(n), "clamp_rate", rate)

    model = build_unet(cfg.model, cfg.seed)
    opt_cfg = cfg.optimizer
    ckpt_rounds = set(_checkpoint_rounds(cfg))
    for k in range(1, cfg.topology.rounds + 1):
        opt = make_optimizer(opt_cfg.kind, opt_cfg.lr, opt_cfg.weight_decay)
        loss = train_locally(model, union, loss_fn, opt, cfg.seed, 0, k,
                             cfg.topology.local_epochs, cfg.topology.batch_size)
        sink.add_metric(k, "global", "train_loss", loss)
        if k in ckpt_rounds:
            ckpt.save_param_sets(_full_ckpt_path(out, k), {"full": model.param_set()})

    def load_forward(k):
        parts = ckpt.load_param_sets(_full_ckpt_path(out, k), k)
        return _assemble_forward(cfg, parts)

    extra = _input_stat_records(cfg, test_shards)
    records, summary = _finalize(cfg, out, sink, _checkpoint_rounds(cfg), load_forward,
                                 test_shards, extra, wall_start)
    return RunResult(cfg, {"full": model.param_set()}, records, summary, out)


RUNNERS = {
    "rosfl": run_rosfl,
    "sl": run_sequential_sl,
    "fedavg": run_fedavg,
    "central": run_centralized,
}


def run(cfg: ExperimentConfig, out_dir) -> RunResult:
    try:
        runner = RUNNERS[cfg.method]
    except KeyError:
        raise ConfigurationError(f"unknown method {cfg.method!r}")
    return runner(cfg, out_dir)


def validate_run_dir(path) -> None:
    """Post-run check that the artifact layout is complete."""
    out = Path(path)
    missing = [name for name in ("config.toml", "metrics.csv", "summary.json")
               if not (out / name).exists()]
    if missing:
        raise ConfigurationError(f"run dir {out} missing {missing}")
    if not list((out / "checkpoints").glob("*.ckpt")):
        raise ConfigurationError(f"run dir {out} has no checkpoints")
    summary = json.loads((out / "summary.json").read_text())
    for key in ("method", "seed", "metric"):
        if key not in summary:
            raise ConfigurationError(f"summary.json missing {key!r}")
