"""Runner equivalences: the protocol must reduce to its local oracles.

The one-client protocol run is compared bit-for-bit against a plain
local training loop over the same split model; the four-client run is
compared against monolithic federated averaging; the toy FedAvg trace
is checked against hand arithmetic.
"""

import numpy as np
import pytest

import rosfl.runners as runners_mod
from rosfl.config import config_from_dict, with_overrides
from rosfl.datagen import gen_restoration_shard
from rosfl.fedops import normalized_weights
from rosfl.metrics import make_loss
from rosfl.nn import ParamSet, make_optimizer
from rosfl.parties import ComputationServerNode, shuffled_batches, stack_batch
from rosfl.runners import (
    fedavg_core,
    run,
    run_centralized,
    run_fedavg,
    run_rosfl,
    run_sequential_sl,
    train_locally,
    validate_run_dir,
)
from rosfl.trace import assert_no_private_tensors, validate_trace
from rosfl.unet import build_unet, split_unet
from rosfl.wire import Kind


def tiny_cfg(**overrides):
    raw = {
        "method": "rosfl",
        "seed": 3,
        "topology": {"clients": 2, "rounds": 3, "local_epochs": 1, "batch_size": 2},
        "optimizer": {"kind": "sgd", "lr": 1e-3, "weight_decay": 0.0},
        "model": {"depth": 2, "base_channels": 2, "image_size": 8},
        "data": {"train_per_client": 4, "test_per_client": 2},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and key in raw:
            raw[key].update(value)
        else:
            raw[key] = value
    return config_from_dict(raw)


def local_split_training(cfg):
    """Oracle: centralized training of the split model, no protocol."""
    su = split_unet(build_unet(cfg.model, cfg.seed), cfg.split)
    shard, _ = gen_restoration_shard(cfg.data.phantom, cfg.seed, 0,
                                     cfg.data.train_per_client)
    loss_fn = make_loss(cfg.task)
    opt = cfg.optimizer
    for k in range(1, cfg.topology.rounds + 1):
        head_opt = make_optimizer(opt.kind, opt.lr, opt.weight_decay)
        body_opt = make_optimizer(opt.kind, opt.lr, opt.weight_decay)
        tail_opt = make_optimizer(opt.kind, opt.lr, opt.weight_decay)
        for epoch in range(1, cfg.topology.local_epochs + 1):
            batches = shuffled_batches(len(shard), cfg.topology.batch_size,
                                       cfg.seed, 0, k, epoch)
            for batch_id, idx in enumerate(batches):
                xs, ys = stack_batch(shard, idx)
                y_h, ctx = su.head.forward(xs, key=(k, epoch, batch_id))
                y_b = su.body.forward(y_h)
                out = su.tail.forward(y_b, ctx)
                _, grad_out = loss_fn.value_and_grad(out, ys)
                g_yb, g_skips = su.tail.backward(grad_out)
                tail_opt.step(su.tail.params, su.tail.grads)
                g_yh = su.body.backward(g_yb)
                body_opt.step(su.body.params, su.body.grads)
                su.head.backward(g_yh, g_skips, ctx, key=(k, epoch, batch_id))
                head_opt.step(su.head.params, su.head.grads)
    return su.param_sets()


class ToyLinear:
    """Scalar y = w*x regression exposing the step-model surface."""

    def __init__(self, w0=0.0):
        self.params = {"w": np.array([float(w0)])}
        self.grads = {}
        self._x = None

    def forward(self, x):
        self._x = x
        return self.params["w"][0] * x

    def backward(self, g):
        self.grads = {"w": np.array([float(np.sum(g * self._x))])}
        return g * self.params["w"][0]

    def load_params(self, tensors):
        np.copyto(self.params["w"], tensors["w"])


class TestReductionEquivalences:
    def test_single_client_protocol_is_bit_exact(self, tmp_path):
        cfg = tiny_cfg(topology={"clients": 1, "rounds": 4})
        result = run_rosfl(cfg, tmp_path / "run")
        oracle = local_split_training(cfg)
        for part in ("head", "body", "tail"):
            assert result.final_parts[part].max_abs_diff(oracle[part]) == 0.0

    def test_four_clients_match_monolithic_fedavg(self, tmp_path):
        cfg = tiny_cfg(topology={"clients": 4, "rounds": 10})
        split_result = run_rosfl(cfg, tmp_path / "rosfl")
        fed_cfg = with_overrides(cfg, method="fedavg")
        fed_result = run_fedavg(fed_cfg, tmp_path / "fedavg")
        merged = {}
        for part in ("head", "body", "tail"):
            merged.update(split_result.final_parts[part].tensors)
        full = fed_result.final_parts["full"].tensors
        assert set(merged) == set(full)
        worst = max(np.max(np.abs(merged[n] - full[n])) for n in full)
        assert worst < 1e-8, worst

    def test_fedavg_single_client_equals_centralized(self, tmp_path):
        cfg = tiny_cfg(method="fedavg", topology={"clients": 1, "rounds": 4})
        fed = run_fedavg(cfg, tmp_path / "fed")
        central = run_centralized(with_overrides(cfg, method="central"),
                                  tmp_path / "central")
        diff = fed.final_parts["full"].max_abs_diff(central.final_parts["full"])
        assert diff == 0.0

    def test_identical_shards_average_to_centralized(self):
        """With every client holding the same shard and one full-size
        batch per epoch, local updates agree up to float reordering and
        the average equals centralized training on one shard."""
        cfg = tiny_cfg()
        shard, _ = gen_restoration_shard(cfg.data.phantom, cfg.seed, 0, 4)
        make_model = lambda: build_unet(cfg.model, cfg.seed)
        loss_fn = make_loss("restoration")
        final = fedavg_core(make_model, [shard, shard, shard], loss_fn, cfg.optimizer,
                            seed=cfg.seed, rounds=5, epochs=1, batch_size=len(shard),
                            weights=normalized_weights([4, 4, 4]))
        central = make_model()
        for k in range(1, 6):
            opt = make_optimizer("sgd", cfg.optimizer.lr, 0.0)
            train_locally(central, shard, loss_fn, opt, cfg.seed, 0, k, 1, len(shard))
        worst = max(np.max(np.abs(final.tensors[n] - central.params[n]))
                    for n in central.params)
        assert worst < 1e-10, worst

    def test_toy_two_client_fedavg_hand_trace(self):
        """Spreadsheet oracle: w0=0, lr=0.1, client data (1,2) and (2,2):
        round-1 locals 0.4 and 0.8 -> 0.6; round-2 locals 0.88/0.92 -> 0.9."""
        shards = [[(np.array([1.0]), np.array([2.0]))],
                  [(np.array([2.0]), np.array([2.0]))]]
        from rosfl.config import OptimizerConfig
        opt_cfg = OptimizerConfig(kind="sgd", lr=0.1, weight_decay=0.0)
        trace = []
        fedavg_core(ToyLinear, shards, make_loss("restoration"), opt_cfg, seed=0,
                    rounds=2, epochs=1, batch_size=1,
                    weights=[0.5, 0.5],
                    on_round=lambda k, p, losses: trace.append(p.tensors["w"][0]))
        assert trace[0] == pytest.approx(0.6, abs=1e-12)
        assert trace[1] == pytest.approx(0.9, abs=1e-12)

    def test_centralized_toy_loss_monotone(self):
        """Convex scalar regression: full-batch gradient descent with a
        small step decreases the loss every epoch."""
        model = ToyLinear(0.0)
        shard = [(np.array([1.0]), np.array([3.0])), (np.array([2.0]), np.array([4.0]))]
        loss_fn = make_loss("restoration")
        losses = []
        opt = make_optimizer("sgd", 0.05, 0.0)
        for k in range(1, 51):
            losses.append(train_locally(model, shard, loss_fn, opt, 0, 0, k, 1,
                                        batch_size=2))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_single_client_sl_matches_rosfl(self, tmp_path):
        cfg = tiny_cfg(topology={"clients": 1, "rounds": 3})
        a = run_rosfl(cfg, tmp_path / "a")
        b = run_sequential_sl(with_overrides(cfg, method="sl"), tmp_path / "b")
        for part in ("head", "body", "tail"):
            assert a.final_parts[part].max_abs_diff(b.final_parts[part]) == 0.0


class TestProtocolConformance:
    def test_trace_valid_and_private(self, tmp_path):
        cfg = tiny_cfg(topology={"clients": 3, "rounds": 2, "batch_size": 2})
        result = run_rosfl(cfg, tmp_path / "run")
        validate_trace(result.trace, 3, 2)
        assert_no_private_tensors(result.trace)
        names = {n for e in result.trace.events for n in e.tensor_names}
        # body parameters never cross the wire in the parallel protocol
        assert not any(n.startswith("body/") for n in names)

    def test_aggregation_barrier(self, tmp_path):
        cfg = tiny_cfg(topology={"clients": 3, "rounds": 3})
        result = run_rosfl(cfg, tmp_path / "run")
        events = result.trace.events
        for k in range(1, 3):
            ups = [e.seq for e in events
                   if e.kind == Kind.WEIGHTS_UP and e.round_index == k]
            downs = [e.seq for e in events
                     if e.kind == Kind.WEIGHTS_DOWN and e.round_index == k]
            assert ups and downs
            assert max(ups) < min(downs)

    def test_replica_reset_each_round(self, tmp_path, monkeypatch):
        observed = []

        class CheckingCompute(ComputationServerNode):
            def _run_sessions(self, k):
                observed.append(all(
                    replica.param_set().max_abs_diff(
                        ParamSet("body", self.body.tensors)) == 0.0
                    for replica in self.replicas))
                super()._run_sessions(k)

        monkeypatch.setattr(runners_mod, "ComputationServerNode", CheckingCompute)
        cfg = tiny_cfg(topology={"clients": 2, "rounds": 3},
                       dwcs={"enabled": True})
        run_rosfl(cfg, tmp_path / "run")
        assert observed == [True, True, True]

    def test_relay_hand_off_equality(self, tmp_path):
        """Sequential baseline: client n+1 receives exactly the weights
        client n uploaded."""
        cfg = tiny_cfg(method="sl", topology={"clients": 3, "rounds": 2})
        result = run_sequential_sl(cfg, tmp_path / "run", record_payloads=True)
        events = sorted(result.trace.events, key=lambda e: e.seq)
        payloads = result.trace.payloads
        ups = [e for e in events if e.kind == Kind.WEIGHTS_UP]
        downs = [e for e in events if e.kind == Kind.WEIGHTS_DOWN]
        assert len(downs) >= len(ups)
        # every upload is relayed verbatim as the next client's download
        for up in ups:
            later = [d for d in downs if d.seq > up.seq
                     and d.tensor_names == up.tensor_names]
            if not later:  # final upload of the last round is not relayed
                continue
            down = min(later, key=lambda d: d.seq)
            for name in up.tensor_names:
                assert np.array_equal(payloads[up.seq][name], payloads[down.seq][name])

    def test_client_failure_aborts_with_diagnostic(self, tmp_path, monkeypatch):
        from rosfl.parties import ClientNode

        original = ClientNode._train_batch

        def sabotage(self, k, epoch, batch_id, xs, ys, head_opt, tail_opt):
            if self.client_id == 1 and k == 2:
                raise RuntimeError("simulated client crash")
            return original(self, k, epoch, batch_id, xs, ys, head_opt, tail_opt)

        monkeypatch.setattr(ClientNode, "_train_batch", sabotage)
        cfg = tiny_cfg(topology={"clients": 2, "rounds": 3})
        with pytest.raises(RuntimeError, match="aborted"):
            run_rosfl(cfg, tmp_path / "run")

    def test_fixed_seed_runs_are_bit_identical(self, tmp_path):
        cfg = tiny_cfg(topology={"clients": 2, "rounds": 3})
        a = run_rosfl(cfg, tmp_path / "a")
        b = run_rosfl(cfg, tmp_path / "b")
        for part in ("head", "body", "tail"):
            assert a.final_parts[part].max_abs_diff(b.final_parts[part]) == 0.0


class TestTimingModel:
    def test_sequential_round_is_n_times_parallel(self, tmp_path):
        n = 3
        cfg = tiny_cfg(topology={"clients": n, "rounds": 2},
                       timing={"enabled": True, "message_latency": 1.0})
        par = run_rosfl(cfg, tmp_path / "par")
        seq = run_sequential_sl(with_overrides(cfg, method="sl"), tmp_path / "seq")
        ratio = seq.summary["sim_mean_round_time"] / par.summary["sim_mean_round_time"]
        assert abs(ratio - n) / n <= 0.2, ratio


class TestRunSurface:
    def test_run_dispatch_and_dir_layout(self, tmp_path):
        for method in ("rosfl", "fedavg", "sl", "central"):
            cfg = tiny_cfg(method=method, topology={"clients": 2, "rounds": 2})
            result = run(cfg, tmp_path / method)
            validate_run_dir(result.out_dir)
            assert result.summary["method"] == method
            assert any(r.name == "psnr" for r in result.metrics)

    def test_segmentation_run(self, tmp_path):
        cfg = tiny_cfg(task="segmentation",
                       topology={"clients": 2, "rounds": 2},
                       data={"train_per_client": 4, "test_per_client": 2,
                             "seg_classes": 3},
                       model={"depth": 2, "base_channels": 2, "image_size": 8})
        result = run_rosfl(cfg, tmp_path / "seg")
        assert result.summary["metric"] == "dice"
        assert 0.0 <= result.summary["final_dice_global"] <= 1.0

    def test_dwcs_requires_rosfl(self, tmp_path):
        from rosfl.errors import ConfigurationError
        cfg = tiny_cfg(method="fedavg", dwcs={"enabled": True})
        with pytest.raises(ConfigurationError):
            run_fedavg(cfg, tmp_path / "x")

    def test_adam_protocol_run(self, tmp_path):
        cfg = tiny_cfg(optimizer={"kind": "adam", "lr": 1e-4, "weight_decay": 1e-8},
                       dwcs={"enabled": True})
        result = run_rosfl(cfg, tmp_path / "adam")
        assert result.summary["final_psnr_global"] > 0
