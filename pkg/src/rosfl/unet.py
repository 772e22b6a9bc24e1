"""U-shaped network built as an explicit step program, plus the
head/body/tail split that keeps every skip connection on the client.

The network is a fixed list of named steps (layer + value names). The
monolithic model and the three split parts run the *same* steps in the
same order, so a split run reproduces the monolithic computation
exactly; the split merely assigns each step to a party.

Levels are numbered 1 (outermost, full resolution) to L (bottleneck).
Encoder level l: two conv3x3+relu then a 2x2 maxpool; the pre-pool
activation feeds the skip route of decoder level l. Decoder level l:
nearest-neighbor x2 upsample followed by a conv3x3 ("up-conv"), concat
with the skip, then two conv3x3+relu. With split level s, the head owns
encoder levels 1..s, the tail owns decoder levels s..1 plus the task
head, and the body owns everything in between; skip routes therefore
never cross a party boundary. The boundary tensors are the post-pool
output of encoder level s (down) and the output of decoder level s+1,
or of the bottleneck when s = L-1 (up).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ProtocolMisuseError
from .nn.layers import (
    DTYPES,
    ConcatChannels,
    Conv1x1,
    Conv3x3,
    Layer,
    MaxPool2x2,
    Relu,
    SoftmaxChannels,
    UpsampleNearest2x,
)
from .nn.params import ParamSet
from .nn.rng import stream

TASK_HEADS = ("regression-linear", "segmentation-softmax")

HEAD, BODY, TAIL = "head", "body", "tail"


@dataclass(frozen=True)
class UNetSpec:
    depth: int
    base_channels: int
    in_channels: int
    out_channels: int
    height: int
    width: int
    task_head: str = "regression-linear"
    dtype: str = "f64"

    def validate(self) -> None:
        if self.depth < 2:
            raise ConfigurationError(f"depth must be >= 2, got {self.depth}")
        if min(self.base_channels, self.in_channels, self.out_channels) < 1:
            raise ConfigurationError("channel counts must be >= 1")
        div = 2 ** (self.depth - 1)
        if self.height % div or self.width % div:
            raise ConfigurationError(
                f"{self.height}x{self.width} input not divisible by {div} (depth {self.depth})")
        if self.task_head not in TASK_HEADS:
            raise ConfigurationError(f"unknown task head {self.task_head!r}")
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"unknown dtype {self.dtype!r}")

    def channels_at(self, level: int) -> int:
        return self.base_channels * 2 ** (level - 1)


@dataclass(frozen=True)
class SplitPlan:
    level: int = 1

    def validate(self, depth: int) -> None:
        if not 1 <= self.level <= depth - 1:
            raise ConfigurationError(
                f"split level {self.level} outside [1, {depth - 1}] for depth {depth}")


@dataclass
class Step:
    name: str
    layer: Layer
    inputs: tuple[str, ...]
    output: str
    level: int
    phase: str  # "enc" | "bottleneck" | "dec" | "task"


def _run_steps(steps: list[Step], values: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    for step in steps:
        args = [values[name] for name in step.inputs]
        values[step.output] = step.layer.forward(*args)
    return values


def _backward_steps(steps: list[Step], seed_grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Reverse sweep; returns grads for every value not produced by `steps`."""
    grads = dict(seed_grads)
    for step in reversed(steps):
        g = grads.pop(step.output, None)
        if g is None:
            raise ProtocolMisuseError(f"no upstream gradient for step {step.name}")
        gins = step.layer.backward(g)
        if not isinstance(gins, tuple):
            gins = (gins,)
        for name, gi in zip(step.inputs, gins):
            if name in grads:
                grads[name] = grads[name] + gi
            else:
                grads[name] = gi
    return grads


class StepModel:
    """Shared machinery: a step list with named params and grads."""

    def __init__(self, steps: list[Step]):
        self.steps = steps

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for step in self.steps:
            for pname, arr in step.layer.params.items():
                out[f"{step.name}.{pname}"] = arr
        return out

    @property
    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for step in self.steps:
            for pname, arr in step.layer.grads.items():
                out[f"{step.name}.{pname}"] = arr
        return out

    def param_count(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def load_params(self, tensors: dict[str, np.ndarray]) -> None:
        params = self.params
        if set(tensors) != set(params):
            missing = set(params) ^ set(tensors)
            raise ConfigurationError(f"parameter name mismatch: {sorted(missing)[:4]}...")
        for name, arr in tensors.items():
            if arr.shape != params[name].shape:
                raise ConfigurationError(f"shape mismatch for {name}")
            np.copyto(params[name], arr)

    def zero_params(self) -> None:
        for arr in self.params.values():
            arr[...] = 0.0


class UNet(StepModel):
    """Monolithic model: full forward/backward over all steps."""

    def __init__(self, spec: UNetSpec, steps: list[Step]):
        super().__init__(steps)
        self.spec = spec

    def forward(self, x: np.ndarray) -> np.ndarray:
        values = _run_steps(self.steps, {"x": x})
        return values["out"]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        rest = _backward_steps(self.steps, {"out": grad_out})
        return rest["x"]

    def param_set(self) -> ParamSet:
        return ParamSet("full", {k: v.copy() for k, v in self.params.items()})


def build_unet(spec: UNetSpec, seed: int) -> UNet:
    """Deterministically initialized monolithic model from a seed."""
    spec.validate()
    rng = stream(seed, "init")
    dtype = DTYPES[spec.dtype]
    steps: list[Step] = []

    def add(name, layer, inputs, output, level, phase):
        steps.append(Step(name, layer, tuple(inputs), output, level, phase))

    prev = "x"
    prev_c = spec.in_channels
    for lvl in range(1, spec.depth):
        c = spec.channels_at(lvl)
        add(f"enc{lvl}.conv1", Conv3x3(prev_c, c, rng, dtype), [prev], f"e{lvl}c1", lvl, "enc")
        add(f"enc{lvl}.relu1", Relu(), [f"e{lvl}c1"], f"e{lvl}r1", lvl, "enc")
        add(f"enc{lvl}.conv2", Conv3x3(c, c, rng, dtype), [f"e{lvl}r1"], f"e{lvl}c2", lvl, "enc")
        add(f"enc{lvl}.relu2", Relu(), [f"e{lvl}c2"], f"e{lvl}", lvl, "enc")
        add(f"enc{lvl}.pool", MaxPool2x2(), [f"e{lvl}"], f"p{lvl}", lvl, "enc")
        prev = f"p{lvl}"
        prev_c = c

    cl = spec.channels_at(spec.depth)
    add("bott.conv1", Conv3x3(prev_c, cl, rng, dtype), [prev], "bc1", spec.depth, "bottleneck")
    add("bott.relu1", Relu(), ["bc1"], "br1", spec.depth, "bottleneck")
    add("bott.conv2", Conv3x3(cl, cl, rng, dtype), ["br1"], "bc2", spec.depth, "bottleneck")
    add("bott.relu2", Relu(), ["bc2"], f"d{spec.depth}", spec.depth, "bottleneck")

    for lvl in range(spec.depth - 1, 0, -1):
        c = spec.channels_at(lvl)
        cin = spec.channels_at(lvl + 1)
        add(f"dec{lvl}.up", UpsampleNearest2x(), [f"d{lvl + 1}"], f"u{lvl}", lvl, "dec")
        add(f"dec{lvl}.upconv", Conv3x3(cin, c, rng, dtype), [f"u{lvl}"], f"uc{lvl}", lvl, "dec")
        add(f"dec{lvl}.cat", ConcatChannels(), [f"uc{lvl}", f"e{lvl}"], f"cat{lvl}", lvl, "dec")
        add(f"dec{lvl}.conv1", Conv3x3(2 * c, c, rng, dtype), [f"cat{lvl}"], f"d{lvl}c1", lvl, "dec")
        add(f"dec{lvl}.relu1", Relu(), [f"d{lvl}c1"], f"d{lvl}r1", lvl, "dec")
        add(f"dec{lvl}.conv2", Conv3x3(c, c, rng, dtype), [f"d{lvl}r1"], f"d{lvl}c2", lvl, "dec")
        add(f"dec{lvl}.relu2", Relu(), [f"d{lvl}c2"], f"d{lvl}", lvl, "dec")

    if spec.task_head == "regression-linear":
        add("task.conv", Conv1x1(spec.base_channels, spec.out_channels, rng, dtype),
            ["d1"], "out", 1, "task")
    else:
        add("task.conv", Conv1x1(spec.base_channels, spec.out_channels, rng, dtype),
            ["d1"], "logits", 1, "task")
        add("task.softmax", SoftmaxChannels(), ["logits"], "out", 1, "task")

    return UNet(spec, steps)


@dataclass
class HeadContext:
    """Skip activations (and implicitly the head layer caches) between a
    head forward and the matching tail forward / head backward."""

    key: tuple[int, int, int]  # (round, epoch, batch) or (0, 0, 0) outside a protocol run
    skips: dict[str, np.ndarray]
    consumed: bool = False

    def take(self, key) -> dict[str, np.ndarray]:
        if self.consumed:
            raise ProtocolMisuseError(f"head context {self.key} already consumed")
        if key is not None and key != self.key:
            raise ProtocolMisuseError(f"head context key {self.key} != expected {key}")
        self.consumed = True
        skips, self.skips = self.skips, {}
        return skips


class HeadModel(StepModel):
    def __init__(self, steps, boundary: str, skip_names: tuple[str, ...]):
        super().__init__(steps)
        self.boundary = boundary
        self.skip_names = skip_names

    def forward(self, x: np.ndarray, key=(0, 0, 0)) -> tuple[np.ndarray, HeadContext]:
        values = _run_steps(self.steps, {"x": x})
        ctx = HeadContext(tuple(key), {n: values[n] for n in self.skip_names})
        return values[self.boundary], ctx

    def backward(self, grad_boundary: np.ndarray, grad_skips: dict[str, np.ndarray],
                 ctx: HeadContext, key=None) -> dict[str, np.ndarray]:
        """Head param grads: sum of the body path (via the boundary) and
        the client-local skip path."""
        ctx.take(key)
        seeds = {self.boundary: grad_boundary}
        for name in self.skip_names:
            seeds[name] = grad_skips[name]
        _backward_steps(self.steps, seeds)
        return self.grads

    def param_set(self) -> ParamSet:
        return ParamSet(HEAD, {k: v.copy() for k, v in self.params.items()})


class BodyModel(StepModel):
    def __init__(self, steps, boundary_in: str, boundary_out: str, in_shape, out_shape):
        super().__init__(steps)
        self.boundary_in = boundary_in
        self.boundary_out = boundary_out
        self.in_shape = in_shape    # (C, H, W) of the down boundary tensor
        self.out_shape = out_shape  # (C, H, W) of the up boundary tensor

    def forward(self, y_head: np.ndarray) -> np.ndarray:
        if y_head.ndim != 4 or y_head.shape[1:] != self.in_shape:
            raise ProtocolMisuseError(
                f"body input shape {y_head.shape} != boundary {self.in_shape}")
        values = _run_steps(self.steps, {self.boundary_in: y_head})
        return values[self.boundary_out]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if grad_out.ndim != 4 or grad_out.shape[1:] != self.out_shape:
            raise ProtocolMisuseError(
                f"body upstream grad shape {grad_out.shape} != boundary {self.out_shape}")
        rest = _backward_steps(self.steps, {self.boundary_out: grad_out})
        return rest[self.boundary_in]

    def param_set(self) -> ParamSet:
        return ParamSet(BODY, {k: v.copy() for k, v in self.params.items()})


class TailModel(StepModel):
    def __init__(self, steps, boundary_in: str, skip_names: tuple[str, ...], in_shape):
        super().__init__(steps)
        self.boundary_in = boundary_in
        self.skip_names = skip_names
        self.in_shape = in_shape

    def forward(self, y_body: np.ndarray, ctx: HeadContext) -> np.ndarray:
        if y_body.ndim != 4 or y_body.shape[1:] != self.in_shape:
            raise ProtocolMisuseError(
                f"tail input shape {y_body.shape} != boundary {self.in_shape}")
        values = {self.boundary_in: y_body}
        for name in self.skip_names:
            if name not in ctx.skips:
                raise ProtocolMisuseError(f"head context missing skip {name}")
            values[name] = ctx.skips[name]
        values = _run_steps(self.steps, values)
        return values["out"]

    def backward(self, grad_out: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Returns (grad wrt the body output, grads wrt the skip values)."""
        rest = _backward_steps(self.steps, {"out": grad_out})
        grad_skips = {n: rest[n] for n in self.skip_names}
        return rest[self.boundary_in], grad_skips

    def param_set(self) -> ParamSet:
        return ParamSet(TAIL, {k: v.copy() for k, v in self.params.items()})


@dataclass
class SplitUNet:
    spec: UNetSpec
    plan: SplitPlan
    head: HeadModel
    body: BodyModel
    tail: TailModel
    skip_routes: list[tuple[int, int]] = field(default_factory=list)

    def forward(self, x: np.ndarray, key=(0, 0, 0)) -> np.ndarray:
        """Full split pass (all three parts locally); used by evaluation."""
        y_h, ctx = self.head.forward(x, key)
        y_b = self.body.forward(y_h)
        return self.tail.forward(y_b, ctx)

    def param_sets(self) -> dict[str, ParamSet]:
        return {HEAD: self.head.param_set(), BODY: self.body.param_set(),
                TAIL: self.tail.param_set()}

    def load_param_sets(self, sets: dict[str, ParamSet]) -> None:
        for part, model in ((HEAD, self.head), (BODY, self.body), (TAIL, self.tail)):
            if part in sets:
                model.load_params(sets[part].tensors)


def split_unet(model: UNet, plan: SplitPlan) -> SplitUNet:
    """Partition a monolithic model into head/body/tail.

    Layers are deep-copied so the parts are independent of the source
    model; the three parts' parameters are an exact partition of it.
    """
    spec = model.spec
    plan.validate(spec.depth)
    s = plan.level

    def owner(step: Step) -> str:
        if step.phase == "enc":
            return HEAD if step.level <= s else BODY
        if step.phase == "bottleneck":
            return BODY
        if step.phase == "dec":
            return TAIL if step.level <= s else BODY
        return TAIL  # task head

    parts: dict[str, list[Step]] = {HEAD: [], BODY: [], TAIL: []}
    for step in model.steps:
        parts[owner(step)].append(copy.deepcopy(step))

    skip_names = tuple(f"e{lvl}" for lvl in range(1, s + 1))
    h2, w2 = spec.height // 2 ** s, spec.width // 2 ** s
    down_shape = (spec.channels_at(s), h2, w2)
    up_shape = (spec.channels_at(s + 1), h2, w2)

    head = HeadModel(parts[HEAD], boundary=f"p{s}", skip_names=skip_names)
    body = BodyModel(parts[BODY], boundary_in=f"p{s}", boundary_out=f"d{s + 1}",
                     in_shape=down_shape, out_shape=up_shape)
    tail = TailModel(parts[TAIL], boundary_in=f"d{s + 1}", skip_names=skip_names,
                     in_shape=up_shape)
    routes = [(lvl, lvl) for lvl in range(1, s + 1)]
    return SplitUNet(spec, plan, head, body, tail, routes)
