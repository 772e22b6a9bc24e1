"""Experiment configuration: TOML parsing, validation, serialization.

Defaults follow the reference settings: lr 1e-4, weight decay 1e-8,
correction mu 1e-4, beta 0.99.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from .datagen import PhantomSpec
from .errors import ConfigurationError
from .fedops import DIRECTIONS, DwcsConfig
from .unet import SplitPlan, UNetSpec

METHODS = ("rosfl", "fedavg", "sl", "central")
TASKS = ("restoration", "segmentation")
TRANSPORTS = ("inproc", "tcp")


@dataclass(frozen=True)
class TopologyConfig:
    clients: int = 4
    rounds: int = 10
    local_epochs: int = 1
    batch_size: int = 4


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-4
    weight_decay: float = 1e-8


@dataclass(frozen=True)
class DataConfig:
    train_per_client: int = 8
    test_per_client: int = 4
    phantom: PhantomSpec = field(default_factory=PhantomSpec)


@dataclass(frozen=True)
class TimingConfig:
    enabled: bool = False
    message_latency: float = 1.0
    head_forward: float = 0.5
    head_backward: float = 0.5
    body_forward: float = 4.0
    body_backward: float = 4.0
    tail_forward: float = 0.5
    tail_backward: float = 0.5

    def effective(self) -> "TimingConfig":
        """Zeroed cost model when the timing simulation is off."""
        if self.enabled:
            return self
        return TimingConfig(enabled=False, message_latency=0.0, head_forward=0.0,
                            head_backward=0.0, body_forward=0.0, body_backward=0.0,
                            tail_forward=0.0, tail_backward=0.0)


@dataclass(frozen=True)
class OutputConfig:
    checkpoint_interval: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    task: str = "restoration"
    seed: int = 0
    transport: str = "inproc"
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    model: UNetSpec = field(default_factory=lambda: UNetSpec(
        depth=3, base_channels=8, in_channels=1, out_channels=1,
        height=32, width=32, task_head="regression-linear"))
    split: SplitPlan = field(default_factory=SplitPlan)
    dwcs_enabled: bool = False
    dwcs: DwcsConfig = field(default_factory=DwcsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    timing: TimingConfig = field(default_factory=TimingConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.transport not in TRANSPORTS:
            raise ConfigurationError(f"transport must be one of {TRANSPORTS}")
        top = self.topology
        for key, value in (("topology.clients", top.clients), ("topology.rounds", top.rounds),
                           ("topology.local_epochs", top.local_epochs),
                           ("topology.batch_size", top.batch_size)):
            if value < 1:
                raise ConfigurationError(f"{key} must be >= 1, got {value}")
        if self.optimizer.kind not in ("adam", "sgd"):
            raise ConfigurationError(f"optimizer.kind must be adam or sgd")
        if self.optimizer.lr <= 0:
            raise ConfigurationError(f"optimizer.lr must be > 0, got {self.optimizer.lr}")
        if self.optimizer.weight_decay < 0:
            raise ConfigurationError("optimizer.weight_decay must be >= 0")
        self.model.validate()
        self.split.validate(self.model.depth)
        self.dwcs.validate()
        self.data.phantom.validate()
        if self.data.train_per_client < 1 or self.data.test_per_client < 1:
            raise ConfigurationError("data.train_per_client and data.test_per_client must be >= 1")
        if self.output.checkpoint_interval < 1:
            raise ConfigurationError("output.checkpoint_interval must be >= 1")
        if self.task == "segmentation":
            if self.model.task_head != "segmentation-softmax":
                raise ConfigurationError("segmentation task needs the segmentation-softmax head")
            if self.model.out_channels != self.data.phantom.n_classes:
                raise ConfigurationError(
                    "model.out_channels must equal data.seg_classes for segmentation")
        elif self.model.task_head != "regression-linear":
            raise ConfigurationError("restoration task needs the regression-linear head")


_SCHEMA = {
    "": {"method": str, "task": str, "seed": int, "transport": str},
    "topology": {"clients": int, "rounds": int, "local_epochs": int, "batch_size": int},
    "optimizer": {"kind": str, "lr": float, "weight_decay": float},
    "model": {"depth": int, "base_channels": int, "in_channels": int, "out_channels": int,
              "image_size": int, "dtype": str},
    "split": {"level": int},
    "dwcs": {"enabled": bool, "mu": float, "eta": float, "beta": float, "direction": str},
    "data": {"train_per_client": int, "test_per_client": int, "shapes_min": int,
             "shapes_max": int, "intensity_min": float, "intensity_max": float,
             "attenuation": float, "doses": list, "electronic_variance": float,
             "contrasts": list, "biases": list, "seg_classes": int, "seg_noise_sigma": float},
    "timing": {"enabled": bool, "message_latency": float, "head_forward": float,
               "head_backward": float, "body_forward": float, "body_backward": float,
               "tail_forward": float, "tail_backward": float},
    "output": {"checkpoint_interval": int},
}


def _coerce(section: str, key: str, value, expected):
    where = f"{section}.{key}" if section else key
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where}: expected an integer, got {value!r}")
        return value
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where}: expected true/false, got {value!r}")
        return value
    if expected is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where}: expected a string, got {value!r}")
        return value
    if expected is list:
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
            raise ConfigurationError(f"{where}: expected a list of numbers, got {value!r}")
        return [float(v) for v in value]
    raise AssertionError(expected)


def config_from_dict(raw: dict) -> ExperimentConfig:
    values: dict[str, dict] = {}
    for section_or_key, content in raw.items():
        if isinstance(content, dict):
            schema = _SCHEMA.get(section_or_key)
            if schema is None:
                raise ConfigurationError(f"unknown section [{section_or_key}]")
            out = values.setdefault(section_or_key, {})
            for key, value in content.items():
                if key not in schema:
                    raise ConfigurationError(f"unknown key: {section_or_key}.{key}")
                out[key] = _coerce(section_or_key, key, value, schema[key])
        else:
            schema = _SCHEMA[""]
            if section_or_key not in schema:
                raise ConfigurationError(f"unknown key: {section_or_key}")
            values.setdefault("", {})[section_or_key] = _coerce(
                "", section_or_key, content, schema[section_or_key])

    top_raw = values.get("", {})
    if "method" not in top_raw:
        raise ConfigurationError("missing required key: method")

    topo = TopologyConfig(**values.get("topology", {}))

    opt = OptimizerConfig(**values.get("optimizer", {}))

    task = top_raw.get("task", "restoration")
    data_raw = dict(values.get("data", {}))
    phantom_kwargs = {}
    if "shapes_min" in data_raw or "shapes_max" in data_raw:
        phantom_kwargs["shape_count"] = (int(data_raw.pop("shapes_min", 2)),
                                         int(data_raw.pop("shapes_max", 5)))
    if "intensity_min" in data_raw or "intensity_max" in data_raw:
        phantom_kwargs["intensity_range"] = (data_raw.pop("intensity_min", 0.35),
                                             data_raw.pop("intensity_max", 0.95))
    if "attenuation" in data_raw:
        phantom_kwargs["attenuation_scale"] = data_raw.pop("attenuation")
    if "doses" in data_raw:
        phantom_kwargs["doses"] = tuple(data_raw.pop("doses"))
    if "electronic_variance" in data_raw:
        phantom_kwargs["electronic_variance"] = data_raw.pop("electronic_variance")
    if "contrasts" in data_raw:
        phantom_kwargs["contrasts"] = tuple(data_raw.pop("contrasts"))
    if "biases" in data_raw:
        phantom_kwargs["biases"] = tuple(data_raw.pop("biases"))
    if "seg_classes" in data_raw:
        phantom_kwargs["n_classes"] = int(data_raw.pop("seg_classes"))
    if "seg_noise_sigma" in data_raw:
        phantom_kwargs["seg_noise_sigma"] = data_raw.pop("seg_noise_sigma")

    model_raw = dict(values.get("model", {}))
    image_size = model_raw.pop("image_size", 32)
    phantom_kwargs["image_size"] = image_size
    phantom = PhantomSpec(**phantom_kwargs)

    if task == "segmentation":
        head = "segmentation-softmax"
        default_out = phantom.n_classes
    else:
        head = "regression-linear"
        default_out = 1
    model = UNetSpec(
        depth=model_raw.pop("depth", 3),
        base_channels=model_raw.pop("base_channels", 8),
        in_channels=model_raw.pop("in_channels", 1),
        out_channels=model_raw.pop("out_channels", default_out),
        height=image_size, width=image_size,
        task_head=head,
        dtype=model_raw.pop("dtype", "f64"),
    )

    split = SplitPlan(level=values.get("split", {}).get("level", 1))

    dwcs_raw = dict(values.get("dwcs", {}))
    dwcs_enabled = dwcs_raw.pop("enabled", False)
    if "eta" not in dwcs_raw:
        dwcs_raw["eta"] = opt.lr  # correction step defaults to the training lr
    dwcs = DwcsConfig(**dwcs_raw)
    if dwcs.direction not in DIRECTIONS:
        raise ConfigurationError(f"dwcs.direction must be one of {DIRECTIONS}")

    data = DataConfig(train_per_client=int(data_raw.pop("train_per_client", 8)),
                      test_per_client=int(data_raw.pop("test_per_client", 4)),
                      phantom=phantom)
    assert not data_raw, data_raw

    timing = TimingConfig(**values.get("timing", {}))
    output = OutputConfig(**values.get("output", {}))

    cfg = ExperimentConfig(
        method=top_raw["method"], task=task, seed=top_raw.get("seed", 0),
        transport=top_raw.get("transport", "inproc"),
        topology=topo, optimizer=opt, model=model, split=split,
        dwcs_enabled=dwcs_enabled, dwcs=dwcs, data=data, timing=timing, output=output)
    cfg.validate()
    return cfg


def parse_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = _toml.loads(text)
    except _toml.TOMLDecodeError as exc:
        raise ConfigurationError(f"malformed config file: {exc}") from exc
    return config_from_dict(raw)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise AssertionError(type(value))


def config_to_toml(cfg: ExperimentConfig) -> str:
    """Serialize so that parse(to_toml(cfg)) == cfg."""
    p = cfg.data.phantom
    sections = {
        "": {"method": cfg.method, "task": cfg.task, "seed": cfg.seed,
             "transport": cfg.transport},
        "topology": {"clients": cfg.topology.clients, "rounds": cfg.topology.rounds,
                     "local_epochs": cfg.topology.local_epochs,
                     "batch_size": cfg.topology.batch_size},
        "optimizer": {"kind": cfg.optimizer.kind, "lr": cfg.optimizer.lr,
                      "weight_decay": cfg.optimizer.weight_decay},
        "model": {"depth": cfg.model.depth, "base_channels": cfg.model.base_channels,
                  "in_channels": cfg.model.in_channels, "out_channels": cfg.model.out_channels,
                  "image_size": cfg.model.height, "dtype": cfg.model.dtype},
        "split": {"level": cfg.split.level},
        "dwcs": {"enabled": cfg.dwcs_enabled, "mu": cfg.dwcs.mu, "eta": cfg.dwcs.eta,
                 "beta": cfg.dwcs.beta, "direction": cfg.dwcs.direction},
        "data": {"train_per_client": cfg.data.train_per_client,
                 "test_per_client": cfg.data.test_per_client,
                 "shapes_min": p.shape_count[0], "shapes_max": p.shape_count[1],
                 "intensity_min": p.intensity_range[0], "intensity_max": p.intensity_range[1],
                 "attenuation": p.attenuation_scale, "doses": list(p.doses),
                 "electronic_variance": p.electronic_variance,
                 "contrasts": list(p.contrasts), "biases": list(p.biases),
                 "seg_classes": p.n_classes, "seg_noise_sigma": p.seg_noise_sigma},
        "timing": {"enabled": cfg.timing.enabled, "message_latency": cfg.timing.message_latency,
                   "head_forward": cfg.timing.head_forward,
                   "head_backward": cfg.timing.head_backward,
                   "body_forward": cfg.timing.body_forward,
                   "body_backward": cfg.timing.body_backward,
                   "tail_forward": cfg.timing.tail_forward,
                   "tail_backward": cfg.timing.tail_backward},
        "output": {"checkpoint_interval": cfg.output.checkpoint_interval},
    }
    lines = []
    for key, value in sections[""].items():
        lines.append(f"{key} = {_toml_value(value)}")
    for section, content in sections.items():
        if not section:
            continue
        lines.append("")
        lines.append(f"[{section}]")
        for key, value in content.items():
            lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: ExperimentConfig, **kwargs) -> ExperimentConfig:
    """replace() plus re-validation."""
    out = replace(cfg, **kwargs)
    out.validate()
    return out
