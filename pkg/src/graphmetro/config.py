"""Experiment configuration: YAML documents, named presets and a stable hash."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import yaml

from .model import AGGREGATION_MODES, EXPERT_MODES
from .synthetic import SyntheticSpec
from .training import METHODS
from .transforms import DEFAULT_KINDS, TransformKind, TransformSet


class ConfigError(ValueError):
    """Raised with every validation problem found, one per line."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass
class ModelSection:
    hidden_dim: int = 64
    num_layers: int = 3
    activation: str = "prelu"
    dropout: float = 0.0
    pooling: str = "add"
    expert_mode: str = "independent_encoders"
    aggregation_mode: str = "softmax_sum"
    gate_degree: bool = True


@dataclass
class TrainSection:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    lam: float = 1.0
    identity_prob: Optional[float] = None
    steps_per_epoch: int = 1
    subgraph_targets: int = 128
    dtype: str = "float32"


@dataclass
class TransformSection:
    kinds: list = field(default_factory=lambda: [str(k) for k in DEFAULT_KINDS])
    param_domains: dict = field(default_factory=dict)
    k: int = 2


@dataclass
class EvalSection:
    metric: str = "accuracy"
    invariance_trials: int = 100
    invariance_samples: int = 100
    normalization: str = "row_minmax"
    # kinds planted in the discovery target; empty means the untransformed test split
    discover_target: list = field(default_factory=lambda: ["drop_edge"])


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    task_kind: str = "node"
    dataset_path: Optional[str] = None
    synthetic: Optional[dict] = None
    split: tuple = (0.8, 0.1, 0.1)
    methods: list = field(default_factory=lambda: ["graphmetro", "erm"])
    baseline: str = "erm"
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    transforms: TransformSection = field(default_factory=TransformSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    evaluation: EvalSection = field(default_factory=EvalSection)
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    def hash(self) -> str:
        """Short digest of every setting that affects numeric results."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("seeds")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(task_kind=self.task_kind, **(self.synthetic or {}))

    def transform_set(self) -> TransformSet:
        return TransformSet.from_kinds(self.transforms.kinds, self.transforms.param_domains or None)

    def validate(self) -> list:
        """Every problem found; empty when the config is usable."""
        p = []
        if self.task_kind not in ("node", "graph"):
            p.append("task_kind must be 'node' or 'graph'")
        if (self.dataset_path is None) == (self.synthetic is None):
            p.append("give exactly one of dataset_path or synthetic")
        if self.dataset_path is not None and not os.path.exists(self.dataset_path):
            p.append(f"dataset_path does not exist: {self.dataset_path}")
        if self.synthetic is not None:
            known = {f.name for f in fields(SyntheticSpec)} - {"task_kind"}
            extra = set(self.synthetic) - known
            if extra:
                p.append(f"unknown synthetic keys: {sorted(extra)}")
            else:
                p.extend(f"synthetic: {m}" for m in self.synthetic_spec().validate())
        if len(self.split) != 3 or any(not 0 < f < 1 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            p.append("split must be three fractions in (0, 1) summing to 1")
        for m in self.methods:
            if m not in METHODS:
                p.append(f"unknown method {m!r}; choose from {METHODS}")
        if not self.methods:
            p.append("methods must not be empty")
        if self.baseline not in METHODS:
            p.append(f"unknown baseline {self.baseline!r}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            p.append("seeds must be a non-empty list of distinct integers")

        t = self.transforms
        valid_kinds = {k.value for k in TransformKind} - {"identity"}
        bad = [k for k in t.kinds if k not in valid_kinds]
        if bad:
            p.append(f"unknown transform kinds {bad}")
        elif len(set(t.kinds)) != len(t.kinds):
            p.append("transform kinds repeat")
        else:
            try:
                self.transform_set()
            except ValueError as e:
                p.append(f"transforms: {e}")
            if t.kinds and not 1 <= t.k <= len(t.kinds):
                p.append(f"k must lie in [1, {len(t.kinds)}]")
        for kind in t.param_domains or {}:
            if kind not in t.kinds:
                p.append(f"param_domains names inactive kind {kind!r}")

        m = self.model
        if m.hidden_dim < 1 or m.num_layers < 1:
            p.append("hidden_dim and num_layers must be >= 1")
        if not 0 <= m.dropout < 1:
            p.append("dropout must lie in [0, 1)")
        if m.pooling not in ("add", "mean"):
            p.append("pooling must be 'add' or 'mean'")
        if m.expert_mode not in EXPERT_MODES:
            p.append(f"expert_mode must be one of {EXPERT_MODES}")
        if m.aggregation_mode not in AGGREGATION_MODES:
            p.append(f"aggregation_mode must be one of {AGGREGATION_MODES}")

        tr = self.train
        if tr.learning_rate <= 0:
            p.append("learning_rate must be positive")
        if tr.epochs < 1 or tr.batch_size < 1 or tr.steps_per_epoch < 1:
            p.append("epochs, batch_size and steps_per_epoch must be >= 1")
        if tr.lam < 0:
            p.append("lam must be non-negative")
        if tr.identity_prob is not None and not 0 <= tr.identity_prob <= 1:
            p.append("identity_prob must lie in [0, 1]")
        if tr.dtype not in ("float32", "float64"):
            p.append("dtype must be float32 or float64")

        e = self.evaluation
        if e.metric not in ("accuracy", "roc_auc"):
            p.append("metric must be accuracy or roc_auc")
        if e.normalization not in ("row_minmax", "global_max"):
            p.append("normalization must be row_minmax or global_max")
        if e.invariance_trials < 1 or e.invariance_samples < 1:
            p.append("invariance_trials and invariance_samples must be >= 1")
        if any(k not in t.kinds for k in e.discover_target):
            p.append("discover_target names inactive kinds")
        return p


_SECTIONS = {
    "transforms": TransformSection,
    "model": ModelSection,
    "train": TrainSection,
    "evaluation": EvalSection,
}

PRESETS = {
    "synthetic-node": {
        "name": "synthetic-node",
        "task_kind": "node",
        "synthetic": {
            "generator": "sbm",
            "label_rule": "community",
            "num_classes": 3,
            "num_nodes": 1000,
            "feature_dim": 8,
            "deg_in": 6.0,
            "deg_out": 0.5,
            "feature_signal": 0.5,
            "feature_noise": 1.0,
            "seed": 0,
        },
        "model": {"hidden_dim": 64, "num_layers": 3, "pooling": "add"},
        "train": {"learning_rate": 1e-2, "epochs": 100, "steps_per_epoch": 1},
    },
    "synthetic-graph": {
        "name": "synthetic-graph",
        "task_kind": "graph",
        "synthetic": {
            "generator": "sbm",
            "label_rule": "community",
            "num_classes": 3,
            "num_graphs": 500,
            "min_nodes": 20,
            "max_nodes": 40,
            "feature_dim": 8,
            "deg_in": 5.7,
            "deg_out": 0.3,
            "feature_signal": 1.0,
            "feature_noise": 0.5,
            "seed": 0,
        },
        "model": {"hidden_dim": 32, "num_layers": 2, "pooling": "add"},
        "train": {"learning_rate": 1e-3, "epochs": 60, "batch_size": 32},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "param_domains":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_from_dict(d: dict) -> ExperimentConfig:
    """Build a config; a ``preset`` key names the base the document overrides."""
    d = dict(d or {})
    preset = d.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError([f"unknown preset {preset!r}; choose from {sorted(PRESETS)}"])
        d = _merge(PRESETS[preset], d)
    known = {f.name for f in fields(ExperimentConfig)}
    problems = [f"unknown key {k!r}" for k in d if k not in known]
    kwargs = {}
    for k, v in d.items():
        if k not in known:
            continue
        if k in _SECTIONS:
            if not isinstance(v, dict):
                problems.append(f"section {k!r} must be a mapping")
                continue
            sec = _SECTIONS[k]
            names = {f.name for f in fields(sec)}
            problems.extend(f"unknown key {k}.{x}" for x in v if x not in names)
            kwargs[k] = sec(**{x: y for x, y in v.items() if x in names})
        elif k == "split":
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(**kwargs)


def load_config(path, validate=True) -> ExperimentConfig:
    """Read a YAML config (or a preset name) and validate it."""
    if path in PRESETS:
        cfg = config_from_dict({"preset": path})
    else:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config not found: {path}")
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError(["config must be a mapping"])
        base = os.path.dirname(os.path.abspath(path))
        if doc.get("dataset_path") and not os.path.isabs(doc["dataset_path"]):
            doc["dataset_path"] = os.path.join(base, doc["dataset_path"])
        cfg = config_from_dict(doc)
    if validate:
        problems = cfg.validate()
        if problems:
            raise ConfigError(problems)
    return cfg


def dump_config(cfg: ExperimentConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
