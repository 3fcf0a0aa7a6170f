"""Experiment configuration: schema, validation, presets and hashing."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .netcore import ACTIVATIONS
from .pde import BURGERS, HELMHOLTZ, get_family

SCHEMA_VERSION = 1
DESIGNS = ("factorial", "random")
BASELINES = ("scratch", "transfer", "maml")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    family: str = HELMHOLTZ
    schema_version: int = SCHEMA_VERSION
    # design of experiments
    design: str = "factorial"
    levels: list = field(default_factory=lambda: [3, 3, 3])
    n_random_tasks: int = 27
    design_seed: int = 0
    reference_task: list | None = None
    n_unseen: int = 10
    unseen_seed: int = 0
    ood_scales: list = field(default_factory=list)
    n_ood: int = 5
    # problem and evaluation
    domain_scale: float = 1.0
    m_interior: int = 10000
    n_data: int = 400
    eval_points: int = 100
    # architecture
    layer_sizes: list = field(default_factory=lambda: [2, 10, 10, 10, 10, 1])
    split_depth: int = 2
    activation: str = "tanh"
    # optimisation
    lr: float = 2e-3
    lr_min: float = 1e-5
    patience: int = 50
    factor: float = 0.5
    pretrain_epochs: int = 5000
    # preprocessing and clustering
    preprocess_epochs: int = 50
    embedding_mode: str = "full"
    k: int | str = 3
    k_range: list = field(default_factory=lambda: [2, 3, 4, 5, 6])
    stability_seeds: int = 20
    kmeans_seed: int = 0
    # modular training
    n1: int = 100
    n2: int = 50
    lam_epochs: int | None = None
    lambda_main: float = 1.0
    lambda_other: float = 0.1
    phase1_scope: str = "literal"
    # transfer
    transfer_budget: int = 500
    lambda_init: float = 0.5
    learn_lambda: bool = True
    lambda_update: str = "adam"
    # baselines
    baselines: list = field(default_factory=lambda: list(BASELINES))
    maml_meta_iters: int = 4050
    maml_inner_steps: int = 1
    # statistics
    group_score: str = "L3"
    bootstrap_resamples: int = 10000
    # within/cross-cluster diagnostic
    cluster_transfer_targets: int = 2
    # runs
    seeds: list = field(default_factory=lambda: [0])
    parallel: int = 1
    out_dir: str = "runs"

    # ---------------------------------------------------------------
    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigurationError(msg)

        need(self.schema_version == SCHEMA_VERSION, f"config schema {self.schema_version} unsupported")
        fam = get_family(self.family)
        need(self.design in DESIGNS, f"design must be one of {DESIGNS}")
        need(len(self.levels) == len(fam.factor_names), f"{fam.name} needs {len(fam.factor_names)} level counts")
        need(all(int(n) >= 1 for n in self.levels), "every factor needs at least one level")
        need(self.n_random_tasks >= 2, "random design needs at least two tasks")
        if self.reference_task is not None:
            need(len(self.reference_task) == len(fam.factor_names), "reference task has the wrong length")
        need(self.n_unseen >= 2 and self.n_unseen % 2 == 0, "unseen-task count must be even and at least 2")
        need(all(s > 100 for s in self.ood_scales), "OOD scales must exceed 100 percent")
        need(self.n_ood >= 1, "need at least one OOD task per scale")
        need(self.domain_scale > 0, "domain scale must be positive")
        need(self.m_interior >= 0 and self.n_data >= 0 and self.m_interior + self.n_data > 0, "bad collocation counts")
        need(self.eval_points >= 2, "evaluation grid needs at least 2 points per axis")
        need(len(self.layer_sizes) >= 3 and min(self.layer_sizes) >= 1, "bad layer sizes")
        need(self.layer_sizes[0] == len(fam.coord_names) and self.layer_sizes[-1] == 1, "architecture must map coordinates to one output")
        need(1 <= self.split_depth < len(self.layer_sizes) - 1, "split depth out of range")
        need(self.activation in ACTIVATIONS, f"activation must be one of {ACTIVATIONS}")
        need(self.lr > 0 and 0 < self.lr_min <= self.lr, "need 0 < lr_min <= lr")
        need(self.patience >= 1 and 0 < self.factor < 1, "bad plateau schedule")
        for name in ("pretrain_epochs", "preprocess_epochs", "n1", "n2", "transfer_budget", "maml_meta_iters", "maml_inner_steps"):
            need(getattr(self, name) >= 0, f"{name} must be non-negative")
        need(self.embedding_mode in ("full", "params", "random"), "bad embedding mode")
        n_tasks = self.n_training_tasks()
        if self.k == "auto":
            need(len(self.k_range) >= 1 and self.stability_seeds >= 2, "automatic K needs a k range and at least two stability seeds")
            need(all(1 <= int(k) <= n_tasks for k in self.k_range), "k range exceeds the task count")
        else:
            need(isinstance(self.k, int) and 1 <= self.k <= n_tasks, f"k must be 'auto' or an integer in [1, {n_tasks}]")
        need(self.lam_epochs is None or self.lam_epochs >= 0, "lam_epochs must be non-negative")
        need(0 < self.lambda_other <= self.lambda_main <= 1, "need 0 < lambda_other <= lambda_main <= 1")
        need(self.phase1_scope in ("literal", "restrictive"), "bad phase-1 scope")
        need(0 <= self.lambda_init <= 1, "lambda_init must lie in [0, 1]")
        need(self.lambda_update in ("adam", "sgd"), "bad lambda update rule")
        need(all(b in BASELINES for b in self.baselines), f"baselines must come from {BASELINES}")
        need(self.group_score in ("L1", "L2", "L3", "norm"), "bad group score")
        need(self.bootstrap_resamples >= 1, "need at least one bootstrap resample")
        need(self.cluster_transfer_targets >= 0, "cluster transfer targets must be non-negative")
        need(len(self.seeds) >= 1 and len(set(self.seeds)) == len(self.seeds), "seeds must be non-empty and distinct")
        need(self.parallel >= 1, "parallel must be at least 1")
        return self

    def n_training_tasks(self) -> int:
        if self.design == "random":
            return self.n_random_tasks
        out = 1
        for n in self.levels:
            out *= int(n)
        return out

    # ---------------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigurationError(f"unknown config fields: {unknown}")
        return cls(**copy.deepcopy(doc)).validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def hash(self) -> str:
        """Digest of everything that affects results (output location and parallelism excluded)."""
        doc = self.to_dict()
        doc.pop("out_dir")
        doc.pop("parallel")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        doc = self.to_dict()
        doc.update(changes)
        return ExperimentConfig.from_dict(doc)


def _helmholtz_paper() -> ExperimentConfig:
    return ExperimentConfig(name="helmholtz-paper", family=HELMHOLTZ, ood_scales=[110, 120, 130])


def _burgers_paper() -> ExperimentConfig:
    return ExperimentConfig(
        name="burgers-paper",
        family=BURGERS,
        m_interior=100000,
        n_data=50000,
        eval_points=101,
        layer_sizes=[2] + [20] * 8 + [1],
        split_depth=4,
        pretrain_epochs=30000,
        preprocess_epochs=500,
        k=5,
        n1=1000,
        n2=100,
        transfer_budget=3000,
        maml_meta_iters=27 * 1100,
        ood_scales=[110, 120, 130],
    )


def _helmholtz_desk() -> ExperimentConfig:
    return ExperimentConfig(
        name="helmholtz-desk",
        family=HELMHOLTZ,
        domain_scale=0.25,
        m_interior=1600,
        n_data=160,
        eval_points=50,
        pretrain_epochs=3000,
        preprocess_epochs=50,
        k=3,
        stability_seeds=20,
        n1=100,
        n2=50,
        transfer_budget=500,
        n_unseen=10,
        maml_meta_iters=540,
        seeds=[0, 1, 2],
        cluster_transfer_targets=2,
        phase1_scope="restrictive",
    )


PRESETS = {
    "helmholtz-paper": _helmholtz_paper,
    "burgers-paper": _burgers_paper,
    "helmholtz-desk": _helmholtz_desk,
}


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]().validate()
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None
