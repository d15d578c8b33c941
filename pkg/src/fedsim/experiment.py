"""Five-model experiment harness: three per-client models, a pooled model, and FL.

All five models start from the same seeded initialization (mirroring a shared
pretrained starting point); what differs is the data each sees and, for FL,
the protocol. Outputs are the two metric tables as CSV (raw fractions) and
markdown (percentages), per-round FL metrics, training histories, saved model
files, and a manifest from which the whole run can be reproduced.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from . import __version__
from .data import (
    ClientDataset,
    ClientSpec,
    DataError,
    PartitionSpec,
    combine,
    generate_synthetic,
    load_csv,
    save_csv,
)
from .fed import AVERAGING_MODES, ClientRole, FederationConfig, RoundRecord
from .metrics import MetricsReport, cross_eval_matrix, evaluate
from .nn import EpochCheckpoint, ModelSpec, TrainConfig, init_params, train_local
from .params import ParameterSet
from .rng import derive_seed
from .runner import run_federation
from .transport import decode_global_model_payload, encode_global_model_payload

__all__ = [
    "ConfigError",
    "CsvClientPaths",
    "DataConfig",
    "ExperimentConfig",
    "ExperimentResult",
    "load_config",
    "config_to_dict",
    "load_datasets",
    "run_experiment",
    "write_gen_data",
    "save_model",
    "load_model",
    "display_name",
]

MODEL_FILE_MAGIC = b"FMDL"


class ConfigError(ValueError):
    """Bad experiment configuration; the message names the offending field."""


@dataclass(frozen=True)
class CsvClientPaths:
    train: str
    val: str
    test: str


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"  # "synthetic" | "csv"
    synthetic: PartitionSpec = field(default_factory=PartitionSpec)
    csv: tuple[tuple[str, CsvClientPaths], ...] = ()

    def __post_init__(self):
        if self.kind not in ("synthetic", "csv"):
            raise ConfigError(f"data.kind must be 'synthetic' or 'csv', got {self.kind!r}")
        if self.kind == "csv" and not self.csv:
            raise ConfigError("data.kind is 'csv' but no client paths were given")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 42
    model: ModelSpec = field(default_factory=lambda: ModelSpec(16, (8,)))
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    baseline_epochs: int = 20
    baseline_best_val_checkpoint: bool = True
    num_rounds: int = 5
    local_epochs: int = 4
    averaging_mode: str = "uniform"
    round_timeout: float | None = None
    submit_final_epoch: bool = False

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.baseline_epochs < 1:
            raise ConfigError(f"baseline_epochs must be >= 1, got {self.baseline_epochs}")
        if self.num_rounds < 1:
            raise ConfigError(f"federation.num_rounds must be >= 1, got {self.num_rounds}")
        if self.local_epochs < 1:
            raise ConfigError(
                f"federation.local_epochs must be >= 1, got {self.local_epochs}"
            )
        if self.averaging_mode not in AVERAGING_MODES:
            raise ConfigError(
                f"federation.averaging_mode must be one of {AVERAGING_MODES}, "
                f"got {self.averaging_mode!r}"
            )


class _Section:
    """Dict view that tracks consumed keys and reports errors with field paths."""

    def __init__(self, raw: Any, path: str):
        if not isinstance(raw, dict):
            raise ConfigError(f"{path or 'config'} must be an object, got {type(raw).__name__}")
        self.raw = dict(raw)
        self.path = path

    def _name(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def take(self, key: str, kind, default):
        if key not in self.raw:
            return default
        value = self.raw.pop(key)
        if value is None:  # explicit null = use the default
            return default
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        wrong_type = not isinstance(value, kind)
        bool_where_not_expected = isinstance(value, bool) and kind is not bool
        if wrong_type or bool_where_not_expected:
            raise ConfigError(
                f"{self._name(key)}: expected {getattr(kind, '__name__', kind)}, "
                f"got {value!r}"
            )
        return value

    def section(self, key: str) -> "_Section | None":
        if key not in self.raw:
            return None
        return _Section(self.raw.pop(key), self._name(key))

    def finish(self):
        if self.raw:
            extra = ", ".join(sorted(self.raw))
            raise ConfigError(f"unknown key(s) in {self.path or 'config'}: {extra}")


def _parse_model(section: _Section | None) -> ModelSpec:
    if section is None:
        return ModelSpec(16, (8,))
    input_dim = section.take("input_dim", int, 16)
    hidden = section.take("hidden_dims", list, [8])
    activation = section.take("activation", str, "relu")
    section.finish()
    if not all(isinstance(h, int) and not isinstance(h, bool) for h in hidden):
        raise ConfigError(f"model.hidden_dims must be integers, got {hidden!r}")
    try:
        return ModelSpec(input_dim, tuple(hidden), activation)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None


def _parse_train(section: _Section | None) -> TrainConfig:
    if section is None:
        return TrainConfig()
    kwargs = dict(
        learning_rate=section.take("learning_rate", float, 1e-3),
        batch_size=section.take("batch_size", int, 32),
        adam_beta1=section.take("adam_beta1", float, 0.9),
        adam_beta2=section.take("adam_beta2", float, 0.999),
        adam_epsilon=section.take("adam_epsilon", float, 1e-8),
    )
    section.finish()
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


def _parse_client_spec(raw: Any, path: str) -> ClientSpec:
    section = _Section(raw, path)
    spec = ClientSpec(
        total_size=section.take("total_size", int, 0),
        positive_count=section.take("positive_count", int, 0),
        train_size=section.take("train_size", int, 0),
        val_size=section.take("val_size", int, 0),
        test_size=section.take("test_size", int, 0),
        feature_shift=section.take("feature_shift", float, 0.0),
        feature_scale=section.take("feature_scale", float, 1.0),
    )
    section.finish()
    return spec


def _parse_data(section: _Section | None) -> DataConfig:
    if section is None:
        return DataConfig()
    kind = section.take("kind", str, "synthetic")
    if kind == "synthetic":
        feature_dim = section.take("feature_dim", int, PartitionSpec().feature_dim)
        separation = section.take(
            "class_mean_separation", float, PartitionSpec().class_mean_separation
        )
        clients_raw = section.take("clients", list, None)
        section.finish()
        if clients_raw is None:
            clients = PartitionSpec().clients
        else:
            clients = tuple(
                _parse_client_spec(c, f"{section.path}.clients[{i}]")
                for i, c in enumerate(clients_raw)
            )
        try:
            spec = PartitionSpec(
                clients=clients, feature_dim=feature_dim, class_mean_separation=separation
            )
        except DataError as exc:
            raise ConfigError(f"data: {exc}") from None
        return DataConfig(kind="synthetic", synthetic=spec)
    if kind == "csv":
        clients_raw = section.take("clients", dict, None)
        section.finish()
        if not clients_raw:
            raise ConfigError("data.clients must map client ids to train/val/test paths")
        csv_clients = []
        for client_id, paths_raw in clients_raw.items():
            paths = _Section(paths_raw, f"data.clients.{client_id}")
            entry = CsvClientPaths(
                train=paths.take("train", str, None),
                val=paths.take("val", str, None),
                test=paths.take("test", str, None),
            )
            paths.finish()
            if not all((entry.train, entry.val, entry.test)):
                raise ConfigError(
                    f"data.clients.{client_id}: train, val and test paths are all required"
                )
            csv_clients.append((client_id, entry))
        return DataConfig(kind="csv", csv=tuple(csv_clients))
    raise ConfigError(f"data.kind must be 'synthetic' or 'csv', got {kind!r}")


def _parse_federation(section: _Section | None) -> dict:
    defaults = dict(
        num_rounds=5,
        local_epochs=4,
        averaging_mode="uniform",
        round_timeout=None,
        submit_final_epoch=False,
    )
    if section is None:
        return defaults
    out = dict(
        num_rounds=section.take("num_rounds", int, defaults["num_rounds"]),
        local_epochs=section.take("local_epochs", int, defaults["local_epochs"]),
        averaging_mode=section.take("averaging_mode", str, defaults["averaging_mode"]),
        round_timeout=section.take("round_timeout", float, defaults["round_timeout"]),
        submit_final_epoch=section.take(
            "submit_final_epoch", bool, defaults["submit_final_epoch"]
        ),
    )
    section.finish()
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    root = _Section(raw, "")
    seed = root.take("seed", int, 42)
    model = _parse_model(root.section("model"))
    data_cfg = _parse_data(root.section("data"))
    train = _parse_train(root.section("train"))
    baseline_epochs = root.take("baseline_epochs", int, 20)
    baseline_checkpoint = root.take("baseline_best_val_checkpoint", bool, True)
    federation = _parse_federation(root.section("federation"))
    root.finish()
    return ExperimentConfig(
        seed=seed,
        model=model,
        data=data_cfg,
        train=train,
        baseline_epochs=baseline_epochs,
        baseline_best_val_checkpoint=baseline_checkpoint,
        **federation,
    )


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Config file -> ExperimentConfig; every field has a paper-mirroring default."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return config_from_dict(raw)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Fully-resolved config as plain JSON data (what goes in the manifest)."""
    data: dict[str, Any] = {"kind": cfg.data.kind}
    if cfg.data.kind == "synthetic":
        spec = cfg.data.synthetic
        data.update(
            feature_dim=spec.feature_dim,
            class_mean_separation=spec.class_mean_separation,
            clients=[
                dict(
                    total_size=c.total_size,
                    positive_count=c.positive_count,
                    train_size=c.train_size,
                    val_size=c.val_size,
                    test_size=c.test_size,
                    feature_shift=c.feature_shift,
                    feature_scale=c.feature_scale,
                )
                for c in spec.clients
            ],
        )
    else:
        data["clients"] = {
            cid: dict(train=p.train, val=p.val, test=p.test) for cid, p in cfg.data.csv
        }
    return {
        "seed": cfg.seed,
        "model": {
            "input_dim": cfg.model.input_dim,
            "hidden_dims": list(cfg.model.hidden_dims),
            "activation": cfg.model.activation,
        },
        "data": data,
        "train": {
            "learning_rate": cfg.train.learning_rate,
            "batch_size": cfg.train.batch_size,
            "adam_beta1": cfg.train.adam_beta1,
            "adam_beta2": cfg.train.adam_beta2,
            "adam_epsilon": cfg.train.adam_epsilon,
        },
        "baseline_epochs": cfg.baseline_epochs,
        "baseline_best_val_checkpoint": cfg.baseline_best_val_checkpoint,
        "federation": {
            "num_rounds": cfg.num_rounds,
            "local_epochs": cfg.local_epochs,
            "averaging_mode": cfg.averaging_mode,
            "round_timeout": cfg.round_timeout,
            "submit_final_epoch": cfg.submit_final_epoch,
        },
    }


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_datasets(cfg: ExperimentConfig) -> list[ClientDataset]:
    """Materialize the client datasets this config describes."""
    if cfg.data.kind == "synthetic":
        spec = replace(cfg.data.synthetic, seed=derive_seed(cfg.seed, "data"))
        return generate_synthetic(spec)
    datasets = []
    for client_id, paths in cfg.data.csv:
        datasets.append(
            ClientDataset(
                client_id=client_id,
                train=tuple(load_csv(paths.train)),
                val=tuple(load_csv(paths.val)),
                test=tuple(load_csv(paths.test)),
            )
        )
    return datasets


def display_name(client_id: str) -> str:
    """client1 -> Client1 (matching the published table headers)."""
    return client_id[:1].upper() + client_id[1:]


def save_model(path: str | Path, params: ParameterSet, round_index: int = 0) -> None:
    """Binary model file: 4-byte magic plus the broadcast-message payload."""
    Path(path).write_bytes(
        MODEL_FILE_MAGIC + encode_global_model_payload(round_index, params)
    )


def load_model(path: str | Path) -> tuple[ParameterSet, int]:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_FILE_MAGIC:
        raise DataError(f"{path} is not a model file (bad magic {data[:4]!r})")
    round_index, params = decode_global_model_payload(data[4:])
    return params, round_index


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    report: MetricsReport
    fl_params: ParameterSet
    fl_round_history: tuple[RoundRecord, ...]
    baseline_histories: dict[str, list[EpochCheckpoint]]
    fl_local_history: list[tuple[str, int, list[EpochCheckpoint]]]
    out_dir: Path


def _train_baseline(
    name: str,
    init: ParameterSet,
    dataset: ClientDataset,
    cfg: ExperimentConfig,
) -> tuple[ParameterSet, list[EpochCheckpoint]]:
    train_cfg = replace(
        cfg.train,
        epochs=cfg.baseline_epochs,
        seed=derive_seed(cfg.seed, "baseline", name),
    )
    best, history = train_local(init, dataset, train_cfg)
    chosen = best if cfg.baseline_best_val_checkpoint else history[-1]
    return chosen.params, history


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path) -> ExperimentResult:
    """Train the five models, cross-evaluate, and write every artifact."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = load_datasets(cfg)
    client_ids = [d.client_id for d in datasets]

    init = init_params(cfg.model, cfg.seed)
    models: list[tuple[str, ParameterSet]] = []
    baseline_histories: dict[str, list[EpochCheckpoint]] = {}
    for dataset in datasets:
        params, history = _train_baseline(dataset.client_id, init, dataset, cfg)
        models.append((display_name(dataset.client_id), params))
        baseline_histories[dataset.client_id] = history

    pooled = combine(datasets)
    combined_params, combined_history = _train_baseline("combined", init, pooled, cfg)
    baseline_histories["combined"] = combined_history

    fed_cfg = FederationConfig(
        model=cfg.model,
        num_rounds=cfg.num_rounds,
        local_epochs=cfg.local_epochs,
        averaging_mode=cfg.averaging_mode,
        train=replace(cfg.train, seed=cfg.seed),
        expected_clients=tuple(client_ids),
        round_timeout=cfg.round_timeout,
        submit_final_epoch=cfg.submit_final_epoch,
    )
    roles = [ClientRole(d.client_id, d, fed_cfg.train) for d in datasets]
    fl_local_history: list[tuple[str, int, list[EpochCheckpoint]]] = []
    hook_lock = threading.Lock()

    def hook(client_id: str, round_index: int, history: list[EpochCheckpoint]) -> None:
        with hook_lock:
            fl_local_history.append((client_id, round_index, history))

    fl_params, fl_rounds = run_federation(
        fed_cfg, roles, "in_process", initial_params=init, history_hook=hook
    )
    fl_local_history.sort(key=lambda row: (row[1], row[0]))

    models.append(("FL", fl_params))
    models.append(("Combined", combined_params))

    report = cross_eval_matrix(
        models, [(display_name(d.client_id), d.test) for d in datasets]
    )

    _write_artifacts(cfg, out_dir, datasets, models, report, fl_rounds,
                     baseline_histories, fl_local_history)
    return ExperimentResult(
        config=cfg,
        report=report,
        fl_params=fl_params,
        fl_round_history=fl_rounds,
        baseline_histories=baseline_histories,
        fl_local_history=fl_local_history,
        out_dir=out_dir,
    )


def _write_artifacts(cfg, out_dir, datasets, models, report, fl_rounds,
                     baseline_histories, fl_local_history) -> None:
    for metric in ("auroc", "auprc"):
        (out_dir / f"{metric}.csv").write_text(report.to_csv(metric))
        (out_dir / f"{metric}.md").write_text(report.to_markdown(metric))

    lines = ["round,client_id,epoch,train_loss,val_loss"]
    for client_id, round_index, history in fl_local_history:
        for cp in history:
            lines.append(
                f"{round_index},{client_id},{cp.epoch_index},"
                f"{cp.train_loss!r},{cp.val_loss!r}"
            )
    (out_dir / "fl_history.csv").write_text("\n".join(lines) + "\n")

    test_sets = [(display_name(d.client_id), d.test) for d in datasets]
    lines = ["round,data,auroc,auprc"]
    for record in fl_rounds:
        for name, test in test_sets:
            auroc, auprc = evaluate(record.global_params, test)
            lines.append(f"{record.round_index},{name},{auroc!r},{auprc!r}")
    (out_dir / "fl_rounds.csv").write_text("\n".join(lines) + "\n")

    lines = ["model,epoch,train_loss,val_loss"]
    for name in sorted(baseline_histories):
        for cp in baseline_histories[name]:
            lines.append(f"{name},{cp.epoch_index},{cp.train_loss!r},{cp.val_loss!r}")
    (out_dir / "baseline_history.csv").write_text("\n".join(lines) + "\n")

    models_dir = out_dir / "models"
    models_dir.mkdir(exist_ok=True)
    artifact_names = {}
    for name, params in models:
        file_name = f"{name.lower()}.fmdl"
        rounds = cfg.num_rounds if name == "FL" else 0
        save_model(models_dir / file_name, params, rounds)
        artifact_names[name] = f"models/{file_name}"

    manifest = {
        "package": "fedsim",
        "version": __version__,
        "seed": cfg.seed,
        "averaging_mode": cfg.averaging_mode,
        "config_sha256": config_hash(cfg),
        "config": config_to_dict(cfg),
        "tables": ["auroc.csv", "auprc.csv", "auroc.md", "auprc.md"],
        "histories": ["fl_history.csv", "fl_rounds.csv", "baseline_history.csv"],
        "models": artifact_names,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def write_gen_data(cfg: ExperimentConfig, out_dir: str | Path) -> list[Path]:
    """Write the synthetic corpus as one CSV per client split."""
    if cfg.data.kind != "synthetic":
        raise ConfigError("gen-data needs a synthetic data config")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for dataset in load_datasets(cfg):
        for split_name in ("train", "val", "test"):
            path = out_dir / f"{dataset.client_id}_{split_name}.csv"
            save_csv(path, getattr(dataset, split_name))
            paths.append(path)
    return paths
