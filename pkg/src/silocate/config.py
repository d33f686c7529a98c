"""Experiment configuration: a flat TOML document with typed keys.

Every key except ``mode`` and ``seed`` has a default. Unknown keys are
rejected so that typos fail loudly instead of silently using a default.
CSV federations list their silos as ``[[client]]`` tables.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .datagen import SynthConfig, WeightDist
from .federation import AggregationMode, FederationConfig
from .model import ModelHyperParams, OptimizerConfig, OutcomeKind


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CsvClient:
    path: str
    shared_columns: tuple[str, ...]
    private_columns: tuple[str, ...]
    treatment_column: str = "w"
    outcome_column: str = "y"
    y0_column: str | None = None
    y1_column: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    seed: int
    seeds: tuple[int, ...] = ()
    n_seeds: int = 5
    # synthetic data
    n_clients: int = 5
    alpha: float = 0.5
    beta: float = 0.5
    d_shared: int = 10
    d_private: tuple[int, ...] = (5, 7, 10, 12, 15)
    n_samples: tuple[int, ...] = (1000,)
    noise_var: float = 0.01
    weight_loc: float = -10.0
    weight_scale: float = 10.0
    weight_dist: str = "normal"
    standardize_tau: bool = False
    # csv federation
    clients: tuple[CsvClient, ...] = ()
    # model
    z_dim: int = 8
    widths: tuple[int, ...] = (32, 32)
    encoder_hidden: tuple[int, ...] = (32,)
    outcome_kind: str = "continuous"
    # training
    rounds: int = 50
    local_epochs: int = 1
    eta: float = 0.01
    lam_kl: float = 0.1
    lam_prox: float = 0.01
    lam_ref: float = 1.0
    lam_outcome: float = 1.0
    batch_size: int = 64
    aggregation: str = "sample_weighted"
    aggregate_encoder: bool = False
    sample_latent: bool = True
    literal_sign: bool = False
    workers: int = 1
    # evaluation
    test_fraction: float = 0.2
    shadow_run: bool = False
    alpha_grid: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    out_dir: str = "runs/experiment"

    @property
    def seed_list(self) -> tuple[int, ...]:
        if self.seeds:
            return self.seeds
        return tuple(self.seed + i for i in range(self.n_seeds))

    def synth_config(self, seed: int, alpha: float | None = None) -> SynthConfig:
        n_samples = self.n_samples
        if len(n_samples) == 1:
            n_samples = n_samples * self.n_clients
        d_private = self.d_private
        if len(d_private) == 1:
            d_private = d_private * self.n_clients
        return SynthConfig(
            n_clients=self.n_clients,
            alpha=self.alpha if alpha is None else alpha,
            beta=self.beta,
            d_shared=self.d_shared,
            d_private=d_private,
            n_samples=n_samples,
            noise_var=self.noise_var,
            weight_loc=self.weight_loc,
            weight_scale=self.weight_scale,
            weight_dist=WeightDist(self.weight_dist),
            standardize_tau=self.standardize_tau,
            seed=seed,
        )

    def federation_config(self, seed: int) -> FederationConfig:
        return FederationConfig(
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            optimizer=OptimizerConfig(
                eta=self.eta,
                batch_size=self.batch_size,
                lam_kl=self.lam_kl,
                lam_prox=self.lam_prox,
                lam_ref=self.lam_ref,
                lam_outcome=self.lam_outcome,
                sample_latent=self.sample_latent,
                literal_sign=self.literal_sign,
            ),
            aggregation=AggregationMode(self.aggregation),
            aggregate_encoder=self.aggregate_encoder,
            model=ModelHyperParams(
                z_dim=self.z_dim,
                widths=self.widths,
                encoder_hidden=self.encoder_hidden,
                outcome_kind=OutcomeKind(self.outcome_kind),
            ),
            seed=seed,
            workers=self.workers,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clients"] = [asdict(c) for c in self.clients]
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


_TUPLE_INT = {"seeds", "d_private", "n_samples", "widths", "encoder_hidden"}
_TUPLE_FLOAT = {"alpha_grid"}
_FIELD_TYPES = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(key: str, value: Any) -> Any:
    default = _FIELD_TYPES[key].default
    if key in _TUPLE_INT:
        items = value if isinstance(value, list) else [value]
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in items):
            raise ConfigError(f"{key}: expected integer or list of integers, got {value!r}")
        return tuple(items)
    if key in _TUPLE_FLOAT:
        items = value if isinstance(value, list) else [value]
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in items):
            raise ConfigError(f"{key}: expected list of numbers, got {value!r}")
        return tuple(float(v) for v in items)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or key == "seed":
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, str) or key == "mode":
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {value!r}")
        return value
    return value


def _csv_clients(raw: Any, base: Path) -> tuple[CsvClient, ...]:
    if not isinstance(raw, list):
        raise ConfigError("client: expected [[client]] tables")
    allowed = {f.name for f in fields(CsvClient)}
    out = []
    for i, entry in enumerate(raw):
        unknown = set(entry) - allowed
        if unknown:
            raise ConfigError(f"client[{i}]: unknown key(s) {sorted(unknown)}")
        for req in ("path", "shared_columns", "private_columns"):
            if req not in entry:
                raise ConfigError(f"client[{i}]: missing key {req!r}")
        path = Path(entry["path"])
        if not path.is_absolute():
            path = base / path
        out.append(
            CsvClient(
                path=str(path),
                shared_columns=tuple(entry["shared_columns"]),
                private_columns=tuple(entry["private_columns"]),
                treatment_column=entry.get("treatment_column", "w"),
                outcome_column=entry.get("outcome_column", "y"),
                y0_column=entry.get("y0_column"),
                y1_column=entry.get("y1_column"),
            )
        )
    return tuple(out)


def config_from_dict(raw: dict, base: Path = Path(".")) -> ExperimentConfig:
    raw = dict(raw)
    for req in ("mode", "seed"):
        if req not in raw:
            raise ConfigError(f"{req}: missing required key")
    clients = _csv_clients(raw.pop("client"), base) if "client" in raw else ()
    unknown = sorted(set(raw) - set(_FIELD_TYPES) - {"clients"})
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown key")
    values = {k: _coerce(k, v) for k, v in raw.items()}
    cfg = replace(ExperimentConfig(mode=values.pop("mode"), seed=values.pop("seed")), **values, clients=clients)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    def bad(key: str, msg: str) -> ConfigError:
        return ConfigError(f"{key}: {msg}")

    if cfg.mode not in ("synthetic", "csv"):
        raise bad("mode", f"must be 'synthetic' or 'csv', got {cfg.mode!r}")
    for key in ("alpha", "beta"):
        v = getattr(cfg, key)
        if not 0.0 <= v <= 1.0:
            raise bad(key, f"must lie in [0, 1], got {v}")
    for v in cfg.alpha_grid:
        if not 0.0 <= v <= 1.0:
            raise bad("alpha_grid", f"values must lie in [0, 1], got {v}")
    if cfg.mode == "synthetic":
        _validate_synthetic(cfg, bad)
    if cfg.outcome_kind not in {o.value for o in OutcomeKind}:
        raise bad("outcome_kind", f"must be one of {[o.value for o in OutcomeKind]}")
    if cfg.aggregation not in {a.value for a in AggregationMode}:
        raise bad("aggregation", f"must be one of {[a.value for a in AggregationMode]}")
    if cfg.z_dim < 1:
        raise bad("z_dim", "must be >= 1")
    if not cfg.widths or any(w < 1 for w in cfg.widths):
        raise bad("widths", "need at least one positive width")
    if any(w < 1 for w in cfg.encoder_hidden):
        raise bad("encoder_hidden", "widths must be positive")
    for key in ("rounds", "local_epochs"):
        if getattr(cfg, key) < 0:
            raise bad(key, "must be >= 0")
    for key in ("eta", "lam_kl", "lam_prox", "lam_ref", "lam_outcome"):
        if getattr(cfg, key) < 0:
            raise bad(key, "must be >= 0")
    if cfg.batch_size < 1:
        raise bad("batch_size", "must be >= 1")
    if cfg.workers < 1:
        raise bad("workers", "must be >= 1")
    if not 0.0 < cfg.test_fraction < 1.0:
        raise bad("test_fraction", "must lie in (0, 1)")
    if cfg.n_seeds < 1 and not cfg.seeds:
        raise bad("n_seeds", "must be >= 1")
    if cfg.mode == "csv" and not cfg.clients:
        raise bad("client", "csv mode needs at least one [[client]] table")


def _validate_synthetic(cfg: ExperimentConfig, bad) -> None:
    if cfg.n_clients < 1:
        raise bad("n_clients", f"K must be >= 1, got {cfg.n_clients}")
    if cfg.d_shared < 1:
        raise bad("d_shared", "must be >= 1")
    if len(cfg.d_private) not in (1, cfg.n_clients) or any(d < 0 for d in cfg.d_private):
        raise bad("d_private", f"need 1 or {cfg.n_clients} non-negative entries")
    if len(cfg.n_samples) not in (1, cfg.n_clients) or any(n < 2 for n in cfg.n_samples):
        raise bad("n_samples", f"need 1 or {cfg.n_clients} entries, each >= 2")
    if cfg.noise_var < 0:
        raise bad("noise_var", "must be >= 0")
    if cfg.weight_dist not in {w.value for w in WeightDist}:
        raise bad("weight_dist", f"must be one of {[w.value for w in WeightDist]}")


def parse_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: no such file {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: malformed TOML in {path}: {exc}") from None
    return config_from_dict(raw, path.parent)
