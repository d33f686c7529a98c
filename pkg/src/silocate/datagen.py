"""Multi-silo datasets: a semi-synthetic generator and CSV ingestion.

Synthetic outcomes mix three linear structures per silo ``k``::

    f_k(x) = (alpha/K) * sum_j <w_shared[j], x_s> / d_s
             + (1 - alpha) * ( beta * <w_private[k], x_p> / d_p[k]
                               + (1 - beta) * <w_full[k], [x_s | x_p]> / d_k )

``Y(0) = f_k(x; bank_y0) + noise`` and ``Y(1) = Y(0) + f_k(x; bank_tau)``.
Treatment is Bernoulli with probability ``sigmoid(Y(1) - Y(0))``.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .numkernel import sigmoid

# stream tags mixed into SeedSequence entropy; keep stable for reproducibility
_TAG_SCHEMA = 11
_TAG_WEIGHTS_Y0 = 21
_TAG_WEIGHTS_TAU = 22
_TAG_COVARIATES = 31
_TAG_TREATMENT = 41
_TAG_SPLIT = 51


def stream(seed: int, *tags: int) -> np.random.Generator:
    """Independent generator for ``(seed, *tags)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *tags]))


class WeightDist(str, enum.Enum):
    NORMAL = "normal"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class FeatureSchema:
    """Which source columns are shared and which are private to each client.

    ``shared_columns`` and ``private_columns[k]`` hold source column indices
    (for synthetic data these index the generated columns).
    """

    shared_columns: tuple[int, ...]
    private_columns: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if len(self.shared_columns) < 1:
            raise ValueError("at least one shared dimension is required")
        if len(self.private_columns) < 1:
            raise ValueError("at least one client is required")
        seen = set(self.shared_columns)
        if len(seen) != len(self.shared_columns):
            raise ValueError("duplicate shared column")
        for k, cols in enumerate(self.private_columns):
            if seen.intersection(cols) or len(set(cols)) != len(cols):
                raise ValueError(f"client {k}: private columns overlap another assignment")
            seen.update(cols)

    @property
    def n_clients(self) -> int:
        return len(self.private_columns)

    @property
    def shared_dims(self) -> int:
        return len(self.shared_columns)

    @property
    def private_dims(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.private_columns)

    def client_dims(self, k: int) -> int:
        return self.shared_dims + len(self.private_columns[k])

    def to_dict(self) -> dict:
        return {
            "shared_columns": list(self.shared_columns),
            "private_columns": [list(c) for c in self.private_columns],
        }


def build_feature_schema(
    total_columns: int | None,
    n_clients: int,
    d_shared: int,
    d_private: Sequence[int],
    seed: int = 0,
) -> FeatureSchema:
    """Assign columns to the shared block and to each client's private block.

    With ``total_columns=None`` the columns are laid out contiguously, which is
    what the synthetic generator uses. Otherwise a seeded permutation of the
    ``total_columns`` source columns is partitioned.
    """
    if n_clients < 1:
        raise ValueError(f"K must be >= 1, got {n_clients}")
    if d_shared < 1:
        raise ValueError(f"d_shared must be >= 1, got {d_shared}")
    d_private = list(d_private)
    if len(d_private) != n_clients:
        raise ValueError(f"need {n_clients} private dims, got {len(d_private)}")
    if any(d < 0 for d in d_private):
        raise ValueError("private dims must be non-negative")
    needed = d_shared + sum(d_private)
    if total_columns is None:
        order = np.arange(needed)
    else:
        if needed > total_columns:
            raise ValueError(
                f"insufficient columns: need {needed} (shared {d_shared} + private {sum(d_private)}), "
                f"have {total_columns}"
            )
        order = stream(seed, _TAG_SCHEMA).permutation(total_columns)
    shared = tuple(int(c) for c in order[:d_shared])
    private = []
    offset = d_shared
    for d in d_private:
        private.append(tuple(int(c) for c in order[offset : offset + d]))
        offset += d
    return FeatureSchema(shared, tuple(private))


@dataclass(frozen=True)
class SynthConfig:
    n_clients: int = 5
    alpha: float = 0.5
    beta: float = 0.5
    d_shared: int = 10
    d_private: tuple[int, ...] = (5, 7, 10, 12, 15)
    n_samples: tuple[int, ...] = (1000, 1000, 1000, 1000, 1000)
    noise_var: float = 0.01
    weight_loc: float = -10.0
    weight_scale: float = 10.0
    weight_dist: WeightDist = WeightDist.NORMAL
    standardize_tau: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "weight_dist", WeightDist(self.weight_dist))
        dp = self.d_private
        if isinstance(dp, int):
            dp = (dp,) * self.n_clients
        object.__setattr__(self, "d_private", tuple(int(d) for d in dp))
        ns = self.n_samples
        if isinstance(ns, int):
            ns = (ns,) * self.n_clients
        object.__setattr__(self, "n_samples", tuple(int(n) for n in ns))
        self.validate()

    def validate(self) -> None:
        if self.n_clients < 1:
            raise ValueError(f"n_clients must be >= 1, got {self.n_clients}")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.noise_var < 0:
            raise ValueError(f"noise_var must be >= 0, got {self.noise_var}")
        if self.weight_dist is WeightDist.NORMAL and self.weight_scale < 0:
            raise ValueError("weight_scale is a variance and must be >= 0")
        if self.d_shared < 1:
            raise ValueError("d_shared must be >= 1")
        if len(self.d_private) != self.n_clients:
            raise ValueError(f"d_private needs {self.n_clients} entries")
        if len(self.n_samples) != self.n_clients:
            raise ValueError(f"n_samples needs {self.n_clients} entries")
        if any(n < 1 for n in self.n_samples):
            raise ValueError("every client needs at least one sample")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weight_dist"] = self.weight_dist.value
        d["d_private"] = list(self.d_private)
        d["n_samples"] = list(self.n_samples)
        return d


@dataclass
class WeightBank:
    shared: np.ndarray  # (K, d_s): one shared weight vector per domain j
    private: list[np.ndarray]  # per client, length d_p[k]
    full: list[np.ndarray]  # per client, length d_s + d_p[k]


@dataclass
class ClientDataset:
    client_id: int
    x_shared: np.ndarray  # (n, d_s)
    x_private: np.ndarray  # (n, d_p)
    treatment: np.ndarray | None = None  # (n,) of {0, 1}
    outcome: np.ndarray | None = None
    true_y0: np.ndarray | None = None
    true_y1: np.ndarray | None = None
    schema: FeatureSchema | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.x_shared.shape[0]

    @property
    def covariates(self) -> np.ndarray:
        """``[shared block | private block]``."""
        return np.hstack([self.x_shared, self.x_private])

    @property
    def has_truth(self) -> bool:
        return self.true_y0 is not None and self.true_y1 is not None

    @property
    def true_cate(self) -> np.ndarray:
        if not self.has_truth:
            raise ValueError(f"client {self.client_id}: no ground-truth potential outcomes")
        return self.true_y1 - self.true_y0

    def subset(self, idx: np.ndarray) -> "ClientDataset":
        def take(a):
            return None if a is None else a[idx]

        return replace(
            self,
            x_shared=self.x_shared[idx],
            x_private=self.x_private[idx],
            treatment=take(self.treatment),
            outcome=take(self.outcome),
            true_y0=take(self.true_y0),
            true_y1=take(self.true_y1),
        )


def _draw(rng: np.random.Generator, cfg: SynthConfig, size) -> np.ndarray:
    if cfg.weight_dist is WeightDist.NORMAL:
        # (loc, scale) read as (mean, variance)
        return rng.normal(cfg.weight_loc, math.sqrt(cfg.weight_scale), size=size)
    # (loc, scale) read as the interval [loc, scale]
    lo, hi = sorted((cfg.weight_loc, cfg.weight_scale))
    return rng.uniform(lo, hi, size=size)


def _bank(rng: np.random.Generator, schema: FeatureSchema, cfg: SynthConfig) -> WeightBank:
    shared = _draw(rng, cfg, (schema.n_clients, schema.shared_dims))
    private = [_draw(rng, cfg, d) for d in schema.private_dims]
    full = [_draw(rng, cfg, schema.client_dims(k)) for k in range(schema.n_clients)]
    return WeightBank(shared, private, full)


def generate_weights(schema: FeatureSchema, cfg: SynthConfig) -> tuple[WeightBank, WeightBank]:
    """Draw the baseline-outcome bank and the effect bank from independent streams."""
    return (
        _bank(stream(cfg.seed, _TAG_WEIGHTS_Y0), schema, cfg),
        _bank(stream(cfg.seed, _TAG_WEIGHTS_TAU), schema, cfg),
    )


def eval_structural(x_shared, x_private, bank: WeightBank, k: int, cfg: SynthConfig):
    """Noise-free structural term for client ``k``.

    Accepts single samples or row batches. Every domain's shared weights are
    applied to this sample's own shared covariates.
    """
    xs = np.asarray(x_shared, dtype=np.float64)
    xp = np.asarray(x_private, dtype=np.float64)
    d_s = bank.shared.shape[1]
    w_p = bank.private[k]
    if xs.shape[-1] != d_s:
        raise ValueError(f"x_shared has {xs.shape[-1]} dims, bank expects {d_s}")
    if xp.shape[-1] != w_p.shape[0]:
        raise ValueError(f"x_private has {xp.shape[-1]} dims, client {k} expects {w_p.shape[0]}")
    n_domains = bank.shared.shape[0]
    shared_term = sum(xs @ bank.shared[j] for j in range(n_domains)) / d_s
    shared_term = cfg.alpha / n_domains * shared_term
    d_p = w_p.shape[0]
    private_term = (xp @ w_p) / d_p if d_p > 0 else 0.0 * shared_term
    x_full = np.concatenate([xs, xp], axis=-1)
    full_term = (x_full @ bank.full[k]) / x_full.shape[-1]
    return shared_term + (1.0 - cfg.alpha) * (
        cfg.beta * private_term + (1.0 - cfg.beta) * full_term
    )


def generate_potential_outcomes(
    schema: FeatureSchema, cfg: SynthConfig, banks: tuple[WeightBank, WeightBank] | None = None
) -> list[ClientDataset]:
    """Covariates and both potential outcomes for every client; no treatments yet."""
    bank_y0, bank_tau = banks if banks is not None else generate_weights(schema, cfg)
    sd = math.sqrt(cfg.noise_var)
    out = []
    for k in range(schema.n_clients):
        rng = stream(cfg.seed, _TAG_COVARIATES, k)
        n = cfg.n_samples[k]
        xs = rng.standard_normal((n, schema.shared_dims))
        xp = rng.standard_normal((n, schema.private_dims[k]))
        noise = rng.normal(0.0, sd, size=n) if sd > 0 else np.zeros(n)
        y0 = eval_structural(xs, xp, bank_y0, k, cfg) + noise
        tau = eval_structural(xs, xp, bank_tau, k, cfg)
        out.append(ClientDataset(k, xs, xp, true_y0=y0, true_y1=y0 + tau, schema=schema))
    return out


def assign_treatments(
    datasets: Sequence[ClientDataset], seed: int, standardize_tau: bool = False
) -> list[ClientDataset]:
    out = []
    for ds in datasets:
        if not ds.has_truth:
            raise ValueError(f"client {ds.client_id}: potential outcomes missing")
        tau = ds.true_y1 - ds.true_y0
        if standardize_tau:
            sd = tau.std()
            tau = (tau - tau.mean()) / sd if sd > 0 else tau - tau.mean()
        p = sigmoid(tau)
        w = (stream(seed, _TAG_TREATMENT, ds.client_id).random(ds.n) < p).astype(np.float64)
        y = np.where(w == 1.0, ds.true_y1, ds.true_y0)
        out.append(replace(ds, treatment=w, outcome=y))
    return out


def make_synthetic(cfg: SynthConfig) -> tuple[FeatureSchema, list[ClientDataset]]:
    schema = build_feature_schema(None, cfg.n_clients, cfg.d_shared, cfg.d_private, cfg.seed)
    pos = generate_potential_outcomes(schema, cfg)
    return schema, assign_treatments(pos, cfg.seed, cfg.standardize_tau)


def train_test_split(
    ds: ClientDataset, test_fraction: float, seed: int
) -> tuple[ClientDataset, ClientDataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n_test = int(round(ds.n * test_fraction))
    if n_test < 1 or n_test > ds.n - 1:
        raise ValueError(f"client {ds.client_id}: {ds.n} rows too few for a nonempty split")
    perm = stream(seed, _TAG_SPLIT, ds.client_id).permutation(ds.n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    return ds.subset(train_idx), ds.subset(test_idx)


class CsvSchemaError(ValueError):
    pass


def load_tabular_csv(
    path: str | Path,
    shared_columns: Sequence[str],
    private_columns: Sequence[str],
    treatment_column: str,
    outcome_column: str,
    client_id: int = 0,
    y0_column: str | None = None,
    y1_column: str | None = None,
) -> ClientDataset:
    """Read one silo's rows from a headed CSV.

    ``y0_column``/``y1_column`` name optional ground-truth potential outcomes
    (semi-synthetic exports such as IHDP carry them); otherwise they stay absent.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such CSV file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvSchemaError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        wanted = [*shared_columns, *private_columns, treatment_column, outcome_column]
        wanted += [c for c in (y0_column, y1_column) if c is not None]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise CsvSchemaError(f"{path}: missing column(s) {missing} in header {header}")
        index = {name: i for i, name in enumerate(header)}
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            values = []
            for name in wanted:
                cell = row[index[name]] if index[name] < len(row) else ""
                try:
                    values.append(float(cell))
                except ValueError:
                    raise CsvSchemaError(
                        f"{path}: non-numeric cell {cell!r} at row {line_no}, column {name!r}"
                    ) from None
            rows.append(values)
    if not rows:
        raise CsvSchemaError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    ds_, dp_ = len(shared_columns), len(private_columns)
    w = data[:, ds_ + dp_]
    bad = np.flatnonzero((w != 0.0) & (w != 1.0))
    if bad.size:
        raise CsvSchemaError(
            f"{path}: treatment column {treatment_column!r} must be 0/1, "
            f"found {w[bad[0]]} at data row {bad[0] + 1}"
        )
    y0 = y1 = None
    if y0_column is not None and y1_column is not None:
        y0 = data[:, ds_ + dp_ + 2]
        y1 = data[:, ds_ + dp_ + 3]
    return ClientDataset(
        client_id,
        data[:, :ds_],
        data[:, ds_ : ds_ + dp_],
        treatment=w,
        outcome=data[:, ds_ + dp_ + 1],
        true_y0=y0,
        true_y1=y1,
    )


def export_synthetic(
    datasets: Sequence[ClientDataset], cfg: SynthConfig, schema: FeatureSchema, out_dir: str | Path
) -> list[Path]:
    """One CSV per client plus a JSON sidecar with the config and schema."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for ds in datasets:
        path = out_dir / f"client_{ds.client_id}.csv"
        header = [f"x_s_{i}" for i in range(ds.x_shared.shape[1])]
        header += [f"x_p_{i}" for i in range(ds.x_private.shape[1])]
        header += ["w", "y", "y0", "y1"]
        body = np.column_stack(
            [ds.x_shared, ds.x_private, ds.treatment, ds.outcome, ds.true_y0, ds.true_y1]
        )
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in body:
                writer.writerow([repr(float(v)) for v in row])
        paths.append(path)
    sidecar = out_dir / "dataset.json"
    sidecar.write_text(
        json.dumps({"config": cfg.to_dict(), "schema": schema.to_dict()}, indent=2, sort_keys=True)
        + "\n",
        encoding="utf-8",
    )
    paths.append(sidecar)
    return paths
