"""Synthetic conflict/cooperation data and the UCI census-income (KDD) tasks."""

from __future__ import annotations

import csv
import gzip
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DegenerateLabelError, SchemaError
from .model import Batch, FeatureSchema
from .nn import seeded_rng

SPARSE_BUCKETS = 1000


@dataclass
class SyntheticSpec:
    n_total: int = 110_000
    n_train: int = 100_000
    n_features: int = 32
    n_sparse: int = 6
    cos_theta: float = 0.6
    noise_mean: float = 0.01
    noise_var: float = 0.002
    noise: bool = True
    seed: int = 0
    user_id_column: bool = False
    n_users: int = 1000

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.n_train < self.n_total:
            raise ConfigError(f"need 0 < n_train < n_total, got {self.n_train} / {self.n_total}")
        if not 0 <= self.n_sparse <= self.n_features or self.n_features < 1:
            raise ConfigError("n_sparse must lie in [0, n_features] and n_features must be positive")
        if not math.isfinite(self.cos_theta) or self.cos_theta == 0 or abs(self.cos_theta) >= 1:
            raise ConfigError(f"cos_theta must lie in (-1, 0) or (0, 1), got {self.cos_theta}")
        if self.noise_var < 0:
            raise ConfigError("noise variance must be non-negative")
        if self.user_id_column and self.n_users < 1:
            raise ConfigError("n_users must be positive")

    @property
    def n_dense(self) -> int:
        return self.n_features - self.n_sparse

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LabeledDataset:
    dense: np.ndarray  # (n, d) float64
    sparse: np.ndarray  # (n, k) int64 ids
    labels: np.ndarray  # (n, 2) int8
    split: str
    sparse_buckets: list[int]
    raw_labels: np.ndarray | None = None  # (n, 2), synthetic only
    personal: np.ndarray | None = None  # (n, p) int64 ids
    personal_buckets: list[int] = field(default_factory=list)
    tag: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.dense.shape[0]
        if self.sparse.shape[0] != n or self.labels.shape[0] != n:
            raise ValueError("row counts of features and labels disagree")
        if self.personal is not None and self.personal.shape[0] != n:
            raise ValueError("row count of personal ids disagrees")
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("binary labels must be 0 or 1")

    def __len__(self) -> int:
        return self.dense.shape[0]

    def schema(self) -> FeatureSchema:
        return FeatureSchema(self.dense.shape[1], list(self.sparse_buckets), list(self.personal_buckets))

    def batch(self, idx=None) -> Batch:
        if idx is None:
            idx = slice(None)
        return Batch(
            dense=self.dense[idx],
            sparse=self.sparse[idx],
            labels=self.labels[idx],
            personal=None if self.personal is None else self.personal[idx],
        )


def sparse_feature_value(i: int, r1, k1, r2, k2):
    """``exp(r1 * k1) + (r2 * k2) ** (i / 2 + 1)`` for the i-th sparse feature."""
    return np.exp(np.multiply(r1, k1)) + np.power(np.multiply(r2, k2), i / 2 + 1)


def gen_sparse_feature(i: int, rng: np.random.Generator, size=None):
    """Draw sparse feature ``i``: uniform(0, 1) times randint(1, i + 2) inclusive, twice."""
    r1 = rng.random(size)
    k1 = rng.integers(1, i + 2, size=size, endpoint=True)
    r2 = rng.random(size)
    k2 = rng.integers(1, i + 2, size=size, endpoint=True)
    return sparse_feature_value(i, r1, k1, r2, k2)


def primary_label(x, noise=0.0) -> np.ndarray:
    """Raw task-1 label per row of ``x``.

    ``10 * mean_j(4 x_j^2 / |x^2| + 5 exp(x_j / |x|) + 6 sin(x_j) + noise)``
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    sq = x * x
    sq_norm = np.linalg.norm(sq, axis=1, keepdims=True)
    x_norm = np.linalg.norm(x, axis=1, keepdims=True)
    terms = 4.0 * sq / sq_norm + 5.0 * np.exp(x / x_norm) + 6.0 * np.sin(x)
    return 10.0 * (terms.mean(axis=1) + noise)


def secondary_label(label1, cos_theta: float, noise=0.0) -> np.ndarray:
    return cos_theta * np.asarray(label1, dtype=np.float64) + noise


def binarize_labels(raw, train_raw) -> tuple[np.ndarray, float]:
    """1 where ``raw`` exceeds the median of the training values."""
    train_raw = np.asarray(train_raw, dtype=np.float64)
    if train_raw.size == 0:
        raise ValueError("empty training labels")
    if np.all(train_raw == train_raw.flat[0]):
        raise DegenerateLabelError("all training raw labels are equal")
    threshold = float(np.median(train_raw))
    return (np.asarray(raw) > threshold).astype(np.int8), threshold


def gen_synthetic(spec: SyntheticSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Generate the (train, test) pair; bit-identical for a fixed seed."""
    spec.validate()
    rng = seeded_rng(spec.seed, "synthetic")
    n = spec.n_total
    dense = rng.standard_normal((n, spec.n_dense))
    sparse_raw = np.empty((n, spec.n_sparse))
    for i in range(spec.n_sparse):
        sparse_raw[:, i] = gen_sparse_feature(i, rng, n)
    std = math.sqrt(spec.noise_var)
    if spec.noise:
        noise1 = rng.normal(spec.noise_mean, std, n)
        noise2 = rng.normal(spec.noise_mean, std, n)
    else:
        noise1 = noise2 = np.zeros(n)
    x = np.concatenate([dense, sparse_raw], axis=1)
    raw1 = primary_label(x, noise1)
    raw2 = secondary_label(raw1, spec.cos_theta, noise2)
    raw = np.stack([raw1, raw2], axis=1)
    sparse = np.floor(sparse_raw).astype(np.int64)
    personal = rng.integers(0, spec.n_users, size=(n, 1)) if spec.user_id_column else None

    tr = slice(0, spec.n_train)
    te = slice(spec.n_train, n)
    labels = np.empty((n, 2), dtype=np.int8)
    thresholds = []
    for t in range(2):
        labels[:, t], thr = binarize_labels(raw[:, t], raw[tr, t])
        thresholds.append(thr)
    tag = f"synthetic(cos={spec.cos_theta:g},seed={spec.seed})"
    meta = {"spec": spec.to_dict(), "thresholds": thresholds}
    pbuckets = [spec.n_users] if spec.user_id_column else []

    def part(s: slice, name: str) -> LabeledDataset:
        return LabeledDataset(
            dense=dense[s],
            sparse=sparse[s],
            labels=labels[s],
            split=name,
            sparse_buckets=[SPARSE_BUCKETS] * spec.n_sparse,
            raw_labels=raw[s],
            personal=None if personal is None else personal[s],
            personal_buckets=pbuckets,
            tag=tag,
            meta=meta,
        )

    return part(tr, "train"), part(te, "test")


def synthetic_columns(ds: LabeledDataset) -> list[str]:
    cols = [f"f{j}" for j in range(ds.dense.shape[1])]
    cols += [f"s{j}" for j in range(ds.sparse.shape[1])]
    if ds.personal is not None:
        cols += [f"u{j}" for j in range(ds.personal.shape[1])]
    return cols + ["raw_label1", "raw_label2", "label1", "label2"]


def write_synthetic_csv(ds: LabeledDataset, path) -> None:
    """One header line, then dense floats, integer ids, raw and binary labels."""
    parts = [ds.dense, ds.sparse]
    fmt = ["%.17g"] * ds.dense.shape[1] + ["%d"] * ds.sparse.shape[1]
    if ds.personal is not None:
        parts.append(ds.personal)
        fmt += ["%d"] * ds.personal.shape[1]
    parts += [ds.raw_labels, ds.labels]
    fmt += ["%.17g", "%.17g", "%d", "%d"]
    table = np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=1)
    np.savetxt(path, table, fmt=fmt, delimiter=",", header=",".join(synthetic_columns(ds)), comments="")


def read_synthetic_csv(path, split: str, n_users: int | None = None) -> LabeledDataset:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    idx = {c: j for j, c in enumerate(header)}
    for c in ("raw_label1", "raw_label2", "label1", "label2"):
        if c not in idx:
            raise SchemaError(f"{path}: missing column {c}")
    f_cols = [idx[c] for c in header if re.fullmatch(r"f\d+", c)]
    s_cols = [idx[c] for c in header if re.fullmatch(r"s\d+", c)]
    u_cols = [idx[c] for c in header if re.fullmatch(r"u\d+", c)]
    personal = table[:, u_cols].astype(np.int64) if u_cols else None
    return LabeledDataset(
        dense=table[:, f_cols],
        sparse=table[:, s_cols].astype(np.int64),
        labels=table[:, [idx["label1"], idx["label2"]]].astype(np.int8),
        split=split,
        sparse_buckets=[SPARSE_BUCKETS] * len(s_cols),
        raw_labels=table[:, [idx["raw_label1"], idx["raw_label2"]]],
        personal=personal,
        personal_buckets=[n_users or int(personal.max()) + 1] if personal is not None else [],
        tag=path.parent.name,
    )


def save_synthetic(spec: SyntheticSpec, out_dir) -> dict:
    """Write train.csv, test.csv and manifest.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = gen_synthetic(spec)
    write_synthetic_csv(train, out / "train.csv")
    write_synthetic_csv(test, out / "test.csv")
    manifest = {
        "kind": "synthetic",
        "spec": spec.to_dict(),
        "seed": spec.seed,
        "rows": {"train": len(train), "test": len(test)},
        "thresholds": train.meta["thresholds"],
        "files": ["train.csv", "test.csv"],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_synthetic_dir(data_dir) -> tuple[LabeledDataset, LabeledDataset]:
    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    n_users = manifest["spec"].get("n_users") if manifest["spec"].get("user_id_column") else None
    return read_synthetic_csv(d / "train.csv", "train", n_users), read_synthetic_csv(d / "test.csv", "test", n_users)


# -- census-income (KDD) ---------------------------------------------------

CENSUS_COLUMNS = (
    "age", "class_worker", "det_ind_code", "det_occ_code", "education", "wage_per_hour",
    "hs_college", "marital_stat", "major_ind_code", "major_occ_code", "race", "hisp_origin",
    "sex", "union_member", "unemp_reason", "full_or_part_emp", "capital_gains",
    "capital_losses", "stock_dividends", "tax_filer_stat", "region_prev_res", "state_prev_res",
    "det_hh_fam_stat", "det_hh_summ", "instance_weight", "mig_chg_msa", "mig_chg_reg",
    "mig_move_reg", "mig_same", "mig_prev_sunbelt", "num_emp", "fam_under_18",
    "country_father", "country_mother", "country_self", "citizenship", "own_or_self",
    "vet_question", "vet_benefits", "weeks_worked", "year", "income_50k",
)  # fmt: skip


@dataclass(frozen=True)
class CensusSchema:
    columns: tuple[str, ...] = CENSUS_COLUMNS
    continuous: tuple[str, ...] = (
        "age", "wage_per_hour", "capital_gains", "capital_losses", "stock_dividends",
        "num_emp", "weeks_worked",
    )  # fmt: skip
    income_column: str = "income_50k"
    marital_column: str = "marital_stat"
    ignored: tuple[str, ...] = ("instance_weight",)

    @property
    def feature_columns(self) -> tuple[str, ...]:
        """The 40 demographic attributes (label column and sample weight excluded)."""
        return tuple(c for c in self.columns if c not in (self.income_column, *self.ignored))

    @property
    def input_columns(self) -> tuple[str, ...]:
        """Model inputs: the feature columns minus the marital-status task column."""
        return tuple(c for c in self.feature_columns if c != self.marital_column)

    @property
    def categorical(self) -> tuple[str, ...]:
        return tuple(c for c in self.input_columns if c not in self.continuous)

    @staticmethod
    def income_label(value: str) -> int:
        v = value.strip().rstrip(".").replace(" ", "")
        return int("50000+" in v or ">50K" in v.upper())

    @staticmethod
    def marital_label(value: str) -> int:
        v = value.strip().rstrip(".").lower().replace("-", " ")
        return int(" ".join(v.split()) == "never married")


def _open_text(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rt", newline="")
    return path.open(newline="")


def _read_census_rows(path: Path, schema: CensusSchema) -> tuple[list[dict], int]:
    rows, skipped = [], 0
    with _open_text(path) as fh:
        reader = csv.reader(fh, skipinitialspace=True)
        first = next(reader, None)
        if first is None:
            return rows, 0
        names = [c.strip() for c in first]
        if schema.income_column in names or "age" == names[0]:
            header = names
            pending = []
        else:
            header = list(schema.columns)
            pending = [first]
        missing = [c for c in (*schema.feature_columns, schema.income_column) if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        cont = set(schema.continuous)
        for rec in (*pending, *reader):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if len(rec) != len(header):
                skipped += 1
                continue
            row = {k: v.strip() for k, v in zip(header, rec)}
            try:
                for c in cont:
                    float(row[c])
            except ValueError:
                skipped += 1
                continue
            rows.append(row)
    return rows, skipped


def _encode_census(rows: list[dict], schema: CensusSchema, vocab: dict, stats: dict, split: str, tag: str):
    n = len(rows)
    dense = np.array([[float(r[c]) for c in schema.continuous] for r in rows], dtype=np.float64).reshape(
        n, len(schema.continuous)
    )
    dense = (dense - stats["mean"]) / stats["std"]
    cats = schema.categorical
    sparse = np.array([[vocab[c].get(r[c], 0) for c in cats] for r in rows], dtype=np.int64).reshape(n, len(cats))
    labels = np.array(
        [[schema.income_label(r[schema.income_column]), schema.marital_label(r[schema.marital_column])] for r in rows],
        dtype=np.int8,
    ).reshape(n, 2)
    return LabeledDataset(
        dense=dense,
        sparse=sparse,
        labels=labels,
        split=split,
        sparse_buckets=[len(vocab[c]) + 1 for c in cats],
        tag=tag,
    )


def find_census_files(path) -> tuple[Path, Path | None]:
    p = Path(path)
    if p.is_dir():
        for stem in ("census-income", "census_income"):
            for ext in ("", ".gz"):
                tr, te = p / f"{stem}.data{ext}", p / f"{stem}.test{ext}"
                if tr.exists():
                    return tr, te if te.exists() else None
        raise FileNotFoundError(f"no census-income.data under {p}")
    if not p.exists():
        raise FileNotFoundError(p)
    return p, None


def load_census(path, test_path=None, seed: int = 0, schema: CensusSchema = CensusSchema()):
    """Load (train, test) census-income datasets.

    ``path`` is the training file or a directory holding ``census-income.data``
    and ``census-income.test``.  Without a test file, a seeded third of the
    rows is held out.  Task 1: income above 50K; task 2: never married.
    Categoricals are id-encoded from the training vocabulary (id 0 is reserved
    for values unseen in training); continuous columns are z-scored with
    training statistics.  Malformed rows are skipped and counted in ``meta``.
    """
    train_path, found_test = find_census_files(path)
    test_path = Path(test_path) if test_path is not None else found_test
    train_rows, skipped_tr = _read_census_rows(train_path, schema)
    if test_path is not None:
        test_rows, skipped_te = _read_census_rows(test_path, schema)
    else:
        perm = seeded_rng(seed, "census-split").permutation(len(train_rows))
        cut = len(train_rows) - len(train_rows) // 3
        test_rows = [train_rows[i] for i in perm[cut:]]
        train_rows = [train_rows[i] for i in perm[:cut]]
        skipped_te = 0
    if not train_rows:
        raise SchemaError(f"{train_path}: no parseable rows")

    vocab = {c: {v: j + 1 for j, v in enumerate(sorted({r[c] for r in train_rows}))} for c in schema.categorical}
    cont = np.array([[float(r[c]) for c in schema.continuous] for r in train_rows], dtype=np.float64)
    std = cont.std(axis=0)
    stats = {"mean": cont.mean(axis=0), "std": np.where(std > 0, std, 1.0)}
    tag = f"census({train_path.name})"
    train = _encode_census(train_rows, schema, vocab, stats, "train", tag)
    test = _encode_census(test_rows, schema, vocab, stats, "test", tag)
    report = {"skipped_train": skipped_tr, "skipped_test": skipped_te, "rows": len(train_rows) + len(test_rows)}
    train.meta = dict(report)
    test.meta = dict(report)
    return train, test


def batch_iter(dataset: LabeledDataset, batch_size: int, seed: int, epoch: int = 0) -> Iterator[Batch]:
    """Seeded shuffle per (seed, epoch); the last short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot batch an empty dataset")
    perm = seeded_rng(seed, f"shuffle/epoch{epoch}").permutation(n)
    for start in range(0, n, batch_size):
        yield dataset.batch(perm[start : start + batch_size])
