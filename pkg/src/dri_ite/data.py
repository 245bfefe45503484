"""Datasets: synthetic generation with known factor roles, artificial
contrasts, CSV ingestion and stratified splitting."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

ROLES = ("gamma", "delta", "upsilon", "omega", "unknown")


class DataError(ValueError):
    """Malformed input data."""


@dataclass
class Dataset:
    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    y_cf: np.ndarray | None = None
    mu0: np.ndarray | None = None
    mu1: np.ndarray | None = None
    roles: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise DataError(f"x must be 2-D, got shape {self.x.shape}")
        n = self.x.shape[0]
        self.t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
        for name in ("y_cf", "mu0", "mu1"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.float64).reshape(-1))
        for name in ("t", "y", "y_cf", "mu0", "mu1"):
            v = getattr(self, name)
            if v is not None and v.shape[0] != n:
                raise DataError(f"{name} has {v.shape[0]} entries, x has {n} rows")
        if not np.isin(self.t, (0.0, 1.0)).all():
            raise DataError("treatment must be binary (0/1)")
        if (self.mu0 is None) != (self.mu1 is None):
            raise DataError("mu0 and mu1 must be given together")
        for name in ("x", "y", "y_cf", "mu0", "mu1"):
            v = getattr(self, name)
            if v is not None and not np.all(np.isfinite(v)):
                raise DataError(f"{name} contains non-finite values")
        if not self.roles:
            self.roles = ["unknown"] * self.x.shape[1]
        self.roles = list(self.roles)
        if len(self.roles) != self.x.shape[1]:
            raise DataError(f"{len(self.roles)} roles for {self.x.shape[1]} columns")
        bad = set(self.roles) - set(ROLES)
        if bad:
            raise DataError(f"unknown feature roles {sorted(bad)}")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.t.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    @property
    def true_effect(self) -> np.ndarray | None:
        if self.mu0 is not None:
            return self.mu1 - self.mu0
        if self.y_cf is not None:
            return np.where(self.t == 1, self.y - self.y_cf, self.y_cf - self.y)
        return None

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        pick = lambda v: None if v is None else v[idx]
        return Dataset(self.x[idx], self.t[idx], self.y[idx], pick(self.y_cf),
                       pick(self.mu0), pick(self.mu1), list(self.roles))

    def with_x(self, x: np.ndarray, roles: Sequence[str] | None = None) -> "Dataset":
        return replace(self, x=x, roles=list(roles if roles is not None else self.roles))

    def to_csv(self, path) -> None:
        cols = [f"x{j + 1}" for j in range(self.n_features)]
        extra = [(name, getattr(self, key)) for name, key in
                 (("t", "t"), ("y", "y"), ("y_cf", "y_cf"), ("mu0", "mu0"), ("mu1", "mu1"))
                 if getattr(self, key) is not None]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols + [name for name, _ in extra])
            for i in range(self.n):
                w.writerow([repr(float(v)) for v in self.x[i]] +
                           [repr(float(v[i])) for _, v in extra])


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Latent-factor data generating process.

    Γ and Δ drive treatment through a logistic model; Δ and Υ drive the
    outcomes through a linear term per arm plus a squared heterogeneity term
    for the treated arm. ``dims[3]`` artificial contrasts are appended.
    """

    n: int = 3000
    dims: tuple[int, int, int, int] = (8, 8, 8, 0)
    means: dict[str, list[float]] | None = None
    covariances: dict[str, list[list[float]]] | None = None
    treatment_scale: float = 3.0
    outcome_scale: float = 1.0
    effect_scale: float = 1.0
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 4 or min(self.dims) < 0:
            raise DataError("dims must be four non-negative integers")
        if self.n < 2:
            raise DataError("n must be at least 2")
        if sum(self.dims[:3]) < 1:
            raise DataError("need at least one gamma/delta/upsilon column")
        if not self.noise_std >= 0:
            raise DataError("noise_std must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d


def _draw_factor(rng, n, dim, mean, cov, name):
    if dim == 0:
        return np.zeros((n, 0))
    mean = np.zeros(dim) if mean is None else np.asarray(mean, dtype=np.float64)
    cov = np.eye(dim) if cov is None else np.asarray(cov, dtype=np.float64)
    if mean.shape != (dim,) or cov.shape != (dim, dim):
        raise DataError(f"{name}: mean/covariance shapes do not match dimension {dim}")
    if not np.allclose(cov, cov.T):
        raise DataError(f"{name}: covariance is not symmetric")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise DataError(f"{name}: covariance is not positive definite") from None
    return mean + rng.standard_normal((n, dim)) @ chol.T


def synthetic_coefficients(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    """Coefficient vectors of the DGP. They depend only on ``seed`` and
    ``dims``, never on ``n``."""
    mg, md, mu, _ = spec.dims
    rng = np.random.default_rng([spec.seed, 0])
    return {
        "w_t": rng.standard_normal(mg + md),
        "w_y0": spec.outcome_scale * rng.standard_normal(md + mu),
        "w_y1": spec.outcome_scale * rng.standard_normal(md + mu),
        "w_e": spec.effect_scale * rng.standard_normal(md + mu),
    }


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    mg, md, mu, mo = spec.dims
    coef = synthetic_coefficients(spec)
    rng = np.random.default_rng([spec.seed, 1])
    means, covs = spec.means or {}, spec.covariances or {}
    blocks = [_draw_factor(rng, spec.n, d, means.get(f), covs.get(f), f)
              for f, d in zip(("gamma", "delta", "upsilon"), (mg, md, mu))]
    gamma, delta, upsilon = blocks

    sel = np.hstack([gamma, delta])
    logits = spec.treatment_scale * sel @ coef["w_t"] / max(mg + md, 1)
    t = (rng.uniform(size=spec.n) < _sigmoid(logits)).astype(np.float64)

    out = np.hstack([delta, upsilon])
    denom = max(md + mu, 1)
    mu0 = out @ coef["w_y0"] / denom
    mu1 = out @ coef["w_y1"] / denom + (out @ coef["w_e"] / denom) ** 2
    noise = spec.noise_std * rng.standard_normal(spec.n)
    y = np.where(t == 1, mu1, mu0) + noise
    y_cf = np.where(t == 1, mu0, mu1) + spec.noise_std * rng.standard_normal(spec.n)

    roles = ["gamma"] * mg + ["delta"] * md + ["upsilon"] * mu
    data = Dataset(np.hstack(blocks), t, y, y_cf, mu0, mu1, roles)
    if mo:
        data = add_artificial_contrasts(data, mo, seed=spec.seed)
    return data


def add_artificial_contrasts(data: Dataset, count: int, seed: int) -> Dataset:
    """Append ``count`` columns, each a random row permutation of a randomly
    chosen relevant (non-omega) column, labelled ``omega``."""
    if count < 0:
        raise DataError("count must be >= 0")
    if count == 0:
        return data
    sources = [j for j, r in enumerate(data.roles) if r != "omega"]
    if not sources:
        raise DataError("no relevant column to permute")
    rng = np.random.default_rng([seed, 2])
    cols = []
    for _ in range(count):
        j = sources[rng.integers(len(sources))]
        cols.append(data.x[rng.permutation(data.n), j])
    x = np.hstack([data.x, np.column_stack(cols)])
    return data.with_x(x, data.roles + ["omega"] * count)


# ---------------------------------------------------------------------------
# CSV input


@dataclass(frozen=True)
class CsvSchema:
    covariates: tuple[str, ...]
    treatment: str
    outcome: str
    counterfactual: str | None = None
    mu0: str | None = None
    mu1: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["covariates"] = list(self.covariates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        d = dict(d)
        d["covariates"] = tuple(d["covariates"])
        return cls(**d)


IHDP_SCHEMA = CsvSchema(
    covariates=tuple(f"x{j}" for j in range(1, 26)),
    treatment="treatment", outcome="y_factual", counterfactual="y_cfactual",
    mu0="mu0", mu1="mu1",
)

JOBS_SCHEMA = CsvSchema(
    covariates=("age", "educ", "black", "hisp", "married", "nodegr", "re74", "re75"),
    treatment="treatment", outcome="re78",
)


def load_csv(path, schema: CsvSchema) -> Dataset:
    """Read the schema's columns from a headed CSV file.

    Errors name the offending row (1-based, header is row 1) and column.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        wanted = list(schema.covariates) + [schema.treatment, schema.outcome] + [
            c for c in (schema.counterfactual, schema.mu0, schema.mu1) if c is not None]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        pos = {c: header.index(c) for c in wanted}
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            vals = []
            for c in wanted:
                cell = row[pos[c]].strip() if pos[c] < len(row) else ""
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: row {lineno}, column {c!r}: "
                                    f"non-numeric value {cell!r}") from None
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.array(rows)
    k = len(schema.covariates)
    col = {c: arr[:, i] for i, c in enumerate(wanted)}
    t = col[schema.treatment]
    bad = np.flatnonzero(~np.isin(t, (0.0, 1.0)))
    if bad.size:
        raise DataError(f"{path}: row {bad[0] + 2}, column {schema.treatment!r}: "
                        f"non-binary treatment {t[bad[0]]!r}")
    get = lambda name: None if name is None else col[name]
    return Dataset(arr[:, :k], t, col[schema.outcome], get(schema.counterfactual),
                   get(schema.mu0), get(schema.mu1))


# ---------------------------------------------------------------------------
# splitting


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    raw = np.asarray(fractions) * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def split(data: Dataset, fractions: Sequence[float], seed: int,
          stratify: bool = True) -> tuple[Dataset, ...]:
    """Disjoint, exhaustive random split into ``len(fractions)`` parts."""
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"fractions must be non-negative and sum to 1, got {fractions}")
    rng = np.random.default_rng([seed, 3])
    parts = [[] for _ in fractions]
    groups = [np.flatnonzero(data.t == g) for g in (0, 1)] if stratify else [np.arange(data.n)]
    for members in groups:
        members = rng.permutation(members)
        start = 0
        for p, c in zip(parts, _allocate(members.size, fractions)):
            p.extend(members[start:start + c].tolist())
            start += c
    out = []
    for i, p in enumerate(parts):
        idx = np.sort(np.asarray(p, dtype=int))
        sub = data.subset(idx)
        if stratify and (sub.n_treated == 0 or sub.n_control == 0):
            raise DataError(f"split part {i} lacks a treatment group")
        out.append(sub)
    return tuple(out)


# ---------------------------------------------------------------------------
# export


def export_dataset(data: Dataset, csv_path, manifest: dict | None = None) -> None:
    """Write ``data`` as CSV and a sidecar ``<name>.json`` manifest."""
    csv_path = Path(csv_path)
    data.to_csv(csv_path)
    doc = {"n": data.n, "n_features": data.n_features, "n_treated": data.n_treated,
           "roles": data.roles}
    doc.update(manifest or {})
    csv_path.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_exported(csv_path) -> Dataset:
    """Inverse of :func:`export_dataset`."""
    csv_path = Path(csv_path)
    manifest = json.loads(csv_path.with_suffix(".json").read_text())
    k = manifest["n_features"]
    with open(csv_path, newline="") as fh:
        header = next(csv.reader(fh))
    schema = CsvSchema(tuple(header[:k]), "t", "y",
                       "y_cf" if "y_cf" in header else None,
                       "mu0" if "mu0" in header else None,
                       "mu1" if "mu1" in header else None)
    data = load_csv(csv_path, schema)
    data.roles = list(manifest["roles"])
    return data
