"""Training data: second-stage values at random first-stage points.

Sample ``i`` draws its first-stage point and its single scenario from a
generator seeded by ``(seed, i)``, so the dataset does not depend on how the
indices are split across workers.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import partial
from pathlib import Path

import numpy as np

from .errors import FormatError
from .parallel import pmap
from .problems import TwoStageProblem
from .saa import EXACT_LIMITS

log = logging.getLogger(__name__)


@dataclass
class Sample:
    x: np.ndarray
    v: float


@dataclass
class Dataset:
    """``(X_i, v_i)`` pairs plus the first-stage domain they were drawn from."""

    X: np.ndarray
    y: np.ndarray
    problem_name: str
    generator_seed: int | None
    lower: np.ndarray
    upper: np.ndarray
    binary: np.ndarray
    created: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        self.binary = np.asarray(self.binary, dtype=bool)
        if len(self.X) != len(self.y):
            raise ValueError("X and y must have the same number of rows")
        if not (self.lower.shape == self.upper.shape == self.binary.shape == (self.X.shape[1],)):
            raise ValueError("domain description must match the input dimension")

    @property
    def n_first(self) -> int:
        return self.X.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return [Sample(x, float(v)) for x, v in zip(self.X, self.y)]

    def __len__(self):
        return len(self.y)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()[:16]

    @classmethod
    def for_problem(cls, problem: TwoStageProblem, X, y, seed=None) -> "Dataset":
        return cls(X, y, problem.name, seed, problem.first_lower, problem.first_upper,
                   problem.binary_mask)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def draw_sample_inputs(problem: TwoStageProblem, seed: int, index: int):
    """First-stage point and scenario used for sample ``index``."""
    rng = sample_rng(seed, index)
    x = problem.sample_feasible_first_stage(rng)
    xi = problem.sample_xi(rng, 1)[0]
    return x, xi


def _one_sample(problem, seed, backend, index):
    x, xi = draw_sample_inputs(problem, seed, index)
    try:
        v = problem.second_stage_value(x, xi, backend, EXACT_LIMITS)
    except Exception:
        log.error("second-stage solve failed for sample %d: x=%s xi=%s", index, x.tolist(), xi.tolist())
        raise
    return x, v


def generate(problem: TwoStageProblem, n_samples: int, seed: int, workers: int = 1,
             backend=None) -> Dataset:
    """Solve ``n_samples`` single-scenario recourse problems at random feasible points."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    fn = partial(_one_sample, problem, seed, backend)
    rows = pmap(fn, range(n_samples), workers)
    X = np.array([r[0] for r in rows])
    y = np.array([r[1] for r in rows])
    return Dataset.for_problem(problem, X, y, seed)


# -- persistence ----------------------------------------------------------------

def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_dataset(ds: Dataset, path) -> None:
    """CSV (``x_0..x_{n-1},value``) plus a JSON sidecar with the metadata."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x_{i}" for i in range(ds.n_first)] + ["value"])
        for x, v in zip(ds.X, ds.y):
            w.writerow([repr(float(a)) for a in x] + [repr(float(v))])
    meta = {"problem_name": ds.problem_name, "generator_seed": ds.generator_seed,
            "created": ds.created, "n_samples": len(ds), "lower": ds.lower.tolist(),
            "upper": ds.upper.tolist(), "binary": ds.binary.tolist()}
    _sidecar(path).write_text(json.dumps(meta, indent=1), encoding="utf-8")


def load_dataset(path) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        n = len(header) - 1
        if n < 1 or header[-1] != "value" or header[:-1] != [f"x_{i}" for i in range(n)]:
            raise FormatError(f"{path}: row 1: expected header x_0..x_{{n-1}},value, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != n + 1:
                raise FormatError(f"{path}: row {lineno}: expected {n + 1} columns, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise FormatError(f"{path}: row {lineno}: non-numeric entry") from None
            if not all(math.isfinite(c) for c in vals):
                raise FormatError(f"{path}: row {lineno}: non-finite entry")
            rows.append(vals)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    data = np.array(rows)
    side = _sidecar(path)
    if side.exists():
        meta = json.loads(side.read_text(encoding="utf-8"))
    else:
        X = data[:, :n]
        binary = np.all((X == 0) | (X == 1), axis=0)
        meta = {"problem_name": "unknown", "generator_seed": None, "lower": X.min(0).tolist(),
                "upper": X.max(0).tolist(), "binary": binary.tolist()}
    ds = Dataset(data[:, :n], data[:, n], meta["problem_name"], meta.get("generator_seed"),
                 meta["lower"], meta["upper"], meta["binary"])
    if "created" in meta:
        ds.created = meta["created"]
    return ds
