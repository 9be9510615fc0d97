"""Martingale random fields on a time grid times a finite mark space.

Three models are provided: Brownian motion (single mark, unit density),
compensated Poisson noise with constant per-mark intensities, and doubly
stochastic (Cox) Poisson noise whose intensity follows a square-root
mean-reverting recursion.  Increments live on a dyadic lattice of spacing
``LATTICE`` so that sums over cells are exact in floating point, whatever the
summation order.
"""

from dataclasses import dataclass, field
from functools import cached_property
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .rng import CounterRNG

#: spacing of the lattice that increments and compensators are rounded to
LATTICE = 2.0 ** -36
#: positivity floor used by the truncated intensity recursion
INTENSITY_FLOOR = 1e-8
#: paths generated per work item; results do not depend on it
BLOCK_PATHS = 8192


def to_lattice(x):
    return np.round(np.asarray(x, dtype=np.float64) / LATTICE) * LATTICE


def _map_compact(func, arr):
    """Apply an elementwise ``func`` without materializing broadcast axes."""
    arr = np.asarray(arr)
    index = tuple(0 if s == 0 and n > 1 else slice(None) for s, n in zip(arr.strides, arr.shape))
    core = np.asarray(arr[index])
    out = func(core)
    keep = tuple(np.newaxis if isinstance(i, int) else slice(None) for i in index)
    return _readonly(np.broadcast_to(out[keep], arr.shape))


def _readonly(a):
    a = np.asarray(a)
    if a.flags.writeable:
        a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise ValueError("horizon must be a positive finite number")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")

    @property
    def dt(self):
        return self.horizon / self.n_steps

    @property
    def edges(self):
        e = np.arange(self.n_steps + 1) * self.dt
        e[-1] = self.horizon
        return e

    def time(self, k):
        return self.horizon if k == self.n_steps else k * self.dt


@dataclass(frozen=True)
class MarkSpace:
    labels: tuple

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if not labels:
            raise ValueError("mark space must be non-empty")
        if len(set(labels)) != len(labels):
            raise ValueError("mark labels must be distinct")

    @classmethod
    def singleton(cls):
        return cls((0,))

    @classmethod
    def numbered(cls, n):
        return cls(tuple(range(1, n + 1)))

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class Cell:
    """Grid-aligned set (t_start, t_stop] x marks, in step and mark indices."""

    start: int
    stop: int
    marks: tuple = (0,)

    def __post_init__(self):
        object.__setattr__(self, "marks", tuple(sorted(set(int(z) for z in self.marks))))
        if self.start >= self.stop:
            raise ValueError("cell needs start < stop")
        if self.start < 0:
            raise ValueError("cell start must be non-negative")
        if not self.marks or self.marks[0] < 0:
            raise ValueError("cell needs a non-empty set of mark indices")

    def check(self, grid, marks):
        if self.stop > grid.n_steps or self.marks[-1] >= len(marks):
            raise ValueError(f"cell {self} is not inside the grid")

    def overlaps(self, other):
        return (self.start < other.stop and other.start < self.stop
                and bool(set(self.marks) & set(other.marks)))

    def split_time(self, at):
        return Cell(self.start, at, self.marks), Cell(at, self.stop, self.marks)


# -- noise models -------------------------------------------------------------

@dataclass(frozen=True)
class Brownian:
    kind = "brownian"

    def validate(self, marks):
        if len(marks) != 1:
            raise ValueError("Brownian noise needs a singleton mark space")

    def describe(self):
        return {"kind": self.kind}


@dataclass(frozen=True)
class CompensatedPoisson:
    intensities: tuple

    kind = "poisson"

    def __post_init__(self):
        object.__setattr__(self, "intensities", tuple(float(v) for v in np.atleast_1d(self.intensities)))
        if not all(np.isfinite(v) and v > 0 for v in self.intensities):
            raise ValueError("Poisson intensities must be strictly positive")

    def validate(self, marks):
        if len(self.intensities) not in (1, len(marks)):
            raise ValueError("one intensity per mark (or a single shared one) is required")

    def describe(self):
        return {"kind": self.kind, "intensities": list(self.intensities)}


@dataclass(frozen=True)
class IntensityDriver:
    """Square-root recursion l' = l + a(m - l)dt + s sqrt(l dt) Z, floored."""

    initial: float
    mean: float
    reversion: float = 0.0
    volatility: float = 0.0

    def __post_init__(self):
        if not (self.initial > 0 and self.mean > 0):
            raise ValueError("intensity driver needs positive initial value and mean")
        if self.reversion < 0 or self.volatility < 0:
            raise ValueError("reversion and volatility must be non-negative")

    @property
    def deterministic(self):
        return self.volatility == 0.0

    def describe(self):
        return {"initial": self.initial, "mean": self.mean,
                "reversion": self.reversion, "volatility": self.volatility}


@dataclass(frozen=True)
class DoublyStochasticPoisson:
    drivers: tuple

    kind = "cox"

    def __post_init__(self):
        drivers = self.drivers
        if isinstance(drivers, IntensityDriver):
            drivers = (drivers,)
        object.__setattr__(self, "drivers", tuple(drivers))
        if not self.drivers:
            raise ValueError("at least one intensity driver is required")

    @classmethod
    def constant(cls, intensities):
        return cls(tuple(IntensityDriver(v, v) for v in np.atleast_1d(intensities)))

    def validate(self, marks):
        if len(self.drivers) not in (1, len(marks)):
            raise ValueError("one driver per mark (or a single shared one) is required")

    def describe(self):
        return {"kind": self.kind, "drivers": [d.describe() for d in self.drivers]}


@dataclass(frozen=True)
class CustomNoise:
    """Marker for ensembles assembled from user arrays."""

    label: str = "custom"
    counting: bool = False

    kind = "custom"

    def validate(self, marks):
        pass

    def describe(self):
        return {"kind": self.kind, "label": self.label, "counting": self.counting}


def model_from_description(desc):
    kind = desc["kind"]
    if kind == "brownian":
        return Brownian()
    if kind == "poisson":
        return CompensatedPoisson(tuple(desc["intensities"]))
    if kind == "cox":
        return DoublyStochasticPoisson(tuple(IntensityDriver(**d) for d in desc["drivers"]))
    if kind == "custom":
        return CustomNoise(desc.get("label", "custom"), bool(desc.get("counting", False)))
    raise ValueError(f"unknown noise kind {kind!r}")


# -- ensembles ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Immutable Monte Carlo sample of a martingale random field.

    Public arrays have shape (n_paths, n_steps, n_marks) and are views over
    time-major storage; the ``*_tm`` attributes give the (n_steps, n_paths,
    n_marks) layout used by step-by-step recursions.  ``intensity`` holds the
    density lambda at each step's left endpoint and may be a broadcast view.
    ``counts`` is None for Brownian noise.
    """

    grid: TimeGrid
    marks: MarkSpace
    model: object
    n_paths: int
    seed: int
    increments: np.ndarray
    intensity: np.ndarray
    counts: np.ndarray = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = (self.n_paths, self.grid.n_steps, len(self.marks))
        for name in ("increments", "intensity", "counts"):
            arr = getattr(self, name)
            if arr is None:
                continue
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            _readonly(arr)

    @classmethod
    def from_time_major(cls, grid, marks, model, seed, increments_tm, intensity_tm, counts_tm=None):
        view = lambda a: None if a is None else np.moveaxis(a, 0, 1)
        return cls(grid, marks, model, increments_tm.shape[1], int(seed), view(increments_tm),
                   view(intensity_tm), view(counts_tm))

    @classmethod
    def from_arrays(cls, grid, marks, increments, intensity, counts=None, seed=0, label="custom"):
        """Wrap user-supplied path-major arrays, e.g. an enumerated tree of paths."""
        increments = np.asarray(increments, dtype=np.float64)
        if increments.ndim == 2:
            increments = increments[:, :, None]
        shape = increments.shape
        intensity = np.broadcast_to(np.asarray(intensity, dtype=np.float64), shape)
        if not np.all(np.isfinite(increments)):
            raise ValueError("increments must be finite")
        if not (np.all(np.isfinite(intensity)) and np.all(intensity > 0)):
            raise ValueError("intensity must be strictly positive: only absolutely continuous "
                             "conditional variance measures are supported")
        tm = lambda a: np.ascontiguousarray(np.moveaxis(a, 1, 0))
        counts_tm = None if counts is None else tm(np.asarray(counts, dtype=np.int32).reshape(shape))
        return cls.from_time_major(grid, marks, CustomNoise(label, counts is not None), seed,
                                   tm(increments), np.moveaxis(intensity, 1, 0), counts_tm)

    @property
    def n_steps(self):
        return self.grid.n_steps

    @property
    def n_marks(self):
        return len(self.marks)

    @property
    def dt(self):
        return self.grid.dt

    @property
    def increments_tm(self):
        return np.moveaxis(self.increments, 1, 0)

    @property
    def intensity_tm(self):
        return np.moveaxis(self.intensity, 1, 0)

    @property
    def counts_tm(self):
        return None if self.counts is None else np.moveaxis(self.counts, 1, 0)

    @cached_property
    def intensity_varies(self):
        """True when the intensity differs across paths at some step."""
        lam = np.asarray(self.intensity_tm)
        if self.n_paths == 1 or lam.strides[1] == 0:
            return False
        return bool(np.any(lam != lam[:, :1, :]))

    @cached_property
    def compensator(self):
        """Lambda of each grid cell, lambda * dt on the increment lattice."""
        dt = self.dt
        return _map_compact(lambda a: to_lattice(a * dt), self.intensity)

    @property
    def compensator_tm(self):
        return np.moveaxis(self.compensator, 1, 0)

    @cached_property
    def running_noise_tm(self):
        """mu((0, t_k] x {z}) for k = 0..K, shape (K+1, n, m)."""
        out = np.zeros((self.n_steps + 1, self.n_paths, self.n_marks))
        np.cumsum(self.increments_tm, axis=0, out=out[1:])
        return _readonly(out)

    @property
    def running_noise(self):
        return np.moveaxis(self.running_noise_tm, 0, 1)

    @cached_property
    def running_counts_tm(self):
        """H((0, t_k] x {z}) for k = 0..K; None for non-counting noise."""
        if self.counts is None:
            return None
        out = np.zeros((self.n_steps + 1, self.n_paths, self.n_marks), dtype=np.int32)
        np.cumsum(self.counts_tm, axis=0, out=out[1:])
        return _readonly(out)

    @property
    def running_counts(self):
        rc = self.running_counts_tm
        return None if rc is None else np.moveaxis(rc, 0, 1)

    def _cell_sum(self, arr_tm, cell):
        cell.check(self.grid, self.marks)
        block = arr_tm[cell.start:cell.stop]
        if len(cell.marks) == 1:
            return block[:, :, cell.marks[0]].sum(axis=0)
        return block[:, :, list(cell.marks)].sum(axis=(0, 2))

    def cell_increment(self, cell):
        return self._cell_sum(self.increments_tm, cell)

    def cell_compensator(self, cell):
        return np.broadcast_to(self._cell_sum(self.compensator_tm, cell), (self.n_paths,))

    def cell_count(self, cell):
        if self.counts is None:
            raise ValueError("ensemble has no raw counts")
        return self._cell_sum(self.counts_tm, cell)

    def terminal_noise(self, mark=None):
        """mu((0, T] x Z) per path, over all marks or one mark index."""
        rn = self.running_noise_tm[-1]
        return rn.sum(axis=1) if mark is None else rn[:, mark].copy()

    def describe(self):
        return {"grid": {"horizon": self.grid.horizon, "n_steps": self.grid.n_steps},
                "marks": list(self.marks.labels), "n_paths": self.n_paths,
                "seed": self.seed, "model": self.model.describe()}


def _cox_block(rng, drivers, grid, p0, p1):
    n, K, m = p1 - p0, grid.n_steps, len(drivers)
    dt = grid.dt
    z = rng.normal(p0, p1, stream=2)
    lam = np.empty((K, n, m))
    for j, d in enumerate(drivers):
        cur = np.full(n, float(d.initial))
        for k in range(K):
            pos = np.maximum(cur, INTENSITY_FLOOR)
            lam[k, :, j] = pos
            cur = pos + d.reversion * (d.mean - pos) * dt + d.volatility * np.sqrt(pos * dt) * z[:, k, j]
    return lam


def _deterministic_intensity(drivers, grid):
    K, dt = grid.n_steps, grid.dt
    lam = np.empty((K, 1, len(drivers)))
    for j, d in enumerate(drivers):
        cur = float(d.initial)
        for k in range(K):
            cur = max(cur, INTENSITY_FLOOR)
            lam[k, 0, j] = cur
            cur = cur + d.reversion * (d.mean - cur) * dt
    return lam


def sample_ensemble(model, grid, marks, n_paths, seed, threads=1):
    """Draw a seeded ensemble; identical for any ``threads`` value."""
    n_paths = int(n_paths)
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    if isinstance(model, CustomNoise):
        raise ValueError("custom noise cannot be sampled; use PathEnsemble.from_arrays")
    model.validate(marks)
    K, m, dt = grid.n_steps, len(marks), grid.dt
    rng = CounterRNG(seed, K, m)
    shape = (K, n_paths, m)
    increments = np.empty(shape)
    counts = None

    if isinstance(model, Brownian):
        intensity = np.broadcast_to(np.ones((1, 1, 1)), shape)
        scale = np.sqrt(dt)

        def work(p0, p1):
            increments[:, p0:p1] = to_lattice(scale * rng.normal(p0, p1, stream=0)).transpose(1, 0, 2)
    else:
        counts = np.empty(shape, dtype=np.int32)
        if isinstance(model, CompensatedPoisson):
            lam = np.broadcast_to(np.asarray(model.intensities, dtype=np.float64), (m,))
            intensity = np.broadcast_to(lam.reshape(1, 1, m), shape)
            stochastic = False
        else:
            drivers = model.drivers if len(model.drivers) == m else model.drivers * m
            stochastic = not all(d.deterministic for d in drivers)
            if stochastic:
                intensity = np.empty(shape)
            else:
                intensity = np.broadcast_to(_deterministic_intensity(drivers, grid), shape)
        comp_const = None if stochastic else to_lattice(np.asarray(intensity[:, :1]) * dt).transpose(1, 0, 2)

        def work(p0, p1):
            if stochastic:
                intensity[:, p0:p1] = _cox_block(rng, drivers, grid, p0, p1)
                comp = to_lattice(intensity[:, p0:p1] * dt).transpose(1, 0, 2)
            else:
                comp = comp_const
            c = rng.poisson(comp, p0, p1, stream=0)
            counts[:, p0:p1] = c.transpose(1, 0, 2)
            increments[:, p0:p1] = (c - comp).transpose(1, 0, 2)

    blocks = [(p, min(p + BLOCK_PATHS, n_paths)) for p in range(0, n_paths, BLOCK_PATHS)]
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            list(pool.map(lambda b: work(*b), blocks))
    else:
        for b in blocks:
            work(*b)
    if counts is not None and not np.all(np.asarray(intensity) > 0):
        raise ValueError("intensity recursion produced a non-positive value")
    return PathEnsemble.from_time_major(grid, marks, model, seed, increments, intensity, counts)


# -- integrals and checks -----------------------------------------------------

def _as_field(ensemble, values):
    shape = (ensemble.n_paths, ensemble.n_steps, ensemble.n_marks)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1 and values.shape[0] == ensemble.n_steps:
        values = values[None, :, None]
    elif values.ndim == 2 and values.shape == shape[:2]:
        values = values[:, :, None]
    try:
        return np.broadcast_to(values, shape)
    except ValueError:
        raise ValueError(f"integrand of shape {values.shape} does not fit ensemble shape {shape}") from None


def stochastic_integral(ensemble, integrand):
    """Per-path sum over steps and marks of integrand(k, z) * mu(cell).

    The integrand must be predictable: its value at step k may depend only on
    information up to t_k.  This cannot be verified here.
    """
    values = np.moveaxis(_as_field(ensemble, integrand), 1, 0)
    return np.einsum("kiz,kiz->i", values, ensemble.increments_tm)


def quadratic_compensator(ensemble, integrand):
    """Per-path sum of integrand^2 * lambda * dt, the isometry's right side."""
    values = np.moveaxis(_as_field(ensemble, integrand), 1, 0)
    return np.einsum("kiz,kiz,kiz->i", values, values, np.broadcast_to(ensemble.compensator_tm, values.shape))


@dataclass(frozen=True)
class MeanEstimate:
    value: float
    std_error: float

    @classmethod
    def of(cls, samples):
        samples = np.asarray(samples, dtype=np.float64)
        n = samples.size
        se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return cls(float(samples.mean()), se)

    def zscore(self, target=0.0):
        diff = self.value - target
        if self.std_error == 0.0:
            return 0.0 if diff == 0.0 else float(np.sign(diff) * np.inf)
        return diff / self.std_error


@dataclass(frozen=True)
class IsometryCheck:
    lhs: float
    rhs: float
    gap: MeanEstimate

    def passed(self, n_se=4.0):
        return abs(self.gap.value) <= n_se * self.gap.std_error


def isometry_gap(ensemble, integrand):
    integral = stochastic_integral(ensemble, integrand)
    comp = quadratic_compensator(ensemble, integrand)
    sq = integral ** 2
    return IsometryCheck(float(sq.mean()), float(comp.mean()), MeanEstimate.of(sq - comp))


@dataclass
class FieldReport:
    martingale_z: np.ndarray
    orthogonality: list
    additivity_max_residual: float
    isometry: list

    def fraction_within(self, bound=4.0):
        zs = [np.abs(self.martingale_z)]
        zs += [np.abs(np.asarray(rec["z"])) for rec in self.orthogonality]
        allz = np.concatenate([np.ravel(z) for z in zs]) if zs else np.zeros(0)
        return float(np.mean(allz <= bound)) if allz.size else 1.0


def _test_weights(ensemble, t):
    """G_t-measurable weights used to probe conditional orthogonality."""
    n = ensemble.n_paths
    if t == 0:
        return {"one": np.ones(n)}
    run = ensemble.running_noise_tm[t].sum(axis=1)
    scale = run.std()
    weights = {"one": np.ones(n)}
    if scale > 0:
        weights["running"] = np.clip(run / scale, -3.0, 3.0)
        weights["sign"] = np.where(run > 0, 1.0, -1.0)
    return weights


def field_property_suite(ensemble, cells):
    """Empirical axiom checks over the given grid-aligned cells."""
    for c in cells:
        c.check(ensemble.grid, ensemble.marks)
    check_disjoint(cells)
    mu = [ensemble.cell_increment(c) for c in cells]
    mart = np.array([MeanEstimate.of(v).zscore() for v in mu])

    ortho = []
    for i in range(len(cells)):
        for j in range(i + 1, len(cells)):
            a, b = cells[i], cells[j]
            t = min(a.start, b.start)
            prod = mu[i] * mu[j]
            zs = {name: MeanEstimate.of(w * prod).zscore() for name, w in _test_weights(ensemble, t).items()}
            ortho.append({"pair": (i, j), "t": t, "z": list(zs.values()), "weights": list(zs)})

    resid = 0.0
    for c, v in zip(cells, mu):
        parts = []
        if c.stop - c.start > 1:
            parts.append(c.split_time((c.start + c.stop) // 2))
        if len(c.marks) > 1:
            parts.append((Cell(c.start, c.stop, c.marks[:1]), Cell(c.start, c.stop, c.marks[1:])))
        for left, right in parts:
            r = v - ensemble.cell_increment(left) - ensemble.cell_increment(right)
            resid = max(resid, float(np.max(np.abs(r))))

    iso = []
    for c, v in zip(cells, mu):
        comp = ensemble.cell_compensator(c)
        iso.append(IsometryCheck(float(np.mean(v ** 2)), float(comp.mean()), MeanEstimate.of(v ** 2 - comp)))
    return FieldReport(mart, ortho, resid, iso)


def check_disjoint(cells):
    for i in range(len(cells)):
        for j in range(i + 1, len(cells)):
            if cells[i].overlaps(cells[j]):
                raise ValueError(f"cells {cells[i]} and {cells[j]} overlap")
