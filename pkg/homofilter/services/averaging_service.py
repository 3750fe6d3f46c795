"""Invariant-measure sampling of the frozen fast process and homogenized coefficients."""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from homofilter.config import settings
from homofilter.exceptions import ConfigError, HomogenizationError, SimulationError
from homofilter.models.experiment import (
    ClosedFormHomogenization,
    InvariantSamplerConfig,
    LatticeConfig,
)
from homofilter.services.coefficient_builder import CoefficientField, build_vector_exprs
from homofilter.services.model_service import MultiscaleModel
from homofilter.services.random_streams import RngStream
from homofilter.services.simulation_service import fast_substep
from homofilter.utils.csv_utils import read_csv, write_csv
from homofilter.utils.json_encoder import dumps
from homofilter.utils.linalg import NotPositiveSemidefinite, min_eigenvalue, psd_sqrt

logger = logging.getLogger(__name__)


def batch_means_se(values: np.ndarray, batches: int) -> float:
    """Batch-means standard error of the mean.

    values has shape (chains, length); each chain is cut into contiguous
    batches so that batch means are close to independent.
    """
    values = np.atleast_2d(values)
    chains, length = values.shape
    per_chain = max(1, batches // chains)
    per_chain = min(per_chain, length)
    size = length // per_chain
    trimmed = values[:, : size * per_chain].reshape(chains, per_chain, size)
    means = trimmed.mean(axis=2).reshape(-1)
    if means.size < 2:
        return float("nan")
    return float(np.std(means, ddof=1) / math.sqrt(means.size))


@dataclass
class InvariantSample:
    """Retained samples of mu_inf(x), chain-major."""

    x: np.ndarray
    samples: np.ndarray  # (retained, n)
    chains: int
    per_chain: int
    batches: int
    probe_mean: float
    probe_se: float

    def chain_view(self, values: np.ndarray) -> np.ndarray:
        """Reshape per-sample values (retained,) to (chains, per_chain)."""
        return values[: self.chains * self.per_chain].reshape(self.chains, self.per_chain)

    def mean_and_se(self, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        mean = values.mean(axis=0)
        if values.ndim == 1:
            return mean, batch_means_se(self.chain_view(values), self.batches)
        flat = values.reshape(values.shape[0], -1)
        se = np.array([batch_means_se(self.chain_view(flat[:, i]), self.batches)
                       for i in range(flat.shape[1])])
        return mean, se.reshape(values.shape[1:])


def estimate_invariant_measure(
        model: MultiscaleModel,
        x: np.ndarray,
        cfg: InvariantSamplerConfig,
        stream: RngStream,
        probe: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> InvariantSample:
    """Long-run samples of dZ = f(x, Z) dt + g(x, Z) dV after burn-in and thinning.

    Chains run in lockstep; ``probe`` maps samples (k, n) to a statistic (k,)
    whose batch-means standard error is reported (default: first coordinate).
    """
    rng = stream.generator()
    x = np.asarray(x, dtype=float).reshape(-1)
    chains = min(cfg.chains, cfg.retained)
    per_chain = math.ceil(cfg.retained / chains)
    z = np.zeros((chains, model.n)) if cfg.z0 is None else np.tile(np.asarray(cfg.z0, float), (chains, 1))
    xb = np.broadcast_to(x.reshape(1, -1), (chains, model.m))
    sq = math.sqrt(cfg.dt)

    kept = np.empty((per_chain, chains, model.n))
    total = cfg.burn_in + per_chain * cfg.thinning
    slot = 0
    for step in range(total):
        dV = sq * rng.standard_normal((chains, model.dims.v))
        z = fast_substep(model, xb, z, cfg.dt, dV)
        if not np.all(np.isfinite(z)):
            raise SimulationError(
                f"frozen fast process diverged at x={x.tolist()}",
                step=step,
                suggestion="recurrence likely violated; check the fast drift f",
            )
        if step >= cfg.burn_in and (step - cfg.burn_in + 1) % cfg.thinning == 0:
            kept[slot] = z
            slot += 1

    samples = np.swapaxes(kept, 0, 1).reshape(chains * per_chain, model.n)
    stat = probe(samples) if probe is not None else samples[:, 0]
    sample = InvariantSample(
        x=x,
        samples=samples,
        chains=chains,
        per_chain=per_chain,
        batches=cfg.batches,
        probe_mean=float(np.mean(stat)),
        probe_se=0.0,
    )
    sample.probe_se = batch_means_se(sample.chain_view(np.asarray(stat)), cfg.batches)
    return sample


def centering_check(
        theta: CoefficientField,
        theta_bar: np.ndarray,
        sample: InvariantSample,
) -> float:
    """|mean_i (theta(x, z_i) - theta_bar(x))|, max over components."""
    count = sample.samples.shape[0]
    xs = np.broadcast_to(sample.x.reshape(1, -1), (count, sample.x.size))
    values = theta(xs, sample.samples)
    residual = np.abs(np.mean(values - np.asarray(theta_bar), axis=0))
    return float(np.max(residual))


class HomogenizedModel:
    """Averaged coefficients b_bar, a_bar, sigma_bar, h_bar and L with L L* = a_bar - sigma_bar sigma_bar*."""

    kind: str = "abstract"

    def __init__(self, m: int, w: int, d: int):
        self.m, self.w, self.d = m, w, d

    def bbar(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def abar(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sigbar(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hbar(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diffusion_factor(self, x: np.ndarray) -> np.ndarray:
        """L(x), shape (N, m, m)."""
        s = self.sigbar(x)
        gap = self.abar(x) - s @ np.swapaxes(s, -1, -2)
        try:
            return psd_sqrt(gap, tol=settings.PSD_TOLERANCE)
        except NotPositiveSemidefinite as e:
            raise HomogenizationError(
                f"a_bar - sigma_bar sigma_bar* is not PSD: {e}",
                suggestion="increase the retained invariant samples",
            )


class ExactHomogenized(HomogenizedModel):
    """Slow coefficients that do not depend on z: averaging is the identity and L = 0."""

    kind = "exact"

    def __init__(self, model: MultiscaleModel):
        super().__init__(model.m, model.w, model.d)
        self.model = model
        self._zeros = lambda count: np.zeros((count, model.n))

    def bbar(self, x):
        return self.model.b(x, self._zeros(x.shape[0]))

    def sigbar(self, x):
        return self.model.sigma(x, self._zeros(x.shape[0]))

    def abar(self, x):
        s = self.sigbar(x)
        return s @ np.swapaxes(s, -1, -2)

    def hbar(self, x):
        return self.model.h(x, self._zeros(x.shape[0]))

    def diffusion_factor(self, x):
        return np.zeros((x.shape[0], self.m, self.m))


class ClosedFormHomogenized(HomogenizedModel):
    """Averaged coefficients supplied analytically as expressions in x."""

    kind = "closed_form"

    def __init__(self, spec: ClosedFormHomogenization, m: int, w: int, d: int, kappa_inv=None):
        super().__init__(m, w, d)
        dims = (m, 0)
        self.b_exprs = build_vector_exprs(spec.bbar, dims)
        self.a_exprs = build_vector_exprs(spec.abar, dims)
        self.s_exprs = build_vector_exprs(spec.sigbar, dims)
        self.h_exprs = build_vector_exprs(spec.hbar, dims)
        shapes = {
            "bbar": (self.b_exprs.shape, (m,)),
            "abar": (self.a_exprs.shape, (m, m)),
            "sigbar": (self.s_exprs.shape, (m, w)),
            "hbar": (self.h_exprs.shape, (d,)),
        }
        for name, (got, want) in shapes.items():
            if got != want:
                raise ConfigError(f"closed-form {name} must have shape {want}, got {got}")
        # h_bar is given for the raw h; apply the same kappa^-1 as the model
        self.kappa_inv = np.eye(d) if kappa_inv is None else np.asarray(kappa_inv)

    @staticmethod
    def _eval(exprs: np.ndarray, x: np.ndarray) -> np.ndarray:
        flat = [e.evaluate(x) for e in exprs.flat]
        return np.stack(flat, axis=-1).reshape((x.shape[0],) + exprs.shape)

    def bbar(self, x):
        return self._eval(self.b_exprs, x)

    def abar(self, x):
        return self._eval(self.a_exprs, x)

    def sigbar(self, x):
        return self._eval(self.s_exprs, x)

    def hbar(self, x):
        return self._eval(self.h_exprs, x) @ self.kappa_inv.T


@dataclass
class LatticeTables:
    """Per-node averages on a tensor lattice."""

    axes: List[np.ndarray]
    bbar: np.ndarray  # (*nodes, m)
    abar: np.ndarray  # (*nodes, m, m)
    sigbar: np.ndarray  # (*nodes, m, w)
    hbar: np.ndarray  # (*nodes, d)
    bbar_se: np.ndarray
    hbar_se: np.ndarray
    metadata: Dict = field(default_factory=dict)

    @property
    def node_shape(self):
        return tuple(len(a) for a in self.axes)


class LatticeHomogenized(HomogenizedModel):
    """Monte Carlo averages on a lattice, multilinear interpolation, clamped to the lattice box.

    z-free fields are evaluated exactly instead of interpolated.
    """

    kind = "lattice"

    def __init__(self, model: MultiscaleModel, tables: LatticeTables):
        super().__init__(model.m, model.w, model.d)
        self.model = model
        self.tables = tables
        self.lower = np.array([a[0] for a in tables.axes])
        self.upper = np.array([a[-1] for a in tables.axes])
        self._interp = {}
        for name in ("bbar", "abar", "sigbar", "hbar"):
            values = getattr(tables, name)
            flat = values.reshape(tables.node_shape + (-1,))
            self._interp[name] = (
                RegularGridInterpolator(tables.axes, flat, method="linear"),
                values.shape[len(tables.node_shape):],
            )

    def _lookup(self, name: str, x: np.ndarray) -> np.ndarray:
        interp, shape = self._interp[name]
        clamped = np.clip(x, self.lower, self.upper)
        return interp(clamped).reshape((x.shape[0],) + shape)

    def _zeros(self, count):
        return np.zeros((count, self.model.n))

    def bbar(self, x):
        if not self.model.b.depends_on_z:
            return self.model.b(x, self._zeros(x.shape[0]))
        return self._lookup("bbar", x)

    def sigbar(self, x):
        if not self.model.sigma.depends_on_z:
            return self.model.sigma(x, self._zeros(x.shape[0]))
        return self._lookup("sigbar", x)

    def abar(self, x):
        if not self.model.sigma.depends_on_z:
            s = self.sigbar(x)
            return s @ np.swapaxes(s, -1, -2)
        return self._lookup("abar", x)

    def hbar(self, x):
        if not self.model.h.depends_on_z:
            return self.model.h(x, self._zeros(x.shape[0]))
        return self._lookup("hbar", x)

    def diffusion_factor(self, x):
        if not self.model.sigma.depends_on_z:
            return np.zeros((x.shape[0], self.m, self.m))
        return super().diffusion_factor(x)

    def save_cache(self, directory: Union[str, Path]) -> Path:
        """Write homogenized.csv (one row per node) and homogenized.json (lattice metadata)."""
        directory = Path(directory)
        t = self.tables
        m, w, d = self.m, self.w, self.d
        header = (
            [f"x{i + 1}" for i in range(m)]
            + [f"bbar{i + 1}" for i in range(m)]
            + [f"abar{i + 1}{j + 1}" for i in range(m) for j in range(m)]
            + [f"sigbar{i + 1}{j + 1}" for i in range(m) for j in range(w)]
            + [f"hbar{i + 1}" for i in range(d)]
            + [f"bbar_se{i + 1}" for i in range(m)]
            + [f"hbar_se{i + 1}" for i in range(d)]
        )
        grids = np.meshgrid(*t.axes, indexing="ij")
        nodes = np.stack([g.reshape(-1) for g in grids], axis=1)
        count = nodes.shape[0]
        columns = [
            nodes,
            t.bbar.reshape(count, -1),
            t.abar.reshape(count, -1),
            t.sigbar.reshape(count, -1),
            t.hbar.reshape(count, -1),
            t.bbar_se.reshape(count, -1),
            t.hbar_se.reshape(count, -1),
        ]
        table = np.concatenate(columns, axis=1)
        write_csv(directory / "homogenized.csv", header, table.tolist())
        meta = dict(t.metadata)
        meta["axes"] = [a.tolist() for a in t.axes]
        meta["dims"] = {"m": m, "w": w, "d": d}
        path = directory / "homogenized.json"
        path.write_text(dumps(meta))
        logger.info(f"Saved homogenization cache with {count} nodes to {directory}")
        return directory

    @classmethod
    def load_cache(
            cls,
            model: MultiscaleModel,
            directory: Union[str, Path],
            expected: Optional[Dict] = None,
    ) -> "LatticeHomogenized":
        """Read a cache written by save_cache.

        The model fingerprint must match; ``expected`` (see cache_key) also pins
        the sampler, lattice and seed.
        """
        directory = Path(directory)
        try:
            meta = json.loads((directory / "homogenized.json").read_text())
            header, rows = read_csv(directory / "homogenized.csv")
        except (OSError, ValueError, StopIteration) as e:
            raise ConfigError(f"cannot read homogenization cache in {directory}: {e}")
        dims = meta.get("dims", {})
        if (dims.get("m"), dims.get("w"), dims.get("d")) != (model.m, model.w, model.d):
            raise ConfigError(f"homogenization cache in {directory} has dims {dims}, model differs")
        stale = []
        if model.fingerprint is not None and meta.get("model") != model.fingerprint:
            stale.append("model")
        for name, value in (expected or {}).items():
            if meta.get(name) != value:
                stale.append(name)
        if stale:
            raise ConfigError(
                f"homogenization cache in {directory} was built from a different "
                f"{', '.join(sorted(set(stale)))}",
                location=str(directory),
                suggestion="rerun 'homofilter homogenize' or remove the cache",
            )
        axes = [np.asarray(a, dtype=float) for a in meta["axes"]]
        node_shape = tuple(len(a) for a in axes)
        table = np.asarray(rows, dtype=float)
        m, w, d = model.m, model.w, model.d
        widths = [m, m, m * m, m * w, d, m, d]
        splits = np.cumsum(widths)[:-1]
        _, bb, aa, ss, hh, bse, hse = np.split(table, splits, axis=1)
        tables = LatticeTables(
            axes=axes,
            bbar=bb.reshape(node_shape + (m,)),
            abar=aa.reshape(node_shape + (m, m)),
            sigbar=ss.reshape(node_shape + (m, w)),
            hbar=hh.reshape(node_shape + (d,)),
            bbar_se=bse.reshape(node_shape + (m,)),
            hbar_se=hse.reshape(node_shape + (d,)),
            metadata={k: v for k, v in meta.items() if k not in ("axes", "dims")},
        )
        logger.info(f"Loaded homogenization cache from {directory}")
        return cls(model, tables)


def _average_node(model: MultiscaleModel, x: np.ndarray, cfg: InvariantSamplerConfig,
                  stream: RngStream) -> Dict[str, np.ndarray]:
    sample = estimate_invariant_measure(model, x, cfg, stream)
    count = sample.samples.shape[0]
    xs = np.broadcast_to(x.reshape(1, -1), (count, model.m))
    zs = sample.samples
    b = model.b(xs, zs)
    s = model.sigma(xs, zs)
    h = model.h(xs, zs)
    a = s @ np.swapaxes(s, -1, -2)
    bbar, bbar_se = sample.mean_and_se(b)
    hbar, hbar_se = sample.mean_and_se(h)
    return {
        "bbar": bbar,
        "abar": a.mean(axis=0),
        "sigbar": s.mean(axis=0),
        "hbar": hbar,
        "bbar_se": bbar_se,
        "hbar_se": hbar_se,
    }


def cache_key(
        model: MultiscaleModel,
        cfg: InvariantSamplerConfig,
        lattice: LatticeConfig,
        seed: int,
) -> Dict:
    """Inputs that determine the lattice tables; a cache is reusable only when all of them match."""
    key = {
        "model": model.fingerprint,
        "sampler": cfg.model_dump(),
        "lattice": lattice.model_dump(),
        "seed": seed,
    }
    return json.loads(dumps(key))


def build_lattice_tables(
        model: MultiscaleModel,
        cfg: InvariantSamplerConfig,
        lattice: LatticeConfig,
        stream: RngStream,
        workers: int = 1,
) -> LatticeTables:
    """Average b, sigma sigma*, sigma, h over mu_inf(x) at every lattice node (nodes in parallel)."""
    if len(lattice.nodes) != model.m:
        raise ConfigError(f"lattice has {len(lattice.nodes)} axes, model has m={model.m}")
    axes = [np.linspace(lo, hi, k) for lo, hi, k in zip(lattice.lower, lattice.upper, lattice.nodes)]
    grids = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([g.reshape(-1) for g in grids], axis=1)
    node_shape = tuple(lattice.nodes)

    def work(index: int):
        return _average_node(model, nodes[index], cfg, stream.child("lattice_node", index))

    logger.info(f"Averaging coefficients at {nodes.shape[0]} lattice nodes with {workers} worker(s)")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, range(nodes.shape[0])))
    else:
        results = [work(i) for i in range(nodes.shape[0])]

    def stack(name):
        return np.stack([r[name] for r in results]).reshape(node_shape + results[0][name].shape)

    tables = LatticeTables(
        axes=axes,
        bbar=stack("bbar"),
        abar=stack("abar"),
        sigbar=stack("sigbar"),
        hbar=stack("hbar"),
        bbar_se=stack("bbar_se"),
        hbar_se=stack("hbar_se"),
        metadata={**cache_key(model, cfg, lattice, stream.seed), "stream": stream.stream_id},
    )
    _check_node_psd(tables, nodes)
    return tables


def _check_node_psd(tables: LatticeTables, nodes: np.ndarray) -> None:
    count = nodes.shape[0]
    m = tables.abar.shape[-1]
    abar = tables.abar.reshape(count, m, m)
    sig = tables.sigbar.reshape(count, m, -1)
    gap = abar - sig @ np.swapaxes(sig, -1, -2)
    for i in range(count):
        lowest = min(min_eigenvalue(abar[i]), min_eigenvalue(gap[i]))
        if lowest < -settings.PSD_TOLERANCE:
            raise HomogenizationError(
                f"averaged diffusion not PSD at node {nodes[i].tolist()} (min eigenvalue {lowest:.3e})",
                location=f"node {nodes[i].tolist()}",
                suggestion="increase retained samples; a persistent violation indicates a bug",
            )


def homogenize(
        model: MultiscaleModel,
        cfg: InvariantSamplerConfig,
        stream: RngStream,
        lattice: Optional[LatticeConfig] = None,
        closed_form: Optional[ClosedFormHomogenization] = None,
        workers: int = 1,
) -> HomogenizedModel:
    """Pick the realization: closed-form override, exact (z-free) or lattice Monte Carlo."""
    if closed_form is not None:
        kappa = getattr(model, "kappa", None)
        kappa_inv = np.linalg.inv(kappa) if kappa is not None else None
        homog = ClosedFormHomogenized(closed_form, model.m, model.w, model.d, kappa_inv)
    elif model.z_free:
        homog = ExactHomogenized(model)
    else:
        if lattice is None:
            raise ConfigError(
                "coefficients depend on z: a lattice or a closed-form override is required",
                suggestion="add a 'lattice' block to the experiment",
            )
        homog = LatticeHomogenized(model, build_lattice_tables(model, cfg, lattice, stream, workers))
    logger.info(f"Homogenized model realized as {homog.kind}")
    return homog
