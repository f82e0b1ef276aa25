"""Measurement simulation, experiment drivers, and result serialization.

The harness wires the geometry, model, solver and inversion layers into the
two statistical studies: a sample study comparing reversion orders with
sequential linearizations over prior draws, and a scaling study following a
single draw across target magnitudes. Desk-scale defaults use a 2D disk with
16 electrodes; measurement and reconstruction sides may share or differ in
mesh, partition, and contact model exactly as the case table prescribes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import fem
from .calculus import DerivativeStack
from .inversion import (
    NoiseModel,
    PriorGammas,
    PriorModel,
    TikhonovInverse,
    build_noise_cov,
    build_prior,
    revert,
    sequential_linearize,
)
from .mesh import (
    Partition,
    cluster_partition,
    define_electrodes,
    disk_electrode_midpoints,
    generate_disk_mesh,
    nearest_neighbor_project,
)
from .model import AdmissibilityError, ModelConfig, ParamVector, Parametrization

METHODS = ("1", "2", "3", "1,1", "1,1,1")


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator for one sample stream: Philox keyed by (seed, index)."""
    return np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(index)]))


# ---------------------------------------------------------------------------
# Experiment cases
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SideSpec:
    """One side (measurement or reconstruction) of an experiment case."""

    level: int
    n_clusters: int
    contact: str  # "smooth" | "cem"
    deltas: tuple[float, float]
    gammas: PriorGammas


@dataclass(frozen=True)
class ExperimentCase:
    """Desk-scale analog of one row of the study table.

    The reconstruction side always uses the coarser discretization and the
    smooth contact model; sharing the measurement discretization (an inverse
    crime) happens exactly when both sides specify the same level, cluster
    count, and contact model.
    """

    name: str
    measurement: SideSpec
    reconstruction: SideSpec
    n_electrodes: int = 16
    electrode_radius: float = 0.15
    contact_radius: float = 0.10
    mu_kappa: float = -3.0
    mu_zeta: float = -3.0
    n_samples: int = 100
    seed: int = 1
    cluster_seed: int = 7

    def __post_init__(self) -> None:
        if self.reconstruction.contact != "smooth":
            raise ValueError("the reconstruction side always uses the smooth contact model")
        for spec in (self.measurement, self.reconstruction):
            if min(spec.deltas) < 0 or min(spec.gammas.gamma_kappa, spec.gammas.gamma_rho) <= 0:
                raise ValueError("noise levels must be nonnegative and variances positive")

    @property
    def inverse_crime(self) -> bool:
        a, b = self.measurement, self.reconstruction
        return a.level == b.level and a.n_clusters == b.n_clusters and a.contact == b.contact

    @property
    def config(self) -> ModelConfig:
        return ModelConfig(mu_kappa=self.mu_kappa, mu_zeta=self.mu_zeta)


def _case(name, meas_contact, meas_deltas, meas_gr, meas_gk, rec_deltas, rec_gr, rec_gk):
    inverse_crime = meas_contact == "smooth"
    meas = SideSpec(
        level=3 if inverse_crime else 4,
        n_clusters=80 if inverse_crime else 200,
        contact=meas_contact,
        deltas=meas_deltas,
        gammas=PriorGammas(meas_gk[0], meas_gk[1], meas_gr),
    )
    rec = SideSpec(
        level=3,
        n_clusters=80,
        contact="smooth",
        deltas=rec_deltas,
        gammas=PriorGammas(rec_gk[0], rec_gk[1], rec_gr),
    )
    return ExperimentCase(name=name, measurement=meas, reconstruction=rec)


# Table of study cases; the percent noise levels of the source table are
# stored as fractions.
CASES: dict[str, ExperimentCase] = {
    "C1": _case("C1", "smooth", (5e-5, 5e-4), 0.1, (0.1, 1.0), (1e-4, 1e-3), 0.1, (0.1, 1.0)),
    "C2": _case("C2", "smooth", (1e-4, 1e-3), 0.3, (0.6, 0.6), (5e-4, 5e-3), 0.3, (0.5, 0.7)),
    "C3": _case("C3", "cem", (5e-5, 5e-4), 0.1, (0.1, 1.0), (1e-4, 1e-3), 0.07, (0.1, 1.0)),
    "C4": _case("C4", "cem", (5e-5, 5e-4), 0.3, (0.6, 0.6), (5e-4, 5e-3), 0.2, (0.6, 0.6)),
    "C5": _case("C5", "cem", (5e-5, 5e-4), 0.3, (0.6, 0.6), (5e-4, 5e-3), 0.2, (0.5, 0.7)),
    "C6": _case("C6", "cem", (1e-4, 1e-3), 0.3, (0.6, 0.6), (5e-4, 5e-3), 0.2, (0.5, 0.7)),
}


def case_from_config(data: dict) -> ExperimentCase:
    """Build a case from a configuration mapping, starting from table defaults.

    ``data`` holds the case name under "case" plus optional overrides
    mirroring the :class:`ExperimentCase` fields; side overrides use nested
    mappings with ``gammas`` given as a mapping of the prior fields.
    """
    base = CASES[data.get("case", "C1")]
    kwargs: dict = {}
    for side_name in ("measurement", "reconstruction"):
        spec = getattr(base, side_name)
        override = data.get(side_name, {})
        if override:
            gam = override.pop("gammas", None)
            if gam is not None:
                override["gammas"] = replace(spec.gammas, **gam)
            if "deltas" in override:
                override["deltas"] = tuple(override["deltas"])
            kwargs[side_name] = replace(spec, **override)
    for key in (
        "n_electrodes",
        "electrode_radius",
        "contact_radius",
        "mu_kappa",
        "mu_zeta",
        "n_samples",
        "seed",
        "cluster_seed",
    ):
        if key in data:
            kwargs[key] = data[key]
    return replace(base, **kwargs)


# ---------------------------------------------------------------------------
# Model sides
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SideModel:
    """Geometry and parametrization of one side of an experiment."""

    spec: SideSpec
    mesh: object
    layout: object
    partition: Partition
    param: Parametrization
    basis: fem.CurrentBasis


def build_side(case: ExperimentCase, spec: SideSpec) -> SideModel:
    mesh = generate_disk_mesh(spec.level)
    layout = define_electrodes(
        mesh,
        disk_electrode_midpoints(case.n_electrodes),
        case.electrode_radius,
        case.contact_radius,
    )
    partition = cluster_partition(mesh, spec.n_clusters, seed=case.cluster_seed)
    param = Parametrization(case.config, partition, layout, spec.contact)
    return SideModel(
        spec=spec,
        mesh=mesh,
        layout=layout,
        partition=partition,
        param=param,
        basis=fem.current_basis(case.n_electrodes),
    )


def build_models(case: ExperimentCase) -> tuple[SideModel, SideModel]:
    """Measurement and reconstruction sides; shared when the case is an inverse crime."""
    rec = build_side(case, case.reconstruction)
    if case.inverse_crime:
        meas = SideModel(
            spec=case.measurement,
            mesh=rec.mesh,
            layout=rec.layout,
            partition=rec.partition,
            param=rec.param,
            basis=rec.basis,
        )
        return meas, rec
    return build_side(case, case.measurement), rec


def side_forward_map(side: SideModel, iota: ParamVector, strict: bool = True) -> np.ndarray:
    tau = side.param.tau(iota, strict=strict)
    system = fem.assemble(side.mesh, side.layout, tau, side.basis)
    return fem.forward_map(system, side.basis)


def build_noise_cov_for_side(side: SideModel, deltas: tuple[float, float]) -> NoiseModel:
    """Noise model scaled by the side's own reference measurements."""
    lam0 = side_forward_map(side, side.param.zero())
    return build_noise_cov(deltas[0], deltas[1], lam0, side.basis)


# ---------------------------------------------------------------------------
# Prior draws and measurement simulation
# ---------------------------------------------------------------------------


def draw_from_prior(prior: PriorModel, seed: int) -> np.ndarray:
    """Deterministic zero-mean draw with the prior covariance, as a flat vector."""
    return prior.sample(sample_rng(seed, 0))


def draw_target(side: SideModel, prior: PriorModel, rng: np.random.Generator) -> ParamVector:
    """Draw target parameters for data simulation.

    Smooth-contact targets keep their contact locations at the electrode
    centers: only the strengths are random, and the location freedom is left
    to the reconstruction side as a compensation tool.
    """
    target = side.param.from_flat(prior.sample(rng))
    if side.param.kind == "smooth":
        target = ParamVector(target.kappa, target.rho, np.zeros_like(target.xi))
    return target


@dataclass(frozen=True, eq=False)
class MeasurementRecord:
    """Noisy data matrix with the target and noise realization metadata."""

    upsilon: np.ndarray  # (M-1, M-1)
    target: ParamVector
    lam_target: np.ndarray  # noiseless map at the target
    deltas: tuple[float, float]
    physical_voltages: np.ndarray  # (M, M-1), mean-free columns


def simulate_measurements(
    side: SideModel,
    target: ParamVector,
    noise: NoiseModel,
    rng: np.random.Generator,
    theta_hat: np.ndarray | None = None,
) -> MeasurementRecord:
    """Simulate the physical two-electrode measurements and transform to data.

    The noiseless voltages for the pairwise patterns are contaminated with
    independent Gaussian noise, each voltage vector is normalized to zero
    mean, and the collection is mapped back into the orthonormal-basis data
    matrix. A fixed noise realization may be supplied instead of drawing one.
    """
    if not side.param.admissible(target):
        raise AdmissibilityError("target parameters are inadmissible on the measurement side")
    lam = side_forward_map(side, target)
    return simulate_from_map(side.basis, lam, target, noise, rng, theta_hat)


def simulate_from_map(
    basis: fem.CurrentBasis,
    lam: np.ndarray,
    target: ParamVector,
    noise: NoiseModel,
    rng: np.random.Generator,
    theta_hat: np.ndarray | None = None,
) -> MeasurementRecord:
    """Noise stage of the simulator for a precomputed noiseless map."""
    U = basis.B @ lam @ basis.B_pinv @ basis.Bhat
    if theta_hat is None:
        theta_hat = noise.draw_raw(rng)
    V = U + theta_hat - theta_hat.mean(axis=0, keepdims=True)
    upsilon = basis.B_pinv @ V @ basis.Bhat_pinv @ basis.B
    return MeasurementRecord(
        upsilon=upsilon,
        target=target,
        lam_target=lam,
        deltas=(noise.delta1, noise.delta2),
        physical_voltages=V,
    )


# ---------------------------------------------------------------------------
# Reconstruction driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReconOutcome:
    """One reconstruction: final parameters plus per-stage components."""

    method: str
    upsilon: ParamVector
    components: tuple  # reversion increments or sequential iterates
    clamped: bool
    diagnostics: dict = field(default_factory=dict)


class Reconstructor:
    """All five reconstruction methods over a fixed reconstruction model.

    The base stack at the origin, the prior, the noise model and the
    regularized inverse are built once and shared across samples; sequential
    steps rebuild the stack at each iterate.
    """

    def __init__(
        self,
        rec: SideModel,
        gammas: PriorGammas | None = None,
        deltas: tuple[float, float] | None = None,
    ):
        self.rec = rec
        self.gammas = gammas if gammas is not None else rec.spec.gammas
        self.deltas = deltas if deltas is not None else rec.spec.deltas
        self.prior = build_prior(rec.param, self.gammas)
        self.stack0 = self._make_stack(rec.param.zero())
        self.noise = build_noise_cov(
            self.deltas[0], self.deltas[1], self.stack0.lam, rec.basis
        )
        self.inverse0 = TikhonovInverse(self.stack0, self.prior, self.noise)

    @property
    def lam0(self) -> np.ndarray:
        return self.stack0.lam

    def _make_stack(self, iota: ParamVector | None) -> DerivativeStack:
        iota = self.rec.param.zero() if iota is None else iota
        tau = self.rec.param.tau(iota)
        system = fem.assemble(self.rec.mesh, self.rec.layout, tau, self.rec.basis)
        return DerivativeStack(system, self.rec.param, iota, self.rec.basis)

    def _make_inverse(self, stack: DerivativeStack) -> TikhonovInverse:
        if stack is self.stack0:
            return self.inverse0
        return TikhonovInverse(stack, self.prior, self.noise)

    def run(self, method: str, data: np.ndarray) -> ReconOutcome:
        """Reconstruct from a data matrix with one of the named methods.

        Methods "1", "2", "3" are one-step series reversions of that order;
        "1,1" and "1,1,1" are two and three sequential linearizations.
        """
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
        if "," in method:
            steps = method.count(",") + 1
            seq = sequential_linearize(
                self._make_stack,
                self._make_inverse,
                data,
                steps,
                initial_stack=self.stack0,
                initial_inverse=self.inverse0,
            )
            return ReconOutcome(
                method=method,
                upsilon=seq.iterates[-1],
                components=seq.iterates,
                clamped=any(seq.clamped),
            )
        order = int(method)
        result = revert(self.stack0, self.inverse0, data, order)
        upsilon, clamped = self.rec.param.clamp(result.partial_sum(order))
        diagnostics = dict(result.diagnostics)
        if order >= 3:
            corr = _sign_correlation(result.etas[1].kappa, result.etas[2].kappa)
            diagnostics["eta2_eta3_sign_correlation"] = corr
        return ReconOutcome(
            method=method,
            upsilon=upsilon,
            components=result.etas,
            clamped=clamped,
            diagnostics=diagnostics,
        )


def _sign_correlation(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


# ---------------------------------------------------------------------------
# Performance indicators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Indicators:
    res: float
    res_rel: float
    err: float
    err_rel: float


def _pc_norm(partition: Partition, values: np.ndarray) -> float:
    """L2 norm of a piecewise-constant cluster field."""
    return float(np.sqrt(np.sum(partition.cluster_volumes * np.square(values))))


def indicators(
    rec: SideModel,
    meas: SideModel,
    upsilon_i: ParamVector,
    target: ParamVector,
    data: np.ndarray,
    lam0: np.ndarray,
) -> Indicators:
    """Residual and domain-error indicators for one reconstruction.

    The residual compares the reconstruction's simulated measurements with
    the data in the Frobenius norm, normalized by the initial-guess residual.
    The domain error is the piecewise-constant L2 distance of the shifted
    log-conductivities, after nearest-neighbor projection onto the
    measurement partition when the partitions differ.
    """
    try:
        lam_i = side_forward_map(rec, upsilon_i, strict=False)
        res = float(np.linalg.norm(lam_i - data))
    except AdmissibilityError:
        res = float("inf")
    denom = float(np.linalg.norm(lam0 - data))
    if denom == 0.0:
        res_rel = 0.0 if res == 0.0 else float("inf")
    else:
        res_rel = res / denom

    if rec.partition is meas.partition:
        kappa_on_meas = upsilon_i.kappa
    else:
        kappa_on_meas = nearest_neighbor_project(
            rec.partition, upsilon_i.kappa, meas.partition
        )
    err = _pc_norm(meas.partition, kappa_on_meas - target.kappa)
    target_norm = _pc_norm(meas.partition, target.kappa)
    err_rel = err / target_norm if target_norm > 0 else (0.0 if err == 0.0 else float("inf"))
    return Indicators(res=res, res_rel=res_rel, err=err, err_rel=err_rel)


# ---------------------------------------------------------------------------
# Experiment 1: statistics over prior draws
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Experiment1Result:
    case: ExperimentCase
    methods: tuple[str, ...]
    ref_res: np.ndarray  # |Lambda(0) - data| per sample
    table: dict  # method -> dict of arrays res/res_rel/err/err_rel/clamped
    target_err: np.ndarray  # |kappa_target| in the measurement norm
    retained: np.ndarray  # bool mask of samples kept for the means
    failures: tuple
    # diagnostic only: oscillation indicator of the higher-order increments
    eta23_sign_corr: np.ndarray | None = None

    def mean_log10(self, method: str, indicator: str) -> float:
        if method == "0":
            vals = np.ones_like(self.ref_res) if indicator == "res_rel" else self.target_err
        else:
            vals = self.table[method][indicator]
        return float(np.log10(np.mean(vals[self.retained])))

    def summary_rows(self) -> list[dict]:
        rows = []
        for method in ("0",) + self.methods:
            if method == "0":
                rows.append(
                    {
                        "method": "0",
                        "log10_mean_res_rel": self.mean_log10("0", "res_rel"),
                        "log10_mean_err": self.mean_log10("0", "err"),
                    }
                )
            else:
                rows.append(
                    {
                        "method": method,
                        "log10_mean_res_rel": self.mean_log10(method, "res_rel"),
                        "log10_mean_err": self.mean_log10(method, "err"),
                    }
                )
        return rows


def retained_mask(ref_res: np.ndarray, keep_fraction: float = 0.8) -> np.ndarray:
    """Bottom fraction of samples by initial-guess residual, ties by index."""
    n = len(ref_res)
    keep = int(np.floor(keep_fraction * n))
    order = np.lexsort((np.arange(n), ref_res))
    mask = np.zeros(n, dtype=bool)
    mask[order[:keep]] = True
    return mask


def experiment1(
    case: ExperimentCase,
    methods: Sequence[str] = METHODS,
    n_samples: int | None = None,
    seed: int | None = None,
    progress: Callable[[int], None] | None = None,
) -> Experiment1Result:
    """Statistical comparison of the reconstruction methods over prior draws.

    Draws targets from the measurement-side prior, simulates noisy data,
    reconstructs with every requested method, and aggregates the indicators
    over the retained samples (the top fifth by initial-guess residual is
    excluded). Per-sample failures are recorded, not fatal. Deterministic for
    a fixed seed.
    """
    methods = tuple(methods)
    n = case.n_samples if n_samples is None else n_samples
    seed = case.seed if seed is None else seed
    meas, rec = build_models(case)
    recon = Reconstructor(rec)
    meas_prior = build_prior(meas.param, case.measurement.gammas)
    meas_noise = build_noise_cov_for_side(meas, case.measurement.deltas)

    ref_res = np.empty(n)
    target_err = np.empty(n)
    table = {
        m: {k: np.full(n, np.nan) for k in ("res", "res_rel", "err", "err_rel")}
        | {"clamped": np.zeros(n, dtype=bool)}
        for m in methods
    }
    sign_corr = np.full(n, np.nan)
    failures = []
    for i in range(n):
        rng = sample_rng(seed, i)
        target = draw_target(meas, meas_prior, rng)
        record = simulate_measurements(meas, target, meas_noise, rng)
        ref_res[i] = float(np.linalg.norm(recon.lam0 - record.upsilon))
        target_err[i] = _pc_norm(meas.partition, target.kappa)
        for method in methods:
            try:
                outcome = recon.run(method, record.upsilon)
            except Exception as exc:  # recorded, not fatal
                failures.append((i, method, repr(exc)))
                continue
            ind = indicators(rec, meas, outcome.upsilon, target, record.upsilon, recon.lam0)
            row = table[method]
            row["res"][i] = ind.res
            row["res_rel"][i] = ind.res_rel
            row["err"][i] = ind.err
            row["err_rel"][i] = ind.err_rel
            row["clamped"][i] = outcome.clamped
            if method == "3":
                sign_corr[i] = outcome.diagnostics.get(
                    "eta2_eta3_sign_correlation", np.nan
                )
        if progress is not None:
            progress(i)
    return Experiment1Result(
        case=case,
        methods=methods,
        ref_res=ref_res,
        table=table,
        target_err=target_err,
        retained=retained_mask(ref_res),
        failures=tuple(failures),
        eta23_sign_corr=sign_corr if "3" in methods else None,
    )


# ---------------------------------------------------------------------------
# Experiment 2: scaling study
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Experiment2Result:
    case: ExperimentCase
    methods: tuple[str, ...]
    s_values: np.ndarray
    res: dict  # method -> array over s (absolute residual)
    err: dict  # method -> array over s (absolute domain error)
    ref_res: np.ndarray  # initial-guess residual per s
    ref_err: np.ndarray


def experiment2(
    case: ExperimentCase,
    s_values: Sequence[float],
    seed: int | None = None,
    methods: Sequence[str] = METHODS,
) -> Experiment2Result:
    """Scaling study: one prior draw, targets s * draw over a grid of s.

    The prior standard deviations for the log-conductivity and the contact
    strengths are scaled along with the target; the noise level tracks the
    absolute size of the reference data and so does not vanish with s.
    """
    methods = tuple(methods)
    seed = case.seed if seed is None else seed
    s_values = np.asarray(list(s_values), dtype=float)
    if np.any(s_values <= 0):
        raise ValueError("scaling factors must be positive")
    meas, rec = build_models(case)
    meas_prior = build_prior(meas.param, case.measurement.gammas)
    meas_noise = build_noise_cov_for_side(meas, case.measurement.deltas)
    rng = sample_rng(seed, 0)
    draw = draw_target(meas, meas_prior, rng)
    theta_hat = meas_noise.draw_raw(rng)  # one noise realization for the whole sweep

    res = {m: np.empty(len(s_values)) for m in methods}
    err = {m: np.empty(len(s_values)) for m in methods}
    ref_res = np.empty(len(s_values))
    ref_err = np.empty(len(s_values))
    for k, s in enumerate(s_values):
        target = float(s) * draw
        record = simulate_measurements(meas, target, meas_noise, rng, theta_hat=theta_hat)
        recon = Reconstructor(rec, gammas=case.reconstruction.gammas.scaled(float(s)))
        ref_res[k] = float(np.linalg.norm(recon.lam0 - record.upsilon))
        ref_err[k] = _pc_norm(meas.partition, target.kappa)
        for method in methods:
            outcome = recon.run(method, record.upsilon)
            ind = indicators(rec, meas, outcome.upsilon, target, record.upsilon, recon.lam0)
            res[method][k] = ind.res
            err[method][k] = ind.err
    return Experiment2Result(
        case=case,
        methods=methods,
        s_values=s_values,
        res=res,
        err=err,
        ref_res=ref_res,
        ref_err=ref_err,
    )


# ---------------------------------------------------------------------------
# Serialization (CSV statistics, structured-text records)
# ---------------------------------------------------------------------------


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Row-major decimal text block; round-trips bit-exactly."""
    lines = [" ".join(repr(float(x)) for x in row) for row in np.atleast_2d(matrix)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix(path: str | Path) -> np.ndarray:
    rows = [
        [float(tok) for tok in line.split()]
        for line in Path(path).read_text().splitlines()
        if line.strip()
    ]
    return np.array(rows)


def param_to_json(pv: ParamVector) -> dict:
    out = {"kind": pv.kind, "kappa": pv.kappa.tolist(), "rho": pv.rho.tolist()}
    if pv.xi is not None:
        out["xi"] = pv.xi.tolist()
    return out


def param_from_json(data: dict) -> ParamVector:
    xi = np.array(data["xi"]) if "xi" in data else None
    return ParamVector(np.array(data["kappa"]), np.array(data["rho"]), xi)


def write_measurement(record: MeasurementRecord, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_matrix(directory / "upsilon.txt", record.upsilon)
    meta = {
        "target": param_to_json(record.target),
        "deltas": list(record.deltas),
    }
    (directory / "record.json").write_text(json.dumps(meta, indent=1))


def read_measurement(directory: str | Path) -> tuple[np.ndarray, ParamVector, tuple]:
    directory = Path(directory)
    upsilon = read_matrix(directory / "upsilon.txt")
    meta = json.loads((directory / "record.json").read_text())
    return upsilon, param_from_json(meta["target"]), tuple(meta["deltas"])


def write_reconstruction(outcome: ReconOutcome, path: str | Path) -> None:
    data = {
        "method": outcome.method,
        "upsilon": param_to_json(outcome.upsilon),
        "components": [param_to_json(c) for c in outcome.components],
        "clamped": bool(outcome.clamped),
        "diagnostics": outcome.diagnostics,
        "flat": outcome.upsilon.to_flat().tolist(),
    }
    Path(path).write_text(json.dumps(data, indent=1))


def write_experiment1_csv(result: Experiment1Result, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "log10_mean_res_rel", "log10_mean_err"])
        writer.writeheader()
        for row in result.summary_rows():
            writer.writerow(
                {k: (v if k == "method" else _fmt(v)) for k, v in row.items()}
            )
    fields = ["sample", "ref_res", "retained"]
    for m in result.methods:
        tag = m.replace(",", "")
        fields += [f"res_{tag}", f"res_rel_{tag}", f"err_{tag}", f"err_rel_{tag}", f"clamped_{tag}"]
    if result.eta23_sign_corr is not None:
        fields.append("eta23_sign_corr")
    with open(directory / "samples.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for i in range(len(result.ref_res)):
            row = {
                "sample": i,
                "ref_res": _fmt(result.ref_res[i]),
                "retained": int(result.retained[i]),
            }
            if result.eta23_sign_corr is not None:
                row["eta23_sign_corr"] = _fmt(result.eta23_sign_corr[i])
            for m in result.methods:
                tag = m.replace(",", "")
                t = result.table[m]
                row[f"res_{tag}"] = _fmt(t["res"][i])
                row[f"res_rel_{tag}"] = _fmt(t["res_rel"][i])
                row[f"err_{tag}"] = _fmt(t["err"][i])
                row[f"err_rel_{tag}"] = _fmt(t["err_rel"][i])
                row[f"clamped_{tag}"] = int(t["clamped"][i])
            writer.writerow(row)
    # Sorted distributions over the full sample, for distribution-style plots.
    with open(directory / "distributions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["rank"]
        for m in result.methods:
            tag = m.replace(",", "")
            header += [f"res_rel_{tag}", f"err_rel_{tag}"]
        writer.writerow(header)
        n = len(result.ref_res)
        sorted_cols = {}
        for m in result.methods:
            sorted_cols[m] = (
                np.sort(result.table[m]["res_rel"]),
                np.sort(result.table[m]["err_rel"]),
            )
        for i in range(n):
            row = [i]
            for m in result.methods:
                row += [_fmt(sorted_cols[m][0][i]), _fmt(sorted_cols[m][1][i])]
            writer.writerow(row)


def write_experiment2_csv(result: Experiment2Result, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["s", "ref_res", "ref_err"]
        for m in result.methods:
            tag = m.replace(",", "")
            header += [f"res_{tag}", f"err_{tag}"]
        writer.writerow(header)
        for k, s in enumerate(result.s_values):
            row = [_fmt(s), _fmt(result.ref_res[k]), _fmt(result.ref_err[k])]
            for m in result.methods:
                row += [_fmt(result.res[m][k]), _fmt(result.err[m][k])]
            writer.writerow(row)


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))
