"""Outcome-blind simulation engine.

Covariate rows are resampled from a real cohort; treatment and outcome are
then generated from known logistic mechanisms.  Because the real A and Y
columns are never read, model rankings produced here cannot be tuned to the
real treatment-outcome relationship.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.optimize import brentq

from .dataset import AnalyticDataset, DatasetSchema
from .errors import EstimationError, InputError, SpecError
from .glm import bounded_expit
from .propensity import PsConfig, PsModelId, fit_ps, outcome_support_set
from .tmle import estimate_ate, fit_initial_outcome

MC_SE_TARGET = 5e-4
CALIBRATION_TOL = 0.005
CALIBRATION_DRAW = 1_000_000


@dataclass(frozen=True)
class CovariateSample:
    """Covariate rows with their column names; no treatment, no outcome."""

    names: tuple[str, ...]
    matrix: np.ndarray

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise InputError("covariate matrix must be two-dimensional")
        if matrix.shape[1] != len(self.names):
            raise InputError("covariate matrix width does not match names")
        if not np.all(np.isfinite(matrix)):
            raise InputError("covariates contain non-finite values")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "matrix", matrix)

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_dataset(cls, dataset) -> "CovariateSample":
        return cls(tuple(dataset.feature_names), dataset.feature_matrix())

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.names.index(name)
        except ValueError:
            raise SpecError(f"unknown covariate {name!r}") from None
        return self.matrix[:, j]


@dataclass(frozen=True)
class MechanismSpec:
    """Known treatment and outcome mechanisms, both logistic.

    Coefficient maps are sparse: covariates absent from a map have
    coefficient zero.  When a target marginal is given the corresponding
    intercept is meant to be replaced by :func:`calibrate_mechanism` before
    data are generated.
    """

    treatment_intercept: float
    treatment_coefficients: Mapping[str, float]
    outcome_intercept: float
    outcome_treatment_coefficient: float
    outcome_coefficients: Mapping[str, float]
    target_treatment_prevalence: float | None = None
    target_event_rate: float | None = None

    def __post_init__(self):
        object.__setattr__(
            self, "treatment_coefficients", dict(self.treatment_coefficients))
        object.__setattr__(
            self, "outcome_coefficients", dict(self.outcome_coefficients))

    def validate(self, feature_names) -> None:
        known = set(feature_names)
        for label, coefs in (("treatment", self.treatment_coefficients),
                             ("outcome", self.outcome_coefficients)):
            for name, value in coefs.items():
                if name not in known:
                    raise SpecError(
                        f"{label} mechanism references unknown covariate {name!r}")
                if not np.isfinite(value):
                    raise SpecError(f"{label} coefficient for {name!r} is not finite")
        for label, value in (("treatment_intercept", self.treatment_intercept),
                             ("outcome_intercept", self.outcome_intercept),
                             ("outcome_treatment_coefficient",
                              self.outcome_treatment_coefficient)):
            if not np.isfinite(value):
                raise SpecError(f"{label} is not finite")
        for label, target in (("treatment prevalence", self.target_treatment_prevalence),
                              ("event rate", self.target_event_rate)):
            if target is not None and not 0.0 < target < 1.0:
                raise SpecError(f"target {label} must lie strictly inside (0, 1)")

    @property
    def needs_calibration(self) -> bool:
        return (self.target_treatment_prevalence is not None
                or self.target_event_rate is not None)

    def treatment_lp(self, sample: CovariateSample) -> np.ndarray:
        lp = np.full(sample.m, self.treatment_intercept)
        for name, coef in self.treatment_coefficients.items():
            lp += coef * sample.column(name)
        return lp

    def outcome_lp(self, sample: CovariateSample, a) -> np.ndarray:
        lp = np.full(sample.m, self.outcome_intercept)
        lp += self.outcome_treatment_coefficient * np.asarray(a, dtype=np.float64)
        for name, coef in self.outcome_coefficients.items():
            lp += coef * sample.column(name)
        return lp

    def to_json(self) -> str:
        payload = {
            "treatment_intercept": self.treatment_intercept,
            "treatment_coefficients": dict(self.treatment_coefficients),
            "outcome_intercept": self.outcome_intercept,
            "outcome_treatment_coefficient": self.outcome_treatment_coefficient,
            "outcome_coefficients": dict(self.outcome_coefficients),
            "target_treatment_prevalence": self.target_treatment_prevalence,
            "target_event_rate": self.target_event_rate,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MechanismSpec":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SpecError(f"mechanism is not valid JSON: {exc}") from None
        if not isinstance(payload, dict):
            raise SpecError("mechanism JSON must be an object")
        known = {
            "treatment_intercept", "treatment_coefficients", "outcome_intercept",
            "outcome_treatment_coefficient", "outcome_coefficients",
            "target_treatment_prevalence", "target_event_rate",
        }
        extra = set(payload) - known
        if extra:
            raise SpecError(f"unknown mechanism field {sorted(extra)[0]!r}")
        missing = {
            "treatment_intercept", "outcome_intercept",
            "outcome_treatment_coefficient",
        } - set(payload)
        if missing:
            raise SpecError(f"mechanism field {sorted(missing)[0]!r} is required")
        try:
            return cls(
                treatment_intercept=float(payload["treatment_intercept"]),
                treatment_coefficients={
                    str(k): float(v)
                    for k, v in dict(payload.get("treatment_coefficients", {})).items()},
                outcome_intercept=float(payload["outcome_intercept"]),
                outcome_treatment_coefficient=float(
                    payload["outcome_treatment_coefficient"]),
                outcome_coefficients={
                    str(k): float(v)
                    for k, v in dict(payload.get("outcome_coefficients", {})).items()},
                target_treatment_prevalence=(
                    None if payload.get("target_treatment_prevalence") is None
                    else float(payload["target_treatment_prevalence"])),
                target_event_rate=(
                    None if payload.get("target_event_rate") is None
                    else float(payload["target_event_rate"])),
            )
        except (TypeError, ValueError, AttributeError) as exc:
            raise SpecError(f"malformed mechanism: {exc}") from None


def _as_seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _counter_child(master: np.random.SeedSequence, counter: int) -> np.random.SeedSequence:
    # stateless equivalent of master.spawn(): child identity depends only on
    # the counter, never on how many children were spawned before
    return np.random.SeedSequence(
        entropy=master.entropy, spawn_key=tuple(master.spawn_key) + (counter,))


def bootstrap_covariates(dataset, m=None, seed=0) -> CovariateSample:
    """Resample covariate rows with replacement; A and Y are never read."""
    if m is None:
        m = dataset.n
    m = int(m)
    if m < 1:
        raise InputError("bootstrap size m must be at least 1")
    rng = np.random.default_rng(_as_seed_sequence(seed))
    idx = rng.integers(0, dataset.n, size=m)
    return CovariateSample(tuple(dataset.feature_names),
                           dataset.feature_matrix()[idx])


def calibrate_mechanism(spec: MechanismSpec, covariates: CovariateSample,
                        seed=0, n_mc: int = CALIBRATION_DRAW,
                        tol: float = CALIBRATION_TOL) -> MechanismSpec:
    """Replace intercepts so target marginals hold on a Monte Carlo draw.

    Each requested intercept is found by 1-D root finding over a fixed
    n_mc-row resample of the covariates; the treatment intercept is solved
    first because the event rate is marginal over generated treatment.
    """
    spec.validate(covariates.names)
    if not spec.needs_calibration:
        return spec
    rng = np.random.default_rng(_as_seed_sequence(seed))
    idx = rng.integers(0, covariates.m, size=int(n_mc))
    draw = CovariateSample(covariates.names, covariates.matrix[idx])

    t_intercept = spec.treatment_intercept
    if spec.target_treatment_prevalence is not None:
        base = spec.treatment_lp(draw) - spec.treatment_intercept
        t_intercept = _solve_intercept(base, spec.target_treatment_prevalence)
    calibrated = replace(spec, treatment_intercept=t_intercept)

    o_intercept = spec.outcome_intercept
    if spec.target_event_rate is not None:
        p_a = bounded_expit(calibrated.treatment_lp(draw))
        a_mc = (rng.random(draw.m) < p_a).astype(np.float64)
        base = calibrated.outcome_lp(draw, a_mc) - calibrated.outcome_intercept
        o_intercept = _solve_intercept(base, spec.target_event_rate)
    calibrated = replace(calibrated, outcome_intercept=o_intercept)

    _check_calibration(calibrated, draw, a_seed=rng, tol=tol)
    return calibrated


def _solve_intercept(base_lp: np.ndarray, target: float) -> float:
    def gap(c):
        return float(np.mean(bounded_expit(base_lp + c))) - target

    lo, hi = -60.0, 60.0
    if gap(lo) > 0 or gap(hi) < 0:
        raise SpecError("target marginal unreachable by intercept calibration")
    return float(brentq(gap, lo, hi, xtol=1e-10))


def _check_calibration(spec, draw, a_seed, tol) -> None:
    p_a = bounded_expit(spec.treatment_lp(draw))
    if spec.target_treatment_prevalence is not None:
        achieved = float(np.mean(p_a))
        if abs(achieved - spec.target_treatment_prevalence) > tol:
            raise SpecError(
                f"treatment prevalence {achieved:.4f} misses target "
                f"{spec.target_treatment_prevalence:.4f} by more than {tol}")
    if spec.target_event_rate is not None:
        a_mc = (a_seed.random(draw.m) < p_a).astype(np.float64)
        achieved = float(np.mean(bounded_expit(spec.outcome_lp(draw, a_mc))))
        if abs(achieved - spec.target_event_rate) > tol:
            raise SpecError(
                f"event rate {achieved:.4f} misses target "
                f"{spec.target_event_rate:.4f} by more than {tol}")


def inject_mechanisms(covariates: CovariateSample, spec: MechanismSpec,
                      seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Draw synthetic treatment then outcome from the known mechanisms."""
    spec.validate(covariates.names)
    rng = np.random.default_rng(_as_seed_sequence(seed))
    p_a = bounded_expit(spec.treatment_lp(covariates))
    a = (rng.random(covariates.m) < p_a).astype(np.int64)
    p_y = bounded_expit(spec.outcome_lp(covariates, a))
    y = (rng.random(covariates.m) < p_y).astype(np.int64)
    return a, y


@dataclass(frozen=True)
class TrueEffect:
    psi: float
    mc_se: float
    n_mc: int


def true_effect(spec: MechanismSpec, covariates: CovariateSample,
                n_mc: int = CALIBRATION_DRAW, seed=0) -> TrueEffect:
    """g-computation of the risk difference under the known mechanism.

    The Monte Carlo size doubles until the standard error of the mean is
    at most MC_SE_TARGET; each row's effect is bounded, so at most a few
    doublings are ever needed.
    """
    spec.validate(covariates.names)
    n_mc = int(n_mc)
    if n_mc < 10 ** 5:
        raise InputError("n_mc must be at least 1e5")
    base = spec.outcome_lp(covariates, np.zeros(covariates.m))
    delta_rows = bounded_expit(base + spec.outcome_treatment_coefficient) \
        - bounded_expit(base)
    ss = _as_seed_sequence(seed)
    while True:
        rng = np.random.default_rng(ss)
        draws = delta_rows[rng.integers(0, covariates.m, size=n_mc)]
        psi = float(np.mean(draws))
        mc_se = float(np.std(draws) / math.sqrt(n_mc))
        if mc_se <= MC_SE_TARGET:
            return TrueEffect(psi=psi, mc_se=mc_se, n_mc=n_mc)
        n_mc *= 2


@dataclass(frozen=True)
class ReplicateResult:
    """One model's estimate on one synthetic replicate."""

    model_number: int
    replicate: int
    psi_hat: float
    se: float
    ci_lower: float
    ci_upper: float
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass(frozen=True)
class ModelPerformance:
    model_number: int
    n_ok: int
    n_failed: int
    bias: float
    variance: float
    mse: float
    coverage: float


@dataclass(frozen=True)
class SimulationReport:
    """Per-replicate estimates and per-model aggregates against psi_true."""

    rows: tuple[ReplicateResult, ...]
    aggregates: tuple[ModelPerformance, ...]
    model_numbers: tuple[int, ...]
    n_replicates: int
    master_seed: int
    psi_true: float
    psi_true_mc_se: float
    bootstrap_size: int
    spec: MechanismSpec = field(repr=False)

    def performance(self, model_number: int) -> ModelPerformance:
        for agg in self.aggregates:
            if agg.model_number == model_number:
                return agg
        raise InputError(f"model {model_number} not in this report")

    def recommended_model(self) -> int | None:
        """Lowest MSE; ties broken by |bias|, then by model number.

        None when every replicate failed for every model.
        """
        usable = [a for a in self.aggregates if a.n_ok > 0]
        if not usable:
            return None
        return min(usable, key=lambda a: (a.mse, abs(a.bias), a.model_number)
                   ).model_number

    def to_rows_csv(self) -> str:
        buf = io.StringIO()
        buf.write("model,replicate,estimate,se,ci_lower,ci_upper,error\n")
        for r in self.rows:
            err = "" if r.error is None else r.error.replace(",", ";")
            buf.write(f"{r.model_number},{r.replicate},{r.psi_hat!r},{r.se!r},"
                      f"{r.ci_lower!r},{r.ci_upper!r},{err}\n")
        return buf.getvalue()

    def to_long_csv(self) -> str:
        """Plot-ready (model, metric, value) rows for bias, MSE, coverage."""
        buf = io.StringIO()
        buf.write("model,metric,value\n")
        for agg in self.aggregates:
            buf.write(f"{agg.model_number},bias,{agg.bias!r}\n")
            buf.write(f"{agg.model_number},mse,{agg.mse!r}\n")
            buf.write(f"{agg.model_number},coverage,{agg.coverage!r}\n")
        return buf.getvalue()

    def to_summary_text(self) -> str:
        lines = [
            "simulation comparison",
            f"  replicates: {self.n_replicates}",
            f"  bootstrap size: {self.bootstrap_size}",
            f"  master seed: {self.master_seed}",
            f"  psi_true: {self.psi_true:.6f} (mc se {self.psi_true_mc_se:.2e})",
        ]
        for agg in self.aggregates:
            lines.append(
                f"  model {agg.model_number}: bias {agg.bias:+.6f}  "
                f"mse {agg.mse:.3e}  coverage {agg.coverage:.3f}  "
                f"ok {agg.n_ok}/{agg.n_ok + agg.n_failed}")
            if agg.n_failed:
                lines.append(
                    f"    {agg.n_failed} replicate(s) failed and were excluded")
        best = self.recommended_model()
        if best is None:
            lines.append("  recommended model: none (every replicate failed)")
        else:
            lines.append(f"  recommended model: {best}")
        return "\n".join(lines)

    def to_json(self) -> str:
        payload = {
            "replicates": self.n_replicates,
            "bootstrap_size": self.bootstrap_size,
            "master_seed": self.master_seed,
            "psi_true": self.psi_true,
            "psi_true_mc_se": self.psi_true_mc_se,
            "recommended_model": self.recommended_model(),
            "models": [
                {
                    "model": a.model_number,
                    "bias": a.bias,
                    "variance": a.variance,
                    "mse": a.mse,
                    "coverage": a.coverage,
                    "n_ok": a.n_ok,
                    "n_failed": a.n_failed,
                }
                for a in self.aggregates
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def aggregate_rows(rows, psi_true: float) -> tuple[ModelPerformance, ...]:
    """Recompute per-model aggregates from per-replicate rows.

    MSE is assembled as bias^2 + variance so the identity MSE >= bias^2
    holds exactly; the two formulas agree to rounding error.
    """
    by_model: dict[int, list[ReplicateResult]] = {}
    for r in rows:
        by_model.setdefault(r.model_number, []).append(r)
    out = []
    for number in sorted(by_model):
        good = np.array([r.psi_hat for r in by_model[number] if not r.failed])
        n_failed = sum(1 for r in by_model[number] if r.failed)
        if good.size == 0:
            out.append(ModelPerformance(number, 0, n_failed,
                                        float("nan"), float("nan"),
                                        float("nan"), float("nan")))
            continue
        bias = float(np.mean(good) - psi_true)
        variance = float(np.var(good))
        covered = [
            r for r in by_model[number]
            if not r.failed and r.ci_lower <= psi_true <= r.ci_upper
        ]
        out.append(ModelPerformance(
            model_number=number,
            n_ok=int(good.size),
            n_failed=n_failed,
            bias=bias,
            variance=variance,
            mse=bias * bias + variance,
            coverage=len(covered) / good.size,
        ))
    return tuple(out)


def run_comparison(dataset, models, spec: MechanismSpec, n_replicates: int,
                   seed: int = 0, config: PsConfig | None = None,
                   m=None, n_mc: int = CALIBRATION_DRAW) -> SimulationReport:
    """Rank PS models by bias, MSE, and coverage on synthetic replicates.

    The report is a pure function of the covariate rows, the mechanism, the
    replicate count, and the seed: the real A and Y columns are never read.
    Replicate streams are indexed by replicate number, so results do not
    depend on evaluation order.  A replicate on which a model's estimation
    raises is recorded with the error and excluded from that model's
    aggregates.
    """
    models = tuple(
        PsModelId.from_number(m_) if isinstance(m_, (int, np.integer)) else m_
        for m_ in models)
    if not models:
        raise InputError("models must be nonempty")
    if len({m_.model_number for m_ in models}) != len(models):
        raise InputError("duplicate models requested")
    n_replicates = int(n_replicates)
    if n_replicates < 2:
        raise InputError("at least 2 replicates are required")
    if not isinstance(seed, (int, np.integer)):
        raise InputError("seed must be an integer")
    config = config or PsConfig()
    config.validate()
    spec.validate(dataset.feature_names)

    master = np.random.SeedSequence(int(seed))
    source = CovariateSample.from_dataset(dataset)
    if spec.needs_calibration:
        spec = calibrate_mechanism(spec, source, seed=_counter_child(master, 0))
    truth = true_effect(spec, source, n_mc=n_mc, seed=_counter_child(master, 1))

    if m is None:
        m = dataset.n
    rows: list[ReplicateResult] = []
    for r in range(n_replicates):
        rep_seed = _counter_child(master, 2 + r)
        rows.extend(_one_replicate(r, rep_seed, dataset, models, spec, config, m))

    rows_t = tuple(sorted(rows, key=lambda x: (x.model_number, x.replicate)))
    return SimulationReport(
        rows=rows_t,
        aggregates=aggregate_rows(rows_t, truth.psi),
        model_numbers=tuple(m_.model_number for m_ in models),
        n_replicates=n_replicates,
        master_seed=int(seed),
        psi_true=truth.psi,
        psi_true_mc_se=truth.mc_se,
        bootstrap_size=int(m),
        spec=spec,
    )


def _one_replicate(r, rep_seed, dataset, models, spec, config, m):
    s_boot, s_inject, s_shared, s_models = rep_seed.spawn(4)
    sample = bootstrap_covariates(dataset, m=m, seed=s_boot)
    a, y = inject_mechanisms(sample, spec, seed=s_inject)
    synthetic = AnalyticDataset.from_arrays(
        subject_id=[f"r{r}s{i}" for i in range(sample.m)],
        a=a,
        y=y,
        delta=np.ones(sample.m, dtype=np.int64),
        dense=sample.matrix,
        dense_names=sample.names,
        schema=DatasetSchema(),
    )

    def fail_all(exc, targets):
        msg = f"{type(exc).__name__}: {exc}"
        return [
            ReplicateResult(m_.model_number, r, float("nan"), float("nan"),
                            float("nan"), float("nan"), error=msg)
            for m_ in targets
        ]

    s_support, s_outcome = s_shared.spawn(2)
    try:
        outcome_fit = fit_initial_outcome(
            synthetic, seed=s_outcome, n_folds=config.n_folds,
            n_lambda=config.n_lambda)
    except EstimationError as exc:
        return fail_all(exc, models)

    forced = None
    if any(m_.uses_forced_set for m_ in models):
        try:
            forced = outcome_support_set(synthetic, seed=s_support, config=config)
        except EstimationError as exc:
            rows = fail_all(exc, [m_ for m_ in models if m_.uses_forced_set])
            models = [m_ for m_ in models if not m_.uses_forced_set]
            rows.extend(_estimate_models(
                r, s_models, synthetic, models, config, outcome_fit, forced))
            return rows

    return _estimate_models(
        r, s_models, synthetic, models, config, outcome_fit, forced)


def _estimate_models(r, s_models, synthetic, models, config, outcome_fit, forced):
    rows = []
    seeds = s_models.spawn(len(models)) if models else []
    for m_, s_m in zip(models, seeds):
        try:
            ps = fit_ps(m_, synthetic, config=config, seed=s_m,
                        outcome_fit=outcome_fit if m_.uses_collaborative else None,
                        forced_set=forced if m_.uses_forced_set else None)
            est = estimate_ate(synthetic, ps, outcome_fit)
        except EstimationError as exc:
            rows.append(ReplicateResult(
                m_.model_number, r, float("nan"), float("nan"), float("nan"),
                float("nan"), error=f"{type(exc).__name__}: {exc}"))
            continue
        rows.append(ReplicateResult(
            m_.model_number, r, est.psi, est.se, est.ci_lower, est.ci_upper))
    return rows
