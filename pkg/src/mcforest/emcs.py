"""Empirical Monte Carlo harness on a synthetic base population.

A population with a selection index and an integer baseline outcome (months
employed out of 33) is generated once. True effects are attached, a
validation sample is set aside, and each replication draws a training
sample, assigns treatment from the (shifted) propensity, trains the
estimators and scores their ATE, GATE and IATE predictions.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import optimize, special

from .data import FeatureMeta, Sample

log = logging.getLogger(__name__)

ZERO, SINE, LINEAR = "zero", "sine_of_propensity", "linear_covariate"
N_AGE = 32


@dataclass
class PopulationConfig:
    size: int = 60000
    n_continuous: int = 4
    n_binary: int = 3
    # index coefficients in feature order: continuous, binary, earnings, female, age
    # (earnings enter as a standardized log, age rescaled to [-1, 1])
    propensity_intercept: float = -3.0
    propensity_coef: Optional[Sequence[float]] = None
    outcome_intercept: float = 0.0
    outcome_coef: Optional[Sequence[float]] = None
    outcome_noise: float = 3.5
    seed: int = 0

    @property
    def n_features(self) -> int:
        return self.n_continuous + self.n_binary + 3

    def feature_names(self) -> list:
        return ([f"x{i}" for i in range(self.n_continuous)] + [f"b{i}" for i in range(self.n_binary)]
                + ["earnings", "female", "age"])

    def _coef(self, given, default) -> np.ndarray:
        if given is None:
            return np.asarray(default, dtype=np.float64)
        c = np.asarray(given, dtype=np.float64)
        if c.size != self.n_features:
            raise ValueError(f"expected {self.n_features} coefficients, got {c.size}")
        return c

    def propensity_coefficients(self) -> np.ndarray:
        default = np.concatenate([
            [1.5] + [0.1] * (self.n_continuous - 1),
            [0.1] * self.n_binary,
            [0.0, 0.0, 0.0],
        ])
        return self._coef(self.propensity_coef, default)

    def outcome_coefficients(self) -> np.ndarray:
        default = np.concatenate([
            [1.5] + list(np.linspace(0.5, -0.3, self.n_continuous - 1)),
            np.linspace(0.2, -0.2, self.n_binary) if self.n_binary else [],
            [0.8, -0.4, -0.8],
        ])
        return self._coef(self.outcome_coef, default)


@dataclass
class Population:
    x: np.ndarray
    features: list
    index: np.ndarray
    p: np.ndarray
    y0: np.ndarray

    @property
    def size(self) -> int:
        return int(self.y0.size)

    def column(self, name: str) -> np.ndarray:
        names = [f.name for f in self.features]
        return self.x[:, names.index(name)]


@dataclass(frozen=True)
class EffectSpec:
    kind: str = SINE
    delta: float = 2.0
    covariate: str = "earnings"

    def __post_init__(self):
        if self.kind not in (ZERO, SINE, LINEAR):
            raise ValueError(f"unknown effect kind {self.kind!r}")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")

    @property
    def label(self) -> str:
        if self.kind == ZERO:
            return "zero"
        return f"{'sine' if self.kind == SINE else 'linear'}-{self.delta:g}"


@dataclass
class StudyConfig:
    n_train: int = 1000
    replications: int = 100
    n_validation: int = 5000
    selection: str = "logit_shifted"  # or "rct"
    target_share: float = 0.5
    estimators: Sequence = ("OneF.MCE",)
    n_trees: int = 250
    feature_draw_mean: Optional[float] = None
    groupings: Sequence[str] = ("female", "age")
    iate_points: int = 200
    iate_se: bool = True
    seed: int = 0
    n_threads: int = 1

    def __post_init__(self):
        if self.selection not in ("logit_shifted", "rct"):
            raise ValueError(f"unknown selection {self.selection!r}")


def _age_weights() -> np.ndarray:
    # youngest category about three times as frequent as the oldest
    w = np.linspace(3.0, 1.0, N_AGE)
    return w / w.sum()


def gen_population(cfg: PopulationConfig) -> Population:
    """Features, true propensity and baseline outcome ``Y0`` in ``{0, ..., 33}``."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x706F70]))
    n = cfg.size
    cont = rng.normal(size=(n, cfg.n_continuous))
    if cfg.n_continuous > 1:
        cont[:, 1] = rng.uniform(-1.7, 1.7, n)
    binary = (rng.random((n, cfg.n_binary)) < np.linspace(0.3, 0.6, cfg.n_binary)).astype(np.float64)
    earnings = np.round(np.exp(rng.normal(8.4, 0.4, n)), 0)
    female = (rng.random(n) < 0.44).astype(np.float64)
    age = rng.choice(N_AGE, size=n, p=_age_weights()).astype(np.float64)
    x = np.column_stack([cont, binary, earnings, female, age])
    z = x.copy()
    z[:, -3] = (np.log(earnings) - 8.4) / 0.4
    z[:, -1] = age / (N_AGE - 1) * 2.0 - 1.0
    index = cfg.propensity_intercept + z @ cfg.propensity_coefficients()
    p = special.expit(index)
    lin = cfg.outcome_intercept + z @ cfg.outcome_coefficients() + cfg.outcome_noise * rng.normal(size=n)
    y0 = np.clip(np.round(33.0 * special.expit(lin)), 0, 33)
    features = [FeatureMeta(name) for name in cfg.feature_names()]
    return Population(x, features, index, p, y0)


def spec_iate(pop: Population, spec: EffectSpec) -> np.ndarray:
    """True IATEs standardized on the population to mean 0 and SD ``delta``."""
    if spec.kind == ZERO or spec.delta == 0:
        return np.zeros(pop.size)
    if spec.kind == SINE:
        xi = np.sin(1.25 * np.pi * pop.p / pop.p.max())
    else:
        xi = pop.column(spec.covariate).astype(np.float64)
    sd = xi.std()
    if sd == 0:
        raise ValueError("effect driver has zero variance in the population")
    return spec.delta * (xi - xi.mean()) / sd


def gen_ite(iate, seed, spec: Optional[EffectSpec] = None) -> np.ndarray:
    """Integer ITEs around the IATEs: ``IATE + (1 - u) + v``.

    ``u ~ Poisson(1)`` and ``v`` rounds ``IATE + u`` down or up at random so
    that the result is an integer with conditional mean ``IATE``. The
    expression is evaluated in the algebraically equal form
    ``floor(IATE + u) + 1 - 2u (+1)``, which is exact in floating point.
    The zero specification returns zeros.
    """
    iate = np.asarray(iate, dtype=np.float64)
    if spec is not None and (spec.kind == ZERO or spec.delta == 0):
        return np.zeros_like(iate)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.poisson(1.0, iate.shape).astype(np.float64)
    vstar = rng.random(iate.shape)
    base = np.floor(iate + u)
    vdiff = (iate + u) - base
    up = vstar <= vdiff
    return base + 1.0 - 2.0 * u + up


def shift_propensity(p, target: float) -> np.ndarray:
    """Shift the logit of ``p`` by a constant so that its mean equals ``target``."""
    p = np.asarray(p, dtype=np.float64)
    if not 0.0 < target < 1.0:
        raise ValueError("target share must lie strictly between 0 and 1")
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("propensities must lie strictly between 0 and 1")
    lp = special.logit(p)

    def gap(c):
        return special.expit(lp + c).mean() - target

    lo, hi = -1.0, 1.0
    while gap(lo) > 0:
        lo *= 2.0
        if lo < -1e4:
            raise ValueError("target share unattainable")
    while gap(hi) < 0:
        hi *= 2.0
        if hi > 1e4:
            raise ValueError("target share unattainable")
    c = optimize.bisect(gap, lo, hi, xtol=1e-14, maxiter=400)
    return special.expit(lp + c)


def moments(x) -> tuple:
    """Sample skewness and kurtosis (population moments)."""
    x = np.asarray(x, dtype=np.float64)
    dev = x - x.mean()
    m2 = np.mean(dev ** 2)
    if m2 == 0:
        raise ValueError("zero variance")
    return float(np.mean(dev ** 3) / m2 ** 1.5), float(np.mean(dev ** 4) / m2 ** 2)


def jb_stat(x) -> float:
    """Jarque-Bera statistic ``(R/6)(S^2 + (K-3)^2/4)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 8:
        raise ValueError("need at least 8 values")
    s, k = moments(x)
    return float(x.size / 6.0 * (s * s + (k - 3.0) ** 2 / 4.0))


# ---- estimators ------------------------------------------------------------

@dataclass
class EstimatorOutput:
    ate: tuple  # (point, se)
    gates: dict  # grouping -> (points, ses) ordered by group value
    iate: Optional[tuple] = None  # (points, ses) over the IATE validation points


@dataclass
class Context:
    """What a replication exposes to an estimator; the truth is only for test stubs."""

    replication: int
    rng: np.random.Generator
    group_values: dict
    iate_rows: np.ndarray
    truth: dict
    seed: int


def forest_estimator(label: str, study: StudyConfig) -> Callable:
    """Estimator callable for a variant label such as ``OneF.MCE.Pen.LC-2``."""
    from . import estimator as est
    from .forest import ForestConfig

    spec = est.EstimatorSpec.parse(label)

    def run(train: Sample, X_val: np.ndarray, groups: dict, ctx: Context) -> EstimatorOutput:
        cfg = ForestConfig(n_trees=study.n_trees, criterion=spec.criterion, seed=ctx.seed,
                           feature_draw_mean=study.feature_draw_mean, n_threads=study.n_threads)
        forest = est.fit(train, cfg, spec.center_folds).forest
        routing = forest.route(X_val)
        a = est.ate(forest, X_val, 1, 0, routing=routing)
        gate_out = {}
        for name, z in groups.items():
            tab = est.gates(forest, X_val, z, 1, 0, name=name, routing=routing)
            gate_out[name] = (np.array([e.point for e in tab.estimates]), np.array([e.std_error for e in tab.estimates]))
        iate = None
        if ctx.iate_rows.size:
            iate = est.iates(forest, X_val[ctx.iate_rows], 1, 0, with_se=study.iate_se)
        return EstimatorOutput((a.point, a.std_error), gate_out, iate)

    run.label = spec.label
    return run


# ---- metrics ---------------------------------------------------------------

METRIC_COLUMNS = ["estimator", "parameter", "bias", "sd_true", "sd_est", "mse", "skewness", "kurtosis", "jb",
                  "mean_se", "se_bias", "covp90", "mc_sd", "replications", "failed"]

_Z90 = 1.6448536269514722


def parameter_metrics(est: np.ndarray, se: np.ndarray, truth: np.ndarray) -> dict:
    """Table-style quality measures for ``est``/``se`` of shape ``(R, J)`` against ``truth`` ``(J,)``.

    Bias is signed for a single parameter and mean absolute otherwise.
    """
    est = np.atleast_2d(est)
    se = np.atleast_2d(se)
    R, J = est.shape
    err = est - truth[None, :]
    bias_j = err.mean(axis=0)
    sd_j = est.std(axis=0, ddof=1) if R > 1 else np.zeros(J)
    sd_j[np.ptp(est, axis=0) == 0] = 0.0
    sk, ku, jb = [], [], []
    for j in range(J):
        if R >= 8 and np.ptp(est[:, j]) > 0:
            s, k = moments(est[:, j])
            sk.append(s)
            ku.append(k)
            jb.append(jb_stat(est[:, j]))
    has_se = np.all(np.isfinite(se))
    out = {
        "bias": float(bias_j[0]) if J == 1 else float(np.mean(np.abs(bias_j))),
        "sd_true": float(truth.std()) if J > 1 else 0.0,
        "sd_est": float(np.mean(est.std(axis=1))) if J > 1 else 0.0,
        "mse": float(np.mean(err ** 2)),
        "skewness": float(np.mean(sk)) if sk else math.nan,
        "kurtosis": float(np.mean(ku)) if ku else math.nan,
        "jb": float(np.mean(jb)) if jb else math.nan,
        "mean_se": float(se.mean()) if has_se else math.nan,
        "se_bias": float(np.mean(se.mean(axis=0) - sd_j)) if has_se else math.nan,
        "covp90": float(np.mean(np.abs(err) <= _Z90 * se)) if has_se else math.nan,
        "mc_sd": float(np.mean(sd_j)),
    }
    return out


@dataclass
class StudyResult:
    rows: list
    raw: dict = field(default_factory=dict)  # estimator -> parameter -> {"est", "se", "truth"}
    failed: dict = field(default_factory=dict)
    seconds: float = 0.0

    def row(self, estimator: str, parameter: str) -> dict:
        for r in self.rows:
            if r["estimator"] == estimator and r["parameter"] == parameter:
                return r
        raise KeyError((estimator, parameter))

    def write_csv(self, path, header_lines=()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def run_study(study: StudyConfig, pop_cfg: PopulationConfig, spec: EffectSpec, estimators=None,
              population: Optional[Population] = None) -> StudyResult:
    """Run the replication loop and compute the metric grid.

    ``estimators`` defaults to ``study.estimators``; entries are variant labels
    or callables ``f(train, X_val, groups, ctx) -> EstimatorOutput``.
    """
    t0 = time.perf_counter()
    pop = population if population is not None else gen_population(pop_cfg)
    iate_pop = spec_iate(pop, spec)
    ite_pop = gen_ite(iate_pop, np.random.default_rng(np.random.SeedSequence([study.seed, 0x697465])), spec)
    y1_pop = pop.y0 + ite_pop
    if study.selection == "rct":
        p_assign = np.full(pop.size, study.target_share)
    else:
        p_assign = shift_propensity(pop.p, study.target_share)

    rng0 = np.random.default_rng(np.random.SeedSequence([study.seed, 0x76616C]))
    perm = rng0.permutation(pop.size)
    val = np.sort(perm[: study.n_validation])
    pool = perm[study.n_validation:]
    if pool.size < study.n_train:
        raise ValueError("population too small for the requested training size")
    X_val = pop.x[val]
    groups = {name: pop.column(name)[val] for name in study.groupings}
    group_values = {name: np.unique(z) for name, z in groups.items()}
    iate_rows = np.sort(rng0.choice(val.size, size=min(study.iate_points, val.size), replace=False)) \
        if study.iate_points else np.zeros(0, dtype=np.int64)
    truth = {"ate": np.array([iate_pop[val].mean()]),
             "gates": {name: np.array([iate_pop[val][z == v].mean() for v in group_values[name]])
                       for name, z in groups.items()},
             "iate": iate_pop[val][iate_rows]}

    entries = list(estimators if estimators is not None else study.estimators)
    fns = [forest_estimator(e, study) if isinstance(e, str) else e for e in entries]
    labels = [getattr(f, "label", getattr(f, "__name__", f"estimator{i}")) for i, f in enumerate(fns)]
    store = {lab: {"ate": ([], []), **{f"gate:{g}": ([], []) for g in groups}, "iate": ([], [])} for lab in labels}
    failed = {lab: 0 for lab in labels}

    for r in range(study.replications):
        rs = np.random.SeedSequence([study.seed, 1, r])
        rng = np.random.default_rng(rs)
        rows = np.sort(rng.choice(pool, size=study.n_train, replace=False))
        d = (rng.random(rows.size) < p_assign[rows]).astype(np.int64)
        y = np.where(d == 1, y1_pop[rows], pop.y0[rows])
        train = Sample(y, d, pop.x[rows], pop.features, 2)
        rep_seed = int(rng.integers(0, 2 ** 31 - 1))
        for lab, fn in zip(labels, fns):
            ctx = Context(r, np.random.default_rng(np.random.SeedSequence([study.seed, 2, r])), group_values,
                          iate_rows, truth, rep_seed)
            try:
                out = fn(train, X_val, groups, ctx)
            except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
                failed[lab] += 1
                log.warning("replication %d, %s failed: %s", r, lab, exc)
                continue
            s = store[lab]
            s["ate"][0].append([out.ate[0]])
            s["ate"][1].append([out.ate[1]])
            for g in groups:
                s[f"gate:{g}"][0].append(out.gates[g][0])
                s[f"gate:{g}"][1].append(out.gates[g][1])
            if out.iate is not None:
                s["iate"][0].append(out.iate[0])
                s["iate"][1].append(out.iate[1])

    rows_out, raw = [], {}
    for lab in labels:
        raw[lab] = {}
        params = [("ate", truth["ate"])] + [(f"gate:{g}", truth["gates"][g]) for g in groups] + [("iate", truth["iate"])]
        for pname, tr in params:
            e, s = store[lab][pname]
            if not e:
                continue
            E, S = np.array(e, dtype=np.float64), np.array(s, dtype=np.float64)
            raw[lab][pname] = {"est": E, "se": S, "truth": tr}
            row = {"estimator": lab, "parameter": pname}
            row.update(parameter_metrics(E, S, tr))
            row["replications"] = int(E.shape[0])
            row["failed"] = failed[lab]
            rows_out.append(row)
    return StudyResult(rows_out, raw, failed, time.perf_counter() - t0)


def oracle_stub(ctx_noise: float = 1.0) -> Callable:
    """Test estimator: truth plus N(0, s^2) noise, reporting the correct SE ``s``."""

    def run(train, X_val, groups, ctx: Context) -> EstimatorOutput:
        t = ctx.truth
        noise = ctx.rng.normal(0.0, ctx_noise)
        gates = {g: (t["gates"][g] + ctx.rng.normal(0.0, ctx_noise, t["gates"][g].size),
                     np.full(t["gates"][g].size, ctx_noise)) for g in groups}
        iate = (t["iate"] + ctx.rng.normal(0.0, ctx_noise, t["iate"].size), np.full(t["iate"].size, ctx_noise))
        return EstimatorOutput((float(t["ate"][0] + noise), ctx_noise), gates, iate)

    run.label = "oracle"
    return run
