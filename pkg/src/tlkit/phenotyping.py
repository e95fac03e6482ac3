"""Cross-validated phenotype prediction and Super Learner ensembling.

Case-study-2 machinery: outcome-blind dimension reduction, a roster of
(algorithm, pre-screener) learners compared by cross-validated AUC, a
convex Super Learner combination fit on pooled out-of-fold predictions,
PPV/sensitivity threshold tables, and external-site validation.

The effective sample size for a binary outcome is the minority class
count; it is surfaced on the feature set and in reports because it, not
n, governs how rich a roster the data can support.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, logit
from scipy.stats import rankdata

from .errors import (
    AlignmentError,
    ConfigError,
    EstimationError,
    InputError,
    UndefinedAUCError,
)
from .folds import stratified_folds
from .glm import (
    GlmFit,
    default_penalty_spec,
    fit_logistic,
    fit_penalized_cv,
    predict_probabilities,
)

SITE_DEVELOPMENT = "development"
SITE_EXTERNAL = "external"

SCREEN_ALL = "retain-all"
SCREEN_LASSO = "lasso-screen"

SCORE_BOUNDS = (1e-6, 1.0 - 1e-6)


def _child(ss: np.random.SeedSequence, counter: int) -> np.random.SeedSequence:
    # counter-based splitting: child k exists independent of fit order
    return np.random.SeedSequence(
        entropy=ss.entropy, spawn_key=tuple(ss.spawn_key) + (counter,)
    )


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1)[0])


def _clip_scores(scores: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(scores, dtype=np.float64), *SCORE_BOUNDS)


# -- labeled features -------------------------------------------------------

@dataclass(frozen=True)
class LabeledFeatureSet:
    """Feature matrix with gold-standard binary labels and a site tag.

    ``origins`` optionally tags each column with its provenance (for
    example "structured" vs "text"); it is carried, never interpreted.
    """

    names: tuple
    X: np.ndarray
    y: np.ndarray
    site: str = SITE_DEVELOPMENT
    origins: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            raise InputError("feature matrix must be 2-dimensional")
        if not np.all(np.isfinite(X)):
            raise InputError("feature matrix contains non-finite values")
        if X.shape[1] != len(self.names):
            raise InputError(
                f"{len(self.names)} names for {X.shape[1]} feature columns"
            )
        if len(set(self.names)) != len(self.names):
            raise InputError("feature names must be unique")
        y = np.asarray(self.y)
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise InputError("labels must be one value per row")
        if not np.all(np.isin(y, (0, 1))):
            raise InputError("labels must be 0/1 with no missing values")
        if self.site not in (SITE_DEVELOPMENT, SITE_EXTERNAL):
            raise InputError(f"unknown site tag {self.site!r}")
        if self.origins is not None:
            origins = tuple(self.origins)
            if len(origins) != len(self.names):
                raise InputError("origins must tag every feature")
            object.__setattr__(self, "origins", origins)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y.astype(np.int64))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def minority_count(self) -> int:
        """Effective sample size: the number of minority-class labels."""
        events = int(self.y.sum())
        return min(events, self.n - events)


def reduce_dimensions_outcome_blind(
    features: LabeledFeatureSet,
    min_nonmodal: int = 5,
    collinear_tol: float = 1e-10,
) -> LabeledFeatureSet:
    """Drop near-zero-variance and perfectly collinear columns using X only.

    A column survives the variance screen when at least ``min_nonmodal``
    rows differ from its most frequent value.  Among survivors, any column
    whose absolute correlation with an earlier kept column is within
    ``collinear_tol`` of 1 is collapsed into that column.  Labels are
    carried through untouched and never read, so the selected columns are
    identical under any relabeling of the same rows.
    """
    if min_nonmodal < 1:
        raise InputError("min_nonmodal must be at least 1")
    X = features.X
    keep = []
    for j in range(features.p):
        values, counts = np.unique(X[:, j], return_counts=True)
        if features.n - int(counts.max()) >= min_nonmodal:
            keep.append(j)
    kept = []
    if keep:
        sub = X[:, keep]
        corr = np.corrcoef(sub, rowvar=False)
        corr = np.atleast_2d(corr)
        for local_j in range(len(keep)):
            duplicate = any(
                abs(corr[local_j, local_k]) >= 1.0 - collinear_tol
                for local_k in kept
            )
            if not duplicate:
                kept.append(local_j)
        kept_global = [keep[local] for local in kept]
    else:
        kept_global = []
    names = tuple(features.names[j] for j in kept_global)
    origins = (
        tuple(features.origins[j] for j in kept_global)
        if features.origins is not None
        else None
    )
    return replace(
        features,
        names=names,
        X=X[:, kept_global],
        origins=origins,
    )


# -- AUC --------------------------------------------------------------------

def _check_scores_labels(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape[0] != labels.shape[0]:
        raise InputError("scores and labels have different lengths")
    if not np.all(np.isfinite(scores)):
        raise InputError("scores contain non-finite values")
    if not np.all(np.isin(labels, (0, 1))):
        raise InputError("labels must be 0/1")
    return scores, labels.astype(np.int64)


def auc(scores, labels) -> float:
    """P(score of a random positive > random negative), ties counted half.

    Computed from average ranks (the Mann-Whitney statistic), which is
    exactly the pairwise win/tie count because average ranks are halves
    and every intermediate here is an exact float.
    """
    scores, labels = _check_scores_labels(scores, labels)
    n1 = int(labels.sum())
    n0 = labels.shape[0] - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedAUCError("AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    u = math.fsum(ranks[labels == 1].tolist()) - n1 * (n1 + 1) / 2.0
    return u / (n1 * n0)


@dataclass(frozen=True)
class AucEstimate:
    """AUC with a large-sample 95% CI from the two-sample U-statistic."""

    auc: float
    se: float
    ci_lower: float
    ci_upper: float
    n_positive: int
    n_negative: int


def auc_ci(scores, labels) -> AucEstimate:
    """AUC with the structural-components variance estimate.

    Per-positive and per-negative placement means are the U-statistic
    projections; their sample variances give the usual asymptotic SE.
    Degenerate cases (a class of size 1, or perfect separation) yield a
    zero variance contribution rather than failing.
    """
    scores, labels = _check_scores_labels(scores, labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAUCError("AUC needs both classes present")
    wins = (pos[:, None] > neg[None, :]).astype(np.float64)
    wins += 0.5 * (pos[:, None] == neg[None, :])
    point = float(wins.mean())
    v10 = wins.mean(axis=1)
    v01 = wins.mean(axis=0)
    s10 = float(np.var(v10, ddof=1)) if pos.size > 1 else 0.0
    s01 = float(np.var(v01, ddof=1)) if neg.size > 1 else 0.0
    se = math.sqrt(s10 / pos.size + s01 / neg.size)
    return AucEstimate(
        auc=point,
        se=se,
        ci_lower=max(0.0, point - 1.96 * se),
        ci_upper=min(1.0, point + 1.96 * se),
        n_positive=int(pos.size),
        n_negative=int(neg.size),
    )


# -- learner roster ---------------------------------------------------------

@dataclass(frozen=True)
class LearnerSpec:
    """One roster entry: a base algorithm coupled with a pre-screener."""

    name: str
    algorithm: str
    screener: str = SCREEN_ALL
    params: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not self.name:
            raise ConfigError("learner name must be nonempty")
        if self.screener not in (SCREEN_ALL, SCREEN_LASSO):
            raise ConfigError(f"unknown screener {self.screener!r}")
        if self.algorithm not in _ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")


def default_roster() -> tuple:
    """Logistic, elastic net (alpha 0.5 and 1), and two boosted-stump
    settings, each crossed with the retain-all and Lasso screeners."""
    bases = (
        ("logistic", "logistic", {}),
        ("enet50", "elastic-net", {"alpha": 0.5}),
        ("enet100", "elastic-net", {"alpha": 1.0}),
        ("gb-d1", "gb-stumps", {"depth": 1, "rounds": 100, "learning_rate": 0.1}),
        ("gb-d2", "gb-stumps", {"depth": 2, "rounds": 200, "learning_rate": 0.1}),
    )
    roster = []
    for base_name, algorithm, params in bases:
        for screener, suffix in ((SCREEN_ALL, "all"), (SCREEN_LASSO, "screen")):
            roster.append(
                LearnerSpec(
                    name=f"{base_name}-{suffix}",
                    algorithm=algorithm,
                    screener=screener,
                    params=dict(params),
                )
            )
    return tuple(roster)


# -- fitted predictors ------------------------------------------------------

class _GlmPredictor:
    kind = "glm"

    def __init__(self, fit: GlmFit, names):
        self.fit = fit
        self.names = list(names)

    def predict(self, X) -> np.ndarray:
        return _clip_scores(predict_probabilities(self.fit, X, self.names))

    def payload(self) -> dict:
        return {
            "kind": self.kind,
            "names": list(self.names),
            "fit": json.loads(self.fit.to_json()),
        }


class _ConstantPredictor:
    kind = "constant"

    def __init__(self, p: float):
        self.p = float(np.clip(p, *SCORE_BOUNDS))

    def predict(self, X) -> np.ndarray:
        return np.full(np.asarray(X).shape[0], self.p)

    def payload(self) -> dict:
        return {"kind": self.kind, "p": self.p}


class _GbPredictor:
    kind = "gb"

    def __init__(self, f0: float, rate: float, trees: list):
        self.f0 = float(f0)
        self.rate = float(rate)
        self.trees = trees

    def _eval_tree(self, node, X, out, mask):
        if "v" in node:
            out[mask] += node["v"]
            return
        left = mask & (X[:, node["f"]] <= node["t"])
        self._eval_tree(node["l"], X, out, left)
        self._eval_tree(node["r"], X, out, mask & ~left)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        eta = np.full(X.shape[0], self.f0)
        everything = np.ones(X.shape[0], dtype=bool)
        for tree in self.trees:
            bump = np.zeros(X.shape[0])
            self._eval_tree(tree, X, bump, everything)
            eta += self.rate * bump
        return _clip_scores(expit(eta))

    def payload(self) -> dict:
        return {
            "kind": self.kind,
            "f0": self.f0,
            "rate": self.rate,
            "trees": self.trees,
        }


# -- algorithm implementations ---------------------------------------------

def _fit_logistic_algo(X, y, feature_names, seed):
    if X.shape[1] == 0:
        return _ConstantPredictor(float(np.mean(y)))
    fit = fit_logistic(X, y, feature_names=feature_names)
    return _GlmPredictor(fit, feature_names)


def _fit_enet_algo(X, y, feature_names, seed, alpha=0.5, n_lambda=50, n_folds=5):
    if X.shape[1] == 0:
        return _ConstantPredictor(float(np.mean(y)))
    spec = default_penalty_spec(X, y, alpha=alpha, n_lambda=n_lambda)
    path = fit_penalized_cv(X, y, spec, n_folds=n_folds, seed=seed,
                            feature_names=feature_names)
    return _GlmPredictor(path.selected, feature_names)


def _grow_tree(ids, thresholds, resid, hess, rows, depth, min_child, reg, values):
    g_total = float(resid[rows].sum())
    h_total = float(hess[rows].sum())
    leaf_value = float(np.clip(g_total / (h_total + reg), -4.0, 4.0))
    best = None
    if depth > 0 and rows.sum() >= 2 * min_child:
        parent_score = g_total * g_total / (h_total + reg)
        for j in range(len(thresholds)):
            cand = thresholds[j]
            if cand.size == 0:
                continue
            bins = ids[rows, j]
            n_bins = cand.size + 1
            gb = np.bincount(bins, weights=resid[rows], minlength=n_bins)
            hb = np.bincount(bins, weights=hess[rows], minlength=n_bins)
            cb = np.bincount(bins, minlength=n_bins)
            gl = np.cumsum(gb)[:-1]
            hl = np.cumsum(hb)[:-1]
            cl = np.cumsum(cb)[:-1]
            gr = g_total - gl
            hr = h_total - hl
            cr = int(rows.sum()) - cl
            gain = gl * gl / (hl + reg) + gr * gr / (hr + reg) - parent_score
            gain[(cl < min_child) | (cr < min_child)] = -np.inf
            c = int(np.argmax(gain))
            if math.isfinite(gain[c]) and gain[c] > 1e-12:
                if best is None or gain[c] > best[0]:
                    best = (float(gain[c]), j, c)
    if best is None:
        values[rows] += leaf_value
        return {"v": leaf_value}
    _, j, c = best
    threshold = float(thresholds[j][c])
    left = rows & (ids[:, j] <= c)
    right = rows & ~left
    return {
        "f": j,
        "t": threshold,
        "l": _grow_tree(ids, thresholds, resid, hess, left, depth - 1,
                        min_child, reg, values),
        "r": _grow_tree(ids, thresholds, resid, hess, right, depth - 1,
                        min_child, reg, values),
    }


def _fit_gb_algo(X, y, feature_names, seed, depth=1, rounds=100,
                 learning_rate=0.1, max_bins=64, min_child=10, reg=1e-6):
    """Gradient-boosted shallow trees on the logistic loss.

    Split search is exhaustive over midpoint candidates (quantile-thinned
    past ``max_bins`` distinct values) with Newton leaf values, so the fit
    is deterministic; the seed is accepted for interface uniformity.
    """
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    y = np.asarray(y, dtype=np.float64)
    base = float(np.clip(np.mean(y), *SCORE_BOUNDS))
    if p == 0:
        return _ConstantPredictor(base)
    thresholds = []
    for j in range(p):
        u = np.unique(X[:, j])
        if u.size > max_bins:
            u = np.unique(np.quantile(u, np.linspace(0.0, 1.0, max_bins + 1)))
        thresholds.append((u[1:] + u[:-1]) / 2.0)
    ids = np.empty((n, p), dtype=np.int64)
    for j in range(p):
        ids[:, j] = np.searchsorted(thresholds[j], X[:, j], side="left")
    f0 = float(logit(base))
    eta = np.full(n, f0)
    everything = np.ones(n, dtype=bool)
    trees = []
    for _ in range(int(rounds)):
        prob = expit(eta)
        resid = y - prob
        hess = np.maximum(prob * (1.0 - prob), 1e-6)
        values = np.zeros(n)
        tree = _grow_tree(ids, thresholds, resid, hess, everything,
                          int(depth), int(min_child), float(reg), values)
        if "v" in tree and abs(tree["v"]) <= 1e-12:
            break
        trees.append(tree)
        eta = eta + float(learning_rate) * values
    return _GbPredictor(f0, learning_rate, trees)


def _load_glm(payload):
    # rebuild in the stored training order: name-sorted reconstruction would
    # permute the dot-product accumulation and drift in the last ulp
    doc = payload["fit"]
    names = [str(n) for n in payload["names"]]
    fit = GlmFit(
        coefficients=np.array([doc["coefficients"][k] for k in names],
                              dtype=np.float64),
        intercept=float(doc["intercept"]),
        feature_names=names,
        converged=bool(doc["converged"]),
        n_iter=int(doc["n_iter"]),
        offset_used=bool(doc["offset_used"]),
    )
    return _GlmPredictor(fit, names)


_ALGORITHMS = {
    "logistic": _fit_logistic_algo,
    "elastic-net": _fit_enet_algo,
    "gb-stumps": _fit_gb_algo,
}

_LOADERS = {
    "glm": _load_glm,
    "constant": lambda payload: _ConstantPredictor(payload["p"]),
    "gb": lambda payload: _GbPredictor(
        payload["f0"], payload["rate"], payload["trees"]
    ),
}


def register_algorithm(identifier: str, fitter, loader=None) -> None:
    """Add a base algorithm to the roster registry.

    ``fitter(X, y, feature_names, seed, **params)`` must return an object
    with ``predict(X) -> probabilities``.  Pass ``loader`` (payload dict ->
    predictor) only if the predictor also implements ``payload()`` and
    should survive serialization.
    """
    if identifier in _ALGORITHMS:
        raise ConfigError(f"algorithm {identifier!r} already registered")
    _ALGORITHMS[identifier] = fitter
    if loader is not None:
        _LOADERS[identifier] = loader


def unregister_algorithm(identifier: str) -> None:
    if identifier in ("logistic", "elastic-net", "gb-stumps"):
        raise ConfigError(f"cannot unregister shipped algorithm {identifier!r}")
    _ALGORITHMS.pop(identifier, None)
    _LOADERS.pop(identifier, None)


# -- cross-validated evaluation ----------------------------------------------

def _screen_features(spec: LearnerSpec, X, y, names, seed):
    if spec.screener == SCREEN_ALL or X.shape[1] == 0:
        return list(range(X.shape[1]))
    pspec = default_penalty_spec(X, y, alpha=1.0, n_lambda=30)
    path = fit_penalized_cv(X, y, pspec, n_folds=5, seed=seed,
                            feature_names=list(names))
    coef = np.asarray(path.selected.coefficients)
    return [j for j in range(X.shape[1]) if coef[j] != 0.0]


def _fit_one(spec: LearnerSpec, X, y, names, ss):
    """Screen then fit; returns (screened indices, predictor)."""
    screen_seed = _seed_int(_child(ss, 0))
    algo_seed = _seed_int(_child(ss, 1))
    idx = _screen_features(spec, X, y, names, screen_seed)
    sub_names = [names[j] for j in idx]
    predictor = _ALGORITHMS[spec.algorithm](
        X[:, idx], y, sub_names, algo_seed, **spec.params
    )
    return idx, predictor


def _checked_scores(predictor, X, expected: int) -> np.ndarray:
    scores = np.asarray(predictor.predict(X), dtype=np.float64).ravel()
    if scores.shape[0] != expected or not np.all(np.isfinite(scores)):
        raise EstimationError("learner produced malformed scores")
    if np.any(scores < 0.0) or np.any(scores > 1.0):
        raise EstimationError("learner scores fall outside [0, 1]")
    return _clip_scores(scores)


@dataclass(frozen=True)
class LearnerResult:
    """Pooled out-of-fold AUC for one learner, or its failure."""

    spec: LearnerSpec
    cvauc: AucEstimate | None = None
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass(frozen=True)
class CvEvaluation:
    """Per-learner cvAUC rows plus the pooled out-of-fold score matrix."""

    results: tuple
    oof_scores: np.ndarray
    fold_ids: np.ndarray
    labels: np.ndarray
    v: int
    seed: int

    def result(self, name: str) -> LearnerResult:
        for row in self.results:
            if row.spec.name == name:
                return row
        raise InputError(f"no learner named {name!r}")

    def best(self) -> LearnerResult:
        """Highest cvAUC among successful learners, roster order on ties."""
        ok = [row for row in self.results if not row.failed]
        if not ok:
            raise EstimationError("every learner failed cross-validation")
        return max(ok, key=lambda row: row.cvauc.auc)

    def to_text(self) -> str:
        lines = ["cross-validated learner comparison",
                 f"  folds: {self.v}"]
        for row in self.results:
            if row.failed:
                lines.append(f"  {row.spec.name}: failed ({row.error})")
            else:
                est = row.cvauc
                lines.append(
                    f"  {row.spec.name}: cvAUC {est.auc:.4f} "
                    f"(95% CI {est.ci_lower:.4f}, {est.ci_upper:.4f})"
                )
        return "\n".join(lines)


def cv_evaluate(learners, data: LabeledFeatureSet, v: int = 10,
                seed: int = 0) -> CvEvaluation:
    """Stratified V-fold comparison scored by pooled out-of-fold AUC.

    Screeners refit inside every training fold so no step sees held-out
    rows.  A learner that fails on any fold is excluded and reported with
    its error; the others are unaffected.
    """
    learners = tuple(learners)
    if not learners:
        raise InputError("need at least one learner")
    names = [spec.name for spec in learners]
    if len(set(names)) != len(names):
        raise InputError("learner names must be unique")
    for spec in learners:
        spec.validate()
    v = int(v)
    if v < 2:
        raise InputError("need at least 2 folds")
    if data.minority_count < 5 * v:
        raise InputError(
            f"effective sample size {data.minority_count} below 5 x {v} folds"
        )
    if not isinstance(seed, (int, np.integer)):
        raise InputError("seed must be an integer")
    master = np.random.SeedSequence(int(seed))
    fold_ids = stratified_folds(data.y, v, _child(master, 0))
    oof = np.full((data.n, len(learners)), np.nan)
    results = []
    for ell, spec in enumerate(learners):
        learner_ss = _child(master, 2 + ell)
        error = None
        for f in range(v):
            train = fold_ids != f
            test = ~train
            try:
                idx, predictor = _fit_one(
                    spec, data.X[train], data.y[train],
                    list(data.names), _child(learner_ss, f),
                )
                oof[test, ell] = _checked_scores(
                    predictor, data.X[test][:, idx], int(test.sum())
                )
            except EstimationError as exc:
                error = f"fold {f}: {exc}"
                oof[:, ell] = np.nan
                break
        if error is not None:
            results.append(LearnerResult(spec=spec, error=error))
        else:
            results.append(
                LearnerResult(spec=spec, cvauc=auc_ci(oof[:, ell], data.y))
            )
    return CvEvaluation(
        results=tuple(results),
        oof_scores=oof,
        fold_ids=fold_ids,
        labels=data.y.copy(),
        v=v,
        seed=int(seed),
    )


# -- Super Learner -----------------------------------------------------------

def _mean_nll(mu: np.ndarray, y: np.ndarray) -> float:
    mu = np.clip(mu, 1e-9, 1.0 - 1e-9)
    return float(-np.mean(y * np.log(mu) + (1.0 - y) * np.log1p(-mu)))


@dataclass(frozen=True)
class FittedLearner:
    """A learner refit on all data: screened columns plus its predictor."""

    spec: LearnerSpec
    screened: tuple
    predictor: object

    def predict(self, X_aligned: np.ndarray) -> np.ndarray:
        return _checked_scores(
            self.predictor, X_aligned[:, list(self.screened)],
            X_aligned.shape[0],
        )


@dataclass(frozen=True)
class SuperLearnerFit:
    """Convex ensemble over the successful learners.

    ``weights`` aligns with ``fitted``; ``fallback_discrete`` marks the
    degenerate path where the meta-optimization failed and all weight went
    to the cv-best learner.
    """

    fitted: tuple
    weights: np.ndarray
    training_names: tuple
    cvauc: AucEstimate
    oof_scores: np.ndarray
    labels: np.ndarray
    evaluation: CvEvaluation
    development_scores: np.ndarray
    fallback_discrete: bool = False

    @property
    def weight_map(self) -> dict:
        return {
            fit.spec.name: float(w)
            for fit, w in zip(self.fitted, self.weights)
        }

    def _align(self, X, names=None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise InputError("feature matrix must be 2-dimensional")
        if names is None:
            if X.shape[1] != len(self.training_names):
                raise AlignmentError(
                    "unnamed matrix width does not match the training layout"
                )
            return X
        names = list(names)
        if X.shape[1] != len(names):
            raise InputError(f"{len(names)} names for {X.shape[1]} columns")
        pos = {name: k for k, name in enumerate(names)}
        missing = [name for name in self.training_names if name not in pos]
        if len(missing) == len(self.training_names):
            raise AlignmentError("no overlap with the training features")
        if missing:
            warnings.warn(
                f"{len(missing)} training feature(s) absent; imputing 0: "
                f"{missing[:5]}",
                UserWarning,
            )
        aligned = np.zeros((X.shape[0], len(self.training_names)))
        for k, name in enumerate(self.training_names):
            if name in pos:
                aligned[:, k] = X[:, pos[name]]
        return aligned

    def predict_matrix(self, X, names=None) -> np.ndarray:
        aligned = self._align(X, names)
        combined = np.zeros(aligned.shape[0])
        for fit, w in zip(self.fitted, self.weights):
            if w != 0.0:
                combined += w * fit.predict(aligned)
        return _clip_scores(combined)

    def predict_set(self, features: LabeledFeatureSet) -> np.ndarray:
        return self.predict_matrix(features.X, features.names)

    def to_json(self) -> str:
        learners = []
        for fit, w in zip(self.fitted, self.weights):
            predictor = fit.predictor
            if getattr(predictor, "kind", None) not in _LOADERS:
                raise ConfigError(
                    f"predictor for {fit.spec.name!r} has no registered loader"
                )
            learners.append(
                {
                    "name": fit.spec.name,
                    "algorithm": fit.spec.algorithm,
                    "screener": fit.spec.screener,
                    "params": fit.spec.params,
                    "screened": list(fit.screened),
                    "weight": float(w),
                    "model": predictor.payload(),
                }
            )
        body = {
            "training_names": list(self.training_names),
            "fallback_discrete": self.fallback_discrete,
            "cvauc": {
                "auc": self.cvauc.auc,
                "se": self.cvauc.se,
                "ci_lower": self.cvauc.ci_lower,
                "ci_upper": self.cvauc.ci_upper,
                "n_positive": self.cvauc.n_positive,
                "n_negative": self.cvauc.n_negative,
            },
            "learners": learners,
            "development_scores": [float(s) for s in self.development_scores],
            "development_labels": [int(v) for v in self.labels],
        }
        return json.dumps(body, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SuperLearnerFit":
        try:
            body = json.loads(text)
            fitted = []
            weights = []
            for row in body["learners"]:
                predictor = _LOADERS[row["model"]["kind"]](row["model"])
                fitted.append(
                    FittedLearner(
                        spec=LearnerSpec(
                            name=row["name"],
                            algorithm=row["algorithm"],
                            screener=row["screener"],
                            params=dict(row["params"]),
                        ),
                        screened=tuple(row["screened"]),
                        predictor=predictor,
                    )
                )
                weights.append(float(row["weight"]))
            cv = body["cvauc"]
            labels = np.asarray(body["development_labels"], dtype=np.int64)
            dev_scores = np.asarray(body["development_scores"])
            return cls(
                fitted=tuple(fitted),
                weights=np.asarray(weights),
                training_names=tuple(body["training_names"]),
                cvauc=AucEstimate(
                    auc=cv["auc"],
                    se=cv["se"],
                    ci_lower=cv["ci_lower"],
                    ci_upper=cv["ci_upper"],
                    n_positive=cv["n_positive"],
                    n_negative=cv["n_negative"],
                ),
                oof_scores=dev_scores.copy(),
                labels=labels,
                evaluation=None,
                development_scores=dev_scores,
                fallback_discrete=bool(body["fallback_discrete"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed serialized model: {exc}") from exc


def _optimize_weights(Z: np.ndarray, y: np.ndarray):
    """Minimize mean negative log-likelihood of the convex combination.

    Returns (weights, fell_back).  The returned point is the best of the
    SLSQP solution, every vertex, and the uniform mixture, which keeps the
    ensemble no worse than any single candidate by construction.
    """
    n_learners = Z.shape[1]
    if n_learners == 1:
        return np.ones(1), False

    def objective(w):
        return _mean_nll(Z @ w, y)

    def gradient(w):
        mu = np.clip(Z @ w, 1e-9, 1.0 - 1e-9)
        return -(Z.T @ ((y - mu) / (mu * (1.0 - mu)))) / Z.shape[0]

    x0 = np.full(n_learners, 1.0 / n_learners)
    try:
        res = minimize(
            objective,
            x0,
            jac=gradient,
            method="SLSQP",
            bounds=[(0.0, 1.0)] * n_learners,
            constraints=[
                {
                    "type": "eq",
                    "fun": lambda w: np.sum(w) - 1.0,
                    "jac": lambda w: np.ones_like(w),
                }
            ],
            options={"maxiter": 500, "ftol": 1e-12},
        )
        ok = bool(res.success) and np.all(np.isfinite(res.x))
    except (ValueError, FloatingPointError):
        ok = False
        res = None
    if not ok:
        return None, True
    candidates = [np.clip(res.x, 0.0, None)]
    candidates.append(x0)
    for j in range(n_learners):
        vertex = np.zeros(n_learners)
        vertex[j] = 1.0
        candidates.append(vertex)
    normalized = []
    for w in candidates:
        total = w.sum()
        if total > 0 and np.all(np.isfinite(w)):
            normalized.append(w / total)
    best = min(normalized, key=objective)
    return best, False


def super_learner(learners, data: LabeledFeatureSet, v: int = 10,
                  seed: int = 0, evaluation: CvEvaluation | None = None
                  ) -> SuperLearnerFit:
    """Fit the convex ensemble on pooled out-of-fold predictions.

    Pass ``evaluation`` to reuse an existing cv_evaluate run (it must come
    from the same learners, data, folds, and seed); otherwise one is run
    here.  Base learners are refit on all rows for deployment.
    """
    learners = tuple(learners)
    if evaluation is None:
        evaluation = cv_evaluate(learners, data, v=v, seed=seed)
    elif not np.array_equal(evaluation.labels, data.y):
        raise InputError("evaluation labels do not match the data")
    ok_order = [
        k for k, row in enumerate(evaluation.results) if not row.failed
    ]
    if not ok_order:
        raise EstimationError("every learner failed; nothing to ensemble")
    Z = evaluation.oof_scores[:, ok_order]
    y = evaluation.labels.astype(np.float64)
    weights, fell_back = _optimize_weights(Z, y)
    if fell_back:
        best_name = evaluation.best().spec.name
        weights = np.zeros(len(ok_order))
        for local, k in enumerate(ok_order):
            if evaluation.results[k].spec.name == best_name:
                weights[local] = 1.0
    weights = weights / weights.sum()
    ensemble_oof = Z @ weights
    master = np.random.SeedSequence(int(evaluation.seed))
    refit_parent = _child(master, 1)
    fitted = []
    for local, k in enumerate(ok_order):
        spec = evaluation.results[k].spec
        idx, predictor = _fit_one(
            spec, data.X, data.y, list(data.names), _child(refit_parent, k)
        )
        fitted.append(
            FittedLearner(spec=spec, screened=tuple(idx), predictor=predictor)
        )
    fit = SuperLearnerFit(
        fitted=tuple(fitted),
        weights=weights,
        training_names=tuple(data.names),
        cvauc=auc_ci(ensemble_oof, evaluation.labels),
        oof_scores=ensemble_oof,
        labels=evaluation.labels,
        evaluation=evaluation,
        development_scores=np.empty(0),
        fallback_discrete=fell_back,
    )
    dev_scores = fit.predict_matrix(data.X, data.names)
    object.__setattr__(fit, "development_scores", dev_scores)
    return fit


# -- threshold analysis -------------------------------------------------------

@dataclass(frozen=True)
class ThresholdRow:
    """Confusion-matrix metrics for flagging scores at or above a cutoff.

    Ratio fields are None when their denominator is zero (a 0/0 is
    reported as absent, never as 0).
    """

    threshold: float
    flagged: int
    tp: int
    fp: int
    fn: int
    tn: int
    ppv: float | None
    sensitivity: float | None
    specificity: float | None
    npv: float | None


@dataclass(frozen=True)
class ThresholdTable:
    rows: tuple

    def row_at(self, threshold: float) -> ThresholdRow:
        for row in self.rows:
            if row.threshold == threshold:
                return row
        raise InputError(f"no row at threshold {threshold!r}")

    def to_csv(self) -> str:
        header = (
            "threshold,flagged,tp,fp,fn,tn,ppv,sensitivity,specificity,npv"
        )
        lines = [header]
        for row in self.rows:
            cells = [
                repr(float(row.threshold)),
                str(row.flagged),
                str(row.tp),
                str(row.fp),
                str(row.fn),
                str(row.tn),
            ]
            for value in (row.ppv, row.sensitivity, row.specificity, row.npv):
                cells.append("" if value is None else repr(float(value)))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def threshold_metrics(scores, labels, thresholds) -> ThresholdTable:
    """PPV/sensitivity/specificity/NPV and flagged counts per cutoff.

    A row flags every score at or above its threshold.  Thresholds must
    arrive sorted ascending; sensitivity and flagged count are then
    nonincreasing down the table by construction.
    """
    scores, labels = _check_scores_labels(scores, labels)
    thresholds = np.asarray(thresholds, dtype=np.float64).ravel()
    if thresholds.size == 0:
        raise InputError("need at least one threshold")
    if not np.all(np.isfinite(thresholds)):
        raise InputError("thresholds must be finite")
    if np.any(np.diff(thresholds) < 0):
        raise InputError("thresholds must be sorted ascending")
    rows = []
    for t in thresholds:
        flag = scores >= t
        tp = int(np.sum(flag & (labels == 1)))
        fp = int(np.sum(flag & (labels == 0)))
        fn = int(np.sum(~flag & (labels == 1)))
        tn = int(np.sum(~flag & (labels == 0)))
        rows.append(
            ThresholdRow(
                threshold=float(t),
                flagged=tp + fp,
                tp=tp,
                fp=fp,
                fn=fn,
                tn=tn,
                ppv=tp / (tp + fp) if tp + fp else None,
                sensitivity=tp / (tp + fn) if tp + fn else None,
                specificity=tn / (tn + fp) if tn + fp else None,
                npv=tn / (tn + fn) if tn + fn else None,
            )
        )
    return ThresholdTable(rows=tuple(rows))


def default_thresholds(scores, step: float = 0.05) -> np.ndarray:
    """Unique score quantiles at ``step`` spacing, ascending."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise InputError("no scores to take quantiles of")
    if not (0.0 < step <= 0.5):
        raise InputError("quantile step must lie in (0, 0.5]")
    grid = np.arange(0.0, 1.0 + step / 2.0, step)
    return np.unique(np.quantile(scores, np.clip(grid, 0.0, 1.0)))


# -- external validation ------------------------------------------------------

@dataclass(frozen=True)
class ExternalValidation:
    """External-site performance with deltas against development."""

    site: str
    threshold: float
    auc: AucEstimate
    row: ThresholdRow
    development_auc: float
    development_row: ThresholdRow
    auc_delta: float
    ppv_delta: float | None
    sensitivity_delta: float | None

    def to_text(self) -> str:
        def fmt(value):
            return "absent" if value is None else f"{value:.4f}"

        return "\n".join(
            [
                f"external validation ({self.site})",
                f"  threshold: {self.threshold}",
                f"  AUC: {self.auc.auc:.4f} "
                f"(95% CI {self.auc.ci_lower:.4f}, {self.auc.ci_upper:.4f}); "
                f"delta vs development {self.auc_delta:+.4f}",
                f"  PPV: {fmt(self.row.ppv)} (delta {fmt(self.ppv_delta)})",
                f"  sensitivity: {fmt(self.row.sensitivity)} "
                f"(delta {fmt(self.sensitivity_delta)})",
                f"  flagged: {self.row.flagged}",
            ]
        )


def external_validate(model: SuperLearnerFit, external: LabeledFeatureSet,
                      threshold: float) -> ExternalValidation:
    """Score an external site and report degradation against development.

    Features are aligned to the training layout by name; training features
    the external set lacks are imputed as 0 with a warning.  Development
    reference metrics come from the deployed predictor scored on the
    development rows, so validating on the development set itself gives
    zero deltas.
    """
    threshold = float(threshold)
    if not math.isfinite(threshold):
        raise InputError("threshold must be finite")
    scores = model.predict_set(external)
    est = auc_ci(scores, external.y)
    row = threshold_metrics(scores, external.y, [threshold]).rows[0]
    dev_row = threshold_metrics(
        model.development_scores, model.labels, [threshold]
    ).rows[0]
    dev_auc = auc(model.development_scores, model.labels)

    def delta(a, b):
        return None if a is None or b is None else a - b

    return ExternalValidation(
        site=external.site,
        threshold=threshold,
        auc=est,
        row=row,
        development_auc=dev_auc,
        development_row=dev_row,
        auc_delta=est.auc - dev_auc,
        ppv_delta=delta(row.ppv, dev_row.ppv),
        sensitivity_delta=delta(row.sensitivity, dev_row.sensitivity),
    )


# -- assembled report ---------------------------------------------------------

@dataclass(frozen=True)
class PhenotypeReport:
    """Everything the phenotype workflow produces, ready to print."""

    evaluation: CvEvaluation
    ensemble: SuperLearnerFit
    table: ThresholdTable
    minority_count: int
    external: ExternalValidation | None = None

    def to_text(self) -> str:
        lines = [
            "phenotype prediction report",
            f"  effective sample size (minority class): {self.minority_count}",
            self.evaluation.to_text(),
            "Super Learner",
        ]
        if self.ensemble.fallback_discrete:
            lines.append("  weight optimization failed; discrete fallback")
        for name, w in self.ensemble.weight_map.items():
            lines.append(f"  weight {name}: {w:.4f}")
        est = self.ensemble.cvauc
        lines.append(
            f"  ensemble cvAUC {est.auc:.4f} "
            f"(95% CI {est.ci_lower:.4f}, {est.ci_upper:.4f})"
        )
        if self.external is not None:
            lines.append(self.external.to_text())
        return "\n".join(lines)

    def to_json(self) -> str:
        rows = []
        for row in self.evaluation.results:
            rows.append(
                {
                    "name": row.spec.name,
                    "cvauc": None if row.failed else row.cvauc.auc,
                    "ci_lower": None if row.failed else row.cvauc.ci_lower,
                    "ci_upper": None if row.failed else row.cvauc.ci_upper,
                    "error": row.error,
                }
            )
        body = {
            "minority_count": self.minority_count,
            "learners": rows,
            "weights": self.ensemble.weight_map,
            "ensemble_cvauc": self.ensemble.cvauc.auc,
            "fallback_discrete": self.ensemble.fallback_discrete,
        }
        if self.external is not None:
            body["external"] = {
                "auc": self.external.auc.auc,
                "auc_delta": self.external.auc_delta,
                "ppv": self.external.row.ppv,
                "sensitivity": self.external.row.sensitivity,
                "threshold": self.external.threshold,
            }
        return json.dumps(body, indent=2, sort_keys=True)


def phenotype_report(data: LabeledFeatureSet, learners=None, v: int = 10,
                     seed: int = 0, thresholds=None,
                     external: LabeledFeatureSet | None = None,
                     external_threshold: float | None = None
                     ) -> PhenotypeReport:
    """Run the whole development workflow on one labeled feature set."""
    roster = default_roster() if learners is None else tuple(learners)
    evaluation = cv_evaluate(roster, data, v=v, seed=seed)
    ensemble = super_learner(roster, data, v=v, seed=seed,
                             evaluation=evaluation)
    if thresholds is None:
        thresholds = default_thresholds(ensemble.oof_scores)
    table = threshold_metrics(ensemble.oof_scores, data.y, thresholds)
    validation = None
    if external is not None:
        if external_threshold is None:
            raise InputError("external validation needs a threshold")
        validation = external_validate(ensemble, external, external_threshold)
    return PhenotypeReport(
        evaluation=evaluation,
        ensemble=ensemble,
        table=table,
        minority_count=data.minority_count,
        external=validation,
    )
