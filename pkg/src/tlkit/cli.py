"""Command-line front door: estimation, simulation, sensitivity, phenotyping.

Every subcommand reads one JSON config (see :mod:`tlkit.config`), runs the
corresponding workflow, and writes its outputs into the config's output
directory.  Outputs are rendered in memory and written only after the whole
command succeeds, so a failed run leaves no partial files.  Every output
carries a provenance header: toolkit version, config hash, and seed.

Exit codes: 0 success, 1 estimation failure, 2 config or input error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config, validate_inputs
from .dataset import (
    load_dataset,
    restrict_to_observed,
    screen_by_prevalence,
    select_features,
    summarize_cohort,
)
from .errors import (
    ConfigInputError,
    EstimationError,
    InputError,
    SchemaError,
    ValidationError,
)
from .phenotyping import (
    SITE_EXTERNAL,
    LabeledFeatureSet,
    LearnerSpec,
    SuperLearnerFit,
    phenotype_report,
    reduce_dimensions_outcome_blind,
)
from .plasmode import MechanismSpec, run_comparison
from .propensity import PsModelId, fit_ps
from .sensitivity import sensitivity_curve
from .tmle import estimate_ate, fit_initial_outcome, unadjusted_rd

EXIT_OK = 0
EXIT_ESTIMATION = 1
EXIT_CONFIG = 2

ORIGIN_STRUCTURED = "structured"
ORIGIN_TEXT = "text"


# -- output plumbing ---------------------------------------------------------

class _Emitter:
    """Buffers rendered files; writes them only after the command succeeds."""

    def __init__(self, config: RunConfig):
        self.out_dir = config.resolve(config.output_dir)
        self._provenance = {
            "toolkit_version": __version__,
            "config_sha256": config.config_hash(),
            "seed": config.seed,
        }
        self._files: dict[str, str] = {}

    def provenance_lines(self) -> list[str]:
        return [f"# {key}: {self._provenance[key]}"
                for key in ("toolkit_version", "config_sha256", "seed")]

    def add_text(self, name: str, body: str) -> None:
        header = "\n".join(self.provenance_lines())
        self._files[name] = f"{header}\n{body.rstrip()}\n"

    def add_json(self, name: str, payload) -> None:
        if isinstance(payload, str):
            payload = json.loads(payload)
        payload = dict(payload)
        payload["provenance"] = self._provenance
        self._files[name] = json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def flush(self) -> list[Path]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        for name in sorted(self._files):
            path = self.out_dir / name
            path.write_text(self._files[name])
            written.append(path)
        return written


def read_table(path) -> tuple[list[str], list[list[str]]]:
    """Parse a toolkit CSV output: provenance comments stripped."""
    lines = [line for line in Path(path).read_text().splitlines()
             if not line.startswith("#")]
    rows = list(csv.reader(io.StringIO("\n".join(lines))))
    if not rows:
        raise SchemaError(f"{path} has no table content")
    return rows[0], rows[1:]


def read_report(path) -> dict:
    """Parse a toolkit JSON output."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise SchemaError(f"{path} does not hold a JSON object")
    return payload


# -- shared loaders ----------------------------------------------------------

def _load_feature_table(path, label_col, id_col):
    """Read a feature CSV: (ids, names, X, labels).

    ``labels`` is None when ``label_col`` is None or absent from the header.
    Every feature cell must parse as a finite number.
    """
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path} is empty") from None
        if len(set(header)) != len(header):
            raise SchemaError(f"{path} has duplicate column names")
        has_label = label_col is not None and label_col in header
        if label_col is not None and not has_label:
            raise SchemaError(f"{path} has no column {label_col!r}")
        label_k = header.index(label_col) if has_label else None
        id_k = None
        if id_col is not None:
            if id_col not in header:
                raise SchemaError(f"{path} has no column {id_col!r}")
            id_k = header.index(id_col)
        feature_ks = [k for k in range(len(header))
                      if k not in (label_k, id_k)]
        if not feature_ks:
            raise SchemaError(f"{path} has no feature columns")
        names = [header[k] for k in feature_ks]

        ids, labels, rows = [], [], []
        for row_num, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValidationError(
                    f"{path} row {row_num}: expected {len(header)} cells, "
                    f"got {len(row)}", row=row_num)
            if id_k is not None:
                ids.append(row[id_k])
            if label_k is not None:
                raw = row[label_k].strip()
                if raw not in ("0", "1"):
                    raise ValidationError(
                        f"{path} row {row_num}: label must be 0 or 1, "
                        f"got {raw!r}", row=row_num)
                labels.append(int(raw))
            values = []
            for k in feature_ks:
                try:
                    value = float(row[k])
                except ValueError:
                    raise ValidationError(
                        f"{path} row {row_num}: {header[k]!r} is not a "
                        f"number: {row[k]!r}", row=row_num) from None
                if not np.isfinite(value):
                    raise ValidationError(
                        f"{path} row {row_num}: {header[k]!r} is not finite",
                        row=row_num)
                values.append(value)
            rows.append(values)
    if not rows:
        raise ValidationError(f"{path} has a header but no rows")
    X = np.asarray(rows, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64) if label_k is not None else None
    if not ids:
        ids = [str(k) for k in range(X.shape[0])]
    return ids, names, X, y


def _scores_csv(ids, labels, scores) -> str:
    buf = io.StringIO()
    if labels is None:
        buf.write("row,score\n")
        for row_id, s in zip(ids, scores):
            buf.write(f"{row_id},{float(s)!r}\n")
    else:
        buf.write("row,label,score\n")
        for row_id, label, s in zip(ids, labels, scores):
            buf.write(f"{row_id},{int(label)},{float(s)!r}\n")
    return buf.getvalue()


def _cohort_text(summary) -> str:
    return "\n".join([
        "cohort summary",
        f"  n: {summary.n_total}",
        f"  treated: {summary.n_treated} ({summary.prop_treated:.4f})",
        f"  comparator: {summary.n_comparator} ({summary.prop_comparator:.4f})",
        f"  events: {summary.n_events} ({summary.prop_events:.4f})",
        f"  censored: {summary.n_censored} ({summary.prop_censored:.4f})",
    ])


# -- subcommands -------------------------------------------------------------

def cmd_fit(config: RunConfig) -> int:
    """Screen, restrict, fit the propensity model(s), target, and report."""
    emitter = _Emitter(config)
    options = config.options
    schema = config.dataset_schema()
    sparse = config.inputs.get("sparse")
    ds = load_dataset(
        config.resolve(config.inputs["data"]), schema,
        sparse_path=None if sparse is None else config.resolve(sparse))
    catalog = screen_by_prevalence(ds, options["prevalence_threshold"])
    ds = restrict_to_observed(ds)
    emitter.add_text("cohort.txt", _cohort_text(summarize_cohort(ds)))

    unadjusted = unadjusted_rd(ds)
    emitter.add_text("unadjusted.txt", unadjusted.to_report())
    emitter.add_json("unadjusted.json", unadjusted.to_json())

    outcome = fit_initial_outcome(
        ds, catalog,
        seed=np.random.SeedSequence(config.seed, spawn_key=(1,)),
        n_folds=options["outcome"]["n_folds"],
        n_lambda=options["outcome"]["n_lambda"])
    ps_config = config.ps_config()
    selected = options["model"]
    numbers = list(range(1, 9)) if selected == "all" else [selected]
    for number in numbers:
        model = PsModelId.from_number(number)
        # a fresh seed object per model keeps shared components identical
        ps = fit_ps(model, ds, catalog, config=ps_config,
                    seed=np.random.SeedSequence(config.seed, spawn_key=(2,)),
                    outcome_fit=outcome)
        estimate = estimate_ate(ds, ps, outcome, model_label=str(model))
        emitter.add_text(f"ps_m{number}.txt", ps.to_report())
        emitter.add_text(f"estimate_m{number}.txt", estimate.to_report())
        emitter.add_json(f"estimate_m{number}.json", estimate.to_json())
    emitter.flush()
    return EXIT_OK


def cmd_simulate(config: RunConfig) -> int:
    """Outcome-blind simulation comparison over the requested PS models."""
    emitter = _Emitter(config)
    options = config.options
    schema = config.dataset_schema()
    sparse = config.inputs.get("sparse")
    ds = load_dataset(
        config.resolve(config.inputs["data"]), schema,
        sparse_path=None if sparse is None else config.resolve(sparse))
    catalog = screen_by_prevalence(ds, options["prevalence_threshold"])
    ds = select_features(restrict_to_observed(ds), catalog)

    if options["mechanism"] is not None:
        spec = MechanismSpec.from_json(json.dumps(options["mechanism"]))
    else:
        spec = MechanismSpec.from_json(
            config.resolve(config.inputs["mechanism"]).read_text())
    spec.validate(ds.feature_names)

    report = run_comparison(
        ds, options["models"], spec,
        n_replicates=options["n_replicates"],
        seed=config.seed,
        config=config.ps_config(),
        m=options["bootstrap_size"],
        n_mc=options["n_mc"])
    emitter.add_text("replicates.csv", report.to_rows_csv())
    emitter.add_text("aggregates.csv", report.to_long_csv())
    emitter.add_text("summary.txt", report.to_summary_text())
    emitter.add_json("report.json", report.to_json())
    emitter.flush()
    recommended = report.recommended_model()
    if recommended is not None:
        print(f"recommended model: {recommended}")
    return EXIT_OK


def cmd_sensitivity(config: RunConfig) -> int:
    """Shift an estimate across a gap grid and report the G-value."""
    emitter = _Emitter(config)
    options = config.options
    if options["estimate"] is not None:
        estimate = options["estimate"]
        ci = tuple(options["ci"])
    else:
        path = config.resolve(config.inputs["estimate_report"])
        payload = read_report(path)
        for key in ("estimate", "ci_lower", "ci_upper"):
            if key not in payload:
                raise SchemaError(f"{path} has no {key!r} field")
        estimate = payload["estimate"]
        ci = (payload["ci_lower"], payload["ci_upper"])

    curve = sensitivity_curve(
        estimate, options["gap_min"], options["gap_max"], options["steps"],
        adjusted_vs_unadjusted_gap=options["adjusted_vs_unadjusted_gap"],
        sd_outcome=options["sd_outcome"], ci=ci)
    summary = [
        "sensitivity analysis",
        f"  estimate: {curve.estimate!r}",
        f"  ci95: ({curve.lower!r}, {curve.upper!r})",
        f"  gap grid: {options['gap_min']!r} to {options['gap_max']!r} "
        f"in {options['steps']} steps",
        f"  G-value: {curve.g_value:.3f} ({curve.g_value!r})",
    ]
    emitter.add_text("curve.csv", curve.to_csv())
    emitter.add_text("sensitivity.txt", "\n".join(summary))
    emitter.flush()
    print(f"G-value: {curve.g_value:.3f}")
    return EXIT_OK


def _tag_origins(names, prefix):
    origins = tuple(ORIGIN_TEXT if name.startswith(prefix)
                    else ORIGIN_STRUCTURED for name in names)
    if len(set(origins)) < 2:
        return None
    return origins


def _origin_subset(data: LabeledFeatureSet, origin: str) -> LabeledFeatureSet:
    keep = [k for k, o in enumerate(data.origins) if o == origin]
    return LabeledFeatureSet(
        names=tuple(data.names[k] for k in keep),
        X=data.X[:, keep],
        y=data.y,
        site=data.site,
        origins=tuple(data.origins[k] for k in keep),
    )


def _phenotype_outputs(emitter, report, ids, suffix=""):
    emitter.add_text(f"report{suffix}.txt", report.to_text())
    emitter.add_json(f"report{suffix}.json", report.to_json())
    emitter.add_text(f"thresholds{suffix}.csv", report.table.to_csv())
    emitter.add_text(
        f"scores_development{suffix}.csv",
        _scores_csv(ids, report.ensemble.labels,
                    report.ensemble.development_scores))


def cmd_phenotype(config: RunConfig) -> int:
    """Reduce, cross-validate, ensemble, and report threshold metrics."""
    emitter = _Emitter(config)
    options = config.options
    ids, names, X, y = _load_feature_table(
        config.resolve(config.inputs["data"]),
        options["label_col"], options["id_col"])
    data = LabeledFeatureSet(
        names=names, X=X, y=y,
        origins=_tag_origins(names, options["text_prefix"]))

    p_before = data.p
    if options["reduce"]["enabled"]:
        data = reduce_dimensions_outcome_blind(
            data, min_nonmodal=options["reduce"]["min_nonmodal"])
    emitter.add_text("reduction.txt", "\n".join([
        "dimension reduction",
        f"  enabled: {options['reduce']['enabled']}",
        f"  features before: {p_before}",
        f"  features after: {data.p}",
    ]))

    roster = None
    if options["roster"] is not None:
        roster = tuple(
            LearnerSpec(name=e["name"], algorithm=e["algorithm"],
                        screener=e["screener"], params=e["params"])
            for e in options["roster"])

    external = None
    if "external" in config.inputs:
        ext_ids, ext_names, ext_X, ext_y = _load_feature_table(
            config.resolve(config.inputs["external"]),
            options["label_col"], options["id_col"])
        if ext_y is None:
            raise SchemaError("external data must carry the label column")
        external = LabeledFeatureSet(
            names=ext_names, X=ext_X, y=ext_y, site=SITE_EXTERNAL)

    thresholds = options["thresholds"]
    report = phenotype_report(
        data, learners=roster, v=options["v"], seed=config.seed,
        thresholds=None if thresholds is None else np.asarray(thresholds),
        external=external,
        external_threshold=options["external_threshold"])
    _phenotype_outputs(emitter, report, ids)
    emitter.add_json("model.json", report.ensemble.to_json())

    if data.origins is not None:
        structured = _origin_subset(data, ORIGIN_STRUCTURED)
        report_s = phenotype_report(
            structured, learners=roster, v=options["v"], seed=config.seed,
            thresholds=None if thresholds is None else np.asarray(thresholds))
        _phenotype_outputs(emitter, report_s, ids, suffix="_structured")
        all_cv = report.ensemble.cvauc
        s_cv = report_s.ensemble.cvauc
        emitter.add_text("comparison.csv", "\n".join([
            "feature_set,n_features,cvauc,ci_lower,ci_upper",
            f"structured-only,{structured.p},{s_cv.auc!r},"
            f"{s_cv.ci_lower!r},{s_cv.ci_upper!r}",
            f"all-features,{data.p},{all_cv.auc!r},"
            f"{all_cv.ci_lower!r},{all_cv.ci_upper!r}",
        ]) + "\n")
    emitter.flush()
    return EXIT_OK


def cmd_score(config: RunConfig) -> int:
    """Apply a serialized ensemble to a feature table."""
    emitter = _Emitter(config)
    options = config.options
    model = SuperLearnerFit.from_json(
        config.resolve(config.inputs["model"]).read_text())
    ids, names, X, y = _load_feature_table(
        config.resolve(config.inputs["data"]),
        options["label_col"], options["id_col"])
    scores = model.predict_matrix(X, names)
    emitter.add_text("scores.csv", _scores_csv(ids, y, scores))
    emitter.flush()
    return EXIT_OK


_COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "sensitivity": cmd_sensitivity,
    "phenotype": cmd_phenotype,
    "score": cmd_score,
}


# -- argument parsing --------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tlkit",
        description="Targeted-learning toolkit command line")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="run config (JSON)")

    overrides = argparse.ArgumentParser(add_help=False)
    overrides.add_argument("--seed", type=int, default=None,
                           help="override the config seed")
    overrides.add_argument("--output-dir", default=None,
                           help="override the config output directory")

    fit = sub.add_parser("fit", parents=[common, overrides],
                         help="estimate risk differences on a cohort")
    fit.add_argument("--model", default=None,
                     help="override the PS model selection (1-8 or all)")
    simulate = sub.add_parser("simulate", parents=[common, overrides],
                              help="outcome-blind model comparison")
    simulate.add_argument("--replicates", type=int, default=None,
                          help="override the replicate count")
    sub.add_parser("sensitivity", parents=[common, overrides],
                   help="confounding-gap sensitivity curve")
    sub.add_parser("phenotype", parents=[common, overrides],
                   help="phenotype prediction workflow")
    sub.add_parser("score", parents=[common, overrides],
                   help="score a feature table with a saved model")
    sub.add_parser("validate-config", parents=[common],
                   help="check a config without running it")
    return parser


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    kwargs = {}
    if config.subcommand == "fit" and args.model is not None:
        value = args.model
        if value != "all":
            try:
                value = int(value)
            except ValueError:
                raise SchemaError(
                    f"--model must be 1-8 or all, got {value!r}") from None
            if not 1 <= value <= 8:
                raise SchemaError(f"--model must be between 1 and 8, got {value}")
        kwargs["model"] = value
    if config.subcommand == "simulate" and args.replicates is not None:
        if args.replicates < 2:
            raise SchemaError("--replicates must be >= 2")
        kwargs["n_replicates"] = args.replicates
    return config.with_overrides(
        seed=args.seed, output_dir=args.output_dir, **kwargs)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.verb == "validate-config":
            validate_inputs(config)
            print(f"config ok: {config.subcommand} "
                  f"(sha256 {config.config_hash()[:12]})")
            return EXIT_OK
        if config.subcommand != args.verb:
            raise SchemaError(
                f"config declares subcommand {config.subcommand!r}, "
                f"but {args.verb!r} was invoked")
        config = _apply_overrides(config, args)
        validate_inputs(config)
        return _COMMANDS[args.verb](config)
    except ConfigInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EstimationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
