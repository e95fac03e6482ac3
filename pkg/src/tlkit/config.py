"""Run configuration for the command-line tools.

One JSON file drives each run.  Every analytic choice lives in the file so
analyses are auditable and rerunnable; command-line flags may override
scalar fields but never introduce settings the file does not name.  Parsing
is strict: unknown keys anywhere are errors, so typos fail loudly instead
of silently falling back to defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .dataset import DatasetSchema
from .errors import InputError, SchemaError
from .plasmode import MechanismSpec
from .propensity import PsConfig

SUBCOMMANDS = ("fit", "simulate", "sensitivity", "phenotype", "score")

# inputs block: allowed keys and which are required, per subcommand
_INPUT_KEYS = {
    "fit": ({"data", "sparse"}, {"data"}),
    "simulate": ({"data", "sparse", "mechanism"}, {"data"}),
    "sensitivity": ({"estimate_report"}, set()),
    "phenotype": ({"data", "external"}, {"data"}),
    "score": ({"model", "data"}, {"model", "data"}),
}

_SCHEMA_KEYS = {"id_col", "treatment_col", "outcome_col", "censor_col",
                "proxy_features"}


def _where(path: tuple) -> str:
    return ".".join(path) if path else "config"


def _expect_object(value, path) -> dict:
    if not isinstance(value, dict):
        raise SchemaError(f"{_where(path)} must be a JSON object")
    return value


def _expect_str(value, path) -> str:
    if not isinstance(value, str) or not value:
        raise SchemaError(f"{_where(path)} must be a non-empty string")
    return value


def _expect_int(value, path, minimum=None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{_where(path)} must be an integer")
    if minimum is not None and value < minimum:
        raise SchemaError(f"{_where(path)} must be >= {minimum}, got {value}")
    return value


def _expect_float(value, path) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"{_where(path)} must be a number")
    return float(value)


def _expect_bool(value, path) -> bool:
    if not isinstance(value, bool):
        raise SchemaError(f"{_where(path)} must be true or false")
    return value


def _check_keys(obj: dict, allowed, path) -> None:
    extra = set(obj) - set(allowed)
    if extra:
        raise SchemaError(
            f"unknown key {sorted(extra)[0]!r} in {_where(path)}")


def _pair(value, path) -> list:
    if (not isinstance(value, (list, tuple)) or len(value) != 2):
        raise SchemaError(f"{_where(path)} must be a [low, high] pair")
    return [_expect_float(v, path + (str(k),)) for k, v in enumerate(value)]


def _ps_block(obj, path) -> dict:
    obj = _expect_object(obj, path)
    allowed = {"n_folds", "n_lambda", "alpha", "truncation", "lambda_grid",
               "collaborative_patience", "collaborative_full_grid"}
    _check_keys(obj, allowed, path)
    out = {
        "n_folds": _expect_int(obj.get("n_folds", 5), path + ("n_folds",), 2),
        "n_lambda": _expect_int(obj.get("n_lambda", 100),
                                path + ("n_lambda",), 2),
        "alpha": _expect_float(obj.get("alpha", 1.0), path + ("alpha",)),
        "truncation": _pair(obj.get("truncation", [0.01, 0.99]),
                            path + ("truncation",)),
        "collaborative_patience": _expect_int(
            obj.get("collaborative_patience", 5),
            path + ("collaborative_patience",), 1),
        "collaborative_full_grid": _expect_bool(
            obj.get("collaborative_full_grid", False),
            path + ("collaborative_full_grid",)),
        "lambda_grid": None,
    }
    grid = obj.get("lambda_grid")
    if grid is not None:
        if not isinstance(grid, (list, tuple)) or len(grid) < 2:
            raise SchemaError(
                f"{_where(path + ('lambda_grid',))} must list >= 2 values")
        out["lambda_grid"] = [
            _expect_float(v, path + ("lambda_grid", str(k)))
            for k, v in enumerate(grid)]
    return out


def _outcome_block(obj, path) -> dict:
    obj = _expect_object(obj, path)
    _check_keys(obj, {"n_folds", "n_lambda"}, path)
    return {
        "n_folds": _expect_int(obj.get("n_folds", 5), path + ("n_folds",), 2),
        "n_lambda": _expect_int(obj.get("n_lambda", 100),
                                path + ("n_lambda",), 2),
    }


def _model_selection(value, path):
    if value == "all":
        return "all"
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(f"{_where(path)} must be \"all\" or a model number")
    if not 1 <= value <= 8:
        raise SchemaError(f"{_where(path)} must be between 1 and 8, got {value}")
    return value


def _fit_block(obj, path) -> dict:
    obj = _expect_object(obj, path)
    _check_keys(obj, {"model", "prevalence_threshold", "ps", "outcome"}, path)
    threshold = _expect_float(obj.get("prevalence_threshold", 0.0),
                              path + ("prevalence_threshold",))
    if not 0.0 <= threshold < 1.0:
        raise SchemaError(
            f"{_where(path + ('prevalence_threshold',))} must be in [0, 1)")
    return {
        "model": _model_selection(obj.get("model", "all"), path + ("model",)),
        "prevalence_threshold": threshold,
        "ps": _ps_block(obj.get("ps", {}), path + ("ps",)),
        "outcome": _outcome_block(obj.get("outcome", {}), path + ("outcome",)),
    }


def _simulate_block(obj, path, inputs) -> dict:
    obj = _expect_object(obj, path)
    allowed = {"models", "n_replicates", "mechanism", "bootstrap_size",
               "n_mc", "prevalence_threshold", "ps"}
    _check_keys(obj, allowed, path)
    models = obj.get("models", "all")
    if models == "all":
        models = list(range(1, 9))
    if not isinstance(models, list) or not models:
        raise SchemaError(
            f"{_where(path + ('models',))} must be \"all\" or a non-empty list")
    models = [_model_selection(m, path + ("models", str(k)))
              for k, m in enumerate(models)]
    if len(set(models)) != len(models):
        raise SchemaError(f"{_where(path + ('models',))} has duplicates")

    mechanism = obj.get("mechanism")
    if (mechanism is None) == ("mechanism" not in inputs):
        raise SchemaError(
            "simulate needs exactly one mechanism: inline simulate.mechanism "
            "or inputs.mechanism")
    if mechanism is not None:
        # round-trip through the spec parser to validate shape and types
        spec = MechanismSpec.from_json(json.dumps(_expect_object(
            mechanism, path + ("mechanism",))))
        mechanism = json.loads(spec.to_json())

    threshold = _expect_float(obj.get("prevalence_threshold", 0.0),
                              path + ("prevalence_threshold",))
    if not 0.0 <= threshold < 1.0:
        raise SchemaError(
            f"{_where(path + ('prevalence_threshold',))} must be in [0, 1)")
    size = obj.get("bootstrap_size")
    return {
        "models": models,
        "n_replicates": _expect_int(obj.get("n_replicates"),
                                    path + ("n_replicates",), 2),
        "mechanism": mechanism,
        "bootstrap_size": None if size is None else _expect_int(
            size, path + ("bootstrap_size",), 1),
        "n_mc": _expect_int(obj.get("n_mc", 1_000_000), path + ("n_mc",),
                            100_000),
        "prevalence_threshold": threshold,
        "ps": _ps_block(obj.get("ps", {}), path + ("ps",)),
    }


def _sensitivity_block(obj, path, inputs) -> dict:
    obj = _expect_object(obj, path)
    allowed = {"estimate", "ci", "gap_min", "gap_max", "steps",
               "sd_outcome", "adjusted_vs_unadjusted_gap"}
    _check_keys(obj, allowed, path)
    inline = "estimate" in obj or "ci" in obj
    from_report = "estimate_report" in inputs
    if inline == from_report:
        raise SchemaError(
            "sensitivity needs exactly one estimate source: inline "
            "estimate + ci or inputs.estimate_report")
    out = {"estimate": None, "ci": None}
    if inline:
        if "estimate" not in obj or "ci" not in obj:
            raise SchemaError(
                "inline sensitivity source needs both estimate and ci")
        out["estimate"] = _expect_float(obj["estimate"], path + ("estimate",))
        out["ci"] = _pair(obj["ci"], path + ("ci",))
    if "gap_max" not in obj or "steps" not in obj:
        raise SchemaError("sensitivity needs gap_max and steps")
    out["gap_min"] = _expect_float(obj.get("gap_min", 0.0),
                                   path + ("gap_min",))
    out["gap_max"] = _expect_float(obj["gap_max"], path + ("gap_max",))
    out["steps"] = _expect_int(obj["steps"], path + ("steps",), 2)
    for key in ("sd_outcome", "adjusted_vs_unadjusted_gap"):
        out[key] = (None if obj.get(key) is None
                    else _expect_float(obj[key], path + (key,)))
    return out


def _roster_entry(obj, path) -> dict:
    obj = _expect_object(obj, path)
    _check_keys(obj, {"name", "algorithm", "screener", "params"}, path)
    for key in ("name", "algorithm", "screener"):
        if key not in obj:
            raise SchemaError(f"{_where(path)} needs {key!r}")
    return {
        "name": _expect_str(obj["name"], path + ("name",)),
        "algorithm": _expect_str(obj["algorithm"], path + ("algorithm",)),
        "screener": _expect_str(obj["screener"], path + ("screener",)),
        "params": _expect_object(obj.get("params", {}), path + ("params",)),
    }


def _phenotype_block(obj, path, inputs) -> dict:
    obj = _expect_object(obj, path)
    allowed = {"label_col", "id_col", "v", "reduce", "thresholds",
               "threshold_step", "roster", "text_prefix", "external_threshold"}
    _check_keys(obj, allowed, path)
    reduce_obj = _expect_object(obj.get("reduce", {}), path + ("reduce",))
    _check_keys(reduce_obj, {"enabled", "min_nonmodal"}, path + ("reduce",))
    thresholds = obj.get("thresholds")
    if thresholds is not None:
        if not isinstance(thresholds, list) or not thresholds:
            raise SchemaError(
                f"{_where(path + ('thresholds',))} must be a non-empty list")
        thresholds = [_expect_float(t, path + ("thresholds", str(k)))
                      for k, t in enumerate(thresholds)]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise SchemaError(
                f"{_where(path + ('thresholds',))} must be strictly increasing")
    roster = obj.get("roster")
    if roster is not None:
        if not isinstance(roster, list) or not roster:
            raise SchemaError(
                f"{_where(path + ('roster',))} must be a non-empty list")
        roster = [_roster_entry(e, path + ("roster", str(k)))
                  for k, e in enumerate(roster)]
    external_threshold = obj.get("external_threshold")
    if ("external" in inputs) != (external_threshold is not None):
        raise SchemaError(
            "inputs.external and phenotype.external_threshold go together")
    id_col = obj.get("id_col")
    return {
        "label_col": _expect_str(obj.get("label_col", "label"),
                                 path + ("label_col",)),
        "id_col": None if id_col is None else _expect_str(
            id_col, path + ("id_col",)),
        "v": _expect_int(obj.get("v", 10), path + ("v",), 2),
        "reduce": {
            "enabled": _expect_bool(reduce_obj.get("enabled", True),
                                    path + ("reduce", "enabled")),
            "min_nonmodal": _expect_int(reduce_obj.get("min_nonmodal", 5),
                                        path + ("reduce", "min_nonmodal"), 1),
        },
        "thresholds": thresholds,
        "threshold_step": _expect_float(obj.get("threshold_step", 0.05),
                                        path + ("threshold_step",)),
        "roster": roster,
        "text_prefix": _expect_str(obj.get("text_prefix", "nlp_"),
                                   path + ("text_prefix",)),
        "external_threshold": (
            None if external_threshold is None else _expect_float(
                external_threshold, path + ("external_threshold",))),
    }


def _score_block(obj, path) -> dict:
    obj = _expect_object(obj, path)
    _check_keys(obj, {"id_col", "label_col"}, path)
    id_col = obj.get("id_col")
    label_col = obj.get("label_col")
    return {
        "id_col": None if id_col is None else _expect_str(
            id_col, path + ("id_col",)),
        "label_col": None if label_col is None else _expect_str(
            label_col, path + ("label_col",)),
    }


def _schema_block(obj, path) -> dict:
    obj = _expect_object(obj, path)
    _check_keys(obj, _SCHEMA_KEYS, path)
    defaults = DatasetSchema()
    out = {}
    for key in ("id_col", "treatment_col", "outcome_col", "censor_col"):
        out[key] = _expect_str(obj.get(key, getattr(defaults, key)),
                               path + (key,))
    proxies = obj.get("proxy_features")
    if proxies is not None:
        if not isinstance(proxies, list):
            raise SchemaError(
                f"{_where(path + ('proxy_features',))} must be a list")
        proxies = [_expect_str(p, path + ("proxy_features", str(k)))
                   for k, p in enumerate(proxies)]
    out["proxy_features"] = proxies
    return out


@dataclass(frozen=True)
class RunConfig:
    """A fully validated run: subcommand, seed, inputs, and options.

    ``options`` holds the normalized per-subcommand block; ``base_dir`` is
    where relative input paths resolve (the config file's directory) and is
    not part of the serialized form.
    """

    subcommand: str
    seed: int
    output_dir: str
    workers: int
    inputs: dict
    schema: dict
    options: dict
    base_dir: str = field(default=".", compare=False)

    def to_json(self) -> str:
        payload = {
            "subcommand": self.subcommand,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "workers": self.workers,
            self.subcommand: self.options,
        }
        if self.inputs:
            payload["inputs"] = self.inputs
        if self.schema:
            payload["schema"] = self.schema
        return json.dumps(payload, indent=2, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def resolve(self, path_text: str) -> Path:
        path = Path(path_text)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def with_overrides(self, seed=None, output_dir=None, **option_overrides
                       ) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=_expect_int(seed, ("seed",), 0))
        if output_dir is not None:
            cfg = replace(cfg, output_dir=_expect_str(
                output_dir, ("output_dir",)))
        options = dict(cfg.options)
        for key, value in option_overrides.items():
            if value is None:
                continue
            if key not in options:
                raise SchemaError(
                    f"{key!r} cannot be overridden for {cfg.subcommand}")
            options[key] = value
        if option_overrides:
            cfg = replace(cfg, options=options)
        return cfg

    def dataset_schema(self) -> DatasetSchema:
        block = self.schema or _schema_block({}, ("schema",))
        proxies = block["proxy_features"]
        return DatasetSchema(
            id_col=block["id_col"],
            treatment_col=block["treatment_col"],
            outcome_col=block["outcome_col"],
            censor_col=block["censor_col"],
            proxy_features=None if proxies is None else tuple(proxies),
        )

    def ps_config(self) -> PsConfig:
        ps = self.options["ps"]
        grid = ps["lambda_grid"]
        return PsConfig(
            n_folds=ps["n_folds"],
            truncation=tuple(ps["truncation"]),
            n_lambda=ps["n_lambda"],
            lambda_grid=None if grid is None else tuple(grid),
            alpha=ps["alpha"],
            collaborative_patience=ps["collaborative_patience"],
            collaborative_full_grid=ps["collaborative_full_grid"],
        )


def parse_config(text: str, base_dir: str = ".") -> RunConfig:
    """Parse and normalize a config document; strict about every key."""
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config is not valid JSON: {exc}") from None
    payload = _expect_object(payload, ())
    if "subcommand" not in payload:
        raise SchemaError("config needs a subcommand")
    sub = payload["subcommand"]
    if sub not in SUBCOMMANDS:
        raise SchemaError(
            f"unknown subcommand {sub!r}; expected one of {', '.join(SUBCOMMANDS)}")
    _check_keys(payload, {"subcommand", "seed", "output_dir", "workers",
                          "inputs", "schema", sub}, ())
    if "seed" not in payload:
        raise SchemaError("config needs an explicit integer seed")
    seed = _expect_int(payload["seed"], ("seed",), 0)
    if "output_dir" not in payload:
        raise SchemaError("config needs an output_dir")
    output_dir = _expect_str(payload["output_dir"], ("output_dir",))
    workers = _expect_int(payload.get("workers", 1), ("workers",), 1)

    allowed_inputs, required_inputs = _INPUT_KEYS[sub]
    inputs = _expect_object(payload.get("inputs", {}), ("inputs",))
    _check_keys(inputs, allowed_inputs, ("inputs",))
    inputs = {key: _expect_str(value, ("inputs", key))
              for key, value in inputs.items()}
    missing = required_inputs - set(inputs)
    if missing:
        raise SchemaError(f"inputs.{sorted(missing)[0]} is required for {sub}")

    schema = {}
    if "schema" in payload:
        if sub not in ("fit", "simulate"):
            raise SchemaError(f"schema block does not apply to {sub}")
        schema = _schema_block(payload["schema"], ("schema",))

    block = payload.get(sub, {})
    if sub == "fit":
        options = _fit_block(block, (sub,))
    elif sub == "simulate":
        options = _simulate_block(block, (sub,), inputs)
    elif sub == "sensitivity":
        options = _sensitivity_block(block, (sub,), inputs)
    elif sub == "phenotype":
        options = _phenotype_block(block, (sub,), inputs)
    else:
        options = _score_block(block, (sub,))

    return RunConfig(
        subcommand=sub,
        seed=seed,
        output_dir=output_dir,
        workers=workers,
        inputs=inputs,
        schema=schema,
        options=options,
        base_dir=base_dir,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"config file does not exist: {path}")
    return parse_config(path.read_text(), base_dir=str(path.parent))


def validate_inputs(config: RunConfig) -> None:
    """Confirm every referenced input path exists before any work starts."""
    for key, value in sorted(config.inputs.items()):
        resolved = config.resolve(value)
        if not resolved.is_file():
            raise InputError(f"inputs.{key} does not exist: {resolved}")
