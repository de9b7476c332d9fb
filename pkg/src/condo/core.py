"""Domain types, configuration, validation and model (de)serialization."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"
KINDS = (CONTINUOUS, CATEGORICAL)

FULL_AFFINE = "full_affine"
LOCATION_SCALE = "location_scale"
TRANSFORM_KINDS = (FULL_AFFINE, LOCATION_SCALE)

METHODS = (
    "gaussian_ot",
    "mmd",
    "condo_linear_forward_kl",
    "condo_linear_reverse_kl",
    "condo_gp_reverse_kl",
    "condo_mmd",
)
KL_METHODS = ("condo_linear_forward_kl", "condo_linear_reverse_kl", "condo_gp_reverse_kl")
ITERATIVE_METHODS = ("mmd", "condo_mmd")

FORMAT_VERSION = 1

ConfounderValue = tuple  # entries: float (continuous) or str (categorical)


# --------------------------------------------------------------------------
# Errors
# --------------------------------------------------------------------------


class CondoError(Exception):
    """Base class for all library errors."""


class DataError(CondoError):
    """Bad input data: shapes, schemas, parse failures."""


class NumericalError(CondoError):
    """A numerical procedure could not produce a valid result."""


class InvalidArgument(CondoError, ValueError):
    pass


class DimensionMismatch(DataError):
    pass


class SchemaMismatch(DataError):
    pass


class ValidationError(DataError):
    pass


class UnknownCategory(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.field = field


class SingularMatrix(NumericalError):
    pass


class SingularCovariance(NumericalError):
    pass


class NonPositiveDeterminant(NumericalError):
    pass


class NumericalFailure(NumericalError):
    pass


class DegenerateProblem(NumericalError):
    pass


class DegenerateWeights(UserWarning):
    """Confounder query has (almost) no kernel support in a dataset."""


class NonConvergence(UserWarning):
    pass


# --------------------------------------------------------------------------
# Dataset
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix plus per-sample confounder records.

    ``confounders[n]`` is a tuple with one entry per ``confounder_schema``
    item: a float for continuous entries, a non-empty string for
    categorical ones.
    """

    features: np.ndarray
    confounders: tuple
    feature_names: tuple = ()
    confounder_schema: tuple = ()

    def __post_init__(self):
        x = np.array(self.features, dtype=float, copy=True)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValidationError(f"features must be a non-empty N x M matrix, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValidationError("features contain non-finite values")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)

        names = tuple(self.feature_names) or tuple(f"x{i}" for i in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise ValidationError(f"{len(names)} feature names for {x.shape[1]} columns")
        object.__setattr__(self, "feature_names", names)

        schema = tuple((str(n), str(k)) for n, k in self.confounder_schema)
        for name, kind in schema:
            if kind not in KINDS:
                raise ValidationError(f"confounder {name!r} has unknown kind {kind!r}")
        object.__setattr__(self, "confounder_schema", schema)

        if len(self.confounders) != x.shape[0]:
            raise ValidationError(
                f"{len(self.confounders)} confounder records for {x.shape[0]} samples"
            )
        conf = tuple(_coerce_value(v, schema, n) for n, v in enumerate(self.confounders))
        object.__setattr__(self, "confounders", conf)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: np.ndarray) -> "Dataset":
        return dataclasses.replace(self, features=features)

    def with_confounders(self, confounders, schema) -> "Dataset":
        return Dataset(self.features, tuple(confounders), self.feature_names, tuple(schema))


def _coerce_value(value, schema, row) -> tuple:
    if not isinstance(value, (tuple, list)):
        value = (value,)
    if len(value) != len(schema):
        raise SchemaMismatch(
            f"sample {row}: confounder arity {len(value)} does not match schema of length {len(schema)}"
        )
    out = []
    for entry, (name, kind) in zip(value, schema):
        if kind == CONTINUOUS:
            if isinstance(entry, str):
                try:
                    entry = float(entry)
                except ValueError:
                    raise SchemaMismatch(f"sample {row}: {name!r} expects a number, got {entry!r}")
            entry = float(entry)
            if not math.isfinite(entry):
                raise ValidationError(f"sample {row}: {name!r} is not finite")
        else:
            if not isinstance(entry, str):
                raise SchemaMismatch(f"sample {row}: {name!r} expects a category token, got {entry!r}")
            if not entry:
                raise ValidationError(f"sample {row}: empty category token for {name!r}")
        out.append(entry)
    return tuple(out)


def validate_value(value, schema) -> tuple:
    """Check a single confounder record against ``schema`` and normalize it."""
    return _coerce_value(value, tuple(schema), "query")


def validate_pair(source: Dataset, target: Dataset) -> None:
    if source.m != target.m:
        raise DimensionMismatch(f"source has {source.m} features, target has {target.m}")
    if source.confounder_schema != target.confounder_schema:
        raise SchemaMismatch(
            f"confounder schemas differ: {list(source.confounder_schema)} vs {list(target.confounder_schema)}"
        )


# --------------------------------------------------------------------------
# Affine maps
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AffineMap:
    """``g(x) = A x + b``; ``location_scale`` maps have diagonal ``A``."""

    matrix_a: np.ndarray
    offset_b: np.ndarray
    kind: str = FULL_AFFINE

    def __post_init__(self):
        a = np.array(self.matrix_a, dtype=float, copy=True)
        b = np.array(self.offset_b, dtype=float, copy=True).reshape(-1)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError(f"matrix_a must be square, got shape {a.shape}")
        if b.shape[0] != a.shape[0]:
            raise DimensionMismatch(f"offset_b has length {b.shape[0]}, matrix_a is {a.shape}")
        if self.kind not in TRANSFORM_KINDS:
            raise ValidationError(f"unknown transform kind {self.kind!r}")
        if self.kind == LOCATION_SCALE and np.any(a[~np.eye(a.shape[0], dtype=bool)] != 0):
            raise ValidationError("location_scale map has non-zero off-diagonal entries")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "matrix_a", a)
        object.__setattr__(self, "offset_b", b)

    @property
    def m(self) -> int:
        return self.matrix_a.shape[0]

    @classmethod
    def identity(cls, m: int, kind: str = FULL_AFFINE) -> "AffineMap":
        return cls(np.eye(m), np.zeros(m), kind)

    def apply(self, data) -> np.ndarray:
        return apply_map(self, data)

    def inverse(self) -> "AffineMap":
        """Analytic inverse ``x -> A^{-1}(x - b)``."""
        try:
            inv = np.linalg.inv(self.matrix_a)
        except np.linalg.LinAlgError:
            raise SingularMatrix("affine map is not invertible")
        if not np.all(np.isfinite(inv)) or np.linalg.cond(self.matrix_a) > 1e15:
            raise SingularMatrix("affine map is not invertible")
        if self.kind == LOCATION_SCALE:
            inv = np.diag(np.diag(inv))
        return AffineMap(inv, -inv @ self.offset_b, self.kind)


def apply_map(g: AffineMap, data) -> np.ndarray:
    x = np.asarray(data, dtype=float)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != g.m:
        raise DimensionMismatch(f"data has {x2.shape[-1]} columns, map expects {g.m}")
    out = x2 @ g.matrix_a.T + g.offset_b
    return out[0] if single else out


# --------------------------------------------------------------------------
# Configuration and reports
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    method: str = "condo_linear_reverse_kl"
    transform_kind: str = LOCATION_SCALE
    iterations: int = 1000
    batch_size: int = 128
    learning_rate: float | None = None  # None -> per-method default
    momentum: float = 0.9
    seed: int = 0
    ridge: float = 1e-3
    bandwidth_floor: float = 1e-6
    prototypes_k: int = 10
    dedup: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgument(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.transform_kind not in TRANSFORM_KINDS:
            raise InvalidArgument(f"unknown transform kind {self.transform_kind!r}")
        if self.method == "condo_gp_reverse_kl" and self.transform_kind != LOCATION_SCALE:
            raise InvalidArgument("condo_gp_reverse_kl only supports location_scale maps")
        if not isinstance(self.iterations, int) or self.iterations < 0:
            raise InvalidArgument("iterations must be a non-negative integer")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise InvalidArgument("batch_size must be a positive integer")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise InvalidArgument("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise InvalidArgument("momentum must lie in [0, 1)")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise InvalidArgument("seed must be a 64-bit unsigned integer")
        if not self.ridge >= 0:
            raise InvalidArgument("ridge must be non-negative")
        if not self.bandwidth_floor > 0:
            raise InvalidArgument("bandwidth_floor must be positive")
        if not isinstance(self.prototypes_k, int) or self.prototypes_k < 1:
            raise InvalidArgument("prototypes_k must be a positive integer")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 1e-3 if self.method in ITERATIVE_METHODS else 1e-2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True, eq=False)
class FitReport:
    transform: AffineMap
    objective_trace: tuple = ()
    final_objective: float = float("nan")
    config: FitConfig = field(default_factory=FitConfig)
    wall_time_seconds: float = 0.0
    feature_names: tuple = ()
    confounder_schema: tuple = ()


def serialize_model(report: FitReport) -> bytes:
    g = report.transform
    doc = {
        "format_version": FORMAT_VERSION,
        "method": report.config.method,
        "transform_kind": g.kind,
        "m": g.m,
        "a": [[float(v) for v in row] for row in g.matrix_a],
        "b": [float(v) for v in g.offset_b],
        "config": report.config.to_dict(),
        "final_objective": _finite_or_none(report.final_objective),
        "seed": report.config.seed,
        "objective_trace": [[int(i), float(v)] for i, v in report.objective_trace],
        "feature_names": list(report.feature_names),
        "confounders": [[n, k] for n, k in report.confounder_schema],
        "wall_time_seconds": float(report.wall_time_seconds),
    }
    # json emits repr() for floats, which round-trips exactly
    return (json.dumps(doc, indent=2) + "\n").encode("utf-8")


def _finite_or_none(v):
    # strict JSON has no NaN; closed-form fits without an objective store null
    v = float(v)
    return v if np.isfinite(v) else None


def _require(doc: dict, key: str, types):
    if key not in doc:
        raise ParseError("missing required field", field=key)
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, types):
        raise ParseError(f"wrong type {type(value).__name__}", field=key)
    return value


def deserialize_model(data: Union[bytes, str]) -> FitReport:
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc.msg}", line=exc.lineno) from None
    if not isinstance(doc, dict):
        raise ParseError("model file must hold a JSON object", line=1)
    version = _require(doc, "format_version", int)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported format_version {version}", field="format_version")
    m = _require(doc, "m", int)
    a = _require(doc, "a", list)
    b = _require(doc, "b", list)
    try:
        a_arr = np.array(a, dtype=float)
        b_arr = np.array(b, dtype=float)
    except (TypeError, ValueError):
        raise ParseError("non-numeric matrix entries", field="a/b") from None
    if a_arr.shape != (m, m):
        raise ParseError(f"expected {m}x{m} matrix, got shape {a_arr.shape}", field="a")
    if b_arr.shape != (m,):
        raise ParseError(f"expected {m} offsets, got shape {b_arr.shape}", field="b")
    kind = _require(doc, "transform_kind", str)
    cfg_doc = _require(doc, "config", dict)
    known = {f.name for f in dataclasses.fields(FitConfig)}
    unknown = set(cfg_doc) - known
    if unknown:
        raise ParseError(f"unknown config keys {sorted(unknown)}", field="config")
    try:
        config = FitConfig(**cfg_doc)
    except (InvalidArgument, TypeError) as exc:
        raise ValidationError(f"invalid config: {exc}") from None
    method = _require(doc, "method", str)
    if method != config.method:
        raise ValidationError(f"method {method!r} disagrees with config {config.method!r}")
    transform = AffineMap(a_arr, b_arr, kind)  # raises ValidationError on bad invariants
    final = doc.get("final_objective", KeyError)
    if final is KeyError:
        raise ParseError("missing required field", field="final_objective")
    if final is None:
        final = float("nan")
    elif isinstance(final, bool) or not isinstance(final, (int, float)):
        raise ParseError(f"wrong type {type(final).__name__}", field="final_objective")
    trace = doc.get("objective_trace", [])
    try:
        trace = tuple((int(i), float(v)) for i, v in trace)
    except (TypeError, ValueError):
        raise ParseError("malformed objective trace", field="objective_trace") from None
    schema = tuple((str(n), str(k)) for n, k in doc.get("confounders", []))
    return FitReport(
        transform=transform,
        objective_trace=trace,
        final_objective=float(final),
        config=config,
        wall_time_seconds=float(doc.get("wall_time_seconds", 0.0)),
        feature_names=tuple(doc.get("feature_names", [])),
        confounder_schema=schema,
    )
