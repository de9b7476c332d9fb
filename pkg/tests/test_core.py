import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from condo.core import (
    CATEGORICAL,
    CONTINUOUS,
    FULL_AFFINE,
    LOCATION_SCALE,
    AffineMap,
    Dataset,
    DimensionMismatch,
    FitConfig,
    FitReport,
    InvalidArgument,
    ParseError,
    SchemaMismatch,
    SingularMatrix,
    ValidationError,
    apply_map,
    deserialize_model,
    serialize_model,
    validate_pair,
)


def _ds(m, schema=(("age", CONTINUOUS),), n=4):
    conf = [tuple(1.0 if k == CONTINUOUS else "a" for _, k in schema)] * n
    return Dataset(np.zeros((n, m)), conf, confounder_schema=schema)


class TestValidatePair:
    def test_matching(self):
        validate_pair(_ds(3), _ds(3))

    def test_width_mismatch(self):
        with pytest.raises(DimensionMismatch):
            validate_pair(_ds(3), _ds(2))

    def test_kind_mismatch(self):
        with pytest.raises(SchemaMismatch):
            validate_pair(_ds(3), _ds(3, (("age", CATEGORICAL),)))

    def test_order_mismatch(self):
        a = (("u", CONTINUOUS), ("v", CATEGORICAL))
        b = (("v", CATEGORICAL), ("u", CONTINUOUS))
        with pytest.raises(SchemaMismatch):
            validate_pair(_ds(1, a), _ds(1, b))


class TestDataset:
    def test_default_names(self):
        d = _ds(2)
        assert d.feature_names == ("x0", "x1")
        assert (d.n, d.m) == (4, 2)

    def test_features_read_only(self):
        d = _ds(2)
        with pytest.raises(ValueError):
            d.features[0, 0] = 1.0

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            Dataset([[np.nan]], [(1.0,)], confounder_schema=[("y", CONTINUOUS)])

    def test_arity_mismatch(self):
        with pytest.raises(SchemaMismatch):
            Dataset([[1.0]], [(1.0, 2.0)], confounder_schema=[("y", CONTINUOUS)])

    def test_empty_token(self):
        with pytest.raises(ValidationError):
            Dataset([[1.0]], [("",)], confounder_schema=[("c", CATEGORICAL)])

    def test_numeric_token_for_category(self):
        with pytest.raises(SchemaMismatch):
            Dataset([[1.0]], [(3,)], confounder_schema=[("c", CATEGORICAL)])

    def test_continuous_strings_parsed(self):
        d = Dataset([[1.0]], [("2.5",)], confounder_schema=[("y", CONTINUOUS)])
        assert d.confounders == ((2.5,),)

    def test_row_count(self):
        with pytest.raises(ValidationError):
            Dataset(np.zeros((2, 1)), [(1.0,)], confounder_schema=[("y", CONTINUOUS)])


class TestApplyMap:
    def test_identity(self, rng):
        x = rng.standard_normal((5, 3))
        np.testing.assert_array_equal(apply_map(AffineMap.identity(3), x), x)

    def test_scale_shift(self):
        g = AffineMap([[2.0]], [3.0], LOCATION_SCALE)
        np.testing.assert_array_equal(apply_map(g, [1.0]), [5.0])

    def test_permutation(self):
        g = AffineMap([[0, 1], [1, 0]], [0, 0])
        np.testing.assert_array_equal(apply_map(g, [1.0, 2.0]), [2.0, 1.0])

    def test_shape_preserved(self, rng):
        x = rng.standard_normal((7, 2))
        assert apply_map(AffineMap.identity(2), x).shape == (7, 2)

    def test_width_mismatch(self):
        with pytest.raises(DimensionMismatch):
            apply_map(AffineMap.identity(2), np.zeros((3, 3)))

    @settings(max_examples=50, deadline=None)
    @given(
        a=arrays(float, (3, 3), elements=st.floats(-5, 5)),
        b=arrays(float, 3, elements=st.floats(-5, 5)),
        x=arrays(float, 3, elements=st.floats(-5, 5)),
        z=arrays(float, 3, elements=st.floats(-5, 5)),
        alpha=st.floats(-3, 3),
        beta=st.floats(-3, 3),
    )
    def test_linearity(self, a, b, x, z, alpha, beta):
        g = AffineMap(a, b)
        lhs = g.apply(alpha * x + beta * z)
        rhs = alpha * g.apply(x) + beta * g.apply(z) - (alpha + beta - 1) * b
        np.testing.assert_allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(lhs).max()) * 100)


class TestAffineMap:
    def test_location_scale_must_be_diagonal(self):
        with pytest.raises(ValidationError):
            AffineMap([[1, 1], [0, 1]], [0, 0], LOCATION_SCALE)

    def test_offset_length(self):
        with pytest.raises(DimensionMismatch):
            AffineMap(np.eye(2), [0.0])

    def test_inverse_round_trip(self, rng):
        g = AffineMap(rng.standard_normal((3, 3)) + 3 * np.eye(3), rng.standard_normal(3))
        x = rng.standard_normal((10, 3))
        np.testing.assert_allclose(g.inverse().apply(g.apply(x)), x, atol=1e-12)

    def test_inverse_singular(self):
        with pytest.raises(SingularMatrix):
            AffineMap([[1, 2], [2, 4]], [0, 0]).inverse()


class TestFitConfig:
    def test_defaults(self):
        c = FitConfig()
        assert (c.iterations, c.batch_size, c.momentum, c.ridge, c.bandwidth_floor, c.prototypes_k) == (
            1000, 128, 0.9, 1e-3, 1e-6, 10)

    def test_lr_defaults(self):
        assert FitConfig(method="condo_mmd").lr == 1e-3
        assert FitConfig(method="condo_linear_reverse_kl").lr == 1e-2
        assert FitConfig(method="mmd", learning_rate=0.5).lr == 0.5

    def test_gp_full_rejected(self):
        with pytest.raises(InvalidArgument):
            FitConfig(method="condo_gp_reverse_kl", transform_kind=FULL_AFFINE)

    @pytest.mark.parametrize("kw", [
        {"method": "nope"}, {"iterations": -1}, {"batch_size": 0}, {"learning_rate": 0.0},
        {"momentum": 1.0}, {"seed": -1}, {"seed": 2**64}, {"ridge": -1e-3}, {"bandwidth_floor": 0.0},
        {"prototypes_k": 0},
    ])
    def test_out_of_range(self, kw):
        with pytest.raises(InvalidArgument):
            FitConfig(**kw)


def _report(kind=FULL_AFFINE, m=2):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((m, m)) if kind == FULL_AFFINE else np.diag(rng.random(m) + 0.5)
    return FitReport(
        transform=AffineMap(a, rng.standard_normal(m), kind),
        objective_trace=((1, 3.25), (2, 1.0 / 3.0)),
        final_objective=1.0 / 3.0,
        config=FitConfig(method="condo_linear_reverse_kl", transform_kind=kind, seed=7),
        wall_time_seconds=0.125,
        feature_names=("a", "b")[:m],
        confounder_schema=(("y", CONTINUOUS),),
    )


class TestSerialization:
    def test_round_trip_full_affine(self):
        r = _report()
        back = deserialize_model(serialize_model(r))
        np.testing.assert_array_equal(back.transform.matrix_a, r.transform.matrix_a)
        np.testing.assert_array_equal(back.transform.offset_b, r.transform.offset_b)
        assert back.transform.kind == r.transform.kind
        assert back.objective_trace == r.objective_trace
        assert back.final_objective == r.final_objective
        assert back.config == r.config
        assert back.wall_time_seconds == r.wall_time_seconds
        assert back.feature_names == r.feature_names
        assert back.confounder_schema == r.confounder_schema

    def test_layout(self):
        doc = json.loads(serialize_model(_report()))
        for key in ("format_version", "method", "transform_kind", "m", "a", "b", "config",
                    "final_objective", "seed"):
            assert key in doc
        assert doc["format_version"] == 1 and doc["seed"] == 7 and doc["m"] == 2

    def test_serialize_is_stable(self):
        assert serialize_model(_report()) == serialize_model(_report())

    def test_nan_objective_stored_as_null(self):
        r = FitReport(AffineMap.identity(1), config=FitConfig(method="gaussian_ot"))
        raw = serialize_model(r)
        assert json.loads(raw)["final_objective"] is None
        assert np.isnan(deserialize_model(raw).final_objective)

    def test_truncated(self):
        raw = serialize_model(_report())
        with pytest.raises(ParseError) as info:
            deserialize_model(raw[: len(raw) // 2])
        assert info.value.line is not None

    def test_missing_field(self):
        doc = json.loads(serialize_model(_report()))
        del doc["b"]
        with pytest.raises(ParseError) as info:
            deserialize_model(json.dumps(doc))
        assert info.value.field == "b"

    def test_wrong_type(self):
        doc = json.loads(serialize_model(_report()))
        doc["m"] = "two"
        with pytest.raises(ParseError):
            deserialize_model(json.dumps(doc))

    def test_off_diagonal_location_scale(self):
        doc = json.loads(serialize_model(_report(LOCATION_SCALE)))
        doc["a"][0][1] = 0.5
        with pytest.raises(ValidationError):
            deserialize_model(json.dumps(doc))

    def test_shape_mismatch(self):
        doc = json.loads(serialize_model(_report()))
        doc["a"] = [[1.0]]
        with pytest.raises(ParseError):
            deserialize_model(json.dumps(doc))
