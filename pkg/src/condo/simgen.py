"""Seeded generators for the synthetic confounded-shift scenarios.

Each scenario draws latent (pre-batch-effect) features from a fixed
conditional law given the confounder. The source is observed through the
inverse of ``true_map`` (when ``feature_shift``) with optional unit Gaussian
noise added afterwards, in the observed source frame.

Conditional laws:

* ``homoscedastic_linear``: ``x | y ~ N(3y + 2, 1)``
* ``heteroscedastic_linear``: ``x | y ~ N(3y + 2, (0.25 + 0.5y)^2)``
* ``nonlinear_heteroscedastic``: ``x | y ~ N(8 sin(y/2) + y, (0.25 + y/8)^2)``
* ``categorical_1d``: four categories with means 0, 4, 8, 12 and unit std
* ``two_circles_2d``: two circles centred at (0, 0) ("lower") and (0, 2)
  ("upper"), uniform angle, radius ``N(1, 0.1)``

Continuous confounders are uniform on (0, 8) for the target and on (4, 8)
for a label-shifted source.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CATEGORICAL, CONTINUOUS, FULL_AFFINE, AffineMap, Dataset, InvalidArgument

SCENARIOS = (
    "homoscedastic_linear",
    "heteroscedastic_linear",
    "nonlinear_heteroscedastic",
    "categorical_1d",
    "two_circles_2d",
)
CONTINUOUS_SCENARIOS = SCENARIOS[:3]

# latent = 0.5 * source - 3
SHIFT_1D = AffineMap(np.array([[0.5]]), np.array([-3.0]))
SHIFT_2D = AffineMap(np.array([[1.5, 0.7], [0.0, 1.2]]), np.array([2.0, -1.0]))

CATEGORIES = ("c0", "c1", "c2", "c3")
CATEGORY_MEANS = np.array([0.0, 4.0, 8.0, 12.0])
SOURCE_CATEGORY_SHIFTED = np.array([0.4, 0.3, 0.2, 0.1])
CIRCLE_CENTERS = {"lower": np.array([0.0, 0.0]), "upper": np.array([0.0, 2.0])}


@dataclass(frozen=True)
class ScenarioSpec:
    scenario: str
    n_source: int = 200
    n_target: int = 200
    label_shift: bool = True
    feature_shift: bool = True
    noise: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InvalidArgument(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.n_source < 2 or self.n_target < 2:
            raise InvalidArgument("n_source and n_target must be at least 2")


@dataclass(frozen=True, eq=False)
class Scenario:
    source: Dataset
    target: Dataset
    oracle_source: Dataset
    heldout_source: Dataset
    heldout_oracle: Dataset
    true_map: AffineMap

    def splits(self) -> dict:
        return {
            "source": self.source,
            "target": self.target,
            "oracle_source": self.oracle_source,
            "heldout_source": self.heldout_source,
            "heldout_oracle": self.heldout_oracle,
        }


def _latent_continuous(scenario: str, y: np.ndarray, rng) -> np.ndarray:
    eps = rng.standard_normal(y.shape)
    if scenario == "homoscedastic_linear":
        x = 3 * y + 2 + eps
    elif scenario == "heteroscedastic_linear":
        x = 3 * y + 2 + (0.25 + 0.5 * y) * eps
    else:
        x = 8 * np.sin(y / 2) + y + (0.25 + 0.5 * y / 4) * eps
    return x[:, None]


def _draw(spec: ScenarioSpec, n: int, role: str, rng):
    """Confounders and latent features for one split.

    ``role`` is ``"source"`` (label-shifted prior when requested) or
    ``"target"``.
    """
    shifted = role == "source" and spec.label_shift
    if spec.scenario in CONTINUOUS_SCENARIOS:
        y = rng.uniform(4.0, 8.0, n) if shifted else rng.uniform(0.0, 8.0, n)
        return [(float(v),) for v in y], _latent_continuous(spec.scenario, y, rng)
    if spec.scenario == "categorical_1d":
        probs = SOURCE_CATEGORY_SHIFTED if shifted else np.full(4, 0.25)
        cat = rng.choice(4, size=n, p=probs)
        x = CATEGORY_MEANS[cat] + rng.standard_normal(n)
        return [(CATEGORIES[c],) for c in cat], x[:, None]
    # two circles: a quarter of a shifted source lies on the upper loop
    p_upper = 0.25 if shifted else 0.5
    upper = rng.random(n) < p_upper
    angle = rng.uniform(0.0, 2 * np.pi, n)
    radius = rng.normal(1.0, 0.1, n)
    centers = np.where(upper[:, None], CIRCLE_CENTERS["upper"], CIRCLE_CENTERS["lower"])
    x = centers + radius[:, None] * np.column_stack([np.cos(angle), np.sin(angle)])
    return [("upper" if u else "lower",) for u in upper], x


def generate(spec: ScenarioSpec) -> Scenario:
    rng = np.random.default_rng(spec.seed)
    two_d = spec.scenario == "two_circles_2d"
    if spec.feature_shift:
        true_map = SHIFT_2D if two_d else SHIFT_1D
    else:
        true_map = AffineMap.identity(2 if two_d else 1, FULL_AFFINE)
    inverse = true_map.inverse()
    kind = CONTINUOUS if spec.scenario in CONTINUOUS_SCENARIOS else CATEGORICAL
    schema = [("y", kind)]
    names = ("x0", "x1") if two_d else ("x0",)

    def observe(latent):
        x = inverse.apply(latent) if spec.feature_shift else latent.copy()
        if spec.noise:
            x = x + rng.standard_normal(x.shape)
        return x

    y_src, lat_src = _draw(spec, spec.n_source, "source", rng)
    y_tgt, lat_tgt = _draw(spec, spec.n_target, "target", rng)
    y_held, lat_held = _draw(spec, spec.n_source, "target", rng)
    x_src = observe(lat_src)
    x_held = observe(lat_held)

    def ds(x, y):
        return Dataset(x, y, names, schema)

    return Scenario(
        source=ds(x_src, y_src),
        target=ds(lat_tgt, y_tgt),
        oracle_source=ds(lat_src, y_src),
        heldout_source=ds(x_held, y_held),
        heldout_oracle=ds(lat_held, y_held),
        true_map=true_map,
    )


def side_labels(data: Dataset) -> np.ndarray:
    """Left (-1) / right (+1) labels from the first latent coordinate."""
    return np.where(data.features[:, 0] > 0, 1, -1)


def loop_labels(data: Dataset) -> np.ndarray:
    """Lower (-1) / upper (+1) labels from the circle confounder."""
    return np.array([1 if y[0] == "upper" else -1 for y in data.confounders])
