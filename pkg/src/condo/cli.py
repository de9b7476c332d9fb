"""Command-line front end: fit, transform, simulate, eval and report.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .core import (
    FULL_AFFINE,
    KINDS,
    LOCATION_SCALE,
    METHODS,
    DataError,
    Dataset,
    FitConfig,
    InvalidArgument,
    NumericalError,
    ParseError,
    deserialize_model,
    serialize_model,
)
from .simgen import ScenarioSpec, generate
from .solver import fit

log = logging.getLogger("condo")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
TRANSFORM_FLAGS = {"full": FULL_AFFINE, "diag": LOCATION_SCALE}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# CSV helpers
# --------------------------------------------------------------------------


def parse_confounder_spec(spec: str | None) -> list[tuple[str, str]]:
    """``"age:continuous,site:categorical"`` -> ``[("age", "continuous"), ...]``."""
    if not spec:
        return []
    out = []
    for item in spec.split(","):
        name, sep, kind = item.strip().partition(":")
        if not sep or not name or kind not in KINDS:
            raise UsageError(f"bad confounder spec {item!r}; expected name:continuous or name:categorical")
        out.append((name, kind))
    return out


def read_table(path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise ParseError(f"{path} is empty", line=1)
    header, body = rows[0], [r for r in rows[1:] if r]
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise ParseError(f"{path}: expected {len(header)} columns, got {len(r)}", line=lineno)
    return header, body


def _is_numeric(values) -> bool:
    try:
        for v in values:
            float(v)
    except ValueError:
        return False
    return True


def _column(header, body, name, path):
    if name not in header:
        raise DataError(f"{path}: missing column {name!r}")
    j = header.index(name)
    return [r[j] for r in body]


def numeric_columns(header, body, exclude=()) -> list[str]:
    cols = [name for name in header if name not in exclude]
    return [name for name in cols if _is_numeric(_column(header, body, name, ""))]


def read_dataset(path, schema, feature_names=None) -> Dataset:
    """Load a CSV; features are the numeric columns not used as confounders."""
    header, body = read_table(path)
    conf_names = [n for n, _ in schema]
    conf_cols = [_column(header, body, n, path) for n in conf_names]
    if feature_names is None:
        feature_names = numeric_columns(header, body, exclude=conf_names)
    if not feature_names:
        raise DataError(f"{path}: no numeric feature columns")
    try:
        x = np.array([[float(v) for v in _column(header, body, f, path)] for f in feature_names]).T
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric feature value ({exc})") from None
    confounders = list(zip(*conf_cols)) if conf_cols else [()] * len(body)
    return Dataset(x, confounders, tuple(feature_names), tuple(schema))


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating, int, np.integer)) else str(v)


def write_table(path, header, rows) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from None


def write_dataset(path, data: Dataset) -> None:
    header = list(data.feature_names) + [n for n, _ in data.confounder_schema]
    rows = [list(x) + list(y) for x, y in zip(data.features, data.confounders)]
    write_table(path, header, rows)


def write_svg_scatter(path, groups: dict) -> None:
    """Static scatter of ``{role: (N x 2 points)}``, one colour per role."""
    palette = ["#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd"]
    pts = np.vstack([g for g in groups.values()])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    size, pad = 480, 30

    def px(p):
        u = pad + (p[0] - lo[0]) / span[0] * (size - 2 * pad)
        v = size - pad - (p[1] - lo[1]) / span[1] * (size - 2 * pad)
        return u, v

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20 * len(groups)}">',
             f'<rect width="{size}" height="{size}" fill="white" stroke="#999"/>']
    for k, (role, g) in enumerate(groups.items()):
        colour = palette[k % len(palette)]
        for p in g:
            u, v = px(p)
            parts.append(f'<circle cx="{u:.2f}" cy="{v:.2f}" r="2" fill="{colour}" fill-opacity="0.6"/>')
        parts.append(f'<text x="10" y="{size + 15 + 20 * k}" fill="{colour}" font-size="12">{role}</text>')
    parts.append("</svg>")
    try:
        Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot write plot {path}: {exc.strerror}") from None


# --------------------------------------------------------------------------
# Verbs
# --------------------------------------------------------------------------


def cmd_fit(args) -> int:
    schema = parse_confounder_spec(args.confounders)
    try:
        config = FitConfig(
            method=args.method,
            transform_kind=TRANSFORM_FLAGS[args.transform],
            iterations=args.iterations,
            batch_size=args.batch_size,
            learning_rate=args.lr,
            momentum=args.momentum,
            seed=args.seed,
            ridge=args.ridge,
            prototypes_k=args.prototypes_k,
            dedup=not args.no_dedup,
        )
    except InvalidArgument as exc:
        raise UsageError(str(exc)) from None
    source = read_dataset(args.source, schema)
    target = read_dataset(args.target, schema, feature_names=list(source.feature_names))
    report = fit(source, target, config)
    out = Path(args.out)
    try:
        out.write_bytes(serialize_model(report))
    except OSError as exc:
        raise DataError(f"cannot write {out}: {exc.strerror}") from None
    trace = report.objective_trace
    if trace:
        print(f"{config.method}: objective {trace[0][1]:.6g} -> {trace[-1][1]:.6g} "
              f"over {len(trace)} iterations", file=sys.stderr)
    elif np.isfinite(report.final_objective):
        print(f"{config.method}: closed form, objective {report.final_objective:.6g}", file=sys.stderr)
    else:
        print(f"{config.method}: closed form", file=sys.stderr)
    return 0


def _load_model(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    return deserialize_model(raw)


def cmd_transform(args) -> int:
    report = _load_model(args.model)
    g = report.transform
    if args.inverse:
        g = g.inverse()  # SingularMatrix -> exit 4
    header, body = read_table(args.input)
    conf = [n for n, _ in report.confounder_schema]
    names = list(report.feature_names) or numeric_columns(header, body, exclude=conf)
    missing = [n for n in names if n not in header]
    if missing or len(names) != g.m:
        raise DataError(f"{args.input}: expected feature columns {names}, width {g.m}")
    idx = [header.index(n) for n in names]
    try:
        x = np.array([[float(r[j]) for j in idx] for r in body])
    except ValueError as exc:
        raise DataError(f"{args.input}: non-numeric feature value ({exc})") from None
    y = g.apply(x.reshape(len(body), g.m))
    rows = []
    for r, adapted in zip(body, y):
        out = list(r)
        for j, v in zip(idx, adapted):
            out[j] = float(v)
        rows.append(out)
    write_table(args.out, header, rows)
    return 0


def cmd_simulate(args) -> int:
    try:
        spec = ScenarioSpec(args.scenario, args.n_source, args.n_target, args.label_shift,
                            args.feature_shift, args.noise, args.seed)
    except InvalidArgument as exc:
        raise UsageError(str(exc)) from None
    sc = generate(spec)
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc.strerror}") from None
    for name, data in sc.splits().items():
        write_dataset(out / f"{name}.csv", data)
    truth = {
        "scenario": spec.scenario,
        "spec": {k: getattr(spec, k) for k in ("n_source", "n_target", "label_shift", "feature_shift",
                                                "noise", "seed")},
        "confounders": [list(c) for c in sc.source.confounder_schema],
        "true_map": {"a": sc.true_map.matrix_a.tolist(), "b": sc.true_map.offset_b.tolist()},
    }
    (out / "truth.json").write_text(json.dumps(truth, indent=2) + "\n", encoding="utf-8")
    return 0


def _feature_matrix(path, names):
    header, body = read_table(path)
    try:
        return np.array([[float(v) for v in _column(header, body, n, path)] for n in names]).T, header, body
    except ValueError:
        raise DataError(f"{path}: non-numeric values in feature columns") from None


def cmd_eval(args) -> int:
    schema = parse_confounder_spec(args.confounders)
    exclude = [n for n, _ in schema] + ([args.labels] if args.labels else [])
    o_header, o_body = read_table(args.oracle)
    names = numeric_columns(o_header, o_body, exclude=exclude)
    adapted, a_header, a_body = _feature_matrix(args.adapted, names)
    oracle, _, _ = _feature_matrix(args.oracle, names)
    if adapted.shape != oracle.shape:
        raise DataError(f"adapted {adapted.shape} and oracle {oracle.shape} differ in shape")
    result = {"rmse": metrics.rmse(adapted, oracle)}
    if args.adapted_heldout or args.oracle_heldout:
        if not (args.adapted_heldout and args.oracle_heldout):
            raise UsageError("--adapted-heldout and --oracle-heldout go together")
        ah, _, _ = _feature_matrix(args.adapted_heldout, names)
        oh, _, _ = _feature_matrix(args.oracle_heldout, names)
        if ah.shape != oh.shape:
            raise DataError("heldout adapted and oracle differ in shape")
        result["rmse_heldout"] = metrics.rmse(ah, oh)
    if args.silhouette:
        if not args.labels:
            raise UsageError("--silhouette needs --labels")
        labels = _column(a_header, a_body, args.labels, args.adapted)
        try:
            result["silhouette"] = metrics.silhouette(adapted, labels)
        except InvalidArgument as exc:
            raise DataError(str(exc)) from None
    if args.plot:
        def xy(x):
            return x[:, :2] if x.shape[1] >= 2 else np.column_stack([x[:, 0], np.arange(len(x))])
        write_svg_scatter(args.plot, {"adapted": xy(adapted), "oracle": xy(oracle)})
    text = json.dumps(result, indent=2) + "\n"
    if args.out:
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot write {args.out}: {exc.strerror}") from None
    else:
        sys.stdout.write(text)
    return 0


def cmd_report(args) -> int:
    r = _load_model(args.model)
    g = r.transform
    np.set_printoptions(precision=6, suppress=True)
    print(f"method:      {r.config.method} ({g.kind})")
    print(f"seed:        {r.config.seed}")
    print(f"features:    {', '.join(r.feature_names) or '-'}")
    print(f"confounders: {', '.join(f'{n}:{k}' for n, k in r.confounder_schema) or '-'}")
    print(f"A =\n{g.matrix_a}")
    print(f"b = {g.offset_b}")
    print(f"det(A) = {np.linalg.det(g.matrix_a):.6g}")
    if np.isfinite(r.final_objective):
        print(f"final objective: {r.final_objective:.6g}")
    if r.objective_trace:
        print(f"trace: {len(r.objective_trace)} iterations, "
              f"{r.objective_trace[0][1]:.6g} -> {r.objective_trace[-1][1]:.6g}")
    return 0


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="condo", description="Confounded domain adaptation")
    sub = p.add_subparsers(dest="verb", required=True)

    f = sub.add_parser("fit", help="learn a source-to-target map")
    f.add_argument("--source", required=True)
    f.add_argument("--target", required=True)
    f.add_argument("--confounders", default="", help="comma-separated name:kind")
    f.add_argument("--method", required=True, choices=METHODS)
    f.add_argument("--transform", default="diag", choices=sorted(TRANSFORM_FLAGS))
    f.add_argument("--iterations", type=int, default=1000)
    f.add_argument("--batch-size", type=int, default=128)
    f.add_argument("--lr", type=float, default=None)
    f.add_argument("--momentum", type=float, default=0.9)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--ridge", type=float, default=1e-3)
    f.add_argument("--prototypes-k", type=int, default=10)
    f.add_argument("--no-dedup", action="store_true")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("transform", help="apply a fitted map to a CSV")
    t.add_argument("--model", required=True)
    t.add_argument("--input", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--inverse", action="store_true")
    t.set_defaults(func=cmd_transform)

    s = sub.add_parser("simulate", help="write a synthetic scenario")
    s.add_argument("--scenario", required=True)
    s.add_argument("--n-source", type=int, default=200)
    s.add_argument("--n-target", type=int, default=200)
    s.add_argument("--label-shift", action="store_true")
    s.add_argument("--feature-shift", action="store_true")
    s.add_argument("--noise", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("eval", help="score adapted features against an oracle")
    e.add_argument("--adapted", required=True)
    e.add_argument("--oracle", required=True)
    e.add_argument("--adapted-heldout")
    e.add_argument("--oracle-heldout")
    e.add_argument("--confounders", default="", help="columns to exclude, as name:kind")
    e.add_argument("--labels")
    e.add_argument("--silhouette", action="store_true")
    e.add_argument("--plot")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="summarize a model file")
    r.add_argument("--model", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    level = os.environ.get("CONDO_LOG", "warn").upper()
    logging.basicConfig(level={"WARN": "WARNING"}.get(level, level) if level in
                        ("ERROR", "WARN", "WARNING", "INFO", "DEBUG") else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    try:
        return args.func(args)
    except (UsageError, InvalidArgument) as exc:
        print(f"condo {args.verb}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"condo {args.verb}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"condo {args.verb}: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
