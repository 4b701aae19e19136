"""Batch command-line interface.

Subcommands: fit, combine, calibrate, detect, evaluate, simulate,
epsilon-sweep, guarantee, eigen. Exit codes: 0 success, 2 usage/config/schema
error, 3 data/numeric error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from scorecombine import __version__
from scorecombine.combiners import (
    DEFAULT_EPSILON,
    DEFAULT_SIGMA_RIDGE,
    RULES,
    Combiner,
    CsiWeights,
    fit_csi_weights,
    sample_covariance,
)
from scorecombine.conformal import ConformalCalibration, GuaranteeConfig, calibrate
from scorecombine.errors import DataError, NumericError, SchemaError
from scorecombine.evaluation import (
    LabeledStatistics,
    auroc,
    eigen_analysis,
    roc_curve,
    threshold_at_far,
)
from scorecombine.fileio import read_json, read_scores, write_json, write_table
from scorecombine.synthbench import (
    default_suite,
    epsilon_sweep,
    guarantee_trial,
    power_sweep,
    scenario_from_dict,
)
from scorecombine.ztransform import ScoreMatrix, ZTransform, fit

MODEL_FORMAT = "scorecombine.model"
DETECTOR_FORMAT = "scorecombine.detector"
FORMAT_VERSION = 1
DEFAULT_COMBINERS = ("glrt", "stouffer", "fisher", "bonferroni", "simes", "alr", "glrt-cov")


class UsageError(SchemaError):
    """Missing or conflicting command-line options."""


# provenance


def _config_hash(command: str, params: dict) -> str:
    blob = json.dumps({"command": command, **params}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _meta(command: str, params: dict, seed: int) -> dict:
    return {
        "tool": "scorecombine",
        "version": __version__,
        "command": command,
        "config": _config_hash(command, params),
        "seed": seed,
    }


def _need(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


# model / detector files


def _load_model(path) -> dict:
    d = read_json(path, "model file")
    if d.get("format") != MODEL_FORMAT or d.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: not a version-{FORMAT_VERSION} model file")
    try:
        d["transform_obj"] = ZTransform.from_dict(d["transform"])
        d["csi_obj"] = CsiWeights.from_dict(d["csi"]) if d.get("csi") else None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: corrupt model file ({exc})") from None
    return d


def _combiner(rule: str, epsilon: float, sigma_source: str, model: dict | None, m: int) -> Combiner:
    if rule not in RULES:
        raise SchemaError(f"unknown rule {rule!r}; valid rules: {', '.join(RULES)}")
    sigma = None
    csi = None
    if rule == "glrt-cov":
        if sigma_source == "identity":
            sigma = np.eye(m)
        elif model is None or model.get("sigma_hat") is None:
            raise UsageError("--sigma train needs a model file with a fitted covariance")
        else:
            sigma = np.asarray(model["sigma_hat"], dtype=float)
    if rule == "csi":
        if model is None or model.get("csi_obj") is None:
            raise UsageError("rule csi needs a model fitted with --csi-groups")
        csi = model["csi_obj"]
    return Combiner(rule, epsilon, sigma=sigma, csi=csi)


def _statistics(comb: Combiner, model: dict | None, scores: ScoreMatrix, z_input: bool):
    if z_input:
        if comb.rule == "csi":
            raise UsageError("rule csi combines raw scores; --z-input is not allowed")
        if model is not None:
            cols = model["transform_obj"].column_names
            if set(cols) != set(scores.column_names):
                raise SchemaError(f"column mismatch: file has {list(scores.column_names)}, "
                                  f"model has {list(cols)}")
            scores = scores.select(cols)
        return comb.from_z(scores.values)
    if model is None:
        raise UsageError("--transform is required unless --z-input is given")
    return comb.statistics(model["transform_obj"], scores)


def _inlier_rows(scores: ScoreMatrix) -> ScoreMatrix:
    if scores.labels is None:
        return scores
    keep = scores.mask("inlier")
    return ScoreMatrix(
        scores.column_names,
        scores.values[keep],
        tuple(lab for lab, k in zip(scores.labels, keep) if k),
        tuple(s for s, k in zip(scores.sample_ids, keep) if k),
    )


# commands


def cmd_fit(args) -> None:
    _need(args, "train", "out")
    train = read_scores(args.train)
    negate = tuple(c for c in (args.negate or "").split(",") if c)
    transform = fit(_inlier_rows(train), negate)
    csi = None
    if args.csi_groups:
        groups = [tuple(g.split(":")) for g in args.csi_groups.split(",") if g]
        csi = fit_csi_weights(_inlier_rows(train), groups)
    z_train = transform.transform_matrix(_inlier_rows(train))
    sigma_hat = sample_covariance(z_train, args.sigma_ridge) if z_train.shape[0] >= 2 else None
    params = {"train": transform.train_hash, "negate": list(negate),
              "csi_groups": args.csi_groups, "sigma_ridge": args.sigma_ridge}
    write_json(args.out, {
        "format": MODEL_FORMAT,
        "version": FORMAT_VERSION,
        "provenance": _meta("fit", params, args.seed),
        "transform": transform.to_dict(),
        "csi": None if csi is None else csi.to_dict(),
        "sigma_ridge": args.sigma_ridge,
        "sigma_hat": None if sigma_hat is None else sigma_hat.tolist(),
    })


def cmd_combine(args) -> None:
    _need(args, "test", "out")
    model = _load_model(args.transform) if args.transform else None
    hint = model["transform_obj"].column_names if model else None
    scores = read_scores(args.test, columns=hint)
    comb = _combiner(args.rule, args.epsilon, args.sigma, model, scores.m)
    stats = _statistics(comb, model, scores, args.z_input)
    params = {"test": scores.content_hash(), "rule": args.rule, "epsilon": args.epsilon,
              "sigma": args.sigma, "z_input": args.z_input,
              "model": None if model is None else model["transform"]["train_hash"]}
    columns = ["sample_id", "statistic", "rule"]
    rows = [[sid, float(t), args.rule] for sid, t in zip(scores.sample_ids, stats)]
    if scores.labels is not None:
        columns.append("label")
        for row, lab in zip(rows, scores.labels):
            row.append(lab)
    write_table(args.out, columns, rows, _meta("combine", params, args.seed), args.format)


def cmd_calibrate(args) -> None:
    _need(args, "val", "transform", "out", "alpha", "delta")
    g = GuaranteeConfig(args.alpha, args.delta)
    model = _load_model(args.transform)
    transform = model["transform_obj"]
    val = read_scores(args.val, columns=transform.column_names)
    if args.train is not None and Path(args.train).resolve() == Path(args.val).resolve():
        raise UsageError("validation file must differ from the training file")
    val = _inlier_rows(val)
    if set(val.column_names) == set(transform.column_names) and \
            val.select(transform.column_names).content_hash() == transform.train_hash:
        raise UsageError("validation data is identical to the training data; conformal "
                         "calibration needs an independent validation set")
    comb = _combiner(args.rule, args.epsilon, args.sigma, model, val.m)
    stats = comb.statistics(transform, val)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        cal = calibrate(stats, g)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    params = {"val": val.content_hash(), "model": transform.train_hash, "rule": args.rule,
              "epsilon": args.epsilon, "sigma": args.sigma, "alpha": args.alpha,
              "delta": args.delta}
    model_out = {k: v for k, v in model.items() if not k.endswith("_obj")}
    write_json(args.out, {
        "format": DETECTOR_FORMAT,
        "version": FORMAT_VERSION,
        "provenance": _meta("calibrate", params, args.seed),
        "model": model_out,
        "combiner": comb.to_dict(),
        "calibration": cal.to_dict(),
    })


def _load_detector(path):
    d = read_json(path, "calibration file")
    if d.get("format") != DETECTOR_FORMAT or d.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: not a version-{FORMAT_VERSION} calibration file")
    try:
        transform = ZTransform.from_dict(d["model"]["transform"])
        comb = Combiner.from_dict(d["combiner"])
        cal = ConformalCalibration.from_dict(d["calibration"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: corrupt calibration file ({exc})") from None
    return transform, comb, cal


def cmd_detect(args) -> None:
    _need(args, "calibration", "test", "out")
    transform, comb, cal = _load_detector(args.calibration)
    scores = read_scores(args.test, columns=transform.column_names)
    stats = comb.statistics(transform, scores)
    pvals = cal.p_values(stats)
    decisions = cal.detect(stats)
    params = {"test": scores.content_hash(), "calibration": _config_hash("cal", {
        "a": cal.a, "v": cal.bank.v, "rule": comb.rule, "model": transform.train_hash})}
    rows = [
        [sid, float(t), float(p), "ood" if d else "inlier"]
        for sid, t, p, d in zip(scores.sample_ids, stats, np.atleast_1d(pvals), decisions)
    ]
    write_table(args.out, ["sample_id", "statistic", "p_value", "decision"], rows,
                _meta("detect", params, args.seed), args.format)


def cmd_evaluate(args) -> None:
    _need(args, "statistics", "out")
    alphas = _floats(args.alpha_list)
    scores = read_scores(args.statistics, ignore=("rule",))
    if "statistic" not in scores.column_names:
        raise SchemaError(f"{args.statistics}: needs a 'statistic' column")
    if scores.labels is None:
        raise SchemaError(f"{args.statistics}: needs a 'label' column (inlier|ood)")
    t = scores.column("statistic")
    d = LabeledStatistics(t[scores.mask("inlier")], t[scores.mask("ood")])
    points = []
    for a in alphas:
        pt = threshold_at_far(d, a)
        points.append({"alpha": a, "tau": None if np.isinf(pt.tau) else pt.tau,
                       "far": pt.far, "dr": pt.dr, "degenerate": bool(pt.degenerate)})
    params = {"statistics": scores.content_hash(), "alphas": alphas}
    meta = _meta("evaluate", params, args.seed)
    write_json(args.out, {
        "provenance": meta,
        "n_inlier": int(d.inlier.size),
        "n_ood": int(d.ood.size),
        "auroc": auroc(d),
        "dr_at_far": points,
    })
    if args.roc_out:
        thr, far, dr = roc_curve(d)
        rows = [[float(a), float(b), float(c)] for a, b, c in zip(thr, far, dr)]
        write_table(args.roc_out, ["threshold", "far", "dr"], rows, meta, args.format)


def _scenarios(cfg: dict, seed: int):
    defaults = {"seed": seed}
    if "n" in cfg:
        defaults["n"] = cfg["n"]
    spec = cfg.get("scenarios", "default")
    if spec == "default":
        return default_suite(int(cfg.get("n", 10_000)), seed)
    if not isinstance(spec, list) or not spec:
        raise SchemaError("'scenarios' must be \"default\" or a non-empty list")
    return [scenario_from_dict(s, defaults) for s in spec]


def _load_config(path) -> dict:
    try:
        return read_json(path, "scenario config")
    except DataError as exc:
        raise SchemaError(str(exc)) from None


def _write_rows(path, rows: list[dict], meta: dict, fmt: str, json_out) -> None:
    columns = list(rows[0]) if rows else []
    write_table(path, columns, [[r[c] for c in columns] for r in rows], meta, fmt)
    if json_out:
        write_json(json_out, {"provenance": meta, "rows": rows})


def cmd_simulate(args) -> None:
    _need(args, "scenarios", "out")
    cfg = _load_config(args.scenarios)
    scenarios = _scenarios(cfg, args.seed)
    combiners = cfg.get("combiners", list(DEFAULT_COMBINERS))
    alpha = float(cfg.get("alpha", 0.05))
    rows = power_sweep(scenarios, combiners, alpha=alpha, n_boot=int(cfg.get("n_boot", 200)))
    meta = _meta("simulate", {"config": cfg}, args.seed)
    _write_rows(args.out, rows, meta, args.format, args.json_out)


def cmd_epsilon_sweep(args) -> None:
    _need(args, "scenarios", "out")
    cfg = _load_config(args.scenarios)
    eps = cfg.get("epsilons", [0.0, 0.125, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0])
    if args.epsilons:
        eps = _floats(args.epsilons)
    alpha = float(cfg.get("alpha", 0.05))
    rows = []
    for scn in _scenarios(cfg, args.seed):
        rows.extend(epsilon_sweep(scn, eps, alpha))
    meta = _meta("epsilon-sweep", {"config": cfg, "epsilons": eps}, args.seed)
    _write_rows(args.out, rows, meta, args.format, args.json_out)


def cmd_guarantee(args) -> None:
    _need(args, "v", "alpha", "delta", "out")
    g = GuaranteeConfig(args.alpha, args.delta)
    res = guarantee_trial(args.v, g, args.trials, args.seed, n_fresh=args.n_fresh,
                          workers=args.workers)
    params = {"v": args.v, "alpha": args.alpha, "delta": args.delta, "trials": args.trials,
              "n_fresh": args.n_fresh}
    write_json(args.out, {
        "provenance": _meta("guarantee", params, args.seed),
        "v": args.v, "alpha": args.alpha, "delta": args.delta, "trials": args.trials,
        "a": res.a, "l": res.l, "alpha_min": res.alpha_min, "degenerate": res.degenerate,
        "violation_rate": res.violation_rate, "mean_far": res.mean_far,
    })


def cmd_eigen(args) -> None:
    _need(args, "train", "test", "out")
    train = _inlier_rows(read_scores(args.train))
    negate = tuple(c for c in (args.negate or "").split(",") if c)
    transform = fit(train, negate)
    test = read_scores(args.test, columns=transform.column_names)
    if test.labels is None:
        raise SchemaError(f"{args.test}: needs a 'label' column (inlier|ood)")
    z_test = transform.transform_matrix(test)
    table = eigen_analysis(
        transform.transform_matrix(train),
        z_test[test.mask("inlier")],
        z_test[test.mask("ood")],
        epsilon=args.epsilon,
        sigma_ridge=args.sigma_ridge,
        metric=args.metric,
    )
    params = {"train": transform.train_hash, "test": test.content_hash(),
              "epsilon": args.epsilon, "sigma_ridge": args.sigma_ridge, "metric": args.metric}
    meta = _meta("eigen", params, args.seed)
    rows = table.rows()
    write_table(args.out, ["k", "eigenvalue", "auroc"],
                [[r["k"], r["eigenvalue"], r["auroc"]] for r in rows], meta, args.format)
    if args.json_out:
        rho = table.spearman()
        write_json(args.json_out, {"provenance": meta, "rows": rows, "metric": args.metric,
                                   "spearman": None if np.isnan(rho) else rho})


# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file whose keys mirror this command's flags")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "ndjson"), default="csv",
                   help="output table format")
    p.add_argument("--out")


def _combiner_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rule", default="glrt", help=f"one of: {', '.join(RULES)}")
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--sigma", choices=("train", "identity"), default="train",
                   help="covariance used by glrt-cov")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scorecombine", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the empirical z-transform on inlier training scores")
    _common(p)
    p.add_argument("--train")
    p.add_argument("--negate", help="comma-separated outlier-oriented columns")
    p.add_argument("--csi-groups", help="cos:norm:shift triples, comma separated")
    p.add_argument("--sigma-ridge", type=float, default=DEFAULT_SIGMA_RIDGE)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("combine", help="per-sample combined statistics")
    _common(p)
    _combiner_flags(p)
    p.add_argument("--transform", help="model file written by fit")
    p.add_argument("--test")
    p.add_argument("--z-input", action="store_true", help="test file already holds z-values")
    p.set_defaults(func=cmd_combine)

    p = sub.add_parser("calibrate", aliases=["calibrate-conformal"],
                       help="conformal threshold with a false-alarm guarantee")
    _common(p)
    _combiner_flags(p)
    p.add_argument("--transform")
    p.add_argument("--val")
    p.add_argument("--train", help="training file, checked to differ from --val")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--delta", type=float, default=0.1)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", help="OOD decisions from a calibration file")
    _common(p)
    p.add_argument("--calibration")
    p.add_argument("--test")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="AUROC and DR at fixed FAR of labeled statistics")
    _common(p)
    p.add_argument("--statistics")
    p.add_argument("--alpha", dest="alpha_list", default="0.01,0.05,0.1")
    p.add_argument("--roc-out")
    p.set_defaults(func=cmd_evaluate)

    for name, func, helptext in (
        ("simulate", cmd_simulate, "power of each combiner on synthetic scenarios"),
        ("epsilon-sweep", cmd_epsilon_sweep, "GLRT performance as a function of epsilon"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--scenarios", help="JSON scenario config")
        p.add_argument("--json-out")
        if name == "epsilon-sweep":
            p.add_argument("--epsilons", help="comma-separated list, overrides the config")
        p.set_defaults(func=func)

    p = sub.add_parser("guarantee", help="Monte Carlo check of the conformal guarantee")
    _common(p)
    p.add_argument("--v", type=int)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--trials", type=int, default=2000)
    p.add_argument("--n-fresh", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_guarantee)

    p = sub.add_parser("eigen", help="eigen-score AUROC per covariance eigenvector")
    _common(p)
    p.add_argument("--train")
    p.add_argument("--test", help="labeled test scores")
    p.add_argument("--negate")
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--sigma-ridge", type=float, default=DEFAULT_SIGMA_RIDGE)
    p.add_argument("--metric", choices=("identity", "sample"), default="sample",
                   help="metric of the projection mu*: sample covariance or identity")
    p.add_argument("--json-out")
    p.set_defaults(func=cmd_eigen)

    parser._subparser_map = sub.choices  # used to apply --config defaults
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    command = next((a for a in argv if a in parser._subparser_map), None)
    if command is None:
        return
    try:
        cfg = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    sub = parser._subparser_map[command]
    dests = {a.dest for a in sub._actions}
    values = {}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest == "alpha" and "alpha_list" in dests:
            dest = "alpha_list"
            value = ",".join(str(x) for x in value) if isinstance(value, list) else value
        if dest not in dests or dest in ("help", "config"):
            raise UsageError(f"config key {key!r} is not a flag of '{command}'")
        values[dest] = value
    sub.set_defaults(**values)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        args.func(args)
    except (DataError, NumericError) as exc:
        print(f"scorecombine: error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"scorecombine: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"scorecombine: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"scorecombine: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
