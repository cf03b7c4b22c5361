"""Command-line entry point: generate, train, eval, pd and compare.

Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 numerical or
training failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .data import encode_many, fit_normalizer, load_dataset, physical_matrix, save_dataset, synthesize, targets
from .errors import ArgumentError, DataError, FusionKanError
from .evaluation import (
    EvalReport,
    ExpertModel,
    exponent_rows,
    kfold_split,
    kmeans,
    mse,
    ood_evaluate,
    partial_dependence,
    prediction_error_stats,
    select_cluster_count,
)
from .network import (
    TrainConfig,
    default_architecture,
    init_model,
    kan_widths,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .schema import FEATURES

log = logging.getLogger("fusionkan")

SEED_ENV = "FSL_SEED"
KINDS = ("kan", "mlp", "mlp_pil")
DEFAULT_FOLDS = 21
MAX_CLUSTERS = 29


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Contents of an INI run file.

    Sections: ``[model]`` (kind, widths or layers/width, grid_size,
    spline_order), ``[train]`` (any TrainConfig field except seed) and
    ``[run]`` (seed). Every value has a default, so ``[model] kind = kan``
    is a complete file.
    """

    kind: str = "kan"
    architecture: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=lambda: TrainConfig.for_kind("kan"))
    seed: int = 0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "architecture": self.architecture, "train": self.train.to_dict(), "seed": self.seed}


_MODEL_KEYS = ("kind", "widths", "layers", "width", "grid_size", "spline_order")
_TRAIN_TYPES = {f.name: f.type for f in fields(TrainConfig) if f.name != "seed"}
_RUN_KEYS = ("seed",)


def _parse_number(section, key, text, kind):
    try:
        return int(text) if kind == "int" else float(text)
    except ValueError:
        raise ArgumentError(f"[{section}] {key}: expected {kind}, got {text!r}") from None


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__", inline_comment_prefixes=(";", "#"))
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ArgumentError(f"cannot parse {source}: {exc}") from None
    unknown = set(parser.sections()) - {"model", "train", "run"}
    if unknown:
        raise ArgumentError(f"unknown config section(s): {', '.join(sorted(unknown))}")

    def section(name, allowed):
        items = dict(parser.items(name)) if parser.has_section(name) else {}
        bad = set(items) - set(allowed)
        if bad:
            raise ArgumentError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
        return items

    model = section("model", _MODEL_KEYS)
    kind = model.get("kind", "kan").strip()
    if kind not in KINDS:
        raise ArgumentError(f"[model] kind must be one of {', '.join(KINDS)}, got {kind!r}")
    arch = {}
    if "widths" in model:
        if "layers" in model or "width" in model:
            raise ArgumentError("[model] give either widths or layers/width, not both")
        arch["widths"] = [_parse_number("model", "widths", w.strip(), "int") for w in model["widths"].split(",")]
    elif "layers" in model or "width" in model:
        default_widths = default_architecture(kind)["widths"]
        layers = _parse_number("model", "layers", model.get("layers", str(len(default_widths) - 1)), "int")
        width = _parse_number("model", "width", model.get("width", str(default_widths[1])), "int")
        arch["widths"] = kan_widths(layers, width)
    for key in ("grid_size", "spline_order"):
        if key in model:
            if kind != "kan":
                raise ArgumentError(f"[model] {key} only applies to kind = kan")
            arch[key] = _parse_number("model", key, model[key], "int")

    overrides = {}
    for key, text in section("train", _TRAIN_TYPES).items():
        typ = _TRAIN_TYPES[key]
        overrides[key] = text.strip() if typ == "str" else _parse_number("train", key, text, typ)
    run = section("run", _RUN_KEYS)
    seed = _parse_number("run", "seed", run["seed"], "int") if "seed" in run else 0
    env = os.environ.get(SEED_ENV)
    if env is not None:
        seed = _parse_number(SEED_ENV, "seed", env, "int")
    overrides["seed"] = seed
    return RunConfig(kind, arch, TrainConfig.for_kind(kind, **overrides), seed)


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text(encoding="utf-8"), str(path))


def resolve_seed(flag: int | None, default: int = 0) -> int:
    """Explicit flag, then the FSL_SEED environment variable, then ``default``."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is None:
        return default
    try:
        return int(env)
    except ValueError:
        raise ArgumentError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def derived_seed(master: int, job: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=(job,)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# helpers


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=True) + "\n"


def _load_records(path):
    records = load_dataset(path)
    if not records:
        raise DataError(f"{path} holds no records")
    return records


@dataclass
class _Loaded:
    """A scoring target: an expert stand-in or a checkpoint plus its training recipe."""

    name: str
    model: object
    normalizer: object
    recipe: dict | None  # kind, architecture, train config and seed for retraining


def _load_model(spec: str, records) -> _Loaded:
    if spec == "expert":
        norm = fit_normalizer(records)
        return _Loaded("expert", ExpertModel(norm), norm, None)
    ck = load_checkpoint(spec)
    norm = ck.normalizer if ck.normalizer is not None else fit_normalizer(records)
    meta = ck.metadata
    recipe = None
    if "train_config" in meta:
        recipe = {
            "kind": meta.get("kind", ck.model.kind),
            "architecture": ck.model.architecture,
            "train_config": meta["train_config"],
            "seed": int(meta.get("seed", 0)),
        }
    return _Loaded(str(spec), ck.model, norm, recipe)


def _retrain(loaded: _Loaded, train_records, job: int, epochs: int | None):
    """Fit a fresh copy of ``loaded`` on ``train_records``. Returns (predictor, normalizer)."""
    norm = fit_normalizer(train_records)
    if loaded.recipe is None:
        if isinstance(loaded.model, ExpertModel):
            return ExpertModel(norm), norm
        raise ArgumentError(f"checkpoint {loaded.name} carries no training recipe; use --no-retrain")
    r = loaded.recipe
    seed = derived_seed(r["seed"], job)
    cfg = TrainConfig.from_dict({**r["train_config"], "seed": seed})
    if epochs is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "max_epochs": epochs})
    model = init_model(r["kind"], r["architecture"], seed)
    X, y = encode_many(train_records, norm)
    return train(model, X, y, cfg).model, norm


# ---------------------------------------------------------------------------
# SVG


def _ticks(lo, hi, n=5):
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def render_svg(curves: list[tuple[str, np.ndarray, np.ndarray, str]], x_label: str, y_label: str, title: str) -> str:
    """Line chart as SVG text. ``curves`` holds (label, x, y, colour)."""
    width, height = 640, 420
    left, right, top, bottom = 80, 20, 40, 60
    xs = np.concatenate([c[1] for c in curves])
    ys = np.concatenate([c[2] for c in curves])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 <= x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    pad = 0.05 * (y1 - y0) if y1 > y0 else 0.5
    y0, y1 = y0 - pad, y1 + pad
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">'
        f"{escape(title)}</text>",
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<line x1="{px(t):.2f}" y1="{top + ph}" x2="{px(t):.2f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(
            f'<text x="{px(t):.2f}" y="{top + ph + 20}" text-anchor="middle" font-family="sans-serif" '
            f'font-size="11">{t:.4g}</text>'
        )
    for t in _ticks(y0, y1):
        out.append(f'<line x1="{left - 5}" y1="{py(t):.2f}" x2="{left}" y2="{py(t):.2f}" stroke="black"/>')
        out.append(
            f'<text x="{left - 8}" y="{py(t) + 4:.2f}" text-anchor="end" font-family="sans-serif" '
            f'font-size="11">{t:.4g}</text>'
        )
    out.append(
        f'<text x="{left + pw / 2:.1f}" y="{height - 15}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="13">{escape(x_label)}</text>'
    )
    out.append(
        f'<text x="18" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 18 {top + ph / 2:.1f})">{escape(y_label)}</text>'
    )
    for i, (label, x, y, colour) in enumerate(curves):
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        dash = ' stroke-dasharray="6 4"' if i else ""
        out.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="2"{dash}/>')
        ly = top + 16 + 18 * i
        out.append(
            f'<line x1="{left + 12}" y1="{ly}" x2="{left + 40}" y2="{ly}" stroke="{colour}" stroke-width="2"{dash}/>'
        )
        out.append(
            f'<text x="{left + 46}" y="{ly + 4}" font-family="sans-serif" font-size="12">{escape(label)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    seed = resolve_seed(args.seed)
    records = synthesize(args.n, seed, args.noise, args.campaigns, args.spread)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(records, out)
    print(f"wrote {len(records)} records to {out}")
    if records:
        y = targets(records)
        print(f"yield: min {y.min():.4g} median {np.median(y):.4g} max {y.max():.4g}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config) if args.config else parse_run_config("")
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train = TrainConfig.from_dict({**cfg.train.to_dict(), "seed": args.seed})
    records = _load_records(args.data)
    norm = fit_normalizer(records)
    X, y = encode_many(records, norm)
    model = init_model(cfg.kind, cfg.architecture or None, cfg.seed)
    log.info("training %s (%d parameters) on %d records", cfg.kind, model.n_params, len(records))
    result = train(model, X, y, cfg.train)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "kind": cfg.kind,
        "train_config": cfg.train.to_dict(),
        "seed": cfg.seed,
        "records": len(records),
        "epochs_run": result.epochs_run,
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "final_loss": result.best_loss,
    }
    save_checkpoint(result.model, out / "model.json", norm, meta)
    lines = ["epoch,loss"] + [f"{i},{v!r}" for i, v in enumerate(result.loss_trace, 1)]
    _write_text(out / "loss.csv", "\n".join(lines) + "\n")
    print(f"final loss {result.best_loss:.6g} (epoch {result.best_epoch}); epochs run {result.epochs_run}")
    return 0


def _parse_splits(spec: str):
    if spec == "kmeans":
        return "kmeans", None
    name, _, arg = spec.partition(":")
    if name == "kfold":
        k = int(arg) if arg.isdigit() else None
        if arg and k is None:
            raise ArgumentError(f"invalid split spec {spec!r}")
        return "kfold", k or DEFAULT_FOLDS
    if name == "cluster" and arg.isdigit():
        return "cluster", int(arg)
    raise ArgumentError(f"invalid split spec {spec!r}; use kfold:<k>, kmeans or cluster:<i>")


def _eval_kfold(loaded: _Loaded, records, k, seed, only, retrain, epochs) -> dict:
    folds = kfold_split(len(records), k, seed)
    indices = range(k) if only is None else [only]
    entries, errs = [], []
    for f in indices:
        tr, te = folds[f]
        test = [records[i] for i in te]
        if retrain:
            model, norm = _retrain(loaded, [records[i] for i in tr], f, epochs)
        else:
            model, norm = loaded.model, loaded.normalizer
        X, y = encode_many(test, norm)
        m_err, s_err = prediction_error_stats(model, test, norm)
        entries.append({"fold": f, "size": len(test), "mse": mse(model.predict(X), y),
                        "error_mean_pct": m_err, "error_std_pct": s_err})
        errs.append(entries[-1]["mse"])
    return {"folds": entries, "mse_mean": float(np.mean(errs)), "mse_std": float(np.std(errs))}


def _cluster(records, seed):
    points = fit_normalizer(records).scale_features(physical_matrix(records))
    k, scores = select_cluster_count(points, MAX_CLUSTERS, seed)
    return kmeans(points, k, seed), scores


def cmd_eval(args) -> int:
    protocol, arg = _parse_splits(args.splits)
    if protocol == "kfold" and args.split_index is not None and not 0 <= args.split_index < arg:
        raise ArgumentError(f"--split-index {args.split_index} out of range for {arg} folds")
    if protocol != "kfold" and args.split_index is not None:
        raise ArgumentError("--split-index only applies to kfold splits")
    seed = resolve_seed(args.seed)
    records = _load_records(args.data)
    loaded = [_load_model(m, records) for m in args.model]
    retrain = not args.no_retrain

    results, config = {}, {"splits": args.splits, "seed": seed, "records": len(records), "retrain": retrain}
    if protocol == "kfold":
        config["split_index"] = args.split_index
        for lm in loaded:
            results[lm.name] = _eval_kfold(lm, records, arg, seed, args.split_index, retrain, args.epochs)
    else:
        partition, scores = _cluster(records, seed)
        config["clusters"] = partition.k
        config["silhouette"] = {str(k): v for k, v in sorted(scores.items())}
        clusters = None if protocol == "kmeans" else [arg]
        if clusters and not 0 <= arg < partition.k:
            raise ArgumentError(f"cluster index {arg} out of range; {partition.k} clusters were selected")
        for lm in loaded:
            if retrain:
                fit = lambda tr, c, lm=lm: _retrain(lm, tr, c, args.epochs)  # noqa: E731
            else:
                fit = lambda tr, c, lm=lm: (lm.model, lm.normalizer)  # noqa: E731
            results[lm.name] = ood_evaluate(fit, records, partition, clusters=clusters).to_dict()

    report = EvalReport(protocol, [lm.name for lm in loaded], results, config)
    text = _dump_json(report.to_dict())
    if args.report:
        _write_text(args.report, text)
    for name, res in results.items():
        print(f"{name}: mse {res['mse_mean']:.6g} +/- {res['mse_std']:.6g}")
    return 0


def _feature_list(feature: str) -> list[str]:
    if feature == "all":
        return list(FEATURES)
    if feature not in FEATURES:
        raise ArgumentError(f"unknown feature {feature!r}; expected one of {', '.join(FEATURES)} or all")
    return [feature]


def cmd_pd(args) -> int:
    feats = _feature_list(args.feature)
    records = _load_records(args.data)
    lm = _load_model(args.model, records)
    expert = ExpertModel(lm.normalizer)
    many = len(feats) > 1
    for feat in feats:
        curve = partial_dependence(lm.model, records, feat, lm.normalizer)
        ref = partial_dependence(expert, records, feat, lm.normalizer)
        csv_path = Path(args.out_csv) / f"pd_{feat}.csv" if many else Path(args.out_csv)
        _write_text(csv_path, curve.to_csv())
        if args.out_svg:
            svg_path = Path(args.out_svg) / f"pd_{feat}.svg" if many else Path(args.out_svg)
            svg = render_svg(
                [(lm.name, curve.grid, curve.response, "#1f77b4"), ("expert", ref.grid, ref.response, "#d62728")],
                feat,
                "yield (A.U.)",
                f"partial dependence: {feat}",
            )
            _write_text(svg_path, svg)
    print(f"wrote {len(feats)} curve(s)")
    return 0


def cmd_compare(args) -> int:
    records = _load_records(args.data)
    loaded = [_load_model(m, records) for m in args.models]
    names = [lm.name for lm in loaded]
    if len(set(names)) != len(names):
        names = [f"{n}#{i}" for i, n in enumerate(names)]
    table, ranking = [], []
    for name, lm in zip(names, loaded):
        rows = exponent_rows(lm.model, records, lm.normalizer)
        for r in rows:
            table.append({"model": name, **r})
        ranking.append({"model": name, "mean_abs_deviation": float(np.mean([r["abs_deviation"] for r in rows]))})
    ranking.sort(key=lambda r: (r["mean_abs_deviation"], r["model"]))
    for rank, r in enumerate(ranking, 1):
        r["rank"] = rank

    print(f"{'model':<16} {'feature':<11} {'range':<19} {'learned':>9} {'expert':>8} {'|dev|':>8}")
    for r in table:
        rng = f"[{r['range'][0]:.3g}, {r['range'][1]:.3g}]"
        print(
            f"{r['model']:<16} {r['feature']:<11} {rng:<19} {r['effective_exponent']:9.3f} "
            f"{r['expert_exponent']:8.3f} {r['abs_deviation']:8.3f}"
        )
    for r in ranking:
        print(f"rank {r['rank']}: {r['model']} (mean |dev| {r['mean_abs_deviation']:.4f})")
    if args.report:
        _write_text(args.report, _dump_json({"rows": table, "ranking": ranking}))
    if args.out_csv:
        buf = [["model", "feature", "range_lo", "range_hi", "effective_exponent", "expert_exponent", "abs_deviation"]]
        for r in table:
            buf.append([r["model"], r["feature"], repr(r["range"][0]), repr(r["range"][1]),
                        repr(r["effective_exponent"]), repr(r["expert_exponent"]), repr(r["abs_deviation"])])
        path = Path(args.out_csv)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(buf)
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _non_negative_float(text):
    v = float(text)
    if not v >= 0.0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _non_negative_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fusionkan", description="Laser-fusion yield surrogates: KAN, MLP and physics-informed MLP.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset CSV")
    g.add_argument("--n", type=_non_negative_int, default=300)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--noise", type=_non_negative_float, default=0.0, help="log-normal noise sigma")
    g.add_argument("--campaigns", type=_positive_int, default=29)
    g.add_argument("--spread", type=_non_negative_float, default=0.1, help="campaign scatter as a fraction of range")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", help="INI run file; omitted means all defaults (kan)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory for model.json and loss.csv")
    t.add_argument("--seed", type=int, default=None, help="overrides the config and FSL_SEED")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score models under a split protocol")
    e.add_argument("--model", nargs="+", required=True, help="checkpoint paths or 'expert'")
    e.add_argument("--data", required=True)
    e.add_argument("--splits", default=f"kfold:{DEFAULT_FOLDS}", help="kfold:<k>, kmeans or cluster:<i>")
    e.add_argument("--split-index", type=int, default=None, help="evaluate a single kfold split")
    e.add_argument("--report", help="JSON report path")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--no-retrain", action="store_true", help="score the checkpoint as is instead of refitting")
    e.add_argument("--epochs", type=_non_negative_int, default=None, help="override epochs when retraining")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("pd", help="partial-dependence curves with the expert overlay")
    d.add_argument("--model", required=True, help="checkpoint path or 'expert'")
    d.add_argument("--data", required=True)
    d.add_argument("--feature", required=True, help="feature name or 'all' (outputs become directories)")
    d.add_argument("--out-csv", required=True)
    d.add_argument("--out-svg")
    d.set_defaults(func=cmd_pd)

    c = sub.add_parser("compare", help="effective-exponent agreement with the expert model")
    c.add_argument("--models", nargs="+", required=True, help="checkpoint paths or 'expert'")
    c.add_argument("--data", required=True)
    c.add_argument("--report", help="JSON report path")
    c.add_argument("--out-csv", help="exponent table as CSV")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FusionKanError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
