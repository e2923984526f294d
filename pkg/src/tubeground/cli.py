"""``tubeground`` command line.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import ExperimentConfig
from .core import ContractError
from .feature_io import DatasetManifest, FeatureFileError, load_samples
from .nn import NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

logger = logging.getLogger("tubeground")


class ConfigError(Exception):
    pass


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def resolve_config(args) -> ExperimentConfig:
    """Config file, then command-line overrides. Raises :class:`ConfigError`."""
    try:
        cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
        if getattr(args, "seed", None) is not None:
            cfg.seed = args.seed
        if getattr(args, "sps", None) is not None:
            cfg.sps_enabled = args.sps
        if getattr(args, "crg", None) is not None:
            cfg.use_crg = args.crg
        cfg.plan()
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    print("# resolved config\n" + cfg.to_ini(), flush=True)
    return cfg


def _load(manifest_path, cfg: ExperimentConfig, split=None):
    manifest = DatasetManifest.load(manifest_path)
    if split is not None and manifest.split != split:
        raise ContractError(f"{manifest_path} holds split {manifest.split!r}, not {split!r}")
    return manifest, load_samples(manifest, cfg.linker, cfg.max_tubelets)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(report, out: Path) -> None:
    from .report import render_table

    report.save(out / "run_report.json")
    print(render_table(report), end="")


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthetic import SyntheticSpec, generate_synthetic, write_dataset

    try:
        with open(args.spec) as fh:
            obj = json.load(fh)
        splits = obj.pop("splits", None) or {obj.get("split", "train"): obj.get("n_videos", 50)}
        if args.seed is not None:
            obj["seed"] = args.seed
        if args.split is not None:
            splits = {args.split: splits.get(args.split, obj.get("n_videos", 50))}
        specs = [SyntheticSpec(**{**obj, "split": name, "n_videos": int(n)}) for name, n in splits.items()]
    except (OSError, ValueError, TypeError, ContractError) as exc:
        raise ConfigError(f"bad synthetic spec {args.spec}: {exc}") from None
    print(json.dumps({"spec": obj, "splits": splits}, sort_keys=True))
    for spec in specs:
        manifest, records = generate_synthetic(spec)
        path = write_dataset(args.out, manifest, records)
        print(f"wrote {len(records)} {spec.split} videos to {path}")
    return EXIT_OK


def cmd_link(args) -> int:
    cfg = resolve_config(args)
    manifest, samples = _load(args.manifest, cfg, args.split)
    out = _out_dir(args)
    with open(out / "tubelets.jsonl", "w") as fh:
        for s in samples:
            for t in s.video.tubelets:
                fh.write(json.dumps({
                    "video_id": s.video_id, "tubelet_id": t.tubelet_id, "start": t.start, "end": t.end,
                    "mean_confidence": round(t.mean_confidence, 6),
                    "boxes": [[t.start + i, *map(float, b)] for i, b in enumerate(t.boxes)],
                }, sort_keys=True) + "\n")
    n = sum(len(s.video.tubelets) for s in samples)
    print(f"linked {n} tubelets over {len(samples)} videos into {out / 'tubelets.jsonl'}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    from .crg import decompose

    if not args.query.strip():
        raise ConfigError("empty query")
    print(json.dumps(decompose(args.query).to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    from .estimators import CoSPaLGrounder
    from .report import RunReport

    cfg = resolve_config(args)
    _, samples = _load(args.manifest, cfg, args.split)
    eval_samples = _load(args.eval_manifest, cfg)[1] if args.eval_manifest else None
    out = _out_dir(args)
    start = time.perf_counter()
    est = CoSPaLGrounder(**cfg.estimator_params()).fit(samples, eval_samples=eval_samples)
    elapsed = time.perf_counter() - start
    est.save(out / "model")
    with open(out / "config.ini", "w") as fh:
        fh.write(cfg.to_ini())
    report = RunReport("train", cfg.seed, cfg.to_ini(), epochs=est.log_.epochs, stages=est.log_.stages,
                       wall_clock=round(elapsed, 3))
    if eval_samples:
        metrics, preds = est.evaluate(eval_samples)
        report.metrics["eval"] = metrics.as_dict()
        report.predictions = preds
    _finish(report, out)
    return EXIT_OK


class _OracleSpatial:
    def select(self, sample):
        from .metrics import upper_bound_selection

        _, tube, _ = upper_bound_selection(sample.video, sample.gt)
        return (tube or sample.video.tubelets[0]).tubelet_id


class _OracleTemporal:
    def bounds(self, sample):
        return sample.gt.t_s, sample.gt.t_e


def cmd_eval(args) -> int:
    from .report import RunReport
    from .sps import evaluate

    cfg = resolve_config(args)
    if not args.oracle and not args.model:
        raise ConfigError("eval needs --model DIR (or --oracle)")
    split_name = args.split or "test"
    _, samples = _load(args.manifest, cfg, args.split)
    if args.oracle:
        metrics, preds = evaluate(samples, _OracleSpatial(), _OracleTemporal())
    else:
        from .estimators import CoSPaLGrounder

        try:
            est = CoSPaLGrounder.load(args.model)
        except (OSError, KeyError, ValueError) as exc:
            raise ContractError(f"cannot load model from {args.model}: {exc}") from None
        est.set_params(tau=cfg.tau, use_crg=cfg.use_crg)
        est.plan_ = est._plan()
        metrics, preds = est.evaluate(samples)
    report = RunReport("eval", cfg.seed, cfg.to_ini(), metrics={split_name: metrics.as_dict()}, predictions=preds)
    _finish(report, _out_dir(args))
    return EXIT_OK


def cmd_baseline(args) -> int:
    from .report import RunReport
    from .sps import baseline

    cfg = resolve_config(args)
    _, samples = _load(args.manifest, cfg, args.split)
    metrics, preds = baseline(samples)
    report = RunReport("baseline", cfg.seed, cfg.to_ini(), metrics={args.split or "test": metrics.as_dict()},
                       predictions=preds)
    _finish(report, _out_dir(args))
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import RunReport, render_table, write_plots

    report = RunReport.load(args.run)
    out = _out_dir(args)
    text = render_table(report)
    (out / "report.txt").write_text(text)
    paths = write_plots(report, out)
    print(text, end="")
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tubeground", description="Weakly supervised spatio-temporal video grounding.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, data=True):
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default="runs/latest")
        p.add_argument("--split")
        if config:
            p.add_argument("--config", help="INI file with [plan] [spatial] [temporal] [linker] [sps]")
            p.add_argument("--sps", type=_on_off, help="on|off")
            p.add_argument("--crg", type=_on_off, help="on|off")
        if data:
            p.add_argument("--manifest", required=True, help="split manifest (.jsonl)")

    p = sub.add_parser("synth", help="generate a planted synthetic dataset")
    p.add_argument("--spec", required=True, help="JSON synthetic spec; optional 'splits': {name: n_videos}")
    common(p, config=False, data=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("link", help="link detections into tubelets")
    common(p)
    p.set_defaults(func=cmd_link)

    p = sub.add_parser("decompose", help="print a query's decomposition as JSON")
    p.add_argument("--query", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("train", help="train the spatial and temporal modules")
    common(p)
    p.add_argument("--eval-manifest", help="held-out split scored after every stage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trained model on a split")
    common(p)
    p.add_argument("--model", help="model directory written by train")
    p.add_argument("--oracle", action="store_true", help="use ground-truth selection and bounds")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="mean-confidence tubelet baseline")
    common(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("report", help="render a run report as a table and SVG plots")
    p.add_argument("--run", required=True, help="run_report.json")
    p.add_argument("--out", default="runs/report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, FeatureFileError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
