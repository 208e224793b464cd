"""Command-line entry point: build-dataset, train, generate, evaluate, analyze.

Exit codes: 0 ok, 2 usage, 3 config, 4 data, 5 scorer, 6 numeric, 1 other.
Every run writes a JSON manifest next to its outputs, also on failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .errors import ConfigError, DataError, SarcgenError

log = logging.getLogger("sarcgen")

SCORER_ENV = "SARCGEN_SCORER"
EXIT_OK, EXIT_OTHER, EXIT_USAGE = 0, 1, 2


def write_json_atomic(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


class RunManifest:
    def __init__(self, command: str, path, inputs: dict, seed=None):
        self.path = Path(path)
        self.data = {
            "command": command,
            "code_version": __version__,
            "seed": seed,
            "inputs": {k: str(v) for k, v in inputs.items() if v is not None},
            "outputs": [],
            "config": None,
            "started": time.time(),
            "finished": None,
            "status": "running",
        }

    def output(self, path) -> Path:
        self.data["outputs"].append(str(path))
        return Path(path)

    def finish(self, status: str) -> None:
        self.data["finished"] = time.time()
        if status == "ok":
            missing = [p for p in self.data["outputs"] if not Path(p).exists()]
            if missing:
                status = f"failed: outputs missing {missing}"
        self.data["status"] = status
        write_json_atomic(self.path, self.data)


def _scorer_spec(arg):
    return os.environ.get(SCORER_ENV) or arg


def _sidecar(out, suffix) -> Path:
    out = Path(out)
    return out.with_name(out.stem + suffix)


def cmd_build_dataset(args, manifest):
    from .corpus import SplitSpec, build_dataset
    from .rewards import make_scorer

    try:
        ratios = tuple(float(x) for x in args.ratios.split(","))
        spec = SplitSpec(ratios, args.seed if args.seed is not None else 0)
    except ValueError as exc:
        raise ConfigError("ratios", str(exc)) from None
    endpoint = _scorer_spec(args.score_endpoint)
    scorer = make_scorer(endpoint) if endpoint else None
    if not Path(args.input).is_file():
        raise DataError(f"input file {args.input} not found")
    try:
        _, stats = build_dataset(args.input, args.out_dir, spec, scorer)
    finally:
        if scorer is not None:
            scorer.close()
    out = Path(args.out_dir)
    for name in ("train", "val", "test"):
        manifest.output(out / f"{name}.jsonl")
    manifest.output(out / "stats.json")
    manifest.data["config"] = {"ratios": list(spec.ratios), "seed": spec.seed, "scorer": endpoint}
    log.info("splits: %s", {k: v.count for k, v in stats.splits.items()})


def cmd_train(args, manifest):
    from .config import RunConfig, config_to_dict, parse_config
    from .corpus import load_samples
    from .features import FeatureStore
    from .plotting import plot_training_curves
    from .rewards import make_scorer
    from .training import train

    config = parse_config(args.config) if args.config else RunConfig()
    prompt = dataclasses.replace(
        config.prompt,
        use_ocr=config.prompt.use_ocr or args.use_ocr,
        use_objects=config.prompt.use_objects or args.use_objects,
        use_caption=config.prompt.use_caption or args.use_caption,
    )
    config = dataclasses.replace(config, prompt=prompt).with_seed(args.seed)
    manifest.data["config"] = config_to_dict(config)
    manifest.data["seed"] = config.train.seed

    train_file = Path(args.data_dir) / "train.jsonl"
    if not train_file.is_file():
        raise DataError(f"no train.jsonl in {args.data_dir}")
    samples = load_samples(train_file)
    if not samples:
        raise DataError(f"{train_file} is empty")
    model_config = config.model_config()
    features = FeatureStore(args.features_dir, model_config.n_patches, model_config.d_model)
    scorer = make_scorer(_scorer_spec(args.scorer), features)
    out = Path(args.out)
    try:
        result = train(samples, scorer, config.train, config.loss, model_config, config.prompt, features,
                       out_dir=out, run_config=config_to_dict(config))
    finally:
        scorer.close()
    for path in result.checkpoints:
        manifest.output(path)
    manifest.output(out / "train_log.jsonl")
    manifest.output(out / "vocab.json")
    if not args.no_figures:
        manifest.output(plot_training_curves(result.log, out / "training_curves.png"))


def cmd_generate(args, manifest):
    from .config import config_from_dict
    from .corpus import read_jsonl, write_jsonl, Sample
    from .data import encode_samples
    from .features import FeatureStore
    from .inference import best_of_k
    from .rewards import make_scorer
    from .training import load_checkpoint

    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint {args.checkpoint} not found")
    model, vocab, payload = load_checkpoint(args.checkpoint)
    prompt = config_from_dict(payload.get("config") or {}).prompt
    manifest.data["config"] = {"k": args.k, "max_len": args.max_len, "sampling": args.sampling,
                               "prompt": asdict(prompt)}
    if not Path(args.input).is_file():
        raise DataError(f"input file {args.input} not found")
    rows = read_jsonl(args.input)
    samples = []
    for row in rows:
        row = {"text": "", "sarcasm_score": 1.0, **row}
        samples.append(Sample.from_dict(row))
    cfg = model.config
    features = FeatureStore(args.features_dir, cfg.n_patches, cfg.d_model)
    scorer = make_scorer(_scorer_spec(args.scorer), features)
    try:
        encoded = encode_samples(samples, vocab, features, prompt, cfg.max_tokens)
        sets = best_of_k(model, vocab, encoded, scorer, args.k, args.max_len,
                         sampling=args.sampling, seed=args.seed or 0)
    finally:
        scorer.close()
    out_rows = []
    for sample, cset in zip(samples, sets):
        out_rows.append({
            "id": sample.id,
            "image_ref": sample.image_ref,
            "text": cset.anchor.text,
            "anchor_index": cset.anchor_index,
            "exhausted": cset.exhausted,
            "candidates": [{"text": c.text, "logprob": c.logprob, "reward": c.reward.value}
                           for c in cset.candidates],
        })
    write_jsonl(manifest.output(args.out), out_rows)


def cmd_evaluate(args, manifest):
    from .corpus import read_jsonl
    from .features import FeatureStore
    from .metrics import evaluate_run
    from .plotting import plot_distributions
    from .rewards import IncongruityScorer, make_scorer

    for p in (args.hyp, args.ref):
        if not Path(p).is_file():
            raise DataError(f"{p} not found")
    features = FeatureStore(args.features_dir, args.patches, args.feature_dim)
    scorer = make_scorer(_scorer_spec(args.scorer), features)
    incongruity = IncongruityScorer(features)
    try:
        report = evaluate_run(read_jsonl(args.hyp), read_jsonl(args.ref), scorer,
                              lambda text, ref: incongruity.score(text, ref).value)
    finally:
        scorer.close()
    manifest.data["config"] = {"scorer": report["scorer"]}
    write_json_atomic(manifest.output(args.out), report)
    if not args.no_figures:
        manifest.output(plot_distributions({"sarcasm score": report["sarcasm_score"]},
                                           _sidecar(args.out, "_sarcasm.png"), "sarcasm score"))
        manifest.output(plot_distributions({"factual incongruity": report["factual_incongruity"]},
                                           _sidecar(args.out, "_incongruity.png"), "factual incongruity"))


def cmd_analyze(args, manifest):
    from .corpus import read_jsonl
    from .metrics import distribution_stats
    from .plotting import plot_distributions

    if not Path(args.scores).is_file():
        raise DataError(f"{args.scores} not found")
    rows = read_jsonl(args.scores)
    field = args.field
    if field is None:
        candidates = ("value", "score", "sarcasm_score")
        field = next((f for f in candidates if rows and f in rows[0]), None)
        if field is None:
            raise DataError(f"rows carry none of the fields {candidates}; pass --field")
    try:
        values = [float(r[field]) for r in rows]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad or missing {field!r} value: {exc}") from None
    stats = distribution_stats(values)
    manifest.data["config"] = {"field": field}
    write_json_atomic(manifest.output(args.out), {"field": field, **stats.to_dict()})
    if not args.no_figures:
        manifest.output(plot_distributions({field: stats}, _sidecar(args.out, ".png"), field))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sarcgen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-dataset", help="filter a raw JSONL corpus and split it")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--ratios", default="8,1,1")
    p.add_argument("--score-endpoint", help="scorer spec for records lacking sarcasm_score")
    p.set_defaults(func=cmd_build_dataset, manifest=lambda a: Path(a.out_dir) / "manifest.json")

    p = sub.add_parser("train", help="train a generator")
    p.add_argument("--config")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--scorer", default="synthetic")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--features-dir")
    p.add_argument("--use-ocr", action="store_true")
    p.add_argument("--use-objects", action="store_true")
    p.add_argument("--use-caption", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train, manifest=lambda a: Path(a.out) / "manifest.json")

    p = sub.add_parser("generate", help="best-of-k generation from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--out", required=True)
    p.add_argument("--scorer", default="synthetic")
    p.add_argument("--features-dir")
    p.add_argument("--sampling", action="store_true", help="ancestral sampling instead of beam search")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate, manifest=lambda a: _sidecar(a.out, ".manifest.json"))

    p = sub.add_parser("evaluate", help="metric battery and score distributions")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--scorer", default="synthetic")
    p.add_argument("--out", required=True)
    p.add_argument("--features-dir")
    p.add_argument("--feature-dim", type=int, default=64)
    p.add_argument("--patches", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate, manifest=lambda a: _sidecar(a.out, ".manifest.json"))

    p = sub.add_parser("analyze", help="distribution statistics of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--field")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_analyze, manifest=lambda a: _sidecar(a.out, ".manifest.json"))
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    inputs = {k: v for k, v in vars(args).items()
              if k in ("input", "config", "data_dir", "checkpoint", "hyp", "ref", "scores", "features_dir")}
    manifest = RunManifest(args.command, args.manifest(args), inputs, getattr(args, "seed", None))
    status, code = "ok", EXIT_OK
    try:
        args.func(args, manifest)
    except SarcgenError as exc:
        status, code = f"failed: {type(exc).__name__}: {exc}", exc.exit_code
        print(f"sarcgen {args.command}: {exc}", file=sys.stderr)
    except Exception as exc:  # noqa: BLE001 - reported through the manifest and exit code
        status, code = f"failed: {type(exc).__name__}: {exc}", EXIT_OTHER
        print(f"sarcgen {args.command}: unexpected error: {exc!r}", file=sys.stderr)
    manifest.finish(status)
    if status != "ok" and code == EXIT_OK:
        code = EXIT_OTHER
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
