"""Command-line entry point: train, generate, evaluate, ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from peter.config import ConfigError, RunConfig
from peter.corpus import (
    DataError,
    InteractionRecord,
    SplitSpec,
    Vocabulary,
    build_vocab,
    encode_sample,
    load_records,
    read_manifest,
    split_indices,
    synth_generate,
    write_manifest,
)
from peter.evaluation import MetricsReport, evaluate_generations
from peter.inference import UnknownIdError, generate, read_generations, write_generations
from peter.model import CheckpointError, init_params, load_checkpoint, save_checkpoint
from peter.training import ABLATIONS, NumericError, ablate, train

log = logging.getLogger("peter")

CONFIG_FILE = "config.json"
CHECKPOINT_FILE = "model.npz"
MANIFEST_FILE = "split.json"
VOCAB_FILE = "vocab.json"
LOG_FILE = "train_log.jsonl"
GENERATIONS_FILE = "generations.jsonl"
REPORT_FILE = "report.json"
ABLATION_COLUMNS = ("FMR", "FCR", "DIV", "USR", "BLEU_1", "BLEU_4", "RMSE", "MAE")


# ---------------------------------------------------------------- pipeline pieces


def load_corpus(cfg: RunConfig) -> list[InteractionRecord]:
    if cfg.synth:
        return synth_generate(
            cfg.synth_users,
            cfg.synth_items,
            cfg.synth_features,
            cfg.synth_records_per_user,
            seed=cfg.seed,
            rating_bounds=cfg.rating_bounds,
        )
    if not cfg.dataset:
        raise ConfigError("no dataset given: set 'dataset' in the config or pass --synth")
    if not Path(cfg.dataset).is_file():
        raise ConfigError(f"dataset {cfg.dataset} does not exist")
    records = load_records(cfg.dataset, cfg.rating_bounds)
    if not records:
        raise DataError(f"{cfg.dataset} holds no records")
    return records


def feature_universe(records) -> list[str]:
    return sorted({r.feature for r in records if r.feature})


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_train(cfg: RunConfig) -> dict:
    """Split, build the vocabulary, encode and train; returns a summary dict."""
    out = Path(cfg.out)
    records = load_corpus(cfg)  # records without a feature are rejected here, before training
    idx = split_indices(records, SplitSpec(seed=cfg.seed))
    part = {k: [records[i] for i in v] for k, v in idx.items()}
    vocab = build_vocab(part["train"], cfg.vocab_cap)
    model_cfg = cfg.model()

    def enc(rs):
        return [encode_sample(r, vocab, cfg.use_features, cfg.word_budget, cfg.max_feature_words) for r in rs]

    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / CONFIG_FILE, cfg.to_dict())
    write_manifest(out / MANIFEST_FILE, idx, cfg.seed, cfg.dataset or "synthetic")
    _write_json(out / VOCAB_FILE, vocab.to_json())
    params = init_params(model_cfg, len(vocab.users), len(vocab.items), len(vocab.words), seed=cfg.seed)
    log.info(
        "training on %d records (%d valid, %d test), vocabulary %d words",
        len(idx["train"]), len(idx["valid"]), len(idx["test"]), len(vocab.words),
    )
    state = train(
        params,
        enc(part["train"]),
        enc(part["valid"]),
        vocab.pad,
        cfg.schedule(),
        log_path=out / LOG_FILE,
    )
    save_checkpoint(params, out / CHECKPOINT_FILE, {"best_valid": state.best_valid, "epochs": state.epoch})
    return {"epochs": state.epoch, "best_valid": state.best_valid, "decays": state.decay_count, "out": str(out)}


def _load_run(run_dir: Path):
    if not (run_dir / CONFIG_FILE).is_file():
        raise ConfigError(f"{run_dir} is not a training run (no {CONFIG_FILE})")
    cfg = RunConfig.load(run_dir / CONFIG_FILE)
    vocab = Vocabulary.from_json(json.loads((run_dir / VOCAB_FILE).read_text(encoding="utf-8")))
    manifest = read_manifest(run_dir / MANIFEST_FILE)
    return cfg, vocab, manifest


def cmd_generate(run_dir, no_features: bool = False, output=None) -> Path:
    """Decode every test pair of a finished run into a JSON-lines file."""
    run_dir = Path(run_dir)
    cfg, vocab, manifest = _load_run(run_dir)
    if cfg.use_features and no_features:
        raise ConfigError("this model was trained with features, which are required at generation time")
    params, _ = load_checkpoint(run_dir / CHECKPOINT_FILE, expect=cfg.model())
    records = load_corpus(cfg)
    if max(manifest["test"], default=-1) >= len(records):
        raise DataError("split manifest does not match the dataset")
    test = [records[i] for i in manifest["test"]]
    results = generate(params, vocab, test, cfg.rating_bounds, k=cfg.context_top_k)
    path = Path(output) if output else run_dir / GENERATIONS_FILE
    write_generations(results, path)
    log.info("wrote %d generations to %s", len(results), path)
    return path


def cmd_evaluate(run_dir, generations=None, output=None) -> MetricsReport:
    """Score a generations file against the run's test references."""
    run_dir = Path(run_dir)
    cfg, _, manifest = _load_run(run_dir)
    gen_path = Path(generations) if generations else run_dir / GENERATIONS_FILE
    if not gen_path.is_file():
        raise ConfigError(f"no generations file at {gen_path}")
    try:
        rows = read_generations(gen_path)
    except (json.JSONDecodeError, TypeError) as e:
        raise DataError(f"{gen_path}: malformed generation line ({e})") from None
    if not rows:
        raise DataError(f"{gen_path} is empty")
    records = load_corpus(cfg)
    test = [records[i] for i in manifest["test"]]
    if len(rows) != len(test):
        raise DataError(f"{len(rows)} generations but {len(test)} test pairs")
    for k, (row, rec) in enumerate(zip(rows, test)):
        if (row.user, row.item) != (rec.user, rec.item):
            raise DataError(f"line {k + 1}: pair ({row.user}, {row.item}) does not match test pair ({rec.user}, {rec.item})")
    report = evaluate_generations(rows, feature_universe(records), cfg.div_pair_budget, cfg.seed)
    path = Path(output) if output else run_dir / REPORT_FILE
    _write_json(path, report.to_dict())
    return report


def _ablation_row(report: MetricsReport, base: MetricsReport | None) -> list[str]:
    cells = []
    for col in ABLATION_COLUMNS:
        v = getattr(report, col)
        text = f"{v:.4f}" if col not in ("BLEU_1", "BLEU_4") else f"{v:.2f}"
        if base is not None:
            b = getattr(base, col)
            if v == b:
                arrow = "="
            else:
                arrow = "↑" if v > b else "↓"
            text += f" {arrow}"
        cells.append(text)
    return cells


def ablation_table(reports: dict[str, MetricsReport]) -> str:
    base = reports["base"]
    header = ["run"] + [c.replace("_", "-") for c in ABLATION_COLUMNS]
    rows = [header] + [[name] + _ablation_row(rep, None if name == "base" else base) for name, rep in reports.items()]
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)


def cmd_ablate(cfg: RunConfig, modes) -> dict[str, MetricsReport]:
    """Train, decode and score the base model and each ablation on one split."""
    bad = [m for m in modes if m not in ABLATIONS]
    if bad:
        raise ConfigError(f"unknown ablation mode(s) {bad}; expected some of {list(ABLATIONS)}")
    root = Path(cfg.out)
    reports: dict[str, MetricsReport] = {}
    manifests = []
    for name in ["base", *modes]:
        run_cfg = dataclasses.replace(cfg, out=str(root / name))
        if name != "base":
            delta = ablate(cfg.model(), name)
            run_cfg = dataclasses.replace(
                run_cfg, lambda_c=delta.lambda_c, lambda_r=delta.lambda_r, mask_mode=delta.mask_mode
            )
        log.info("ablation run %s", name)
        cmd_train(run_cfg)
        cmd_generate(run_cfg.out)
        reports[name] = cmd_evaluate(run_cfg.out)
        manifests.append(read_manifest(Path(run_cfg.out) / MANIFEST_FILE))
    if any(m != manifests[0] for m in manifests):
        raise DataError("ablation runs ended up on different splits")
    _write_json(root / "ablation.json", {k: v.to_dict() for k, v in reports.items()})
    return reports


# ---------------------------------------------------------------- argument handling


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_seeds(text: str) -> list[int]:
    """``"1..5"`` or ``"1,3,7"``."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError(f"empty seed list {text!r}")
    return seeds


def _parse_set(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    try:
        return k, json.loads(v)
    except json.JSONDecodeError:
        return k, v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--log-level", default=argparse.SUPPRESS, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p = _Parser(prog="peter", description="Train, decode and score PETER models.", parents=[common])
    p.set_defaults(log_level="INFO")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_options(sp):
        sp.add_argument("--config", help="JSON config file (flat object; unknown keys rejected)")
        sp.add_argument("--seed", type=int, help="root seed for split, init, batching and DIV sampling")
        sp.add_argument("--seeds", type=parse_seeds, help="several root seeds, e.g. 1..5; one sub-run each")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--synth", action="store_true", help="use the built-in synthetic corpus")
        sp.add_argument("--mask", choices=["peter", "left_to_right"], help="attention mask mode")
        sp.add_argument("--max-epochs", type=int, help="epoch cap")
        sp.add_argument("--no-features", action="store_true", help="train without feature inputs")
        sp.add_argument("--set", type=_parse_set, action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (value parsed as JSON when possible)")

    tr = sub.add_parser("train", help="train a model", parents=[common])
    run_options(tr)
    ab = sub.add_parser("ablate", help="train base and ablated models on a shared split", parents=[common])
    run_options(ab)
    ab.add_argument("--modes", default="disable_Lc,disable_Lr,left_to_right",
                    help=f"comma-separated subset of {','.join(ABLATIONS)}")

    ge = sub.add_parser("generate", help="decode the test split of a trained run", parents=[common])
    ge.add_argument("run", help="training output directory")
    ge.add_argument("--no-features", action="store_true", help="decode without feature inputs")
    ge.add_argument("--output", help=f"output file (default RUN/{GENERATIONS_FILE})")

    ev = sub.add_parser("evaluate", help="score generations of a run", parents=[common])
    ev.add_argument("run", help="training output directory")
    ev.add_argument("--generations", help=f"generations file (default RUN/{GENERATIONS_FILE})")
    ev.add_argument("--output", help=f"report file (default RUN/{REPORT_FILE})")
    return p


def resolve_config(args) -> RunConfig:
    d = RunConfig.load(args.config).to_dict() if args.config else {}
    d.update(dict(args.set))
    for key, val in (("seed", args.seed), ("out", args.out), ("max_epochs", args.max_epochs), ("mask_mode", args.mask)):
        if val is not None:
            d[key] = val
    if args.synth:
        d["synth"] = True
    if args.no_features:
        d["use_features"] = False
    return RunConfig.from_dict(d)


def _per_seed(cfg: RunConfig, seeds):
    if not seeds:
        return [cfg]
    return [dataclasses.replace(cfg, seed=s, out=str(Path(cfg.out) / f"seed{s}")) for s in seeds]


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    if args.command in ("train", "ablate"):
        base = resolve_config(args)
        for cfg in _per_seed(base, args.seeds):
            if args.command == "train":
                summary = cmd_train(cfg)
                print(json.dumps(summary, sort_keys=True))
            else:
                modes = [m.strip() for m in args.modes.split(",") if m.strip()]
                reports = cmd_ablate(cfg, modes)
                if args.seeds:
                    print(f"seed {cfg.seed}")
                print(ablation_table(reports))
    elif args.command == "generate":
        cmd_generate(args.run, args.no_features, args.output)
    elif args.command == "evaluate":
        print(cmd_evaluate(args.run, args.generations, args.output).table())
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except SystemExit as e:  # argparse usage errors and --help
        return e.code if isinstance(e.code, int) else 1
    except (ConfigError, CheckpointError, UnknownIdError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
