"""Command-line interface: generate, train, eval, compare, importance.

Every command is reproducible and idempotent: outputs are pure
functions of the config file plus flags (flags win), and every artifact
is written atomically, so a rerun with identical inputs produces
byte-identical files.

Exit codes: 0 success; 2 usage, configuration, or data errors;
3 I/O and file-format errors; 4 numeric failures during training.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .data import (Dataset, Normalizer, SynthSpec, generate_synthetic,
                   load_dataset, save_dataset, split, zscore_apply, zscore_fit)
from .exceptions import (CompnetError, ConfigError, DataError, FormatError,
                         NumericError, ShapeError, TapeError, VariantError)
from .models import (FUSION_KINDS, Model, ModelConfig, build_model,
                     feature_importance)
from .train import (History, OptimState, TrainConfig, checkpoint_load,
                    checkpoint_save, evaluate, fit, init_optim_state,
                    read_checkpoint_header)

_USAGE_ERRORS = (ConfigError, DataError, ShapeError, TapeError, VariantError)


# ---------------------------------------------------------------------------
# small shared helpers

def _write_text_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _fmt(v: float) -> str:
    return repr(float(v))


def _load_config_json(path) -> dict:
    """Read a user-supplied JSON config; malformed JSON is a config error."""
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        parsed = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(parsed, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return parsed


@dataclass
class SplitSettings:
    train_fraction: float = 0.75
    seed: int = 0
    stratified: bool = True

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(
                f"train_fraction must be in (0, 1), got {self.train_fraction}")

    def to_dict(self) -> dict:
        return {"train_fraction": self.train_fraction, "seed": self.seed,
                "stratified": self.stratified}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitSettings":
        known = {"train_fraction", "seed", "stratified"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown split config keys: {sorted(extra)}")
        return cls(**dict(d))


def _resolve_model_config(model_section: Mapping, ds: Dataset,
                          fusion_kind: str, seed: int | None = None) -> ModelConfig:
    """Merge the config file's model section with dataset-derived shapes."""
    section = dict(model_section)
    for key, value in (("image_shape", list(ds.image_shape)),
                       ("n_classes", ds.n_classes),
                       ("n_features", ds.n_features)):
        if key in section:
            got = section[key]
            got = list(got) if isinstance(got, (list, tuple)) else got
            if got != value:
                raise ConfigError(
                    f"config {key} = {got} does not match dataset {value}")
        section[key] = value
    section["fusion_kind"] = fusion_kind
    if fusion_kind != "compnet":
        section.pop("learned_width", None)
    if seed is not None:
        section["seed"] = seed
    return ModelConfig.from_dict(section)


def _resolve_train_config(train_section: Mapping, epochs: int | None = None,
                          seed: int | None = None) -> TrainConfig:
    section = dict(train_section)
    if epochs is not None:
        section["epochs"] = epochs
    if seed is not None:
        section["seed"] = seed
    return TrainConfig.from_dict(section)


def _split_sections(config: Mapping) -> tuple[dict, dict, dict]:
    unknown = set(config) - {"model", "train", "split"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for name in ("model", "train", "split"):
        if name in config and not isinstance(config[name], dict):
            raise ConfigError(f"config section {name!r} must be an object")
    return (dict(config.get("model", {})), dict(config.get("train", {})),
            dict(config.get("split", {})))


@dataclass
class RunResult:
    """Everything one training run leaves behind, before any file is written."""
    model: Model
    opt_state: OptimState
    history: History
    normalizer: Normalizer
    split_settings: SplitSettings

    @property
    def final_train_acc(self) -> float:
        return self.history.last().train.accuracy

    @property
    def final_test_acc(self) -> float:
        rec = self.history.last()
        if rec.test is None:
            raise DataError("final epoch has no test evaluation")
        return rec.test.accuracy

    @property
    def gap(self) -> float:
        return self.final_train_acc - self.final_test_acc


def run_training(ds: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 split_settings: SplitSettings) -> RunResult:
    """Split, normalize on the training side only, build, and fit."""
    train_ds, test_ds = split(ds, split_settings.train_fraction,
                              split_settings.seed, split_settings.stratified)
    norm = zscore_fit(train_ds)
    train_n = zscore_apply(norm, train_ds)
    test_n = zscore_apply(norm, test_ds)
    model = build_model(model_cfg)
    state = init_optim_state(model)
    history = fit(model, train_n, test_n, train_cfg, state)
    return RunResult(model=model, opt_state=state, history=history,
                     normalizer=norm, split_settings=split_settings)


def history_csv(history: History) -> str:
    lines = ["epoch,train_loss,train_acc,test_loss,test_acc"]
    for rec in history.records:
        test_loss = _fmt(rec.test.loss) if rec.test else ""
        test_acc = _fmt(rec.test.accuracy) if rec.test else ""
        lines.append(f"{rec.epoch},{_fmt(rec.train.loss)},{_fmt(rec.train.accuracy)},"
                     f"{test_loss},{test_acc}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# comparison engine (also exercised directly by the acceptance suite)

@dataclass
class ComparisonResult:
    """Per-run rows plus per-model means over seeds.

    ``rows`` hold dicts with keys model, seed, train_acc, test_acc, gap.
    ``means`` maps model kind to mean train_acc/test_acc/gap.
    ``improvements`` maps each non-compnet kind to compnet's mean test
    accuracy advantage in percentage points (present when compnet ran).
    ``results`` retains each run's trained model and history when the
    comparison was asked to keep them.
    """
    rows: list[dict]
    means: dict[str, dict[str, float]]
    improvements: dict[str, float]
    results: dict[tuple[str, int], RunResult] | None = None


def run_comparison(ds: Dataset, config: Mapping, model_kinds: Sequence[str],
                   seeds: Sequence[int],
                   on_row: Callable[[dict], None] | None = None,
                   keep_results: bool = False) -> ComparisonResult:
    """Train every (model kind, seed) pair on identical splits.

    For each seed, the split, parameter initialization, and shuffle
    stream all derive from that seed, so every model kind sees exactly
    the same data partition and the comparison is paired.
    """
    model_section, train_section, split_section = _split_sections(config)
    kinds = list(model_kinds)
    for kind in kinds:
        if kind not in FUSION_KINDS:
            raise ConfigError(f"unknown model kind {kind!r}; "
                              f"choose from {list(FUSION_KINDS)}")
    if len(set(kinds)) != len(kinds):
        raise ConfigError("model kinds must be distinct")
    rows: list[dict] = []
    kept: dict[tuple[str, int], RunResult] = {}
    for seed in seeds:
        split_settings = SplitSettings.from_dict(
            {**split_section, "seed": int(seed)})
        for kind in kinds:
            model_cfg = _resolve_model_config(model_section, ds, kind, seed=int(seed))
            train_cfg = _resolve_train_config(train_section, seed=int(seed))
            result = run_training(ds, model_cfg, train_cfg, split_settings)
            row = {
                "model": kind,
                "seed": int(seed),
                "train_acc": result.final_train_acc,
                "test_acc": result.final_test_acc,
                "gap": result.gap,
            }
            rows.append(row)
            if keep_results:
                kept[(kind, int(seed))] = result
            if on_row is not None:
                on_row(row)
    means = {}
    for kind in kinds:
        mine = [r for r in rows if r["model"] == kind]
        means[kind] = {
            key: sum(r[key] for r in mine) / len(mine)
            for key in ("train_acc", "test_acc", "gap")
        }
    improvements = {}
    if "compnet" in means:
        for kind in kinds:
            if kind != "compnet":
                improvements[kind] = 100.0 * (means["compnet"]["test_acc"]
                                              - means[kind]["test_acc"])
    return ComparisonResult(rows=rows, means=means, improvements=improvements,
                            results=kept if keep_results else None)


def comparison_csv(rows: list[dict], means: dict[str, dict[str, float]]) -> str:
    lines = ["model,seed,train_acc,test_acc,gap"]
    for r in rows:
        lines.append(f"{r['model']},{r['seed']},{_fmt(r['train_acc'])},"
                     f"{_fmt(r['test_acc'])},{_fmt(r['gap'])}")
    for kind, m in means.items():
        lines.append(f"{kind},mean,{_fmt(m['train_acc'])},"
                     f"{_fmt(m['test_acc'])},{_fmt(m['gap'])}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    spec_dict = _load_config_json(args.spec) if args.spec else {}
    if args.n_samples is not None:
        spec_dict["n_samples"] = args.n_samples
    spec_dict.setdefault("n_samples", 2000)
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SynthSpec.from_dict(spec_dict)
    ds = generate_synthetic(spec)
    manifest = save_dataset(ds, args.out)
    labels = ds.labels()
    counts = ", ".join(f"class {k}: {int((labels == k).sum())}"
                       for k in range(ds.n_classes))
    print(f"wrote {len(ds)} samples ({counts}) -> {manifest}")
    return 0


def cmd_train(args) -> int:
    config = _load_config_json(args.config) if args.config else {}
    model_section, train_section, split_section = _split_sections(config)
    ds = load_dataset(args.data)
    split_settings = SplitSettings.from_dict(split_section)
    model_cfg = _resolve_model_config(model_section, ds, args.model,
                                      seed=args.seed)
    train_cfg = _resolve_train_config(train_section, epochs=args.epochs,
                                      seed=args.seed)
    result = run_training(ds, model_cfg, train_cfg, split_settings)

    out = Path(args.out)
    _write_text_atomic(out / "history.csv", history_csv(result.history))
    _write_text_atomic(out / "normalizer.json",
                       json.dumps(result.normalizer.to_dict(), sort_keys=True) + "\n")
    checkpoint_save(result.model, result.opt_state, out / "checkpoint.cmpn",
                    train_config=train_cfg,
                    extra={"split": result.split_settings.to_dict(),
                           "normalizer_file": "normalizer.json"})
    rec = result.history.last()
    test_part = (f", test loss {rec.test.loss:.4f} acc {rec.test.accuracy:.4f}"
                 if rec.test else "")
    print(f"{args.model}: epoch {rec.epoch}, train loss {rec.train.loss:.4f} "
          f"acc {rec.train.accuracy:.4f}{test_part}")
    print(f"artifacts -> {out}")
    return 0


def _select_split(ds: Dataset, which: str, header: Mapping) -> Dataset:
    if which == "all":
        return ds
    settings = (header.get("extra") or {}).get("split")
    if not settings:
        raise ConfigError(
            f"checkpoint does not record split settings; cannot select "
            f"--split {which} (use --split all)")
    try:
        train_ds, test_ds = split(ds, settings["train_fraction"],
                                  settings["seed"], settings["stratified"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint split settings are malformed: {exc}") from None
    return train_ds if which == "train" else test_ds


def cmd_eval(args) -> int:
    model, _ = checkpoint_load(args.checkpoint)
    header = read_checkpoint_header(args.checkpoint)
    ds = load_dataset(args.data)
    chosen = _select_split(ds, args.split, header)

    norm_path = Path(args.checkpoint).parent / (header.get("extra") or {}).get(
        "normalizer_file", "normalizer.json")
    if not norm_path.exists():
        raise ConfigError(
            f"normalizer not found at {norm_path}; refusing to evaluate "
            f"unnormalized designed features")
    try:
        norm = Normalizer.from_dict(json.loads(norm_path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{norm_path}: invalid JSON: {exc}") from None

    metrics = evaluate(model, zscore_apply(norm, chosen))
    out_path = Path(args.checkpoint).parent / "metrics.json"
    payload = {"split": args.split, "loss": metrics.loss,
               "accuracy": metrics.accuracy, "n": metrics.n}
    _write_text_atomic(out_path, json.dumps(payload, sort_keys=True) + "\n")
    print(f"split {args.split}: loss {_fmt(metrics.loss)} "
          f"accuracy {_fmt(metrics.accuracy)} n {metrics.n}")
    return 0


def cmd_compare(args) -> int:
    kinds = [k.strip() for k in args.models.split(",") if k.strip()]
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds must be comma-separated integers, "
                          f"got {args.seeds!r}") from None
    if len(kinds) < 2:
        raise ConfigError("--models needs at least two model kinds")
    if not seeds:
        raise ConfigError("--seeds needs at least one seed")
    for kind in kinds:
        if kind not in FUSION_KINDS:
            raise ConfigError(f"unknown model kind {kind!r}; "
                              f"choose from {list(FUSION_KINDS)}")
    if len(set(kinds)) != len(kinds):
        raise ConfigError("model kinds must be distinct")
    config = _load_config_json(args.config) if args.config else {}
    ds = load_dataset(args.data)
    out_csv = Path(args.out) / "compare.csv"

    flushed: list[dict] = []
    try:
        result = run_comparison(ds, config, kinds, seeds, on_row=flushed.append)
    except (CompnetError, OSError) as exc:
        # A failed run aborts the comparison but keeps the completed rows.
        _write_text_atomic(out_csv, comparison_csv(flushed, {}))
        print(f"error: comparison aborted: {exc}", file=sys.stderr)
        return 4
    _write_text_atomic(out_csv, comparison_csv(result.rows, result.means))
    for kind, m in result.means.items():
        print(f"{kind}: mean train {m['train_acc']:.4f} test {m['test_acc']:.4f} "
              f"gap {m['gap']:.4f}")
    for kind, points in result.improvements.items():
        print(f"compnet vs {kind}: {points:+.2f} accuracy points (test)")
    print(f"rows -> {out_csv}")
    return 0


def cmd_importance(args) -> int:
    model, _ = checkpoint_load(args.checkpoint)
    ds = load_dataset(args.data)
    report = feature_importance(model, ds)
    rank_of = report.rank_of
    lines = ["class,feature_index,mean_abs_weight,rank"]
    for k in range(report.n_classes):
        for j in range(report.n_features):
            lines.append(f"{k},{j},{_fmt(report.importance[k, j])},{rank_of[k, j]}")
    _write_text_atomic(Path(args.out), "\n".join(lines) + "\n")
    tops = {k: int(report.ranking[k, 0]) for k in range(report.n_classes)}
    print("top feature per class: "
          + ", ".join(f"class {k} -> f{j}" for k, j in tops.items()))
    print(f"table -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="compnet",
        description="Composite image + designed-feature classifier: dataset "
                    "generation, training, evaluation, model comparison, and "
                    "feature-importance export.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    p.add_argument("--spec", help="JSON file of generator settings")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the generator seed")
    p.add_argument("--n-samples", type=int, dest="n_samples",
                   help="override the sample count (default 2000)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model on a dataset directory")
    p.add_argument("--config", help="JSON config with model/train/split sections")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model", required=True, choices=list(FUSION_KINDS))
    p.add_argument("--out", required=True, help="output directory for artifacts")
    p.add_argument("--epochs", type=int, help="override config epochs")
    p.add_argument("--seed", type=int, help="override model and shuffle seeds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train several models over several seeds")
    p.add_argument("--config", help="JSON config with model/train/split sections")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--models", required=True,
                   help="comma-separated model kinds (at least two)")
    p.add_argument("--seeds", required=True, help="comma-separated seeds")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("importance",
                       help="export per-class designed-feature importance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output CSV file")
    p.set_defaults(func=cmd_importance)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
