"""Command-line front end: ingest | synth | train | eval | infer | intervene | sweep.

Configuration is a flat `key = value` file with `#` comments; `--set
key=value` flags override file values. Every run echoes its effective
configuration into the output directory, so re-running from the echo
reproduces the results bit-exactly.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio
from . import evaluation
from . import inference
from . import synthgen
from . import trainer

log = logging.getLogger("driftrec")

# short hyperparameter aliases accepted in config files, --set and --grid
ALIASES = {
    "T_t": "n_train_envs",
    "T_i": "n_infer_envs",
    "K": "feat_dim",
    "H": "pref_dim",
    "C": "n_channels",
    "lr": "learning_rate",
}


class ConfigError(ValueError):
    pass


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(name: str, text: str, target_type) -> object:
    try:
        if target_type is bool:
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        if target_type is str:
            return text
        # tuple of ints, e.g. enc_hidden = 600,200
        return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"field {name!r}: cannot parse {text!r}") from exc


def build_dataclass(cls, file_values: dict[str, str], overrides: list[str]):
    """Merge config-file values and --set overrides into a dataclass."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    merged = dict(file_values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        merged[key.strip()] = value.strip()
    kwargs = {}
    for key, text in merged.items():
        name = ALIASES.get(key, key)
        if name not in fields:
            raise ConfigError(f"unknown config field {key!r}")
        ftype = fields[name].type
        base = {"int": int, "float": float, "bool": bool, "str": str}.get(
            str(ftype), tuple)
        if isinstance(ftype, type):
            base = ftype if ftype in (int, float, bool, str) else tuple
        kwargs[name] = _coerce(name, text, base)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def echo_config(out_dir: Path, obj, extra: dict | None = None) -> None:
    lines = [f"{k} = {v if not isinstance(v, (list, tuple)) else ','.join(map(str, v))}"
             for k, v in dataclasses.asdict(obj).items()]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    (out_dir / "config_echo.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _prepare_out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = build_dataclass(synthgen.SynthConfig,
                          parse_config_file(args.config) if args.config else {},
                          args.set or [])
    out = _prepare_out(args)
    dataset, truth = synthgen.generate(cfg)
    dataio.save_dataset(out / "dataset.cdrd", dataset)
    synthgen.save_ground_truth(out / "ground_truth.tsv", truth, dataset)
    (out / "stats.txt").write_text(dataio.dataset_stats(dataset), encoding="utf-8")
    echo_config(out, cfg)
    print(f"wrote {dataset.n_users} users, {dataset.n_items} items, "
          f"{dataset.n_interactions} interactions to {out}")
    return 0


def cmd_ingest(args) -> int:
    spec = dataio.FormatSpec(delimiter=args.delimiter,
                             columns=tuple(args.columns.split(",")),
                             skip_header=args.skip_header)
    loaded = dataio.load_interactions(args.input, spec)
    records = dataio.kcore_filter(loaded.records, args.min_user_deg,
                                  args.min_item_deg, args.rating_threshold)
    dataset = dataio.temporal_split(records)
    out = _prepare_out(args)
    dataio.save_dataset(out / "dataset.cdrd", dataset)
    (out / "stats.txt").write_text(dataio.dataset_stats(dataset), encoding="utf-8")
    (out / "config_echo.cfg").write_text(
        "\n".join([f"input = {args.input}",
                   f"delimiter = {args.delimiter!r}",
                   f"columns = {args.columns}",
                   f"min_user_deg = {args.min_user_deg}",
                   f"min_item_deg = {args.min_item_deg}",
                   f"rating_threshold = {args.rating_threshold}",
                   f"skipped_rows = {loaded.skipped}"]) + "\n", encoding="utf-8")
    print(dataio.dataset_stats(dataset), end="")
    return 0


def cmd_train(args) -> int:
    cfg = build_dataclass(trainer.TrainConfig,
                          parse_config_file(args.config) if args.config else {},
                          args.set or [])
    dataset = dataio.load_dataset(args.data)
    out = _prepare_out(args)
    echo_config(out, cfg)
    lines: list[str] = []

    def log_line(text: str) -> None:
        lines.append(text)
        print(text)

    result = trainer.train(dataset, cfg, log_cb=log_line)
    (out / "train_log.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    trainer.save_checkpoint(out / "checkpoint.cdrc", result.checkpoint)
    status = "diverged" if result.diverged else (
        "early-stopped" if result.stopped_early else "completed")
    print(f"{status}: best validation recall@{cfg.eval_cutoff} = "
          f"{result.checkpoint.best_metric:.6f} at epoch {result.checkpoint.epoch}")
    return 1 if result.diverged else 0


def _load_ckpt_and_data(args):
    ckpt = trainer.load_checkpoint(args.checkpoint)
    dataset = dataio.load_dataset(args.data)
    if dataset.n_items != ckpt.n_items:
        raise ConfigError(f"checkpoint was trained with {ckpt.n_items} items, "
                          f"dataset has {dataset.n_items}")
    return ckpt, dataset


def cmd_eval(args) -> int:
    ckpt, dataset = _load_ckpt_and_data(args)
    split = {"validation": dataio.VALIDATION, "test": dataio.TEST}[args.split]
    cutoffs = tuple(int(k) for k in args.cutoffs.split(","))
    n_envs = args.Ti if args.Ti else ckpt.config.n_infer_envs
    dims = ckpt.config.dims(ckpt.n_items)
    report = evaluation.evaluate_params(ckpt.params, dims, dataset, split,
                                        args.strategy, n_envs, cutoffs,
                                        workers=args.workers)
    out = _prepare_out(args)
    (out / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "metrics.tsv").write_text(report.to_tsv(), encoding="utf-8")
    echo_config(out, ckpt.config, extra={"split": args.split,
                                         "strategy": report.strategy,
                                         "T_i": n_envs,
                                         "workers": args.workers})
    print(report.to_text(), end="")
    return 0


def cmd_infer(args) -> int:
    ckpt, dataset = _load_ckpt_and_data(args)
    n_envs = args.Ti if args.Ti else ckpt.config.n_infer_envs
    dims = ckpt.config.dims(ckpt.n_items)
    users = np.arange(dataset.n_users)
    recs = inference.recommend(dataset, ckpt.params, dims, users,
                               args.strategy, n_envs, args.topk)
    out = _prepare_out(args)
    with open(out / "recommendations.txt", "w", encoding="utf-8") as fh:
        for rec in recs:
            items = " ".join(dataset.item_keys[i] for i in rec.items)
            scores = " ".join(f"{s:.6f}" for s in rec.scores)
            fh.write(f"user={dataset.user_keys[rec.user]} items={items} "
                     f"scores={scores}\n")
    echo_config(out, ckpt.config, extra={"strategy": args.strategy,
                                         "T_i": n_envs, "topk": args.topk})
    print(f"wrote recommendations for {len(recs)} users to {out}")
    return 0


def cmd_intervene(args) -> int:
    ckpt, dataset = _load_ckpt_and_data(args)
    dims = ckpt.config.dims(ckpt.n_items)
    n_envs = args.Ti if args.Ti else ckpt.config.n_infer_envs
    try:
        user = dataset.user_index[args.user]
        donor = dataset.user_index[args.donor]
    except KeyError as exc:
        raise ConfigError(f"unknown user key {exc.args[0]!r}")
    donor_state = inference.rolled_features(dataset, ckpt.params, dims, donor, n_envs)
    donor_e = donor_state.e_means[-1][0]
    before = inference.recommend(dataset, ckpt.params, dims, np.asarray([user]),
                                 "latest-z", n_envs, args.topk)[0]
    after = inference.intervene(dataset, ckpt.params, dims, user, donor_e,
                                n_envs, args.topk, envs=args.envs)
    out = _prepare_out(args)
    def fmt(rec):
        return " ".join(dataset.item_keys[i] for i in rec.items)
    (out / "intervention.txt").write_text(
        f"user = {args.user}\ndonor = {args.donor}\nenvs = {args.envs}\n"
        f"before = {fmt(before)}\nafter = {fmt(after)}\n", encoding="utf-8")
    echo_config(out, ckpt.config, extra={"user": args.user, "donor": args.donor,
                                         "envs": args.envs, "T_i": n_envs})
    print(f"before: {fmt(before)}")
    print(f"after:  {fmt(after)}")
    return 0


def _parse_grid(grid: str) -> tuple[str, list[str]]:
    if "=" not in grid:
        raise ConfigError(f"--grid expects key=a..b or key=v1,v2,..., got {grid!r}")
    key, spec = grid.split("=", 1)
    key = key.strip()
    spec = spec.strip()
    if ".." in spec:
        lo, hi = spec.split("..", 1)
        values = [str(v) for v in range(int(lo), int(hi) + 1)]
    else:
        values = [v.strip() for v in spec.split(",") if v.strip()]
    if not values:
        raise ConfigError(f"--grid produced no values from {grid!r}")
    return key, values


def cmd_sweep(args) -> int:
    key, values = _parse_grid(args.grid)
    dataset = dataio.load_dataset(args.data)
    out = _prepare_out(args)
    file_values = parse_config_file(args.config) if args.config else {}
    rows = ["setting\tvalue\tval_recall@10\ttest_recall@10\ttest_ndcg@10"]
    for value in values:
        cfg = build_dataclass(trainer.TrainConfig, file_values,
                              (args.set or []) + [f"{key}={value}"])
        result = trainer.train(dataset, cfg)
        dims = cfg.dims(dataset.n_items)
        report = evaluation.evaluate_params(result.checkpoint.params, dims, dataset,
                                            dataio.TEST, "latest-z",
                                            cfg.n_infer_envs, cutoffs=(10,))
        rows.append(f"{key}\t{value}\t{result.checkpoint.best_metric:.6f}"
                    f"\t{report.recall[10]:.6f}\t{report.ndcg[10]:.6f}")
        print(rows[-1])
    (out / "sweep.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    (out / "config_echo.cfg").write_text(
        f"grid = {args.grid}\n" + "\n".join(args.set or []) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="driftrec",
        description="Environment-aware temporal VAE recommender pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("ingest", help="parse, filter and split an interaction log")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delimiter", default="\t")
    p.add_argument("--columns", default="user,item,rating,timestamp")
    p.add_argument("--skip-header", action="store_true")
    p.add_argument("--min-user-deg", type=int, default=20)
    p.add_argument("--min-item-deg", type=int, default=20)
    p.add_argument("--rating-threshold", type=float, default=4.0)
    p.set_defaults(fn=cmd_ingest)

    p = sub.add_parser("train", help="train on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("validation", "test"), default="test")
    p.add_argument("--strategy", default="latest-z")
    p.add_argument("--Ti", type=int)
    p.add_argument("--cutoffs", default="10,20")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="write top-k recommendations for all users")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", default="latest-z")
    p.add_argument("--Ti", type=int)
    p.add_argument("--topk", type=int, default=10)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("intervene", help="swap hidden features between users")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--donor", required=True)
    p.add_argument("--envs", choices=("latest", "all"), default="latest")
    p.add_argument("--Ti", type=int)
    p.add_argument("--topk", type=int, default=10)
    p.set_defaults(fn=cmd_intervene)

    p = sub.add_parser("sweep", help="grid-sweep one hyperparameter")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", required=True, metavar="KEY=A..B|KEY=V1,V2")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
