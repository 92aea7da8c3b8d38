"""Command-line entry point: ``ascpool <subcommand> [options]``.

Settings come from a flat ``key = value`` file (``--config``) overridden by
``--set key=value`` and the path flags. Every command that writes output
puts it under ``--out`` together with the resolved config and run metadata.
Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import subprocess
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ascpool import __version__
from ascpool.augment import EraseConfig, MixupConfig
from ascpool.balance import (
    aggregate_windows,
    generate_candidates,
    make_divergence_scorer,
    pick_top_quartile,
    score_candidates,
    write_score_report,
    write_split_manifest,
)
from ascpool.data import Dataset, load_features, load_manifest, one_hot_matrix
from ascpool.ensemble import (
    ensemble_predict,
    fuse_average,
    fuse_majority,
    read_probabilities,
    train_kfold,
    write_probabilities,
)
from ascpool.errors import AscError
from ascpool.harness import Leaderboard, read_submission, read_truth, score_submission, write_submission
from ascpool.model import TrainConfig, load_model, save_model
from ascpool.pipeline import (
    AugmentConfig,
    ExperimentSettings,
    derive_seed,
    make_trainer,
    prepare_features,
    run_ablation,
    write_ablation_csv,
)
from ascpool.preprocess import load_standardizer, save_standardizer
from ascpool.ssl import SslConfig, pseudo_label_run, write_round_log

log = logging.getLogger("ascpool")

_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}

# key -> default; the default's type is the key's type
CONFIG_DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "arch": "linear",
    "hidden_units": 32,
    "epochs": 30,
    "batch_size": 32,
    "base_lr": 0.01,
    "max_lr": 0.1,
    "clr_step_size": 100,
    "clr": False,
    "momentum": 0.0,
    "weight_decay": 0.0,
    "dropout": 0.0,
    "mixup": False,
    "mixup_alpha": 0.2,
    "random_erasing": False,
    "erase_probability": 0.5,
    "erase_area_low": 0.02,
    "erase_area_high": 0.33,
    "erase_aspect_low": 0.3,
    "erase_aspect_high": 3.3,
    "erase_fill": 0.0,
    "augment_order": "random_erasing,mixup",
    "variant": "raw",
    "standardize": True,
    "folds": 5,
    "group_key": "location_id",
    "fusion": "average",
    "ssl_threshold": 0.5,
    "ssl_rounds": 3,
    "ablation_mode": "augmentation",
    "balance_dev_target": 300,
    "balance_eval_target": 100,
    "balance_candidates": 100,
    "balance_components": 32,
    "balance_window": 50,
    "balance_hop": 25,
    "balance_max_iters": 100,
    "balance_tol": 1e-6,
    "limit_per_day": 2,
    "manifest": "",
    "test_manifest": "",
    "unlabeled_manifest": "",
    "out_dir": "",
}


class UsageError(Exception):
    pass


def _coerce(key: str, raw: str) -> Any:
    default = CONFIG_DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return _BOOL[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (KeyError, ValueError):
        raise UsageError(f"bad value {raw!r} for {key}") from None
    return raw


@dataclass
class RunConfig:
    values: dict[str, Any]

    @classmethod
    def resolve(cls, path: str | None = None, overrides: Sequence[str] = ()) -> RunConfig:
        values = dict(CONFIG_DEFAULTS)
        pairs: list[tuple[str, str]] = []
        if path:
            for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key = value")
                k, v = line.split("=", 1)
                pairs.append((k.strip(), v))
        for item in overrides:
            if "=" not in item:
                raise UsageError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            pairs.append((k.strip(), v))
        for k, v in pairs:
            if k not in CONFIG_DEFAULTS:
                raise UsageError(f"unknown config key {k!r}")
            values[k] = _coerce(k, v)
        return cls(values)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def dump(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.values.items()))

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            epochs=v["epochs"],
            batch_size=v["batch_size"],
            base_lr=v["base_lr"],
            max_lr=v["max_lr"],
            clr_step_size=v["clr_step_size"],
            clr_enabled=v["clr"],
            weight_decay=v["weight_decay"],
            dropout_rate=v["dropout"],
            momentum=v["momentum"],
            seed=v["seed"],
        )

    def augment_config(self) -> AugmentConfig:
        v = self.values
        order = tuple(s.strip() for s in v["augment_order"].split(",") if s.strip())
        if sorted(order) != ["mixup", "random_erasing"]:
            raise UsageError("augment_order must list mixup and random_erasing once each")
        return AugmentConfig(
            mixup=v["mixup"],
            random_erasing=v["random_erasing"],
            mixup_config=MixupConfig(v["mixup_alpha"], derive_seed(v["seed"], "mixup")),
            erase_config=EraseConfig(
                v["erase_probability"],
                v["erase_area_low"],
                v["erase_area_high"],
                v["erase_aspect_low"],
                v["erase_aspect_high"],
                v["erase_fill"],
                derive_seed(v["seed"], "erase"),
            ),
            order=order,
        )

    def settings(self) -> ExperimentSettings:
        v = self.values
        return ExperimentSettings(
            architecture=v["arch"],
            hidden_units=v["hidden_units"] if v["arch"] == "mlp" else 0,
            train_config=self.train_config(),
            augment=self.augment_config(),
            variant=v["variant"],
            standardize=v["standardize"],
            seed=v["seed"],
        )


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def version_string() -> str:
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if described.returncode == 0 and described.stdout.strip():
            return f"v{__version__}-g{described.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg["out_dir"]:
        raise UsageError("this command needs --out")
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dump())
    (out / "run.txt").write_text(f"seed = {cfg['seed']}\nversion = {version_string()}\n")
    return out


def _dataset(cfg: RunConfig, key: str) -> tuple[Dataset, list]:
    if not cfg[key]:
        raise UsageError(f"missing --{key.replace('_', '-')}")
    path = Path(cfg[key])
    ds = load_manifest(path)
    return ds, load_features(ds, path.parent)


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ds, mats = _dataset(cfg, "manifest")
    s = cfg.settings()
    prep = prepare_features(mats, s.variant, standardize=s.standardize)
    trainer = make_trainer(s.architecture, s.train_config, s.hidden_units, s.augment, prep.shape)
    model = trainer(prep.X, one_hot_matrix(ds.labels(), ds.class_count), derive_seed(s.seed, "train"))
    save_model(model, out / "model.ascm")
    if prep.stats is not None:
        save_standardizer(prep.stats, out / "standardizer.csv")
    (out / "vocabulary.txt").write_text("".join(f"{c}\n" for c in ds.label_vocabulary))
    acc = float(np.mean(model.predict(prep.X) == ds.labels()))
    print(f"train_accuracy,{acc:.4f}")
    return 0


def cmd_predict(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    run = Path(args.model_dir)
    train_cfg = RunConfig.resolve(str(run / "config.txt"))
    model = load_model(run / "model.ascm")
    vocab = (run / "vocabulary.txt").read_text().splitlines()
    stats = load_standardizer(run / "standardizer.csv") if train_cfg["standardize"] else None
    ds, mats = _dataset(cfg, "manifest")
    prep = prepare_features(mats, train_cfg["variant"], stats=stats, standardize=train_cfg["standardize"])
    probs = model.predict_proba(prep.X)
    ids = [s.segment_id for s in ds.segments]
    write_probabilities(out / "probabilities.csv", ids, vocab, probs)
    write_submission(out / "submission.csv", {i: vocab[k] for i, k in zip(ids, np.argmax(probs, axis=1))})
    return 0


def cmd_fuse(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    loaded = [read_probabilities(p) for p in args.probs]
    ids, vocab, _ = loaded[0]
    for other_ids, other_vocab, _ in loaded[1:]:
        if other_ids != ids or other_vocab != vocab:
            raise AscError("probability files disagree on segment ids or class order")
    prob_sets = np.stack([p for _, _, p in loaded])
    labels, fused = fuse_average(prob_sets)
    if cfg["fusion"] == "majority":
        labels = fuse_majority(np.argmax(prob_sets, axis=2), prob_sets)
    elif cfg["fusion"] != "average":
        raise UsageError(f"unknown fusion {cfg['fusion']!r}")
    write_probabilities(out / "fused_probabilities.csv", ids, vocab, fused)
    write_submission(out / "submission.csv", {i: vocab[k] for i, k in zip(ids, labels)})
    return 0


def cmd_kfold(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ds, mats = _dataset(cfg, "manifest")
    s = cfg.settings()
    prep = prepare_features(mats, s.variant, standardize=s.standardize)
    trainer = make_trainer(s.architecture, s.train_config, s.hidden_units, s.augment, prep.shape)
    rng = np.random.default_rng(derive_seed(s.seed, "kfold"))
    result = train_kfold(ds, prep.X, cfg["folds"], trainer, cfg["group_key"], rng)
    for k, model in enumerate(result.models):
        save_model(model, out / f"fold{k}.ascm")
    with (out / "folds.csv").open("w") as fh:
        fh.write("group,fold\n")
        for g, f in sorted(result.assignment.fold_of_group.items()):
            fh.write(f"{g},{f}\n")
    print(f"oof_accuracy,{result.oof_accuracy:.4f}")
    if cfg["test_manifest"]:
        test_ds, test_mats = _dataset(cfg, "test_manifest")
        te = prepare_features(test_mats, s.variant, stats=prep.stats, standardize=s.standardize)
        labels, fused = ensemble_predict(result.models, te.X, cfg["fusion"])
        ids = [x.segment_id for x in test_ds.segments]
        vocab = list(ds.label_vocabulary)
        write_probabilities(out / "fused_probabilities.csv", ids, vocab, fused)
        write_submission(out / "submission.csv", {i: vocab[k] for i, k in zip(ids, labels)})
    return 0


def cmd_ssl(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ds, mats = _dataset(cfg, "manifest")
    unl_ds, unl_mats = _dataset(cfg, "unlabeled_manifest")
    s = cfg.settings()
    prep = prepare_features(mats, s.variant, standardize=s.standardize)
    unl = prepare_features(unl_mats, s.variant, stats=prep.stats, standardize=s.standardize)
    trainer = make_trainer(s.architecture, s.train_config, s.hidden_units, s.augment, prep.shape)
    ssl_cfg = SslConfig(cfg["ssl_threshold"], cfg["ssl_rounds"])
    run = pseudo_label_run(
        trainer, prep.X, one_hot_matrix(ds.labels(), ds.class_count), unl.X, ssl_cfg, derive_seed(s.seed, "train")
    )
    save_model(run.model, out / "model.ascm")
    write_round_log(out / "rounds.csv", run, ssl_cfg.threshold)
    vocab = list(ds.label_vocabulary)
    ids = [x.segment_id for x in unl_ds.segments]
    probs = run.model.predict_proba(unl.X)
    write_probabilities(out / "probabilities.csv", ids, vocab, probs)
    print("accepted," + ",".join(str(a) for a in run.accepted_counts))
    return 0


def cmd_balance(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ds, mats = _dataset(cfg, "manifest")
    class_segments: dict[str, dict[str, list[str]]] = {}
    points = {}
    for seg, m in zip(ds.segments, mats):
        if seg.label is None:
            raise AscError(f"segment {seg.segment_id!r} needs a class label for balancing")
        class_segments.setdefault(seg.label, {}).setdefault(seg.recording_id, []).append(seg.segment_id)
        points[seg.segment_id] = aggregate_windows(m, cfg["balance_window"], cfg["balance_hop"])
    rng = np.random.default_rng(derive_seed(cfg["seed"], "balance"))
    candidates = generate_candidates(
        class_segments, cfg["balance_dev_target"], cfg["balance_eval_target"], cfg["balance_candidates"], rng
    )
    scorer = make_divergence_scorer(
        points,
        cfg["balance_components"],
        cfg["balance_max_iters"],
        cfg["balance_tol"],
        derive_seed(cfg["seed"], "gmm"),
    )
    scored = score_candidates(candidates, scorer)
    chosen = pick_top_quartile(scored, rng)
    write_split_manifest(out / "split.csv", chosen)
    write_score_report(out / "candidates.csv", scored, chosen)
    print(f"selected_divergence,{chosen.score:.6f}")
    return 0


def cmd_score(cfg: RunConfig, args) -> int:
    preds = read_submission(args.submission)
    truth, split = read_truth(args.truth)
    subset = {"all": split.all_ids, "public": split.public_ids, "private": split.private_ids}[args.subset]
    acc = score_submission(preds, truth, sorted(subset))
    print(f"accuracy,{acc:.4f}")
    return 0


def cmd_submit(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    truth, split = read_truth(args.truth)
    board = Leaderboard(truth, split, cfg["limit_per_day"], journal_path=out / "journal.csv")
    ts = datetime.fromisoformat(args.timestamp) if args.timestamp else datetime.now(timezone.utc)
    receipt = board.record_submission(args.team, ts, read_submission(args.submission))
    print(f"public_score,{receipt.public_score:.4f}")
    return 0


def cmd_ablation(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ds, mats = _dataset(cfg, "manifest")
    test_ds, test_mats = _dataset(cfg, "test_manifest")
    if test_ds.label_vocabulary and set(test_ds.label_vocabulary) - set(ds.label_vocabulary):
        raise AscError("test manifest has labels missing from the training manifest")
    test_labels = np.array([ds.class_index(s.label) for s in test_ds.segments])
    mode = cfg["ablation_mode"]
    rows = run_ablation(cfg.settings(), mats, ds.labels(), test_mats, test_labels, ds.class_count, mode)
    write_ablation_csv(out / f"ablation_{mode}.csv", rows, mode)
    for r in rows:
        print(f"{r.name},{100 * r.accuracy:.2f},{r.delta:+.2f}")
    return 0


COMMANDS = {
    "train": (cmd_train, "train one classifier on a labeled manifest"),
    "predict": (cmd_predict, "predict class probabilities with a trained run"),
    "fuse": (cmd_fuse, "fuse probability files by averaging or majority vote"),
    "kfold": (cmd_kfold, "group-exclusive K-fold training and ensemble prediction"),
    "ssl": (cmd_ssl, "pseudo-label self-training with an unlabeled manifest"),
    "balance": (cmd_balance, "select an acoustically balanced development/evaluation split"),
    "score": (cmd_score, "score a submission against a truth file"),
    "submit": (cmd_submit, "record a leaderboard submission (daily limit enforced)"),
    "ablation": (cmd_ablation, "run the augmentation/CLR or preprocessing ablation grid"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ascpool", description="Acoustic scene classification method pool.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one setting")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "predict", "kfold", "ssl", "balance", "ablation"):
            p.add_argument("--manifest")
        if name in ("kfold", "ablation"):
            p.add_argument("--test-manifest")
        if name == "ssl":
            p.add_argument("--unlabeled-manifest")
        if name == "predict":
            p.add_argument("--model-dir", required=True, help="output directory of a train run")
        if name == "fuse":
            p.add_argument("--probs", nargs="+", required=True)
        if name in ("score", "submit"):
            p.add_argument("--submission", required=True)
            p.add_argument("--truth", required=True)
        if name == "score":
            p.add_argument("--subset", choices=("all", "public", "private"), default="all")
        if name == "submit":
            p.add_argument("--team", required=True)
            p.add_argument("--timestamp", help="ISO-8601 time, UTC if no offset (default: now)")
    return parser


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.set)
    for key in ("out", "seed", "manifest", "test_manifest", "unlabeled_manifest"):
        value = getattr(args, key, None)
        if value is not None:
            overrides.append(f"{'out_dir' if key == 'out' else key}={value}")
    try:
        cfg = RunConfig.resolve(args.config, overrides)
        handler = COMMANDS[args.command][0]
        return handler(cfg, args)
    except UsageError as exc:
        print(f"ascpool {args.command}: {exc}", file=sys.stderr)
        return 2
    except (AscError, ValueError, KeyError, OSError, RuntimeError, ArithmeticError) as exc:
        print(f"ascpool {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
