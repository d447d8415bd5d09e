import argparse
import hashlib
import logging
import os
import sys
import typing
import numpy as np
import pandas as pd
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence

from .corpus import (
    kfold_splits,
    load_stoplist,
    load_tsv,
    select_item,
)
from .experiments import (
    GRID_ROWS,
    METRIC_COLUMNS,
    ModelSettings,
    agreement_row,
    experiment_grid,
    prediction_frame,
    run_ensemble,
    run_fold_job,
    run_kfold,
)
from .lstm import LstmConfig
from .metrics import QWK_VARIANTS, agreement_report
from .scorers import SCORER_VARIANTS, load_scorer
from .selftest import run_selftest
from .tokenizer import Vocab, build_vocab
from .training import EnsembleSpec, TrainPlan, ensemble_predict, resolve_lr
from .transformer import PRESETS, EncoderConfig

logger = logging.getLogger(__name__)

COMMANDS = ["ingest", "vocab", "train", "kfold", "grid", "ensemble", "score", "evaluate", "selftest"]
SEED_VARIABLE = "AESF_SEED"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@dataclass
class RunConfig:
    """
    Every knob of one command-line run, as a flat record

    Resolution order: these defaults, then a ``--config`` file of
    ``key = value`` lines, then explicit flags. The seed falls back to the
    ``AESF_SEED`` environment variable.
    """

    command: str = "train"
    input: Optional[str] = None
    item_specs: Optional[str] = None
    items: str = ""
    out: str = "aesf-out"
    seed: Optional[int] = None
    workers: int = 1
    verbose: bool = False
    # model
    variant: str = "bert"
    preset: str = "desk"
    hidden: Optional[int] = None
    heads: Optional[int] = None
    n_layers: Optional[int] = None
    ffn_dim: Optional[int] = None
    max_len: Optional[int] = None
    mem_len: Optional[int] = None
    encoder_dropout: Optional[float] = None
    vocab: Optional[str] = None
    vocab_size: int = 2000
    min_frequency: int = 1
    lstm_embed_dim: int = 32
    lstm_hidden: int = 32
    lstm_layers: int = 1
    lstm_pooling: str = "last"
    lstm_max_len: int = 64
    forget_bias: float = 1.0
    bow_cutoff: float = 0.9
    bow_epochs: int = 100
    bow_lr: float = 0.1
    # training plan
    epochs: int = 10
    lr: str = "desk"
    lr_variant: str = "fixed"
    xi: float = 0.95
    unfreeze: str = "off"
    dropout: Optional[float] = None
    layer_limit: Optional[int] = None
    remove_stopwords: bool = False
    stoplist: Optional[str] = None
    batch_size: int = 8
    warmup_steps: int = 0
    window_mode: str = "label-mean"
    target: str = "resolved"
    pretrain_steps: int = 0
    mlm_rate: float = 0.15
    carry_memory: bool = False
    # experiments
    folds: int = 5
    fold: int = 0
    grid_rows: str = ",".join(GRID_ROWS)
    families: str = "bert,xlnet"
    ensemble_mode: str = "mean-round"
    members: str = ""
    best_member: int = 0
    checkpoint: Optional[str] = None
    predictions: Optional[str] = None
    qwk_variant: str = "standard"
    suites: str = ""
    quick: bool = False

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError("Choose 'command' from values %s!" % COMMANDS)
        if self.variant not in SCORER_VARIANTS:
            raise ValueError("Choose 'variant' from values %s!" % SCORER_VARIANTS)
        if self.preset not in PRESETS:
            raise ValueError("Choose 'preset' from values %s!" % list(PRESETS))
        if self.qwk_variant not in QWK_VARIANTS:
            raise ValueError("Choose 'qwk_variant' from values %s!" % QWK_VARIANTS)
        if self.workers < 1:
            raise ValueError("workers must be positive, got %i!" % self.workers)
        if not 0 <= self.fold < self.folds:
            raise ValueError("fold must be in [0, %i), got %i!" % (self.folds, self.fold))

    @property
    def item_list(self) -> Optional[List[int]]:
        return _int_list(self.items) or None

    def validate_paths(self):
        """Referenced files must exist; commands that read essays need ``input``"""
        if self.command != "selftest" and self.input is None:
            raise ValueError("Command '%s' needs --input!" % self.command)
        paths = [
            self.input,
            self.item_specs,
            self.vocab,
            self.stoplist,
            self.checkpoint,
            self.predictions,
        ]
        paths += _str_list(self.members)
        for path in paths:
            if path is not None and not os.path.isfile(path):
                raise ValueError("File not found: %s" % path)
        if self.command == "score" and self.checkpoint is None:
            raise ValueError("Command 'score' needs --checkpoint!")
        if self.command == "evaluate" and self.predictions is None:
            raise ValueError("Command 'evaluate' needs --predictions!")

    def encoder_config(self) -> EncoderConfig:
        overrides = {
            "hidden": self.hidden,
            "heads": self.heads,
            "n_layers": self.n_layers,
            "ffn_dim": self.ffn_dim,
            "max_len": self.max_len,
            "mem_len": self.mem_len,
            "dropout": self.encoder_dropout,
        }
        return EncoderConfig.preset(
            self.preset, **{key: value for key, value in overrides.items() if value is not None}
        )

    def lstm_config(self) -> LstmConfig:
        return LstmConfig(
            embed_dim=self.lstm_embed_dim,
            hidden=self.lstm_hidden,
            n_layers=self.lstm_layers,
            pooling=self.lstm_pooling,
            forget_bias=self.forget_bias,
        )

    def plan(self) -> TrainPlan:
        return TrainPlan(
            epochs=self.epochs,
            base_lr=resolve_lr(self.lr),
            lr_variant=self.lr_variant,
            xi=self.xi,
            unfreeze=self.unfreeze,
            dropout=self.dropout,
            layer_limit=self.layer_limit,
            remove_stopwords=self.remove_stopwords,
            batch_size=self.batch_size,
            seed=self.seed,
            warmup_steps=self.warmup_steps,
            window_mode=self.window_mode,
            target=self.target,
            pretrain_steps=self.pretrain_steps,
            mlm_rate=self.mlm_rate,
            carry_memory=self.carry_memory,
        )

    def settings(self, variant: Optional[str] = None) -> ModelSettings:
        return ModelSettings(
            variant=variant or self.variant,
            encoder=self.encoder_config(),
            lstm=self.lstm_config(),
            lstm_max_len=self.lstm_max_len,
            vocab_size=self.vocab_size,
            min_frequency=self.min_frequency,
            bow_cutoff=self.bow_cutoff,
            bow_epochs=self.bow_epochs,
            bow_lr=self.bow_lr,
            stoplist=load_stoplist(self.stoplist) if self.stoplist else None,
        )

    def to_text(self) -> str:
        return "".join("%s = %s\n" % (key, _config_value(value)) for key, value in asdict(self).items())


def _config_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return str(value).lower()
    return str(value)


def _str_list(value: str) -> List[str]:
    return [part.strip() for part in value.split(",") if part.strip()]


def _int_list(value: str) -> List[int]:
    try:
        return [int(part) for part in _str_list(value)]
    except ValueError:
        raise ValueError("Expected comma-separated integers, got %r!" % value)


def _base_type(annotation):
    args = [a for a in typing.get_args(annotation) if a is not type(None)]
    return args[0] if args else annotation


def coerce(name: str, raw: str):
    """
    Typed value of one configuration entry

    Examples
    --------
    >>> coerce("epochs", "3"), coerce("seed", "none"), coerce("verbose", "yes")
    (3, None, True)
    """
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise ValueError("Unknown configuration key '%s'!" % name)
    optional = type(None) in typing.get_args(types[name])
    raw = raw.strip()
    if optional and raw.lower() in ["", "none"]:
        return None
    base = _base_type(types[name])
    if base is bool:
        if raw.lower() in ["true", "yes", "1", "on"]:
            return True
        if raw.lower() in ["false", "no", "0", "off"]:
            return False
        raise ValueError("Expected a boolean for '%s', got %r!" % (name, raw))
    try:
        return base(raw)
    except ValueError:
        raise ValueError("Expected %s for '%s', got %r!" % (base.__name__, name, raw))


def parse_config_file(path: str) -> Dict[str, object]:
    """Read flat ``key = value`` lines; '#' starts a comment"""
    values = {}
    with open(path, encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError("%s line %i: expected 'key = value', got %r!" % (path, number, line))
            key, raw = [part.strip() for part in line.split("=", 1)]
            try:
                values[key] = coerce(key, raw)
            except ValueError as err:
                raise ValueError("%s line %i: %s" % (path, number, err))
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Flat 'key = value' configuration file")
    common.add_argument(
        "--print-config", action="store_true", help="Print the resolved configuration and exit"
    )
    for f in fields(RunConfig):
        if f.name == "command":
            continue
        flag = "--" + f.name.replace("_", "-")
        if _base_type(f.type) is bool:
            common.add_argument(flag, dest=f.name, action="store_const", const=True, default=argparse.SUPPRESS)
        else:
            common.add_argument(
                flag,
                dest=f.name,
                type=str,
                default=argparse.SUPPRESS,
                help="(default: %s)" % f.default,
            )
    parser = argparse.ArgumentParser(
        prog="aesf", description="Automated essay scoring: train, evaluate and study essay scorers"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        subparsers.add_parser(command, parents=[common])
    return parser


def resolve_config(args: argparse.Namespace, environ: Optional[Dict[str, str]] = None) -> RunConfig:
    """Defaults < config file < flags; the seed falls back to AESF_SEED"""
    environ = os.environ if environ is None else environ
    values = {}
    if args.config is not None:
        values.update(parse_config_file(args.config))
    for f in fields(RunConfig):
        if f.name != "command" and f.name in vars(args):
            value = vars(args)[f.name]
            values[f.name] = value if isinstance(value, bool) else coerce(f.name, value)
    values["command"] = args.command
    if values.get("seed") is None and environ.get(SEED_VARIABLE):
        values["seed"] = coerce("seed", environ[SEED_VARIABLE])
    return RunConfig(**values)


### outputs ###


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(config: RunConfig, checkpoints: Sequence[str]):
    """Configuration echo (a valid --config file) plus checkpoint digests"""
    path = os.path.join(config.out, "manifest.txt")
    with open(path, "w", encoding="utf-8") as f:
        f.write(config.to_text())
        for checkpoint in checkpoints:
            relative = os.path.relpath(checkpoint, config.out)
            f.write("# sha256 %s = %s\n" % (relative, _sha256(checkpoint)))


def write_tsv(frame: pd.DataFrame, config: RunConfig, name: str):
    frame.to_csv(os.path.join(config.out, name), sep="\t", index=False)


def _load(config: RunConfig, require_scores: bool = True):
    essays, specs = load_tsv(config.input, config.item_specs, require_scores)
    items = config.item_list or sorted(specs)
    unknown = [item for item in items if item not in specs]
    if require_scores and unknown:
        raise ValueError(
            "Unknown item %s, known items are %s!"
            % (", ".join(map(str, unknown)), sorted(specs))
        )
    return essays, specs, items


def _single_item(items: List[int]) -> int:
    if len(items) != 1:
        raise ValueError("Choose one item with --items, found %s!" % items)
    return items[0]


### commands ###


def cmd_ingest(config: RunConfig) -> List[str]:
    essays, specs, items = _load(config)
    rows = []
    for item in items:
        chosen = select_item(essays, item)
        lengths = [len(e.text.split()) for e in chosen]
        spec = specs[item]
        rows.append(
            {
                "item": item,
                "essays": len(chosen),
                "min_score": spec.min_score,
                "max_score": spec.max_score,
                "mean_words": float(np.mean(lengths)) if lengths else 0.0,
                "max_words": max(lengths) if lengths else 0,
            }
        )
    summary = pd.DataFrame(rows)
    write_tsv(summary, config, "metrics.tsv")
    print(summary.to_string(index=False))
    return []


def cmd_vocab(config: RunConfig) -> List[str]:
    essays, _, items = _load(config)
    texts = [e.text for e in essays if e.item in items]
    vocab = build_vocab(texts, config.vocab_size, config.min_frequency)
    path = os.path.join(config.out, "vocab.txt")
    vocab.save(path)
    print("%i pieces written to %s" % (len(vocab), path))
    return []


def _fixed_vocab(config: RunConfig) -> Optional[Vocab]:
    return Vocab.load(config.vocab) if config.vocab else None


def cmd_train(config: RunConfig) -> List[str]:
    essays, specs, items = _load(config)
    item = _single_item(items)
    item_essays = select_item(essays, item)
    split = kfold_splits(item_essays, config.seed, config.folds)[config.fold]
    row = run_fold_job(
        {
            "essays": item_essays,
            "spec": specs[item],
            "split": split,
            "settings": config.settings(),
            "plan": config.plan(),
            "vocab": _fixed_vocab(config),
            "verbose": config.verbose,
        }
    )[0]
    checkpoint = os.path.join(config.out, "checkpoint.aesf")
    row["scorer"].save(checkpoint)
    write_tsv(row["history"], config, "history.tsv")
    write_tsv(row["predictions"], config, "predictions.tsv")
    metrics = pd.DataFrame([row]).reindex(columns=METRIC_COLUMNS)
    write_tsv(metrics, config, "metrics.tsv")
    print(metrics.to_string(index=False))
    return [checkpoint]


def cmd_kfold(config: RunConfig) -> List[str]:
    essays, specs, items = _load(config)
    result = run_kfold(
        essays,
        specs,
        config.settings(),
        config.plan(),
        items,
        config.folds,
        vocab=_fixed_vocab(config),
        max_workers=config.workers,
        verbose=config.verbose,
    )
    checkpoints = []
    for _, model in result.models.iterrows():
        directory = os.path.join(config.out, "fold_%i" % model["fold"], "item_%i" % model["item"])
        os.makedirs(directory, exist_ok=True)
        checkpoints.append(os.path.join(directory, "checkpoint.aesf"))
        model["scorer"].save(checkpoints[-1])
    write_tsv(result.metrics, config, "metrics.tsv")
    write_tsv(result.predictions, config, "predictions.tsv")
    print(result.metrics.to_string(index=False))
    return checkpoints


def cmd_grid(config: RunConfig) -> List[str]:
    essays, specs, items = _load(config)
    table, runs = experiment_grid(
        essays,
        specs,
        config.settings(),
        config.plan(),
        items,
        config.fold,
        _str_list(config.grid_rows),
        config.workers,
        config.verbose,
    )
    table.reset_index().to_csv(
        os.path.join(config.out, "grid.tsv"), sep="\t", index=False, float_format="%.2f"
    )
    write_tsv(runs, config, "metrics.tsv")
    print(table.round(2).to_string())
    return []


def _ensemble_from_members(config: RunConfig):
    members = [load_scorer(path) for path in _str_list(config.members)]
    spec = EnsembleSpec(members, config.ensemble_mode, config.best_member)
    essays, specs, _ = _load(config)
    item_spec = members[0].spec
    if item_spec is None:
        raise ValueError("Ensemble members carry no item score range!")
    chosen = select_item(essays, item_spec.item)
    predicted = ensemble_predict(spec, [e.text for e in chosen])
    row = agreement_row(chosen, predicted, item_spec, config.target, config.qwk_variant)
    row["item"] = item_spec.item
    return agreement_report([row]), prediction_frame(chosen, predicted, item_spec)


def cmd_ensemble(config: RunConfig) -> List[str]:
    if config.members:
        table, predictions = _ensemble_from_members(config)
        print(table.to_string(index=False))
    else:
        essays, specs, items = _load(config)
        families = [config.settings(variant) for variant in _str_list(config.families)]
        table, predictions = run_ensemble(
            essays,
            specs,
            families,
            config.plan(),
            items,
            config.fold,
            max_workers=config.workers,
            verbose=config.verbose,
        )
        table = table.reset_index()
        print(table.round(4).to_string(index=False))
    write_tsv(table, config, "metrics.tsv")
    write_tsv(predictions, config, "predictions.tsv")
    return []


def cmd_score(config: RunConfig) -> List[str]:
    scorer = load_scorer(config.checkpoint)
    essays, _, _ = _load(config, require_scores=False)
    if scorer.spec is None:
        raise ValueError("Checkpoint %s carries no item score range!" % config.checkpoint)
    chosen = select_item(essays, scorer.spec.item)
    if len(chosen) < len(essays):
        logger.warning(
            "Skipped %i essays of other items than %i", len(essays) - len(chosen), scorer.spec.item
        )
    predicted = scorer.predict([e.text for e in chosen])
    write_tsv(prediction_frame(chosen, predicted, scorer.spec), config, "predictions.tsv")
    print("%i essays scored" % len(chosen))
    return []


def cmd_evaluate(config: RunConfig) -> List[str]:
    essays, specs, items = _load(config)
    predictions = pd.read_csv(config.predictions, sep="\t")
    for column in ["essay_id", "predicted_score"]:
        if column not in predictions.columns:
            raise ValueError("Missing column '%s' in %s!" % (column, config.predictions))
    scores = dict(zip(predictions["essay_id"].astype(int), predictions["predicted_score"].astype(int)))
    rows = []
    for item in items:
        chosen = [e for e in select_item(essays, item) if e.essay_id in scores]
        if not chosen:
            continue
        spec = specs[item]
        predicted = [spec.to_label(scores[e.essay_id]) for e in chosen]
        row = agreement_row(chosen, predicted, spec, config.target, config.qwk_variant)
        row["item"] = item
        rows.append(row)
    if not rows:
        raise ValueError("No prediction matches an essay of %s!" % config.input)
    report = agreement_report(rows)
    write_tsv(report, config, "metrics.tsv")
    print(report.to_string(index=False))
    return []


def cmd_selftest(config: RunConfig) -> List[str]:
    results = run_selftest(_str_list(config.suites), config.seed, config.quick, config.verbose)
    write_tsv(results, config, "metrics.tsv")
    print(results.to_string(index=False))
    if not results["passed"].all():
        raise RuntimeError("Self-test failed: %s" % list(results.loc[~results["passed"], "suite"]))
    return []


HANDLERS = {
    "ingest": cmd_ingest,
    "vocab": cmd_vocab,
    "train": cmd_train,
    "kfold": cmd_kfold,
    "grid": cmd_grid,
    "ensemble": cmd_ensemble,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
    "selftest": cmd_selftest,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """
    Execute one subcommand; returns the process exit code

    0 on success, 1 with an ``error: ...`` line on stderr for bad values,
    missing files or failed runs, 2 for usage errors.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as stop:
        return int(stop.code or 0)
    try:
        config = resolve_config(args)
        if args.print_config:
            sys.stdout.write(config.to_text())
            return 0
        logging.basicConfig(
            level=logging.INFO if config.verbose else logging.WARNING, format=LOG_FORMAT
        )
        config.validate_paths()
        if config.seed is None:
            config.seed = int(np.random.SeedSequence().entropy % 2**31)
            logger.info("Drew seed %i", config.seed)
        os.makedirs(config.out, exist_ok=True)
        checkpoints = HANDLERS[config.command](config)
        write_manifest(config, checkpoints)
    except (ValueError, RuntimeError, OSError) as err:
        sys.stderr.write("error: %s\n" % err)
        return 1
    return 0


def main():
    sys.exit(run(sys.argv[1:]))
