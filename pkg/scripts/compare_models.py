import argparse, json
import pandas as pd
from datetime import datetime as dt

from aesf.corpus import load_tsv
from aesf.data import SyntheticEssayCorpus
from aesf.experiments import ModelSettings, run_kfold
from aesf.lstm import LstmConfig
from aesf.training import TrainPlan, resolve_lr
from aesf.transformer import EncoderConfig


def load_corpus(config):
    if config["input"] is None:
        corpus = SyntheticEssayCorpus(
            num_essays=config["num_essays"],
            num_items=config["num_items"],
            seed=config["seed"],
        )
        return corpus.essays, corpus.specs
    return load_tsv(config["input"], config["item_specs"])


def run_single_variant(essays, specs, config, variant):
    settings = ModelSettings(
        variant=variant,
        encoder=EncoderConfig.preset(config["preset"]),
        lstm=LstmConfig(),
        vocab_size=config["vocab_size"],
    )
    plan = TrainPlan(
        epochs=config["epochs"],
        base_lr=resolve_lr(config["lr"]),
        unfreeze=config["unfreeze"],
        seed=config["seed"],
    )
    result = run_kfold(
        essays,
        specs,
        settings,
        plan,
        num_folds=config["num_folds"],
        max_workers=config["max_threads"],
    )
    return result.metrics


parser = argparse.ArgumentParser(
    description="Script for comparing essay scorer families (bag-of-words, LSTM, BERT, XLNet) with k-fold cross-validation"
)
parser.add_argument(
    "--input",
    type=str,
    default=None,
    help="Essay TSV in the ASAP layout (Default: None - a synthetic corpus is generated)",
)
parser.add_argument(
    "--item_specs",
    type=str,
    default=None,
    help="Item score-range TSV (Default: None - ranges are inferred from the data)",
)
parser.add_argument(
    "--num_essays",
    type=int,
    default=200,
    help="Size of the synthetic corpus (Default: 200)",
)
parser.add_argument(
    "--num_items",
    type=int,
    default=1,
    help="Number of items in the synthetic corpus (Default: 1)",
)
parser.add_argument(
    "--variants",
    nargs="+",
    type=str,
    choices=["bow", "lstm", "bert", "xlnet"],
    default=["bow", "lstm", "bert", "xlnet"],
    help="Model families to compare (Default: all of them)",
)
parser.add_argument(
    "--preset",
    type=str,
    choices=["desk", "base"],
    default="desk",
    help="Transformer shape preset (Default: desk)",
)
parser.add_argument(
    "--vocab_size",
    type=int,
    default=2000,
    help="Word-piece vocabulary size (Default: 2000)",
)
parser.add_argument(
    "--epochs", type=int, default=10, help="Fine-tuning epochs (Default: 10)"
)
parser.add_argument(
    "--lr",
    type=str,
    default="desk",
    help="Learning rate or preset: desk, base-1e-5, base-5e-6 (Default: desk)",
)
parser.add_argument(
    "--unfreeze",
    type=str,
    choices=["off", "gradual"],
    default="off",
    help="Layer unfreezing schedule (Default: off)",
)
parser.add_argument(
    "--num_folds", type=int, default=5, help="Number of folds (Default: 5)"
)
parser.add_argument("--seed", type=int, default=43, help="Random seed (Default: 43)")
parser.add_argument(
    "--max_threads",
    type=int,
    default=1,
    help="Maximum number of threads used to parallelize the folds (Default: 1)",
)
parser.add_argument(
    "--output_file_prefix",
    type=str,
    default=None,
    help="Specify output file prefix. Otherwise the timestamp will be used.",
)

if __name__ == "__main__":
    # load arguments
    args = parser.parse_args()
    if args.output_file_prefix != None:
        output_file_prefix = args.output_file_prefix
    else:
        output_file_prefix = dt.now().strftime("%Y-%m-%d_%H:%M:%S")

    # save config file
    config = vars(args)
    with open("%s.json" % output_file_prefix, "w") as f:
        f.write(json.dumps(config))

    essays, specs = load_corpus(config)
    print(len(essays))

    # run experiment
    results_df = pd.concat(
        [run_single_variant(essays, specs, config, variant) for variant in args.variants],
        ignore_index=True,
    )
    # save results
    results_df.to_csv("%s.csv" % output_file_prefix, index=False)
    print(results_df[results_df["fold"] == "mean"].to_string(index=False))
