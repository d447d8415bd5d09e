import csv
import logging
import re
import numpy as np
import pandas as pd
from typing import Dict, Iterable, List, NamedTuple, Optional, Tuple

logger = logging.getLogger(__name__)

ESSAY_COLUMNS = [
    "essay_id",
    "essay_set",
    "essay",
    "rater1_domain1",
    "rater2_domain1",
    "domain1_score",
]
SCORE_COLUMNS = ["rater1_domain1", "rater2_domain1", "domain1_score"]
TARGETS = {"resolved": "resolved", "rater1": "rater1"}

# 127 common English function words
ENGLISH_STOPWORDS = frozenset(
    """
    i me my myself we our ours ourselves you your yours yourself yourselves he him
    his himself she her hers herself it its itself they them their theirs
    themselves what which who whom this that these those am is are was were be
    been being have has had having do does did doing a an the and but if or
    because as until while of at by for with about against between into through
    during before after above below to from up down in out on off over under
    again further then once here there when where why how all any both each few
    more most other some such no nor not only own same so than too very s t can
    will just don should now
    """.split()
)


class ParseError(ValueError):
    """A malformed row in an essay file; ``line`` is the 1-based file line"""

    def __init__(self, line: int, column: str, message: str):
        self.line = line
        self.column = column
        super().__init__("line %i, column '%s': %s" % (line, column, message))


class ScoredEssay(NamedTuple):
    essay_id: int
    item: int
    text: str
    rater1: int
    rater2: int
    resolved: int


class ItemSpec(NamedTuple):
    """
    Score range of one essay prompt

    Examples
    --------
    >>> spec = ItemSpec(1, 2, 12)
    >>> spec.k, spec.to_label(2), spec.to_label(12), spec.to_score(10)
    (11, 0, 10, 12)
    """

    item: int
    min_score: int
    max_score: int

    @property
    def k(self) -> int:
        return self.max_score - self.min_score + 1

    def validate(self):
        if self.max_score <= self.min_score:
            raise ValueError(
                "Item %i: max_score must exceed min_score, got [%i, %i]!"
                % (self.item, self.min_score, self.max_score)
            )

    def to_label(self, score: int) -> int:
        if not self.min_score <= score <= self.max_score:
            raise ValueError(
                "Score %i is outside the range [%i, %i] of item %i!"
                % (score, self.min_score, self.max_score, self.item)
            )
        return int(score - self.min_score)

    def to_score(self, label: int) -> int:
        if not 0 <= label < self.k:
            raise ValueError("Label %i is outside [0, %i)!" % (label, self.k))
        return int(label + self.min_score)


class FoldSplit(NamedTuple):
    fold: int
    train: List[int]
    test: List[int]
    validation: List[int]


def _parse_int(value: str, line: int, column: str) -> int:
    try:
        return int(str(value).strip())
    except ValueError:
        raise ParseError(line, column, "expected an integer, got %r" % value)


def load_tsv(
    path: str,
    item_spec_path: Optional[str] = None,
    require_scores: bool = True,
    encoding: str = "utf-8",
) -> Tuple[List[ScoredEssay], Dict[int, ItemSpec]]:
    """
    Read essays in the tab-separated ASAP release layout

    Parameters
    ----------
    path : str
        TSV file with one header row and the columns essay_id, essay_set,
        essay, rater1_domain1, rater2_domain1, domain1_score
    item_spec_path : str (optional)
        Sidecar TSV (item, min_score, max_score); ranges are inferred from the
        data otherwise
    require_scores : bool
        Set to False to read unscored essays (scores become -1)
    encoding : str
        File encoding

    Returns
    -------
    (essays, specs)
        The essays in file order and one :class:`ItemSpec` per item
    """
    frame = pd.read_csv(
        path,
        sep="\t",
        dtype=str,
        keep_default_na=False,
        encoding=encoding,
        quoting=csv.QUOTE_MINIMAL,
    )
    needed = ESSAY_COLUMNS if require_scores else ESSAY_COLUMNS[:3]
    for column in needed:
        if column not in frame.columns:
            raise ValueError("Missing column '%s' in %s!" % (column, path))
    essays = []
    for offset, row in enumerate(frame.itertuples(index=False)):
        row = row._asdict()
        line = offset + 2
        text = row["essay"]
        if len(text.strip()) == 0:
            raise ParseError(line, "essay", "empty essay")
        scores = [
            _parse_int(row[c], line, c) if require_scores else -1 for c in SCORE_COLUMNS
        ]
        essays.append(
            ScoredEssay(
                _parse_int(row["essay_id"], line, "essay_id"),
                _parse_int(row["essay_set"], line, "essay_set"),
                text,
                *scores,
            )
        )
    if item_spec_path is not None:
        specs = load_item_specs(item_spec_path)
    elif require_scores:
        specs = infer_item_specs(essays)
    else:
        specs = {}
    if require_scores:
        for line, essay in enumerate(essays, start=2):
            spec = specs.get(essay.item)
            if spec is None:
                raise ParseError(line, "essay_set", "no score range for item %i" % essay.item)
            for column, score in zip(SCORE_COLUMNS, essay[3:]):
                if not spec.min_score <= score <= spec.max_score:
                    raise ParseError(
                        line,
                        column,
                        "score %i outside [%i, %i]"
                        % (score, spec.min_score, spec.max_score),
                    )
    logger.info("Loaded %i essays of %i items from %s", len(essays), len(specs), path)
    return essays, specs


def emit_tsv(essays: Iterable[ScoredEssay], path: str):
    """Write essays in the layout :func:`load_tsv` reads"""
    frame = pd.DataFrame(
        [
            [e.essay_id, e.item, e.text, e.rater1, e.rater2, e.resolved]
            for e in essays
        ],
        columns=ESSAY_COLUMNS,
    )
    frame.to_csv(path, sep="\t", index=False, quoting=csv.QUOTE_MINIMAL)


def load_item_specs(path: str) -> Dict[int, ItemSpec]:
    frame = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    for column in ItemSpec._fields:
        if column not in frame.columns:
            raise ValueError("Missing column '%s' in %s!" % (column, path))
    specs = {}
    for offset, row in enumerate(frame.itertuples(index=False)):
        row = row._asdict()
        spec = ItemSpec(*[_parse_int(row[c], offset + 2, c) for c in ItemSpec._fields])
        spec.validate()
        specs[spec.item] = spec
    return specs


def infer_item_specs(essays: Iterable[ScoredEssay]) -> Dict[int, ItemSpec]:
    """
    Observed score range per item, over both raters and the resolved score

    Examples
    --------
    >>> essays = [ScoredEssay(1, 1, "a", 2, 3, 5), ScoredEssay(2, 2, "b", 0, 1, 1)]
    >>> infer_item_specs(essays)
    {1: ItemSpec(item=1, min_score=2, max_score=5), 2: ItemSpec(item=2, min_score=0, max_score=1)}
    """
    bounds = {}
    for essay in essays:
        scores = essay[3:]
        low, high = bounds.get(essay.item, (min(scores), max(scores)))
        bounds[essay.item] = (min(low, *scores), max(high, *scores))
    specs = {}
    for item in sorted(bounds):
        low, high = bounds[item]
        # a constant item still needs two classes
        specs[item] = ItemSpec(item, low, max(high, low + 1))
    return specs


def select_item(essays: Iterable[ScoredEssay], item: int) -> List[ScoredEssay]:
    return [e for e in essays if e.item == item]


def to_labels(
    essays: Iterable[ScoredEssay], spec: ItemSpec, target: str = "resolved"
) -> np.ndarray:
    """
    Contiguous class labels (score - min_score) of the chosen score column

    Parameters
    ----------
    essays : Iterable[ScoredEssay]
        Essays of the item described by ``spec``
    spec : ItemSpec
        Score range; :meth:`ItemSpec.to_score` maps labels back
    target : {'resolved', 'rater1'}, default 'resolved'
        Score column to label
    """
    if target not in TARGETS:
        raise ValueError("Choose 'target' from values %s!" % list(TARGETS))
    return np.array(
        [spec.to_label(getattr(e, target)) for e in essays], dtype=np.int64
    )


def kfold_splits(
    essays: List[ScoredEssay], seed: Optional[int] = None, num_folds: int = 5
) -> List[FoldSplit]:
    """
    Seeded 60/20/20 splits, shuffled within every item separately

    Fold ``v`` validates on chunk ``v``, develops on chunk ``v+1`` (mod 5) and
    trains on the remaining three chunks.

    Examples
    --------
    >>> essays = [ScoredEssay(i, 1, "text", 1, 1, 1) for i in range(10)]
    >>> [(len(s.train), len(s.test), len(s.validation)) for s in kfold_splits(essays, seed=0)][:2]
    [(6, 2, 2), (6, 2, 2)]
    """
    by_item = {}
    for essay in essays:
        by_item.setdefault(essay.item, []).append(essay.essay_id)
    splits = [FoldSplit(v, [], [], []) for v in range(num_folds)]
    for item in sorted(by_item):
        ids = by_item[item]
        if len(ids) < num_folds:
            raise ValueError(
                "Item %i has %i essays, at least %i are needed for %i folds!"
                % (item, len(ids), num_folds, num_folds)
            )
        rng = np.random.default_rng([seed if seed is not None else 0, item])
        chunks = np.array_split(np.asarray(ids)[rng.permutation(len(ids))], num_folds)
        for v, split in enumerate(splits):
            test_chunk = (v + 1) % num_folds
            split.validation.extend(int(i) for i in chunks[v])
            split.test.extend(int(i) for i in chunks[test_chunk])
            for c in range(num_folds):
                if c not in [v, test_chunk]:
                    split.train.extend(int(i) for i in chunks[c])
    return splits


def load_stoplist(path: str) -> frozenset:
    with open(path, encoding="utf-8") as f:
        return frozenset(line.strip().lower() for line in f if line.strip())


def remove_stopwords(text: str, stoplist: Optional[Iterable[str]] = None) -> str:
    """
    Delete stop words (case-insensitively), keep punctuation and collapse whitespace

    Examples
    --------
    >>> remove_stopwords("the cat sat", {"the"})
    'cat sat'
    >>> remove_stopwords("The THE the", {"the"})
    ''
    >>> remove_stopwords("Hello,  the world.", {"the"})
    'Hello, world.'
    """
    stoplist = ENGLISH_STOPWORDS if stoplist is None else frozenset(stoplist)
    kept = re.sub(
        r"\w+",
        lambda match: "" if match.group(0).lower() in stoplist else match.group(0),
        text,
    )
    return " ".join(kept.split())
