import numpy as np
from typing import List, Optional, Tuple

from .corpus import ItemSpec, ScoredEssay, emit_tsv

FILLER_WORDS = """
student wrote about the story and the school because a friend said that
reading books in summer helps people learn new things when they travel to
places with family or work on a project for the class after lunch while the
mentor explains how computers change the way we talk with others every day
""".split()

# words that decide the score of a synthetic essay, lowest tier first
TIER_WORDS = [
    ["vague", "messy", "weak", "unclear", "sloppy", "confusing"],
    ["plain", "simple", "basic", "modest", "ordinary", "typical"],
    ["clear", "solid", "careful", "sound", "organized", "relevant"],
    ["vivid", "insightful", "precise", "compelling", "coherent", "thorough"],
    ["brilliant", "masterful", "eloquent", "nuanced", "profound", "luminous"],
]


class SyntheticEssayCorpus:
    """
    Seeded toy corpus whose scores are a deterministic function of its vocabulary

    Every essay mixes filler words with a few words of one score tier; the
    tier is the label. The first rater and the resolved score equal the
    tier score, the second rater deviates by one point with probability
    ``rater_noise``.

    Parameters
    ----------
    num_essays : int
        Number of essays over all items
    num_items : int
        Number of prompts; essays are assigned round-robin, item ids start at 1
    num_classes : int
        Score tiers per item (at most 5)
    min_score : int
        Lowest score of every item
    essay_length : Tuple[int, int]
        Inclusive range of filler words per essay
    num_markers : Tuple[int, int]
        Inclusive range of tier words per essay
    rater_noise : float
        Probability that the second rater is one point off
    seed: int (optional)
        Random seed (disabled by default)

    Examples
    --------
    >>> corpus = SyntheticEssayCorpus(num_essays=20, num_items=2, seed=42)
    >>> len(corpus.essays)
    20
    >>> sorted(corpus.specs)
    [1, 2]
    >>> corpus.specs[1]
    ItemSpec(item=1, min_score=1, max_score=4)
    """

    def __init__(
        self,
        num_essays: int = 200,
        num_items: int = 1,
        num_classes: int = 4,
        min_score: int = 1,
        essay_length: Tuple[int, int] = (10, 20),
        num_markers: Tuple[int, int] = (2, 4),
        rater_noise: float = 0.1,
        seed: Optional[int] = None,
    ):
        if not 2 <= num_classes <= len(TIER_WORDS):
            raise ValueError(
                "num_classes must be in [2, %i], got %i!" % (len(TIER_WORDS), num_classes)
            )
        if not 0.0 <= rater_noise <= 1.0:
            raise ValueError("rater_noise must be a probability, got %s!" % rater_noise)
        self._rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.specs = {
            item: ItemSpec(item, min_score, min_score + num_classes - 1)
            for item in range(1, num_items + 1)
        }
        self.essays = []
        for essay_id in range(1, num_essays + 1):
            item = (essay_id - 1) % num_items + 1
            label = int(self._rng.integers(num_classes))
            text = self.compose(label, essay_length, num_markers)
            score = min_score + label
            second = score
            if self._rng.random() < rater_noise:
                second = int(
                    np.clip(
                        score + self._rng.choice([-1, 1]),
                        min_score,
                        min_score + num_classes - 1,
                    )
                )
            self.essays.append(ScoredEssay(essay_id, item, text, score, second, score))

    def compose(
        self, label: int, essay_length: Tuple[int, int], num_markers: Tuple[int, int]
    ) -> str:
        length = int(self._rng.integers(essay_length[0], essay_length[1] + 1))
        words = list(self._rng.choice(FILLER_WORDS, size=length))
        markers = self._rng.choice(
            TIER_WORDS[label], size=int(self._rng.integers(num_markers[0], num_markers[1] + 1))
        )
        for word in markers:
            words.insert(int(self._rng.integers(len(words) + 1)), word)
        return " ".join(words).capitalize() + "."

    def save(self, path: str):
        """Write the corpus as an essay TSV"""
        emit_tsv(self.essays, path)


def separable_toy_set(
    num_essays: int = 32, num_classes: int = 3, seed: Optional[int] = None
) -> Tuple[List[str], np.ndarray]:
    """
    Short essays with class-specific vocabulary, for overfitting checks

    Examples
    --------
    >>> texts, labels = separable_toy_set(num_essays=6, num_classes=3, seed=1)
    >>> len(texts), sorted(set(labels.tolist()))
    (6, [0, 1, 2])
    """
    corpus = SyntheticEssayCorpus(
        num_essays=num_essays,
        num_classes=num_classes,
        min_score=0,
        essay_length=(4, 8),
        num_markers=(2, 3),
        rater_noise=0.0,
        seed=seed,
    )
    # balanced labels so every class is present
    labels = np.arange(num_essays) % num_classes
    texts = [corpus.compose(int(label), (4, 8), (2, 3)) for label in labels]
    return texts, labels
