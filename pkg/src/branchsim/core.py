"""Shared domain types: answer normalization, vote tallies, percentiles.

Simulated time is integer milliseconds throughout (exact replay, no float
drift in event ordering); ``TimePoint`` and ``Duration`` are aliases that
document intent.
"""

from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Sequence

TimePoint = int
Duration = int

# Distinguished "no answer" value: what probing yields when a partial branch
# has produced nothing extractable. It compares like any other answer string.
NO_ANSWER = ""

DIFFICULTY_LEVELS = (1, 2, 3, 4, 5)


def normalize_answer(raw: str) -> str:
    """Canonical answer form: trimmed, case-folded, outer braces stripped.

    Handles extraction-prompt artifacts such as ``\\boxed{42}``. Idempotent;
    empty input maps to :data:`NO_ANSWER`. Equality of answers is exact string
    equality on this normalized form (no semantic equivalence).
    """
    text = raw.strip()
    while True:
        if text.startswith("\\boxed{") and text.endswith("}") and len(text) > 8:
            text = text[7:-1].strip()
        elif text.startswith("{") and text.endswith("}") and len(text) >= 2:
            text = text[1:-1].strip()
        else:
            break
    return text.casefold()


class VoteTally:
    """Multiset of answers collected for one request.

    ``total`` is derived from the counts, so it can never drift and never
    decreases while answers are only added.
    """

    __slots__ = ("counts",)

    def __init__(self, answers: Iterable[str] = ()) -> None:
        self.counts: Counter[str] = Counter(answers)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def add(self, answer: str) -> None:
        self.counts[answer] += 1

    def max_count(self) -> int:
        return max(self.counts.values(), default=0)

    def as_dict(self) -> dict[str, int]:
        return dict(sorted(self.counts.items()))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VoteTally):
            return NotImplemented
        return self.counts == other.counts

    def __repr__(self) -> str:
        return f"VoteTally({dict(self.counts)!r})"


def majority_vote(tally: VoteTally) -> str:
    """Answer with the highest count; ties break to the lexicographically
    smallest normalized text, which makes the result independent of the order
    in which answers were collected."""
    if not tally.counts:
        raise ValueError("no answers collected")
    top = max(tally.counts.values())
    return min(answer for answer, n in tally.counts.items() if n == top)


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value, 1-based.

    Exact on small samples and never interpolates, so a percentile of integer
    durations is itself an integer duration. ``p`` must lie in (0, 100].
    """
    if len(values) == 0:
        raise ValueError("percentile of empty list")
    if not 0.0 < p <= 100.0:
        raise ValueError(f"percentile p must be in (0, 100], got {p}")
    ranked = sorted(values)
    # 1e-9 guards against float noise pushing an exact integer rank up by one.
    rank = max(1, math.ceil(p / 100.0 * len(ranked) - 1e-9))
    return ranked[rank - 1]
