"""Cosine ranking and mAP under Oxford/Paris-style positive/ignore protocols."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Iterable, Sequence

import numpy as np
import torch

SETUPS = ("E", "M", "H", "custom")
_LABEL_KEYS = ("easy", "hard", "unclear")
_LIST_KEYS = ("pos", "ignore")


@dataclass(frozen=True)
class Ranking:
    ids: tuple
    scores: np.ndarray

    def __iter__(self):
        return iter(self.ids)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class RetrievalGroundTruth:
    query: Hashable
    positives: frozenset
    ignore: frozenset = frozenset()
    setup: str = "custom"

    def __post_init__(self):
        both = self.positives & self.ignore
        if both:
            raise ValueError(f"query {self.query}: ids {sorted(map(str, both))} are both positive and ignored")
        if self.query in self.positives or self.query in self.ignore:
            object.__setattr__(self, "positives", self.positives - {self.query})
            object.__setattr__(self, "ignore", self.ignore - {self.query})


def _as_numpy(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def rank_database(query, db, ids: Sequence | None = None, exclude: Hashable | None = None) -> Ranking:
    """Sort database entries by dot product with ``query``; ties go to the lower id."""
    q = _as_numpy(query).ravel()
    X = np.atleast_2d(_as_numpy(db))
    if X.shape[0] == 0 or X.size == 0:
        raise ValueError("database is empty")
    if X.shape[1] != q.size:
        raise ValueError(f"query has dim {q.size}, database has dim {X.shape[1]}")
    ids = list(range(X.shape[0])) if ids is None else list(ids)
    if len(ids) != X.shape[0]:
        raise ValueError(f"{len(ids)} ids for {X.shape[0]} database rows")
    scores = X @ q
    keep = [n for n, i in enumerate(ids) if i != exclude] if exclude is not None else list(range(len(ids)))
    if not keep:
        raise ValueError("database is empty after excluding the query")
    tie_key = np.argsort(np.argsort([ids[n] for n in keep], kind="stable"), kind="stable")
    order = np.lexsort((tie_key, -scores[keep]))
    sel = [keep[o] for o in order]
    return Ranking(tuple(ids[n] for n in sel), scores[sel])


def average_precision(ranking: Iterable, gt: RetrievalGroundTruth) -> float:
    """Non-interpolated AP after removing ignored entries from the ranking.

    Each positive contributes the precision at its (cleaned) rank; positives
    that never appear contribute zero.
    """
    if not gt.positives:
        raise ValueError(f"query {gt.query} has no positives")
    hits = 0
    total = 0.0
    rank = 0
    for item in ranking:
        if item in gt.ignore or item == gt.query:
            continue
        rank += 1
        if item in gt.positives:
            hits += 1
            total += hits / rank
    return total / len(gt.positives)


def mean_average_precision(rankings: Sequence, gts: Sequence[RetrievalGroundTruth]) -> float:
    if len(rankings) == 0:
        raise ValueError("no queries to evaluate")
    if len(rankings) != len(gts):
        raise ValueError(f"{len(rankings)} rankings for {len(gts)} groundtruth records")
    return float(np.mean([average_precision(r, g) for r, g in zip(rankings, gts)]))


def groundtruth_from_labels(query, easy=(), hard=(), unclear=(), setup: str = "M") -> RetrievalGroundTruth:
    easy, hard, unclear = frozenset(easy), frozenset(hard), frozenset(unclear)
    if setup == "E":
        pos, ign = easy, hard | unclear
    elif setup == "M":
        pos, ign = easy | hard, unclear
    elif setup == "H":
        pos, ign = hard, easy | unclear
    else:
        raise ValueError(f"label-derived setups are E, M, H; got {setup!r}")
    return RetrievalGroundTruth(query, pos, ign, setup)


def parse_groundtruth(text: str, setup: str = "custom", source: str = "<string>") -> list[RetrievalGroundTruth]:
    """Parse whitespace-separated groundtruth records.

    One record per line: ``<query> pos <ids...> [ignore <ids...>]`` for the
    custom setup, or ``<query> easy <ids...> hard <ids...> unclear <ids...>``
    (any subset of sections) for E/M/H derivation. ``#`` starts a comment.
    """
    if setup not in SETUPS:
        raise ValueError(f"setup must be one of {SETUPS}, got {setup!r}")
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        query, rest = tokens[0], tokens[1:]
        sections: dict[str, list] = {}
        current = None
        for tok in rest:
            key = tok.rstrip(":").lower()
            if key in _LABEL_KEYS + _LIST_KEYS:
                if key in sections:
                    raise ValueError(f"{source}:{lineno}: section {key!r} repeated")
                current = key
                sections[current] = []
            elif current is None:
                raise ValueError(f"{source}:{lineno}: id {tok!r} appears before any section keyword")
            else:
                sections[current].append(tok)
        labelled = any(k in sections for k in _LABEL_KEYS)
        listed = any(k in sections for k in _LIST_KEYS)
        if labelled and listed:
            raise ValueError(f"{source}:{lineno}: mixes pos/ignore lists with easy/hard/unclear labels")
        try:
            if setup == "custom":
                if not listed:
                    raise ValueError("custom setup needs a 'pos' section")
                gt = RetrievalGroundTruth(query, frozenset(sections.get("pos", [])),
                                          frozenset(sections.get("ignore", [])), "custom")
            else:
                if not labelled:
                    raise ValueError(f"setup {setup} needs easy/hard/unclear sections")
                gt = groundtruth_from_labels(query, sections.get("easy", []), sections.get("hard", []),
                                             sections.get("unclear", []), setup)
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
        out.append(gt)
    return out


def load_groundtruth(source, setup: str = "custom") -> list[RetrievalGroundTruth]:
    """Load groundtruth from a file path, or parse an in-memory string."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).exists()):
        return parse_groundtruth(Path(source).read_text(), setup, str(source))
    return parse_groundtruth(str(source), setup)


def format_groundtruth(gts: Iterable[RetrievalGroundTruth]) -> str:
    lines = []
    for g in gts:
        line = f"{g.query} pos " + " ".join(sorted(map(str, g.positives)))
        if g.ignore:
            line += " ignore " + " ".join(sorted(map(str, g.ignore)))
        lines.append(line)
    return "\n".join(lines) + "\n"


def evaluate_retrieval(query_desc, db_desc, query_ids: Sequence, db_ids: Sequence,
                       gts: Sequence[RetrievalGroundTruth]) -> tuple[float, list[float]]:
    """mAP and per-query AP for descriptor matrices."""
    q = np.atleast_2d(_as_numpy(query_desc))
    aps = []
    for n, qid in enumerate(query_ids):
        r = rank_database(q[n], db_desc, db_ids, exclude=qid)
        aps.append(average_precision(r, gts[n]))
    return float(np.mean(aps)), aps
