"""Pseudo-label calibration and curriculum batch ordering.

Unlabeled source entities are periodically matched to their nearest
unconsumed target by joint-embedding similarity.  A prediction is promoted
to a pseudo-label only when it repeats the prediction stored at the previous
check (temporal stability); conflicting stable predictions for one target
are resolved by similarity score.  Promotions are permanent and one-to-one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ValidationError


@dataclass
class PseudoLabelStore:
    """Dynamic prediction dictionary plus the promoted pseudo-label set.

    ``predictions`` maps a source entity to its most recent non-promoted
    prediction ``(target, epoch, score)``; ``promoted`` maps a source entity
    to its permanent pseudo-label ``(target, epoch)``.
    """

    predictions: dict[int, tuple[int, int, float]] = field(default_factory=dict)
    promoted: dict[int, tuple[int, int]] = field(default_factory=dict)

    def promoted_pairs(self) -> list[tuple[int, int]]:
        return sorted((src, tgt) for src, (tgt, _) in self.promoted.items())

    def promoted_targets(self) -> set[int]:
        return {tgt for tgt, _ in self.promoted.values()}

    def check_invariants(self) -> None:
        targets = [tgt for tgt, _ in self.promoted.values()]
        if len(targets) != len(set(targets)):
            raise ValidationError("promoted pseudo-labels are not one-to-one")
        overlap = self.predictions.keys() & self.promoted.keys()
        if overlap:
            raise ValidationError(f"sources {sorted(overlap)} are both pending and promoted")

    def to_json_dict(self) -> dict:
        return {
            "predictions": {str(s): [t, e, sc] for s, (t, e, sc) in sorted(self.predictions.items())},
            "promoted": {str(s): [t, e] for s, (t, e) in sorted(self.promoted.items())},
        }

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "PseudoLabelStore":
        store = cls(
            predictions={int(s): (int(t), int(e), float(sc))
                         for s, (t, e, sc) in data.get("predictions", {}).items()},
            promoted={int(s): (int(t), int(e)) for s, (t, e) in data.get("promoted", {}).items()},
        )
        store.check_invariants()
        return store


def predict_unlabeled(src_joint: np.ndarray, tgt_joint: np.ndarray,
                      unlabeled_src: Sequence[int],
                      candidate_tgt: Sequence[int]) -> dict[int, tuple[int, float]]:
    """Nearest-candidate prediction for every unlabeled source entity.

    Candidates are scanned in ascending index order, so similarity ties
    resolve to the lowest target index.  Returns {} when either side is
    empty.
    """
    if len(unlabeled_src) == 0 or len(candidate_tgt) == 0:
        return {}
    src_ids = np.asarray(sorted(unlabeled_src), dtype=np.int64)
    tgt_ids = np.asarray(sorted(candidate_tgt), dtype=np.int64)
    scores = src_joint[src_ids] @ tgt_joint[tgt_ids].T
    best = np.argmax(scores, axis=1)
    return {int(s): (int(tgt_ids[b]), float(scores[k, b]))
            for k, (s, b) in enumerate(zip(src_ids, best))}


def calibrate_pseudo_labels(store: PseudoLabelStore,
                            new_predictions: Mapping[int, tuple[int, float]],
                            epoch: int, window: int) -> list[tuple[int, int]]:
    """One calibration round: promote stable predictions, refresh the rest.

    A prediction is stable when the store holds the same target for that
    source from the previous round.  Stable predictions competing for one
    target are resolved by higher score, ties by lower source index; losers
    stay pending with their refreshed prediction.  The store is updated in
    place and the newly promoted pairs are returned sorted.
    """
    if window < 1:
        raise ValidationError(f"stability window must be >= 1, got {window}")
    already = new_predictions.keys() & store.promoted.keys()
    if already:
        raise ValidationError(f"promoted sources {sorted(already)} were predicted again")

    stable: dict[int, tuple[int, float]] = {}
    for src, (tgt, score) in new_predictions.items():
        held = store.predictions.get(src)
        if held is not None and held[0] == tgt:
            stable[src] = (tgt, score)

    by_target: dict[int, list[tuple[int, float]]] = {}
    for src, (tgt, score) in stable.items():
        by_target.setdefault(tgt, []).append((src, score))

    consumed = store.promoted_targets()
    newly: list[tuple[int, int]] = []
    for tgt in sorted(by_target):
        if tgt in consumed:
            continue
        winner = min(by_target[tgt], key=lambda item: (-item[1], item[0]))[0]
        store.promoted[winner] = (tgt, epoch)
        store.predictions.pop(winner, None)
        consumed.add(tgt)
        newly.append((winner, tgt))

    for src, (tgt, score) in new_predictions.items():
        if src not in store.promoted:
            store.predictions[src] = (tgt, epoch, score)

    store.check_invariants()
    return sorted(newly)


def reorder_pairs(pairs: Sequence[tuple[int, int]], src_joint: np.ndarray,
                  tgt_joint: np.ndarray, batch_size: int) -> list[list[tuple[int, int]]]:
    """Greedy nearest-neighbor chain over pair embeddings, cut into batches.

    Each pair is represented by the normalized mean of its two joint
    embeddings.  Starting from the lowest pair in canonical order, the chain
    repeatedly appends the unvisited pair most similar to the last one (ties
    to the lower canonical position), keeping similar pairs in the same
    batch.
    """
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    ordered = sorted(pairs)
    if not ordered:
        return []
    src_ids = np.asarray([s for s, _ in ordered], dtype=np.int64)
    tgt_ids = np.asarray([t for _, t in ordered], dtype=np.int64)
    mean = 0.5 * (src_joint[src_ids] + tgt_joint[tgt_ids])
    norms = np.linalg.norm(mean, axis=1, keepdims=True)
    mean = mean / np.maximum(norms, 1e-12)
    sims = mean @ mean.T

    n = len(ordered)
    visited = np.zeros(n, dtype=bool)
    chain = [0]
    visited[0] = True
    for _ in range(n - 1):
        row = sims[chain[-1]].copy()
        row[visited] = -np.inf
        nxt = int(np.argmax(row))
        visited[nxt] = True
        chain.append(nxt)
    sequence = [ordered[i] for i in chain]
    return [sequence[i:i + batch_size] for i in range(0, n, batch_size)]


def shuffled_batches(pairs: Sequence[tuple[int, int]], batch_size: int,
                     rng: np.random.Generator) -> list[list[tuple[int, int]]]:
    """Plain random batching used once the curriculum phase ends."""
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    ordered = sorted(pairs)
    if not ordered:
        return []
    perm = rng.permutation(len(ordered))
    sequence = [ordered[i] for i in perm]
    return [sequence[i:i + batch_size] for i in range(0, len(sequence), batch_size)]
