"""Retrieval evaluation over joint embeddings.

Ranks use the pessimistic tie convention: the gold candidate's rank is the
number of candidates scoring greater than or equal to it, so a tied gold
ranks behind every candidate it ties with.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError


@dataclass(frozen=True)
class SimilarityMatrix:
    """Dense score matrix with the entity ids labelling rows and columns."""

    values: np.ndarray
    row_entities: tuple[int, ...]
    col_entities: tuple[int, ...]

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValidationError("similarity values must be a 2-D matrix")
        if self.values.shape != (len(self.row_entities), len(self.col_entities)):
            raise ValidationError("similarity shape does not match entity labels")
        if not np.isfinite(self.values).all():
            raise ValidationError("similarity matrix contains non-finite scores")


def similarity_matrix(src_emb: np.ndarray, tgt_emb: np.ndarray,
                      row_entities: Sequence[int] | None = None,
                      col_entities: Sequence[int] | None = None) -> SimilarityMatrix:
    """Inner products of selected source rows against selected target rows."""
    rows = tuple(range(src_emb.shape[0])) if row_entities is None else tuple(row_entities)
    cols = tuple(range(tgt_emb.shape[0])) if col_entities is None else tuple(col_entities)
    values = src_emb[np.asarray(rows, dtype=np.int64)] @ tgt_emb[np.asarray(cols, dtype=np.int64)].T
    return SimilarityMatrix(values=values, row_entities=rows, col_entities=cols)


@dataclass
class EvalReport:
    """Hits@k and mean reciprocal rank over a gold pair set."""

    hits: dict[int, float]
    mrr: float
    n_queries: int
    direction: str = "src_to_tgt"

    def to_json_dict(self) -> dict:
        return {
            "direction": self.direction,
            "n_queries": self.n_queries,
            "hits": {str(k): v for k, v in sorted(self.hits.items())},
            "mrr": self.mrr,
        }

    def format_table(self) -> str:
        ks = sorted(self.hits)
        header = ["direction", "queries"] + [f"hits@{k}" for k in ks] + ["mrr"]
        row = [self.direction, str(self.n_queries)]
        row += [f"{self.hits[k]:.4f}" for k in ks] + [f"{self.mrr:.4f}"]
        widths = [max(len(h), len(r)) for h, r in zip(header, row)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        return fmt.format(*header) + "\n" + fmt.format(*row)


def rank_metrics(sim: SimilarityMatrix, gold_pairs: Sequence[tuple[int, int]],
                 ks: Sequence[int] = (1, 5, 10)) -> EvalReport:
    """Hits@k and MRR of the gold column within each gold row.

    Every gold pair must be resolvable in the matrix labels; a gold target
    missing from the candidate columns is an error rather than a silent
    zero.
    """
    if not gold_pairs:
        raise ValidationError("rank_metrics needs at least one gold pair")
    if any(k < 1 for k in ks):
        raise ValidationError(f"hits cutoffs must be >= 1, got {tuple(ks)}")
    row_pos = {e: i for i, e in enumerate(sim.row_entities)}
    col_pos = {e: j for j, e in enumerate(sim.col_entities)}
    hits = {k: 0 for k in ks}
    reciprocal = 0.0
    for src, tgt in gold_pairs:
        if src not in row_pos:
            raise ValidationError(f"gold source {src} is not a row of the similarity matrix")
        if tgt not in col_pos:
            raise ValidationError(f"gold target {tgt} is not a candidate column")
        row = sim.values[row_pos[src]]
        rank = int(np.count_nonzero(row >= row[col_pos[tgt]]))
        reciprocal += 1.0 / rank
        for k in ks:
            if rank <= k:
                hits[k] += 1
    n = len(gold_pairs)
    return EvalReport(hits={k: hits[k] / n for k in ks}, mrr=reciprocal / n, n_queries=n)


def evaluate_alignment(src_emb: np.ndarray, tgt_emb: np.ndarray,
                       gold_pairs: Sequence[tuple[int, int]],
                       ks: Sequence[int] = (1, 5, 10),
                       candidates: str = "test",
                       direction: str = "src_to_tgt") -> EvalReport:
    """End-to-end evaluation of one embedding snapshot.

    ``candidates`` picks the ranking pool: only the gold targets of the
    evaluated pairs ("test") or every entity on the answer side ("all").
    ``direction`` ranks targets per source, sources per target, or averages
    the two.
    """
    if candidates not in ("test", "all"):
        raise ValidationError(f"candidates must be 'test' or 'all', got {candidates!r}")
    if direction not in ("src_to_tgt", "tgt_to_src", "mean"):
        raise ValidationError(f"unknown direction {direction!r}")
    if not gold_pairs:
        raise ValidationError("evaluation needs at least one gold pair")

    def one(anchor_emb, answer_emb, pairs):
        rows = tuple(sorted({a for a, _ in pairs}))
        if candidates == "test":
            cols = tuple(sorted({b for _, b in pairs}))
        else:
            cols = tuple(range(answer_emb.shape[0]))
        return rank_metrics(similarity_matrix(anchor_emb, answer_emb, rows, cols), pairs, ks)

    if direction == "src_to_tgt":
        report = one(src_emb, tgt_emb, list(gold_pairs))
    elif direction == "tgt_to_src":
        report = one(tgt_emb, src_emb, [(t, s) for s, t in gold_pairs])
    else:
        fwd = one(src_emb, tgt_emb, list(gold_pairs))
        bwd = one(tgt_emb, src_emb, [(t, s) for s, t in gold_pairs])
        report = EvalReport(
            hits={k: 0.5 * (fwd.hits[k] + bwd.hits[k]) for k in fwd.hits},
            mrr=0.5 * (fwd.mrr + bwd.mrr),
            n_queries=fwd.n_queries,
        )
    report.direction = direction
    return report


def export_alignments(sim: SimilarityMatrix, path: str | Path) -> None:
    """Write top-1 predictions as ``src<TAB>tgt<TAB>score`` lines, sources
    ascending, scores with six decimals.  Ties pick the lowest column."""
    order = np.argsort(np.asarray(sim.row_entities, dtype=np.int64), kind="stable")
    lines = []
    for i in order:
        best = int(np.argmax(sim.values[i]))
        lines.append(f"{sim.row_entities[i]}\t{sim.col_entities[best]}\t{sim.values[i, best]:.6f}")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


PLOT_QUANTITIES = ("loss_vs_epoch", "hits1_vs_epoch", "mrr_vs_epoch")


def _plot_value(record: dict, quantity: str):
    if quantity == "loss_vs_epoch":
        return record.get("losses", {}).get("total")
    metrics = record.get("metrics")
    if metrics is None:
        return None
    if quantity == "hits1_vs_epoch":
        return metrics.get("hits", {}).get("1")
    return metrics.get("mrr")


def emit_plot_data(history_path: str | Path, quantity: str, out_path: str | Path) -> int:
    """Extract one quantity from a JSONL training history into a two-column
    CSV (epoch, value).  Epochs lacking the quantity are skipped; an empty
    history yields a header-only file.  Returns the number of data rows."""
    if quantity not in PLOT_QUANTITIES:
        raise ValidationError(f"unknown plot quantity {quantity!r}; choose from {PLOT_QUANTITIES}")
    rows = []
    text = Path(history_path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{history_path}:{lineno}: invalid history record: {exc}") from exc
        value = _plot_value(record, quantity)
        if value is not None:
            rows.append((record["epoch"], float(value)))
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "value"])
        for epoch, value in rows:
            writer.writerow([epoch, repr(value)])
    return len(rows)
