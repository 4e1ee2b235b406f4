"""Run evaluation: prediction files, per-cell aggregation, and report layout.

A report cell is (task, reasoning category, difficulty level). Samples with
several categories contribute to every one of their category cells, so the
per-category columns overlap exactly as the benchmark's grouping implies.
Cells nobody populated are absent from the report rather than shown as 0.00.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from ..dtcore import (
    GROUND_TRUTH_KIND_FOR_TASK,
    BoxSequence,
    GroundTruth,
    MaskSequence,
    RVTSample,
    SchemaError,
    TaskType,
    TextAnswer,
    ReasoningCategory,
    ground_truth_from_json,
    ground_truth_to_json,
)
from ..errors import ValidationFailure
from ..modelio import HashEmbedder, canonical_json
from .boxes import ap50, ciou, giou
from .masks import boundary_f, jaccard
from .text import bertscore, bleu4, build_cider_idf, cider_d, rouge_l

logger = logging.getLogger(__name__)

REPORT_NOTES = (
    "AP@50 is an unranked reduction: the share of frames whose best matched box reaches IoU >= 0.5.",
    "gIoU here is the mean per-frame IoU, not generalized IoU.",
    "CIDEr-D scores (native range 0-10) are scaled by 10 into the percent columns.",
)

METRIC_COLUMNS = {
    TaskType.SEGMENTATION: ("J", "F", "J&F"),
    TaskType.GROUNDING: ("cIoU", "gIoU", "AP@50"),
    TaskType.SUMMARY: ("BLEU-4", "ROUGE-L", "CIDEr", "BERTScore"),
    TaskType.VQA: ("BLEU-4", "ROUGE-L", "CIDEr", "BERTScore"),
}

_TASK_ORDER = tuple(t for t in TaskType)
_CATEGORY_ORDER = tuple(c.value for c in ReasoningCategory)
_LEVELS = (1, 2, 3, 4)

CellKey = tuple[str, str, int]  # (task, category, level)
MarginalKey = tuple[str, int]  # (task, level)


@dataclass(frozen=True)
class PredictionSet:
    """One run's predictions, keyed by sample_id."""

    predictions: Mapping[str, GroundTruth]
    model_name: str = ""
    created_at: str = ""


@dataclass(frozen=True)
class EvalReport:
    cells: dict[CellKey, dict[str, float]]
    cell_counts: dict[CellKey, int]
    marginals: dict[MarginalKey, dict[str, float]]
    marginal_counts: dict[MarginalKey, int]
    model_name: str = ""
    embedder_id: str = ""
    notes: tuple[str, ...] = REPORT_NOTES

    def to_json_obj(self) -> dict[str, Any]:
        return {
            "model_name": self.model_name,
            "embedder": self.embedder_id,
            "notes": list(self.notes),
            "cells": {
                f"{t}/{c}/L{l}": {"metrics": m, "count": self.cell_counts[(t, c, l)]}
                for (t, c, l), m in self.cells.items()
            },
            "marginals": {
                f"{t}/L{l}": {"metrics": m, "count": self.marginal_counts[(t, l)]}
                for (t, l), m in self.marginals.items()
            },
        }


# -- prediction files -----------------------------------------------------------


def write_predictions(predictions: PredictionSet, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    if predictions.model_name or predictions.created_at:
        lines.append(
            canonical_json(
                {"model_name": predictions.model_name, "created_at": predictions.created_at}
            )
        )
    for sid in sorted(predictions.predictions):
        lines.append(
            canonical_json(
                {"sample_id": sid, "prediction": ground_truth_to_json(predictions.predictions[sid])}
            )
        )
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def read_predictions(path: Path | str) -> PredictionSet:
    """JSONL: optional leading metadata object, then {sample_id, prediction} rows.

    Box predictions may carry a trailing per-box confidence score; it is
    accepted and dropped, since every reduction here is unranked.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise ValidationFailure(f"predictions file not found: {path}") from exc
    predictions: dict[str, GroundTruth] = {}
    model_name = ""
    created_at = ""
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{path.name}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(where, f"invalid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise SchemaError(where, "each line must be a JSON object")
        if "sample_id" not in obj:
            model_name = str(obj.get("model_name", model_name))
            created_at = str(obj.get("created_at", created_at))
            continue
        sid = obj["sample_id"]
        if not isinstance(sid, str) or not sid:
            raise SchemaError(where, "sample_id must be a non-empty string")
        if sid in predictions:
            raise SchemaError(where, f"duplicate prediction for {sid!r}")
        if not isinstance(obj.get("prediction"), dict):
            raise SchemaError(where, "missing prediction object")
        predictions[sid] = ground_truth_from_json(obj["prediction"], path=f"{where}.prediction")
    return PredictionSet(predictions=predictions, model_name=model_name, created_at=created_at)


# -- evaluation ---------------------------------------------------------------------


def _worst_case_prediction(sample: RVTSample) -> GroundTruth:
    kind = GROUND_TRUTH_KIND_FOR_TASK[sample.task]
    if kind == "masks":
        return MaskSequence(frames={})
    if kind == "boxes":
        return BoxSequence(frames={})
    return TextAnswer(text="")


def _pct(value: float) -> float:
    return round(100.0 * value, 2)


@dataclass(frozen=True)
class _Row:
    sample: RVTSample
    scores: dict[str, float] = field(default_factory=dict)  # native-range values
    box_pair: Optional[tuple[BoxSequence, BoxSequence]] = None


def _score_rows(
    samples: Sequence[RVTSample], predictions: PredictionSet, embedder: Any
) -> list[_Row]:
    ordered = sorted(samples, key=lambda s: s.sample_id)
    text_samples = [s for s in ordered if isinstance(s.ground_truth, TextAnswer)]
    corpus = (
        build_cider_idf([s.ground_truth.text for s in text_samples]) if text_samples else None
    )
    rows: list[_Row] = []
    for sample in ordered:
        pred = predictions.predictions.get(sample.sample_id)
        if pred is None:
            logger.warning("no prediction for %s; scored as a miss", sample.sample_id)
            pred = _worst_case_prediction(sample)
        if sample.task is TaskType.SEGMENTATION:
            rows.append(
                _Row(
                    sample,
                    {"J": jaccard(sample.ground_truth, pred), "F": boundary_f(sample.ground_truth, pred)},
                )
            )
        elif sample.task is TaskType.GROUNDING:
            rows.append(_Row(sample, {}, box_pair=(sample.ground_truth, pred)))
        else:
            reference = sample.ground_truth.text
            candidate = pred.text
            rows.append(
                _Row(
                    sample,
                    {
                        "BLEU-4": bleu4(candidate, reference),
                        "ROUGE-L": rouge_l(candidate, reference),
                        "CIDEr": cider_d(candidate, reference, corpus),
                        "BERTScore": bertscore(candidate, reference, embedder),
                    },
                )
            )
    return rows


def _aggregate(task: TaskType, rows: Sequence[_Row]) -> dict[str, float]:
    if task is TaskType.GROUNDING:
        pairs = [r.box_pair for r in rows]
        return {
            "cIoU": _pct(ciou(pairs)),
            "gIoU": _pct(giou(pairs)),
            "AP@50": _pct(ap50(pairs)),
        }
    if task is TaskType.SEGMENTATION:
        j = _pct(sum(r.scores["J"] for r in rows) / len(rows))
        f = _pct(sum(r.scores["F"] for r in rows) / len(rows))
        # J&F from the rounded cell values, so the published numbers stay
        # arithmetically consistent with each other.
        return {"J": j, "F": f, "J&F": round((j + f) / 2.0, 2)}
    out = {}
    for metric in METRIC_COLUMNS[task]:
        mean = sum(r.scores[metric] for r in rows) / len(rows)
        out[metric] = round(10.0 * mean, 2) if metric == "CIDEr" else _pct(mean)
    return out


def evaluate_run(
    samples: Sequence[RVTSample],
    predictions: PredictionSet,
    embedder: Any = None,
) -> EvalReport:
    """Score a prediction set against its samples, cell by cell.

    Missing predictions count as worst-case misses; unknown sample ids and
    task/variant mismatches are caller errors.
    """
    if not samples:
        raise ValidationFailure("no samples to evaluate")
    embedder = embedder if embedder is not None else HashEmbedder()
    by_id: dict[str, RVTSample] = {}
    for sample in samples:
        if sample.sample_id in by_id:
            raise ValidationFailure(f"duplicate sample_id {sample.sample_id!r}")
        by_id[sample.sample_id] = sample
    unknown = sorted(set(predictions.predictions) - set(by_id))
    if unknown:
        raise ValidationFailure("predictions for unknown sample_ids: " + ", ".join(unknown))
    mismatched = sorted(
        sid
        for sid, pred in predictions.predictions.items()
        if pred.kind != GROUND_TRUTH_KIND_FOR_TASK[by_id[sid].task]
    )
    if mismatched:
        raise ValidationFailure(
            "prediction variant does not match the sample's task for: " + ", ".join(mismatched)
        )

    rows = _score_rows(samples, predictions, embedder)
    cell_rows: dict[CellKey, list[_Row]] = {}
    marginal_rows: dict[MarginalKey, list[_Row]] = {}
    for row in rows:
        sample = row.sample
        marginal_rows.setdefault((sample.task.value, sample.level), []).append(row)
        for category in sample.categories:
            key = (sample.task.value, category.value, sample.level)
            cell_rows.setdefault(key, []).append(row)

    cells = {
        key: _aggregate(TaskType(key[0]), grouped) for key, grouped in sorted(cell_rows.items())
    }
    marginals = {
        key: _aggregate(TaskType(key[0]), grouped)
        for key, grouped in sorted(marginal_rows.items())
    }
    return EvalReport(
        cells=cells,
        cell_counts={key: len(grouped) for key, grouped in sorted(cell_rows.items())},
        marginals=marginals,
        marginal_counts={key: len(grouped) for key, grouped in sorted(marginal_rows.items())},
        model_name=predictions.model_name,
        embedder_id=getattr(embedder, "model_id", type(embedder).__name__),
    )


# -- layout ------------------------------------------------------------------------


def _task_section(report: EvalReport, task: TaskType) -> list[str]:
    columns: list[tuple[str, dict[str, float], int]] = []
    for category in _CATEGORY_ORDER:
        for level in _LEVELS:
            key = (task.value, category, level)
            if key in report.cells:
                columns.append(
                    (f"{category} L{level}", report.cells[key], report.cell_counts[key])
                )
    for level in _LEVELS:
        key = (task.value, level)
        if key in report.marginals:
            columns.append((f"all L{level}", report.marginals[key], report.marginal_counts[key]))
    if not columns:
        return []
    name_width = max(len(m) for m in METRIC_COLUMNS[task] + ("samples",))
    widths = [max(len(label), 7) for label, _, _ in columns]
    header = "  ".join(
        [" " * name_width] + [label.rjust(w) for (label, _, _), w in zip(columns, widths)]
    )
    lines = [f"{task.value}", header]
    for metric in METRIC_COLUMNS[task]:
        row = [metric.ljust(name_width)]
        for (label, metrics, _), w in zip(columns, widths):
            row.append(f"{metrics[metric]:.2f}".rjust(w) if metric in metrics else "-".rjust(w))
        lines.append("  ".join(row))
    counts = ["samples".ljust(name_width)] + [
        str(count).rjust(w) for (_, _, count), w in zip(columns, widths)
    ]
    lines.append("  ".join(counts))
    return lines


def format_report_table(report: EvalReport) -> str:
    lines = [f"model: {report.model_name or '-'}    embedder: {report.embedder_id}"]
    lines += [f"note: {note}" for note in report.notes]
    for task in _TASK_ORDER:
        section = _task_section(report, task)
        if section:
            lines.append("")
            lines.extend(section)
    return "\n".join(lines)


class ClientEmbedder:
    """Adapter giving model-client embeddings the bare ``embed(texts)`` shape."""

    def __init__(self, client: Any, model: Optional[str] = None) -> None:
        self._client = client
        self.model_id = model or client.config.embed_model

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        return self._client.embed(list(texts), model=self.model_id)
