"""Evaluation metrics and run reports.

Mask metrics follow the video-object-segmentation J&F protocol, box metrics
use greedy one-to-one matching per frame, and the four text metrics share one
normalization (lowercase, punctuation stripped, whitespace tokens).
"""

from .boxes import ap50, box_iou, ciou, giou
from .masks import boundary_f, jaccard, jf_mean
from .report import (
    ClientEmbedder,
    EvalReport,
    PredictionSet,
    evaluate_run,
    format_report_table,
    read_predictions,
    write_predictions,
)
from .text import (
    CiderIdf,
    bertscore,
    bleu4,
    build_cider_idf,
    cider,
    cider_d,
    normalize_text,
    rouge_l,
)

__all__ = [
    "ap50",
    "bertscore",
    "bleu4",
    "boundary_f",
    "box_iou",
    "build_cider_idf",
    "cider",
    "cider_d",
    "CiderIdf",
    "ciou",
    "ClientEmbedder",
    "EvalReport",
    "evaluate_run",
    "format_report_table",
    "giou",
    "jaccard",
    "jf_mean",
    "normalize_text",
    "PredictionSet",
    "read_predictions",
    "rouge_l",
    "write_predictions",
]
