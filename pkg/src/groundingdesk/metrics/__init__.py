from .ap import (
    COCO_THRESHOLDS,
    DEFAULT_LENGTH_BUCKETS,
    APResult,
    Description,
    average_precision,
    base_novel_split_ap,
    d3_evaluate,
    interpolated_ap,
    length_bucket,
    lvis_style_ap,
    macro_average,
)
from .grounding import (
    DEFAULT_THRESHOLDS,
    GRefResult,
    RecallResult,
    grefcoco_metrics,
    rec_accuracy,
    recall_at_k,
    threshold_sweep,
)
from .records import Detection, GroundTruthBox, read_predictions, write_predictions
from .report import EvalReport
from ..boxes import iou_matrix

__all__ = [name for name in dir() if not name.startswith("_")]
