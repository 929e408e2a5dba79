from llgan.detector.boxes import (Box, DegenerateBoxError, decode_boxes, encode_boxes, generate_anchors,
                                  iou, iou_matrix, nms)
from llgan.detector.model import (Detection, DetectorConfig, DetectorNotTrainedError, LogoDetector,
                                  detector_loss, select_positive_rois, smooth_l1)
from llgan.detector.roi_align import roi_align

__all__ = [
    "Box", "DegenerateBoxError", "Detection", "DetectorConfig", "DetectorNotTrainedError",
    "LogoDetector", "decode_boxes", "detector_loss", "encode_boxes", "generate_anchors", "iou",
    "iou_matrix", "nms", "roi_align", "select_positive_rois", "smooth_l1",
]
