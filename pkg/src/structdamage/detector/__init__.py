"""Mask R-CNN detector family: model variants, box utilities, training."""
from .augment import adjust_brightness, augment, clip_polygon, hflip, scale_jitter
from .boxes import (AnchorSet, base_anchors, batched_nms, box_area, box_iou, clip_boxes, decode,
                    encode, make_anchors, nms, smooth_l1)
from .model import (CASCADE_KINDS, CATEGORY_NAMES, KINDS, MASK_STAGES, CascadeOutput, Detection,
                    DetectorConfig, DetectorVariant, MaskRCNN, UsageError, build_detector,
                    cascade_forward, detect, paste_mask, prepare_image, propose_regions,
                    select_proposals, with_config, zero_weights)
from .training import (DataError, DetectorTrainConfig, detector_losses, load_detector,
                       record_targets, rpn_labels, save_detector, train_detector)

__all__ = [
    "AnchorSet", "CASCADE_KINDS", "CATEGORY_NAMES", "CascadeOutput", "DataError", "Detection",
    "DetectorConfig", "DetectorTrainConfig", "DetectorVariant", "KINDS", "MASK_STAGES", "MaskRCNN",
    "UsageError", "adjust_brightness", "augment", "base_anchors", "batched_nms", "box_area",
    "box_iou", "build_detector", "cascade_forward", "clip_boxes", "clip_polygon", "decode",
    "detect", "detector_losses", "encode", "hflip", "load_detector", "make_anchors", "nms",
    "paste_mask", "prepare_image", "propose_regions", "record_targets", "rpn_labels",
    "save_detector", "scale_jitter", "select_proposals", "smooth_l1", "train_detector",
    "with_config", "zero_weights",
]
