from .detection import MatchResult, f_score, local_maxima, match_annotations, match_detections
from .features import FeatureStats, downsample_mask, feature_stats, variant_dispersion
from .hungarian import hungarian
from .invariance import InvarianceReport, invariance_report
