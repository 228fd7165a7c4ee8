"""Occlusion-aware centerline labels from vector maps, plus the loss kernels,
BEV decoder and metrics used to train and score centerline detectors."""

__version__ = "0.1.0"

from .errors import (CenterlineError, DegenerateMaskWarning, DegeneratePolyline, DuplicateLaneId,
                     EmptyCenterline, EmptyTrajectory, InvalidSpec, LengthMismatch, NoForeground,
                     OutOfRange, SchemaError, ShapeMismatch, TooFewPoints)
from .geom import (CameraModel, Pose, Trajectory, camera_to_city, city_to_camera, interpolate_pose,
                   project, unproject)
from .ingest import (LaneSegment, SemanticMask, VectorMap, parse_calibration, parse_map, parse_mask,
                     parse_trajectory)
from .occlusion import Category, OcclusionOntology, categorize, default_ontology, filter_keypoints
from .labelgen import (BEVGridSpec, BEVTargets, CenterlineLabel, FilterParams, encode_bev, fit_spline_2d,
                       geometric_filters, project_centerline, resample_3d)
from .heads import (HeadOutput, LossParams, decode_bev, embed_loss, height_loss, offset_loss, pull_loss,
                    push_loss, total_2d_loss, total_3d_loss, weighted_bce)
from .evaluation import MatchSpec, MetricsReport, evaluate, match, score
