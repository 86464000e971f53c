"""Event-camera optical flow by contrast maximisation with iterative event warping."""

from .events import (NEG, POS, CameraGeometry, Event, EventArray, EventWindow, PartitionScheme, UnsortedEventsError,
                     count_image, normalized_time, partition_stream)
from .flow import (DisplacementMap, FlowMap, FlowSequence, downsample_flow, read_flow, reconstruct_displacement,
                   sample_flow, upsample_flow, write_flow)
from .metrics import MetricReport, epe, evaluate_window, fwl, rsat
from .objective import (FlowGradient, LossConfig, LossReport, loss_at_reference, loss_gradient, loss_multi_reference,
                        loss_multi_timescale, normalize_timestamp)
from .optimizer import EstimationResult, OptimizerConfig, estimate_window, run_sequential
from .synth import GroundTruth, SceneSpec, generate, render_gt
from .warping import Iwe, TimestampImage, WarpedEvent, border_mask, splat, timestamp_image, warp_iterative, warp_linear

__version__ = "0.1.0"
