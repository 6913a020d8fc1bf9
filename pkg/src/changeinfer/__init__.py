"""Change-based convolutional inference for static-camera video."""

from .analysis import (CB, MEM_MODES, NAIVE, SHARED, MemReport, OpReport, change_stats, count_ops_cb,
                       count_ops_dense, estimate_fg_ops, memory_accounting, op_report)
from .calibration import CalibConfig, CalibrationResult, TradeoffCurve, select_thresholds, sweep_threshold_factor
from .cb_layers import CBConvLayer, CBJoin, CBPointwise, CBPoolLayer, LayerFrameStats, update_output
from .change_engine import CLOSED_LOOP, FEED_FORWARD, detect_changes, dilate_change_map, extract_indexes, \
    propagate_changes
from .errors import CalibrationError, ChangeInferError, ConfigError, FormatError, ShapeError
from .formats import read_frames, read_model, write_frames, write_model
from .metrics import mse, pixel_accuracy
from .network import (CBNetwork, DenseNetwork, LayerSpec, NetworkSpec, RunStats, build_network, convert_to_cb,
                      dense_outputs, fold_batchnorm, forward_sequence, random_weights, reset_state, segmentation_spec)
from .synthetic import SyntheticConfig, gen_synthetic
from .tensor_core import ConvSpec, PoolSpec, conv2d_dense, conv2d_gemm, gemm, im2col, maxpool_dense, rel_error, relu

__version__ = "0.1.0"
