"""Traffic speed-field reconstruction from sparse probe vehicles.

A causality-masked convolutional encoder-decoder maps sparse RGB-encoded
probe observations on a space-time grid to the complete macroscopic speed
field, with an IDM microsimulator supplying training data end to end.
"""

from .anisotropy import CausalityMask, MaskKind, ascii_art, build_mask, count_active
from .dataset import SamplePair, build_samples, grid_for_trajectories, load_samples, \
    rasterize, rasterize_partial, save_samples, select_probes
from .grid import FormatError, GridSpec, PartialField, SpeedField, colormap_decode, \
    colormap_encode, encode_partial, load_field, load_partial, save_field, \
    save_partial, window
from .microsim import CollisionError, Demand, IdmParams, ParseError, ScenarioSpec, \
    SlowZone, TrajectorySet, demand_presets, equilibrium_gap, idm_accel, \
    read_trajectory_csv, scenario_for, simulate, write_trajectory_csv
from .model import BranchMode, EncoderDecoder, LayerSpec, ModelConfig, SgdConfig, \
    TrainReport, build_model, default_config, load_model, save_model, train
from .nn import Activation, ConvLayer, DualBranchLayer, conv_backward, conv_forward, \
    finite_diff_check, init_layer, sgd_step
from .pipeline import EmbeddingReport, EvalReport, baseline_nearest, embed_and_score, \
    estimate, evaluate, fifo_violations, infer_trajectories, silhouette_values, \
    write_embedding_csv

__version__ = "0.1.0"
