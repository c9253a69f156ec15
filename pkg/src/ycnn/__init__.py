"""Two-flow CNN tracker: numpy layers, model, loss, data, training, tracking and evaluation."""
from .benchmark import MetricsReport, ProtocolConfig, bench_fps, evaluate, gen_runs, overlap_ratio, center_error
from .data import AugConfig, Box, Sequence, SynthSpec, gen_synthetic_sequence, read_sequence, write_sequence
from .loss import LossConfig, batch_loss, make_label_map, masked_loss, naive_loss
from .model import ArchConfig, ConvSpec, YcnnModel, backward, build_model, forward, load_checkpoint, save_checkpoint
from .tracker import TrackerConfig, track
from .training import StageConfig, run_stage, train_step

__version__ = "0.1.0"
