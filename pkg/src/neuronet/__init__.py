"""Multi-output 3-D segmentation with a shared residual encoder and per-protocol decoders."""
__version__ = "0.1.0"

from .errors import (ConfigurationError, DataError, FormatError, InputError, InternalError,
                     NeuroNetError, NumericError, PipelineError, UsageError)
from .tensor import Tape, Tensor, backward
from .graph import (DecoderSpec, EncoderConfig, FCNBaseline, ModelConfig, ModelParameters,
                    build_model, forward, reference_config)
from .training import AdamState, LossWeights, TrainConfig, adam_step, cross_entropy, total_loss, train
from .checkpoint import load_checkpoint, save_checkpoint
from .volume_io import (DatasetManifest, LabelMap, Volume, load_manifest, normalize_zscore,
                        read_label_map, read_volume, write_label_map, write_volume)
from .phantom import PhantomSpec, generate_dataset, generate_subject
from .evaluation import DiceReport, TimingReport, benchmark_inference, dice, evaluate, mean_dice
from .estimator import NeuroNetSegmenter, ZScoreNormalizer
