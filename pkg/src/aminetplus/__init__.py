"""Multi-instance bag classification with self-attention and gated attention pooling."""

from .autograd import Tape, Tensor, backward, gradcheck
from .bagdata import Bag, BatchedBags, SynthSpec, Vocabulary, batchify, build_vocab, load_jsonl, stratified_kfold, synth_generate, write_jsonl
from .errors import CheckpointError, ConfigError, DataError, MilError, NumericError, ShapeError
from .estimator import AMINetClassifier
from .evalx import compare_losses, cv_run, sweep_heads, sweep_pooling
from .metrics import MetricsReport, confusion_metrics, roc_auc
from .milnet import ModelConfig, ParameterSet, forward, init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, cross_entropy, focal_loss, train

__version__ = "0.1.0"
