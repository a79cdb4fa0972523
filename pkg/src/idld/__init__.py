"""Input-driven layer dropping for transformer encoders, on a small numpy autodiff core."""

from .autograd import Tensor, backward, finite_diff_check
from .config import ExperimentConfig, config_from_dict, load_config
from .data import SynthTaskConfig, gen_cls_task, gen_ctc_task, pad_batch
from .gating import selector_forward, threshold_binarize, topk_binarize
from .losses import ctc_loss, ctc_loss_batch, cross_entropy
from .metrics import RunReport, avg_entropy, word_error_rate
from .model import DynamicEncoder, ModelConfig, SelectorConfig

__version__ = "0.1.0"
