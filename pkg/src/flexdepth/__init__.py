"""flexdepth: train one CTC encoder jointly with its layer-pruned subnets.

Layer importance scores are learned during a progressive self-pruning
phase (hard top-k with straight-through gradients, or sigmoid gates with
iterative zeroing); all size categories are then jointly trained under
fixed nested masks with the sandwich rule.
"""

from .autodiff import (NonFiniteError, ShapeError, Tape, Tensor, backward,
                       finite_difference_check)
from .ctc import (corpus_label_error_rate, ctc_loss, ctc_loss_batch,
                  greedy_decode, label_error_rate)
from .data import SynthTaskConfig, Utterance, gen_dataset
from .encoder import (EncoderConfig, LayerId, LayerKind, MaskableEncoder,
                      param_count)
from .estimator import DynamicDepthCTC, check_label_sequences, check_sequences
from .pipeline import (JointTrainer, SeparateTrainer, TrainConfig,
                       TrainingAborted, decode_dataset, make_aux_trainer,
                       sandwich_select)
from .pruning import (SubnetSpec, ZeroOutState, hard_topk_mask,
                      masks_from_scores, relaxed_topk, simple_topk_gate,
                      sparsity_penalty, zero_out_gate, zero_out_update)
from .schedules import k_schedule, oclr_lr

__version__ = "0.1.0"

__all__ = [
    "DynamicDepthCTC", "EncoderConfig", "JointTrainer", "LayerId",
    "LayerKind", "MaskableEncoder", "NonFiniteError", "SeparateTrainer",
    "ShapeError", "SubnetSpec", "SynthTaskConfig", "Tape", "Tensor",
    "TrainConfig", "TrainingAborted", "Utterance", "ZeroOutState",
    "backward", "check_label_sequences", "check_sequences",
    "corpus_label_error_rate", "ctc_loss", "ctc_loss_batch",
    "decode_dataset", "finite_difference_check", "gen_dataset",
    "greedy_decode", "hard_topk_mask", "k_schedule", "label_error_rate",
    "make_aux_trainer", "masks_from_scores", "oclr_lr", "param_count",
    "relaxed_topk", "sandwich_select", "simple_topk_gate",
    "sparsity_penalty", "zero_out_gate", "zero_out_update",
]
