"""promptlink: knowledge-graph completion that fuses trainable graph
embeddings with a frozen text encoder through layer-wise conditional
soft prompts."""

from . import tensor
from .kg import (DataError, Fact, FilterIndex, KnowledgeGraph, augment_inverse,
                 build_filter_index, load_dataset, load_facts)
from .lar import LarConfig, build_lar_index, lar_loss, sample_lar
from .model import KGCModel, prepare_queries
from .optim import ParameterGroup, adamw_step, grad_check, load_checkpoint, save_checkpoint
from .toy import ToySize, generate_toy_kg
from .training import (EvalReport, TrainConfig, alpha_schedule, ce_loss,
                       ensemble_evaluate, evaluate_filtered, total_loss, train)

__version__ = "0.1.0"
