"""Meta-trained low-rank adapters on a small from-scratch autodiff engine."""

from .lora import AdapterSet, LoraAdapter, clone_adapters, delta, init_adapters, merge_adapter
from .nn import Model, build_attention_classifier, build_linear, build_mlp, cross_entropy_loss, mse_loss
from .optim import AdamWState, adamw_step, sgd_step
from .tasks import (
    Episode, TaskHandle, TaskSuite, make_sequence_suite, make_shared_lowrank_suite,
    make_sinusoid_suite, sample_episode, sample_task_batch,
)
from .tensor import Tensor, backward, grad, no_grad
from .trainer import (
    MetaConfig, TrainRecord, inner_adapt, meta_update, query_gradient, run_joint_baseline,
    run_meta_training, run_sta_training, support_loss,
)

__version__ = "0.1.0"
