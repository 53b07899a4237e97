from .autodiff import (Tensor, add, as_tensor, concat, entropy_from_log_probs,
                       exp, gather_rows, gather_scalars, grad_enabled,
                       instance_norm, log, log_softmax, matmul, mul, no_grad,
                       relu, reshape, softmax, stack_last, swapaxes, take,
                       tanh, tmean, tsum)
from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .layers import (NEG_INF, Dense, EncoderLayer, MultiHeadAttention,
                     ParamStore, ScoreFusion, additive_mask_from_bool, cpe,
                     cpe_table, syn_att_scores)
from .optim import OptimizerState, clip_grad_norm, global_grad_norm, optimizer_step
