"""Block-sparse RNN training toolkit."""

from .formats import (BlockSparseMatrix, CsrMatrix, OverheadReport, ShapeError,
                      block_sparsity, bsr_to_dense, csr_to_dense, dense_to_bsr,
                      dense_to_csr, indexing_overhead, sparsity)
from .kernels import active_backend, bsr_matmul, csr_matmul, dense_matmul
from .pruning import (BlockMask, PruningHyperParams, PruningState, apply_mask,
                      block_reduce_max, full_mask, heuristic_schedule,
                      percentile_q, resolve_slopes, start_slope_block,
                      start_slope_weight, threshold_at,
                      truncate_to_block_sparsity, update_mask)
from .regularizers import (RegularizerConfig, group_lasso_grad, group_lasso_loss,
                           l1_grad, l1_loss, l_half_grad, l_half_loss,
                           regularizer_active)
from .model import (DivergenceError, RecurrentModel, evaluate, forward_backward,
                    gru_cell_forward, rnn_cell_forward)
from .training import RunReport, nesterov_step, train, model_from_checkpoint
from .config import PruneSettings, TrainingConfig, load_config, parse_config

__version__ = "0.1.0"
