"""softquant: differentiable quantile normalization via entropic optimal
transport, and low-rank matrix factorization with learned per-feature
quantile transforms."""

from .estimators import KLNMF, QMF, QMFQ, SoftQuantileNormalizer
from .factorization import (
    FactorModel,
    LossCurve,
    TrainConfig,
    kl_div,
    nmf_multiplicative,
    qmf_loss_and_grad,
    qmf_train,
    qmfq_train,
    reconstruct,
)
from .implicit import (
    VjpWorkspace,
    build_workspace,
    finite_diff_oracle,
    unrolled_plan_plus_vjp_x,
    vjp_plan_wrt_b,
    vjp_plan_wrt_x,
    vjp_quantile_wrt_q,
    vjp_quantile_wrt_x,
)
from .operators import (
    IterControl,
    TargetSpec,
    hard_quantile_normalize,
    hard_rank,
    hard_sort,
    row_quantile_normalize,
    soft_quantile_normalize,
    soft_rank,
    soft_sort,
)
from .ot import (
    AnchorGrid,
    DiscreteMeasure,
    ScalingState,
    SquaredDifference,
    TransportSolution,
    anchor_grid,
    cost_matrix,
    log_sinkhorn,
    plan_minus,
    plan_plus,
    sinkhorn_scaling,
    softmin_eps,
)
from .params import (
    quantiles_free,
    quantiles_pinned,
    vjp_factors,
    vjp_quantiles_free,
    vjp_quantiles_pinned,
    vjp_weights,
    weights_from_precursor,
)
from .synth import SynthConfig, synth_generate

__version__ = "0.1.0"
