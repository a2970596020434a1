"""Fast-dropout recurrent networks for polyphonic piano-roll modelling."""
from .moments import (
    GaussianVec,
    TransferKind,
    WeightDist,
    awn_presynaptic_moments,
    presynaptic_moments,
    sample_presynaptic,
    transfer_moments,
)
from .network import DropoutConfig, RnnParams, forward_fd, forward_fd_sampled, forward_plain
from .losses import LossKind, loss_field, sequence_bce_nll, unit_loss
from .gradients import (
    UnitContext,
    backward_fd,
    backward_plain,
    decompose_unit_gradient,
    finite_difference_grad,
    sampled_reg_term,
)
from .optim import InitSpec, RmsPropState, clip_gradient, init_recurrent, rmsprop_nesterov_step, spectral_radius

__version__ = "0.1.0"
