"""qstepper - Q-learned step-size control for quadrature and ODE integration."""

__version__ = "1.0.0"

from .errors import QStepperError
from .quad import QuadratureRule, composite_simpson, simpson, subdivide
from .ode import DORMAND_PRINCE, rk45_adaptive, rk_step
from .problems import FunctionClassSpec, OdeSystem, hybrid_pendulum, lorenz, sample_function
from .neural import MlpSpec, QNetwork
from .rl import ActionSet, BaseLearner, RewardConfig, StepState, integrate_with_learner, train_base_learner
from .meta import LearnerPool, MetaLearner, integrate_with_meta, train_meta
from .optweights import OptimalRule, fit_weights, gram_solve, one_node_analytic

__all__ = [
    "QStepperError",
    "QuadratureRule",
    "composite_simpson",
    "simpson",
    "subdivide",
    "DORMAND_PRINCE",
    "rk45_adaptive",
    "rk_step",
    "FunctionClassSpec",
    "OdeSystem",
    "hybrid_pendulum",
    "lorenz",
    "sample_function",
    "MlpSpec",
    "QNetwork",
    "ActionSet",
    "BaseLearner",
    "RewardConfig",
    "StepState",
    "integrate_with_learner",
    "train_base_learner",
    "LearnerPool",
    "MetaLearner",
    "integrate_with_meta",
    "train_meta",
    "OptimalRule",
    "fit_weights",
    "gram_solve",
    "one_node_analytic",
]
