"""Safe model-based reinforcement learning with Lyapunov certificates.

Submodules
----------
gp          GP residual dynamics model and confidence scaling
lyapunov    state grid, Lyapunov candidates, confidence table, level search
safe_sets   decrease and safe sets, exploration sampling rule
policy      neural policy, value interpolation, ADP and the Lagrangian update
pendulum    inverted pendulum and 1-D toy systems, rollouts, ROA oracle
baseline    exact operators on finite toy instances
experiment  the learning loop, verification and baseline suite
plotting    SVG panels from run artifacts
cli         command line interface
"""

from .config import ExperimentConfig, load_config
from .experiment import baseline_suite, run_experiment, verify_only

__all__ = ["ExperimentConfig", "load_config", "run_experiment", "verify_only", "baseline_suite"]
__version__ = "0.1.0"
