"""Risk-bounded motion planning for nonlinear robots among uncertain obstacles.

The package wires together four layers:

* :mod:`riskplan.env_model` -- robot, obstacle and sensor models;
* :mod:`riskplan.estimation` -- noise decorrelation and an unscented Kalman filter;
* :mod:`riskplan.control` -- a multiple-shooting NMPC steering law;
* :mod:`riskplan.risk` and :mod:`riskplan.planner` -- distributionally robust
  feasibility checks and the sampling-based tree planner over belief states.

:mod:`riskplan.simulation` replays planned references under sampled noise.
"""

__version__ = "0.1.0"
