"""Visuotactile cloth manipulation in simulation.

Geometric grasp-affordance labeling of a hanging mass-spring cloth, synthetic
tactile perception, replay-buffer fine-tuning of a patch affordance regressor,
system-identified LQR sliding control and the task state machine.
"""

__version__ = "0.1.0"
