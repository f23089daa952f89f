"""Offline tabular Q-learning for treatment policies from episodic ICU logs.

Pipeline: parse episodic dose logs -> fit a discrete fluid/vasopressor action
grid -> learn a discrete state space (standardize, CCA subspace, k-means) ->
compute terminal or risk-shaped rewards -> estimate the MDP and solve for
action values -> bootstrap the fit for per-action confidence verdicts ->
evaluate and compare policies. A synthetic confounded-cohort simulator
provides exact ground truth for testing the whole chain.
"""

__version__ = "0.1.0"
