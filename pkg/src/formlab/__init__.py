"""formlab: desk-scale imitation from observation.

Generative effect models of next observations are trained on action-free
expert demonstrations and used as an RL reward (log p_demo - log p_imit),
alongside BC / BCO / GAIfO baselines and a distractor-robustness harness.
"""

__version__ = "0.1.0"
