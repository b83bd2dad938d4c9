"""Importance-corrected multi-agent actor-critic training engine.

Subpackages:

- :mod:`marltrace.env`      tabular cooperative environments
- :mod:`marltrace.oracle`   exact policy evaluation and operator verification
- :mod:`marltrace.vtrace`   clipped-ratio trajectory estimators
- :mod:`marltrace.nn`       from-scratch networks, optimizer, schedules
- :mod:`marltrace.learner`  the training loop and its ablation modes
- :mod:`marltrace.runtime`  actor-learner execution (threads and processes)
- :mod:`marltrace.cli`      operator commands (train/eval/verify/ablate/bench)
"""

__version__ = "0.1.0"
