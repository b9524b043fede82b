"""Seedable simulation toolkit for vehicle-assisted edge intelligence.

Modules: ``engine`` (event kernel, random streams), ``mobility`` (road
traffic, point processes, traces), ``offload`` (V2V/I2V task offloading),
``bandit`` (redundancy choice, UCB server selection), ``deployment``
(ES/INV density planning), ``fedsim`` (federated-learning timelines) and
``cli`` (experiment runner).
"""

__version__ = "0.1.0"
