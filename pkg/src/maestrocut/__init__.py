"""Closed-loop circuit-cutting simulator.

Modules:
  cutgraph   gate hypergraph, normalized objective, FM refinement
  drifttrack CUSUM change detection, scalar Kalman variance tracking
  allocator  topology kernel covariance, water-filling, integer projection
  cascade    entropy-gated estimator switching
  phasepad   masked, sealed fragment dispatch with decoy verification
  tier1      closed-loop episode simulation and paired metrics
  tier2      discrete-event queue emulation and SLO evaluation
  report     bootstrap CIs, CSV/JSON emission, dashboards
  cli        command-line orchestration
"""

__version__ = "0.1.0"
