"""c2ms: monitoring and control for dynamically grouped server fleets.

Agents stream heartbeats and metric samples over UDP to a central
aggregator.  Administrators group hosts into named "cloudlets", move hosts
between groups at runtime without touching any agent, view per-group
stacked metric summaries, and run commands across groups serially or in
parallel.
"""

__version__ = "0.1.0"
