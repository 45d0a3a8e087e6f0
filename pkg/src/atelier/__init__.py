"""atelier: a stateful multi-agent orchestration workbench.

A project coordinator agent delegates goals to parallel workstreams
whose coordinators drive sub-agents and tools, produce reviewed working
papers with margin annotations, and escalate to the human user when
blocked. All agent intelligence flows through a pluggable model backend
so the entire protocol runs deterministically offline.
"""

__version__ = "0.1.0"
