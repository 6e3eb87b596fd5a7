"""Batch figure renderer for run outputs.

Reads only the documented CSV/JSON files emitted by a run (metric tables,
timeline, decisions, overhead sweep, dashboard, config echo) and renders the
full figure set as SVG under figs/tier1/ and figs/tier2/.
"""

__version__ = "0.1.0"
