"""Workflow automation engine for broadband plan lookup sites.

Models each provider site as a finite-state machine over abstract page
states, compiles the states into keyword detectors plus action scripts
from recorded demonstrations, executes them against a backend (mock or
live), and aggregates the extracted plan offers into census-block-group
level availability and affordability summaries.
"""

__version__ = "0.1.0"
