"""stusim: student-simulation data toolkit.

Converts raw programming-process logs into conversational and preference
datasets, grades submissions through pluggable backends, rolls out chat models
as simulated students, and scores simulation fidelity.
"""

__version__ = "0.1.0"
