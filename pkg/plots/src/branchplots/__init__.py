"""Standalone figure rendering for simulation CSV/JSON outputs.

Reads only the documented file formats; never imports the simulator.
"""

__version__ = "0.1.0"
