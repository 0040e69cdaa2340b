"""rrulab: simulation laboratory for two-color randomly reinforced urns."""

__version__ = "0.1.0"
