"""dataforge: synthesize, curate, and evaluate multi-turn data-analysis agent
trajectories, and emit fine-tuning-ready corpora."""

__version__ = "0.1.0"
