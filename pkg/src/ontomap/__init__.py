"""Forward and reverse inference over multi-study brain-map corpora."""

__version__ = "0.1.0"
