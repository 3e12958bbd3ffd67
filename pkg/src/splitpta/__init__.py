"""splitpta: hybrid pointer analysis for split-phase programs over PIR."""

__version__ = "0.1.0"
