"""Aircraft trajectory data pipeline and multi-agent trajectory prediction."""

__version__ = "0.1.0"
