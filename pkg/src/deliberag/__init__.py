"""Document-grounded multi-agent deliberation with retrieval, evaluation metrics and compliance reporting."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def fixture_dir() -> Path:
    """Directory of the bundled offline fixture (corpus, mock script, config, labels)."""
    return Path(str(resources.files(__name__) / "fixtures"))
