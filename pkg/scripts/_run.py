import sys
from pathlib import Path

from sgmlab.harness.cli import main

CONFIGS = Path(__file__).resolve().parent / "configs"


def run(command: str, config: str) -> None:
    """Run a CLI command with a bundled config; extra argv entries are passed through as overrides."""
    sys.exit(main([command, "--config", str(CONFIGS / config), *sys.argv[1:]]))
