"""Shared paths for the demo scripts."""
import os
from pathlib import Path

# MAGNET_DEMO_QUICK=1 shrinks every training run to a handful of steps
QUICK = os.environ.get("MAGNET_DEMO_QUICK") == "1"
OUT = Path(os.environ.get("MAGNET_RUN_DIR", "runs")) / "demos"
OUT.mkdir(parents=True, exist_ok=True)
CONFIGS = Path(__file__).resolve().parents[1] / "configs"
