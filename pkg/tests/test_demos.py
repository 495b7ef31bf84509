import os
import subprocess
import sys
from pathlib import Path

DEMOS = Path(__file__).resolve().parents[1] / "demos"


def test_demos_run_in_quick_mode(tmp_path):
    env = dict(os.environ, MAGNET_DEMO_QUICK="1", MAGNET_RUN_DIR=str(tmp_path))
    for script in sorted(DEMOS.glob("[0-9]*.py")):
        proc = subprocess.run([sys.executable, str(script)], cwd=DEMOS, env=env, capture_output=True, text=True)
        assert proc.returncode == 0, f"{script.name}\n{proc.stderr}"
    assert (tmp_path / "demos" / "ultralong.png").is_file()
