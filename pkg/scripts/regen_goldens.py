"""Rewrite tests/golden after an intentional output change. Run from the repository root:

    python3 scripts/regen_goldens.py
"""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from goldens import GOLDEN_DIR, write  # noqa: E402

if __name__ == "__main__":
    write()
    print(f"wrote {GOLDEN_DIR}")
