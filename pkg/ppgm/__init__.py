from pathlib import Path

__version__ = (Path(__file__).resolve().parent / "VERSION.txt").read_text(encoding="utf-8").strip()
