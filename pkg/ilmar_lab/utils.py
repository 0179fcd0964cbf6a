"""
Utility functions for run directories, seed lists and JSON artifacts.
"""

import json
import re
import shutil
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from .exceptions import UsageError


def parse_seeds(text: Union[str, int]) -> Tuple[int, ...]:
    """
    Parse a seed list such as ``"0,1,2"`` or a range ``"0-4"``.

    Example:
        >>> parse_seeds("0,3-5")
        (0, 3, 4, 5)
    """
    if isinstance(text, int):
        return (text,)
    seeds = []
    for token in str(text).split(","):
        token = token.strip()
        if not token:
            continue
        match = re.fullmatch(r"(\d+)-(\d+)", token)
        if match:
            lo, hi = int(match.group(1)), int(match.group(2))
            if hi < lo:
                raise UsageError(f"Empty seed range: {token}", {"field": "seed"})
            seeds.extend(range(lo, hi + 1))
        elif re.fullmatch(r"\d+", token):
            seeds.append(int(token))
        else:
            raise UsageError(f"Invalid seed token: {token!r}", {"field": "seed"})
    if not seeds:
        raise UsageError("At least one seed is required", {"field": "seed"})
    return tuple(seeds)


def format_value(value: float) -> str:
    """Compact label for a grid coefficient: ``0.1`` -> ``0.1``, ``1.0`` -> ``1``."""
    return f"{float(value):g}"


def run_directory(out: Union[str, Path], mode: str, task: str, seed: int) -> Path:
    """``<out>/<mode>/<task>/<seed>``."""
    return Path(out) / mode / task / str(seed)


def prepare_output(path: Union[str, Path], force: bool = False, is_dir: bool = True) -> Path:
    """
    Make sure an artifact location is free.

    Raises:
        UsageError: The location already holds output and ``force`` is not set
    """
    path = Path(path)
    occupied = path.exists() and (not path.is_dir() or any(path.iterdir()))
    if occupied and not force:
        raise UsageError(f"Output already exists: {path} (use --force to overwrite)", {"path": str(path)})
    if occupied:
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    (path if is_dir else path.parent).mkdir(parents=True, exist_ok=True)
    return path


def _to_json(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _to_json(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_json(v) for v in value]
    if isinstance(value, np.ndarray):
        return _to_json(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def write_json(path: Union[str, Path], data: Dict[str, Any]) -> Path:
    """Write sorted, indented JSON; numpy scalars and arrays are converted."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(_to_json(data), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def read_json(path: Union[str, Path]) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
