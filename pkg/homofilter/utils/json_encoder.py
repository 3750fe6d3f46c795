"""Custom JSON encoder for numpy scalars, arrays, paths and pydantic models."""

import json
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel


class CustomJSONEncoder(json.JSONEncoder):
    """
    JSON encoder that handles the types produced by the numerical services.
    """
    def default(self, obj: Any) -> Any:
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, np.bool_):
            return bool(obj)
        elif isinstance(obj, Path):
            return str(obj)
        elif isinstance(obj, Enum):
            return obj.value
        elif isinstance(obj, BaseModel):
            return obj.model_dump(mode="json")
        # Let the base class handle everything else
        return super().default(obj)


def dumps(obj: Any) -> str:
    """Stable JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(obj, cls=CustomJSONEncoder, indent=2, sort_keys=True) + "\n"
