"""
Built-in example library and construction of run objects from configurations.

Examples are JSON run configurations shipped in settings.PNF_CONFIG_DIR.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from django.conf import settings

from core.services.equivariant import GroupAction
from core.services.errors import ConfigError
from core.services.expressions import ChartBox
from core.services.fields import BivectorField, OneFormField
from core.services.transversal import Embedding

logger = logging.getLogger(__name__)


@dataclass
class Problem:
    """The geometric objects a run configuration describes."""
    name: str
    config: Dict[str, Any]
    box: ChartBox
    bivector: BivectorField
    embedding: Optional[Embedding] = None
    group: Optional[GroupAction] = None
    alpha: Optional[OneFormField] = None

    @property
    def dimension(self) -> int:
        return self.box.dimension

    @property
    def base_point(self) -> np.ndarray:
        """Splitting point, else the transversal's center image, else the box center."""
        split = self.config.get("split")
        if split:
            return np.asarray(split["point"], dtype=float)
        if self.embedding is not None:
            return self.embedding.evaluate(self.embedding.center[None])[0]
        return self.box.center


def build_embedding(spec: Dict[str, Any], ambient: ChartBox) -> Embedding:
    name = spec.get("name", "X")
    kind = spec["kind"]
    if kind == "point":
        return Embedding.at_point(ambient, spec["origin"], name)
    parameters = ChartBox(f"{name} parameters", spec["box"])
    if kind == "affine":
        directions = np.asarray(spec["directions"], dtype=float).T
        return Embedding.affine(ambient, spec["origin"], directions, parameters, name)
    return Embedding(parameters, spec["components"], ambient, name)


def build_group(spec: Dict[str, Any], fixed_point) -> GroupAction:
    fixed_point = spec.get("fixed_point", fixed_point)
    kind = spec["kind"]
    if kind == "trivial":
        return GroupAction.trivial(len(fixed_point), fixed_point)
    if kind == "finite":
        return GroupAction.finite(spec["matrices"], fixed_point)
    return GroupAction.circle(spec["generator"], spec.get("nodes", 64), fixed_point)


def build_problem(config: Dict[str, Any]) -> Problem:
    """
    Turn a validated configuration into fields, embedding and group.

    Raises:
        NormalFormError: If an object cannot be built (e.g. a group that is not closed).
    """
    manifold = config["manifold"]
    box = ChartBox(config["name"], manifold["box"])
    bivector = BivectorField(box, manifold["bivector"], config["name"])
    problem = Problem(config["name"], config, box, bivector)
    if config.get("transversal"):
        problem.embedding = build_embedding(config["transversal"], box)
    alpha = config.get("moser", {}).get("alpha")
    if alpha:
        problem.alpha = OneFormField(box, alpha, "alpha")
    if config.get("group"):
        problem.group = build_group(config["group"], problem.base_point)
    logger.debug(f"Built problem {problem.name!r} of dimension {problem.dimension}")
    return problem


def config_paths() -> List[Path]:
    return sorted(Path(settings.PNF_CONFIG_DIR).glob("*.json"))


def builtin_examples() -> List[Dict[str, Any]]:
    """
    Every shipped example, validated, in file-name order.

    Raises:
        ConfigError: If a shipped file does not validate.
    """
    from core.serializers import load_config

    examples = []
    for path in config_paths():
        try:
            examples.append(load_config(path))
        except ConfigError as e:
            logger.error(f"Built-in example {path.name} is invalid: {e}")
            raise
    return examples


def find_example(name: str) -> Path:
    """Path of a built-in example given its name (with or without .json)."""
    stem = name[:-5] if name.endswith(".json") else name
    for path in config_paths():
        if path.stem == stem:
            return path
    raise ConfigError(f"No built-in example named {name!r}", errors={"config": [name]})


def summarize(config: Dict[str, Any]) -> Dict[str, Any]:
    """One-line description used by `pnf list`."""
    transversal = config.get("transversal")
    group = config.get("group")
    return {
        "name": config["name"],
        "dimension": config["manifold"]["dimension"],
        "transversal": f"{transversal.get('name', 'X')} ({transversal['kind']})" if transversal else "-",
        "group": group["kind"] if group else "-",
        "description": config.get("description", ""),
    }
