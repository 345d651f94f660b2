from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from ..runtime import Endpoint, Role


@dataclass
class RankContext:
    """Everything an application body needs to run on one rank."""

    endpoint: Endpoint
    app: str
    layout: dict[str, list[int]]
    params: dict[str, Any] = field(default_factory=dict)
    input_path: Path | None = None
    output_path: Path | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def rank(self) -> int:
        return self.endpoint.rank

    @property
    def index(self) -> int:
        """Position of this rank among the ranks running the same app."""
        return self.layout[self.app].index(self.rank)

    def ranks(self, app: str) -> list[int]:
        return self.layout.get(app, [])

    def roles(self, **by_app: Role) -> dict[int, Role]:
        """Expected role of every rank for one channel; unnamed apps are bystanders."""
        out = {}
        for app, ranks in self.layout.items():
            for r in ranks:
                out[r] = by_app.get(app.split(".", 1)[-1], Role())
        return out

    def out_dir(self, key: str = "out_dir") -> Path:
        d = Path(self.params.get(key) or self.output_path or ".")
        d.mkdir(parents=True, exist_ok=True)
        return d


@dataclass(frozen=True)
class AppRole:
    name: str
    role: Role
    body: Callable[[RankContext], Any]

    @property
    def family(self) -> str:
        return self.name.split(".", 1)[0]
