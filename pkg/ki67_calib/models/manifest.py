"""Run manifest: provenance record referenced by every artifact of a run."""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional


def now_utc() -> _dt.datetime:
    return _dt.datetime.now(_dt.timezone.utc)


@dataclass
class ArtifactRecord:
    path: str
    sha256: str
    kind: str


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    root_seed: int
    tool_version: str
    regime: Optional[str] = None
    seeds: Dict[str, int] = field(default_factory=dict)
    datasets: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    artifacts: List[ArtifactRecord] = field(default_factory=list)
    started_at: _dt.datetime = field(default_factory=now_utc)
    finished_at: Optional[_dt.datetime] = None

    @property
    def elapsed_seconds(self) -> Optional[float]:
        if self.finished_at is None:
            return None
        return (self.finished_at - self.started_at).total_seconds()

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "root_seed": self.root_seed,
            "tool_version": self.tool_version,
            "regime": self.regime,
            "seeds": dict(sorted(self.seeds.items())),
            "datasets": self.datasets,
            "artifacts": [a.__dict__ for a in sorted(self.artifacts, key=lambda a: a.path)],
            "timing": {
                "started_at": self.started_at.isoformat(),
                "finished_at": self.finished_at.isoformat() if self.finished_at else None,
                "elapsed_seconds": self.elapsed_seconds,
            },
        }
