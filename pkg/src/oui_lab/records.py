"""Run records and their JSONL (schema v1) encoding."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

SCHEMA_VERSION = 1


@dataclass
class CheckpointMetrics:
    fraction_done: float
    return_ma50: float | None
    oui_actor: float
    oui_critic: float
    approx_kl: float
    clip_fraction: float
    flip_fraction: float
    unit_flip_fraction: float = 0.0

    def to_json(self) -> dict:
        return {
            "f": self.fraction_done,
            "ret": self.return_ma50,
            "oui_a": self.oui_actor,
            "oui_c": self.oui_critic,
            "kl": self.approx_kl,
            "clip": self.clip_fraction,
            "flip": self.flip_fraction,
            "flip_u": self.unit_flip_fraction,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CheckpointMetrics":
        return cls(
            float(d["f"]),
            None if d["ret"] is None else float(d["ret"]),
            float(d["oui_a"]),
            float(d["oui_c"]),
            float(d["kl"]),
            float(d["clip"]),
            float(d["flip"]),
            float(d.get("flip_u", 0.0)),
        )


@dataclass
class RunRecord:
    run_id: str
    env_id: str
    lr: float
    seed: int
    diverged: bool
    checkpoints: list[CheckpointMetrics] = field(default_factory=list)
    final_return: float | None = None
    config: dict = field(default_factory=dict)

    def checkpoint_at(self, fraction: float) -> CheckpointMetrics | None:
        for c in self.checkpoints:
            if math.isclose(c.fraction_done, fraction, abs_tol=1e-9):
                return c
        return None

    def to_json(self) -> dict:
        return {
            "run_id": self.run_id,
            "env_id": self.env_id,
            "lr": self.lr,
            "seed": self.seed,
            "diverged": self.diverged,
            "final_return": self.final_return,
            "checkpoints": [c.to_json() for c in self.checkpoints],
            "config": self.config,
        }

    def to_line(self) -> str:
        return json.dumps(self.to_json(), sort_keys=False, allow_nan=False, separators=(",", ":"))

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        for key in ("run_id", "env_id", "lr", "seed", "diverged", "final_return", "checkpoints"):
            if key not in d:
                raise KeyError(f"run record missing field {key!r}")
        return cls(
            str(d["run_id"]),
            str(d["env_id"]),
            float(d["lr"]),
            int(d["seed"]),
            bool(d["diverged"]),
            [CheckpointMetrics.from_json(c) for c in d["checkpoints"]],
            None if d["final_return"] is None else float(d["final_return"]),
            dict(d.get("config", {})),
        )

    @classmethod
    def from_line(cls, line: str) -> "RunRecord":
        return cls.from_json(json.loads(line))


def run_id_for(env_id: str, config: dict) -> str:
    payload = json.dumps({"env_id": env_id, "config": config}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
