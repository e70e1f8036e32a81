"""Run manifests: a deterministic JSON snapshot of a training run.

manifest.json holds everything reproducible (config, seeds, per-epoch dev
metrics and loss curves, final test metrics); wall-clock time goes to a
separate timing.json so that same-seed runs produce byte-identical
manifest.json files.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

MANIFEST_NAME = "manifest.json"
TIMING_NAME = "timing.json"


@dataclass
class RunManifest:
    config: dict
    seeds: dict
    epochs: list = field(default_factory=list)
    final_test: dict | None = None
    ablation: str | None = None
    wall_clock_sec: float | None = None

    def to_dict(self, with_timing: bool = True) -> dict:
        data = asdict(self)
        if not with_timing:
            data.pop("wall_clock_sec")
        return data

    def save(self, out_dir: str) -> None:
        payload = self.to_dict(with_timing=False)
        with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if self.wall_clock_sec is not None:
            with open(os.path.join(out_dir, TIMING_NAME), "w", encoding="utf-8") as fh:
                json.dump({"wall_clock_sec": self.wall_clock_sec}, fh, indent=2)
                fh.write("\n")

    @classmethod
    def load(cls, out_dir: str) -> "RunManifest":
        with open(os.path.join(out_dir, MANIFEST_NAME), encoding="utf-8") as fh:
            data = json.load(fh)
        timing_path = os.path.join(out_dir, TIMING_NAME)
        if os.path.exists(timing_path):
            with open(timing_path, encoding="utf-8") as fh:
                data["wall_clock_sec"] = json.load(fh)["wall_clock_sec"]
        else:
            data["wall_clock_sec"] = None
        return cls(**data)
