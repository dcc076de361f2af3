"""Run manifests: config hashing, seed records, reproducibility stamps."""
from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

SCHEMA_VERSION = 1

DESK_SCALE_NOTE = {
    "agents_per_game": "5 Trojan + 5 benign (reference evaluation used 50+50)",
    "study_runs": "200 per point (reference used 1000)",
    "calibration_runs": 500,
}


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seeds: dict,
                   outputs: list[str], started: float) -> Path:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "outputs": sorted(outputs),
        "scale": DESK_SCALE_NOTE,
        "wall_time_s": round(time.time() - started, 3),
    }
    path = Path(out_dir) / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
