"""Run directories and their append-only manifests."""

import hashlib
import json
import subprocess
import time
from datetime import datetime, timezone
from pathlib import Path

MANIFEST_NAME = "manifest.jsonl"


def code_version():
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, check=True,
        )
        return out.stdout.strip()
    except Exception:
        from . import __version__

        return f"pkg-{__version__}"


def dataset_fingerprint(records):
    """File count plus a content hash of the index itself."""
    names = sorted(f"{r.id}:{Path(r.rgb_path).name}" for r in records)
    digest = hashlib.sha256("\n".join(names).encode()).hexdigest()
    file_count = 0
    for r in records:
        for p in (r.rgb_path, r.threed_path, r.label_path, r.calib_path):
            if p is not None:
                file_count += 1
    return {"file_count": file_count, "index_sha256": digest}


def create_run_dir(out_root, prefix="run"):
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
    candidate = out_root / f"{prefix}-{stamp}"
    counter = 0
    while candidate.exists():
        counter += 1
        candidate = out_root / f"{prefix}-{stamp}-{counter}"
    candidate.mkdir()
    return candidate


def append_manifest(run_dir, record):
    record = dict(record)
    record.setdefault("time", time.time())
    path = Path(run_dir) / MANIFEST_NAME
    with open(path, "a") as fh:
        fh.write(json.dumps(record, default=str) + "\n")
    return path


def read_manifest(run_dir):
    path = Path(run_dir) / MANIFEST_NAME
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records
