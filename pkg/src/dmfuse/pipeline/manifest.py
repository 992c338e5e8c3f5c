"""Run manifests: what a command produced, from which config, with digests."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Union

from .. import __version__
from ..data import file_digest


def timestamp() -> str:
    """UTC ISO time, pinned by ``SOURCE_DATE_EPOCH`` when set so reruns match byte-for-byte."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return now.replace(microsecond=0).isoformat()


@dataclass
class RunManifest:
    command: str
    config_digest: str
    seeds: dict
    code_version: str = __version__
    started: str = field(default_factory=timestamp)
    finished: str = ""
    artifacts: dict = field(default_factory=dict)
    loss_curves: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def add_artifact(self, path: Union[str, Path], root: Union[str, Path]) -> None:
        path, root = Path(path), Path(root)
        self.artifacts[path.relative_to(root).as_posix()] = file_digest(path)

    def add_curve(self, stage: str, path: Union[str, Path], root: Union[str, Path]) -> None:
        self.add_artifact(path, root)
        self.loss_curves[stage] = Path(path).relative_to(root).as_posix()

    def write(self, out_dir: Union[str, Path], name: str = "manifest.json") -> Path:
        self.finished = timestamp()
        self.artifacts = dict(sorted(self.artifacts.items()))
        path = Path(out_dir) / name
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def read_run_manifest(path: Union[str, Path]) -> RunManifest:
    return RunManifest(**json.loads(Path(path).read_text(encoding="utf-8")))


def verify_artifacts(manifest: RunManifest, root: Union[str, Path]) -> Optional[str]:
    """Return the first artifact whose digest no longer matches, or ``None``."""
    for rel, digest in manifest.artifacts.items():
        p = Path(root) / rel
        if not p.exists() or file_digest(p) != digest:
            return rel
    return None
