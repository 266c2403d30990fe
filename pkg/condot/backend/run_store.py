"""
Run store for the condot experiment commands.
Creates run directories and persists manifests, metrics tables and artifacts.
"""

import json
import logging
import platform
import time
from contextlib import contextmanager
from datetime import datetime
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Union

import pandas as pd
from pydantic import BaseModel

from config import Config

logger = logging.getLogger(__name__)

TRACKED_PACKAGES = ("numpy", "scipy", "POT", "pandas", "pydantic", "tqdm", "Jinja2")


def package_versions() -> Dict[str, str]:
    """Installed versions of the numeric stack (plus the interpreter)."""
    versions = {"python": platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = version(name)
        except PackageNotFoundError:
            versions[name] = "not installed"
    return versions


class RunHandle:
    """One run directory: manifest.json, metrics.csv, report.md and artifacts/."""

    def __init__(self, path: Path, command: str, config: BaseModel):
        self.path = path
        self.command = command
        self.config = config
        self.artifacts = path / "artifacts"
        self.artifacts.mkdir(parents=True, exist_ok=True)
        self.outputs: List[str] = []
        self.summary: Dict[str, Any] = {}

    def _record(self, target: Path) -> Path:
        self.outputs.append(str(target.relative_to(self.path)))
        return target

    def artifact_path(self, name: str) -> Path:
        """Path under artifacts/ registered as an output of this run."""
        return self._record(self.artifacts / name)

    def write_metrics(self, frame: pd.DataFrame) -> Path:
        target = self._record(self.path / "metrics.csv")
        frame.to_csv(target, index=False)
        logger.debug(f"Metrics with {len(frame)} rows written to {target}")
        return target

    def write_table(self, name: str, frame: pd.DataFrame) -> Path:
        target = self.artifact_path(name)
        frame.to_csv(target, index=False)
        return target

    def write_document(self, name: str, document: Union[BaseModel, List[BaseModel], Dict[str, Any]]) -> Path:
        target = self.artifact_path(name)
        if isinstance(document, BaseModel):
            target.write_text(document.model_dump_json(indent=2))
        elif isinstance(document, list):
            target.write_text(json.dumps([d.model_dump(mode="json") for d in document], indent=2))
        else:
            target.write_text(json.dumps(document, indent=2))
        return target


class RunStore:
    """Manages run directories under runs/<command>/<timestamp>-seed<seed>/."""

    def __init__(self, root: Optional[Union[str, Path]] = None):
        """Initialize run store.

        Args:
            root: Base directory for runs (defaults to Config.RUNS_DIR)
        """
        self.root = Path(root or Config.RUNS_DIR)
        logger.debug(f"RunStore initialized at {self.root}")

    def create_run(self, command: str, config: BaseModel, seed: int) -> RunHandle:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
        path = self.root / command / f"{stamp}-seed{seed}"
        path.mkdir(parents=True, exist_ok=False)
        return RunHandle(path, command, config)

    @contextmanager
    def open_run(self, command: str, config: BaseModel, seed: int) -> Iterator[RunHandle]:
        """Yield a fresh run and write its manifest when the command finishes or fails."""
        run = self.create_run(command, config, seed)
        started = datetime.now()
        clock = time.perf_counter()
        status = "failed"
        try:
            yield run
            status = "success"
        finally:
            manifest = {
                "command": command,
                "status": status,
                "seed": seed,
                "config": config.model_dump(mode="json"),
                "solver_config": Config.get_solver_config(),
                "versions": package_versions(),
                "started_at": started.isoformat(),
                "finished_at": datetime.now().isoformat(),
                "duration_seconds": time.perf_counter() - clock,
                "summary": run.summary,
                "outputs": run.outputs,
            }
            (run.path / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))
            logger.info(f"Run {status}: manifest written to {run.path / 'manifest.json'}")

    def list_runs(self, command: str) -> List[Path]:
        base = self.root / command
        if not base.exists():
            return []
        return sorted(p for p in base.iterdir() if (p / "manifest.json").exists())

    def load_manifest(self, run_path: Union[str, Path]) -> Dict[str, Any]:
        return json.loads((Path(run_path) / "manifest.json").read_text())
