import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Tuple, Union

import pandas as pd
import torch
from PIL import Image
from pydantic import BaseModel

from config import PROJECT_VERSION
from errors import CheckpointError, ConfigError
from models import CheckpointHeader, ExperimentManifest

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
CSV_FLOAT_FORMAT = "%.10g"
EXPERIMENT_FILENAME = "experiment.json"


class ArtifactStore:
    """Run directory holding checkpoints, CSV logs, traces, sample grids and manifests."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def initialize(self) -> "ArtifactStore":
        """Create the run directory"""
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            logger.info(f"Artifact store ready at '{self.root}'")
        except OSError as e:
            logger.error(f"Failed to initialize artifact store: {e}")
            raise
        return self

    def path(self, name: str) -> Path:
        return self.root / name

    # Checkpoints
    def save_checkpoint(
        self, name: str, header: CheckpointHeader, blocks: Dict[str, Dict[str, Any]]
    ) -> Path:
        """
        Save a versioned header plus named parameter blocks
        Returns: path of the written checkpoint
        """
        target = self.root / "checkpoints" / name
        payload = {"header": header.model_dump(mode="json"), **blocks}
        tmp = target.with_suffix(target.suffix + ".tmp")
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            torch.save(payload, tmp)
            tmp.replace(target)
            logger.info(f"Checkpoint saved: {target}")
            return target
        except OSError as e:
            logger.error(f"Failed to save checkpoint {target}: {e}")
            raise

    # Tables
    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        target = self.root / name
        frame.to_csv(target, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
        logger.info(f"Wrote {len(frame)} rows to {target}")
        return target

    def append_csv_row(self, name: str, row: Dict[str, Any], columns: List[str]) -> Path:
        target = self.root / name
        frame = pd.DataFrame([row], columns=columns)
        frame.to_csv(
            target,
            mode="a",
            header=not target.exists(),
            index=False,
            float_format=CSV_FLOAT_FORMAT,
            lineterminator="\n",
        )
        return target

    def read_csv(self, name: str) -> pd.DataFrame:
        return pd.read_csv(self.root / name)

    # Images and documents
    def save_image(self, name: str, image: Image.Image) -> Path:
        target = self.root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        image.save(target, format="PNG")
        return target

    def write_json(self, name: str, document: Union[BaseModel, Dict[str, Any]]) -> Path:
        target = self.root / name
        if isinstance(document, BaseModel):
            text = document.model_dump_json(indent=2)
        else:
            text = json.dumps(document, indent=2, sort_keys=True, default=str)
        target.write_text(text + "\n")
        return target

    def list_checkpoints(self) -> Iterable[Path]:
        return sorted((self.root / "checkpoints").glob("*.pt"))


def load_checkpoint(
    path: Union[str, Path], map_location: Union[str, torch.device] = "cpu"
) -> Tuple[CheckpointHeader, Dict[str, Any]]:
    """
    Load a checkpoint written by ``ArtifactStore.save_checkpoint``
    Returns: (header, parameter blocks)
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        logger.error(f"Failed to read checkpoint {path}: {e}")
        raise CheckpointError(f"Unreadable checkpoint: {path}", details=str(e))

    if not isinstance(payload, dict) or "header" not in payload:
        raise CheckpointError(f"Checkpoint {path} has no header block")
    header = CheckpointHeader.model_validate(payload.pop("header"))
    if header.format_version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"Unsupported checkpoint format {header.format_version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return header, payload


# Experiment manifests
def start_run(
    output_dir: Union[str, Path],
    command: str,
    arguments: Dict[str, Any],
    config: Dict[str, Any],
    seed: int,
) -> ArtifactStore:
    """
    Create the run directory and record its ExperimentManifest
    Called before any other side effect of a command
    """
    store = ArtifactStore(output_dir).initialize()
    manifest = ExperimentManifest(
        command=command,
        arguments=arguments,
        config=config,
        seed=seed,
        version=PROJECT_VERSION,
        output_dir=str(output_dir),
        created_at=datetime.now(timezone.utc),
    )
    store.write_json(EXPERIMENT_FILENAME, manifest)
    logger.info(f"Experiment manifest written to {store.path(EXPERIMENT_FILENAME)}")
    return store


def finish_run(store: ArtifactStore) -> None:
    manifest = read_experiment_manifest(store.path(EXPERIMENT_FILENAME))
    manifest.finished_at = datetime.now(timezone.utc)
    store.write_json(EXPERIMENT_FILENAME, manifest)


def read_experiment_manifest(path: Union[str, Path]) -> ExperimentManifest:
    path = Path(path)
    if path.is_dir():
        path = path / EXPERIMENT_FILENAME
    try:
        return ExperimentManifest.model_validate_json(path.read_text())
    except OSError as e:
        raise ConfigError(f"Experiment manifest not found: {path}", details=str(e))
    except ValueError as e:
        raise ConfigError(f"Invalid experiment manifest: {path}", details=str(e))
