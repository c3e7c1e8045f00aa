import json
import logging
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

from .. import SCHEMA_VERSION
from ..core.errors import ArtifactVersionError, InputError
from .curve_service import CashflowSystem, FittedCurve
from .dynamics_service import AffineModelSpec, DiffusionSpec
from .kernel_service import KernelSpec, SumKernelSpec
from .reduction_service import ReducedModel

logger = logging.getLogger("discount_kernel.storage")

MANIFEST = "manifest.json"

ARTIFACT_TYPES = {
    "KernelSpec": KernelSpec,
    "SumKernelSpec": SumKernelSpec,
    "CashflowSystem": CashflowSystem,
    "FittedCurve": FittedCurve,
    "ReducedModel": ReducedModel,
    "AffineModelSpec": AffineModelSpec,
    "DiffusionSpec": DiffusionSpec,
}


@dataclass
class Bundle:
    """Named artifacts plus free-form metadata, in manifest order"""

    objects: Dict[str, Any] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def of_type(self, cls: type) -> List[Any]:
        return [obj for obj in self.objects.values() if isinstance(obj, cls)]


class ArtifactStore:
    """JSON artifact bundle: one file per object and a manifest with the schema version"""

    def __init__(self, root: Path):
        self.root = Path(root)

    @staticmethod
    def _file_name(name: str) -> str:
        return re.sub(r"[^A-Za-z0-9._-]", "_", name) + ".json"

    def save(self, bundle: Bundle) -> Path:
        owners: Dict[str, str] = {}
        for name in bundle.objects:
            file_name = self._file_name(name)
            if file_name in owners:
                raise InputError(f"artifact names {owners[file_name]!r} and {name!r} both map to {file_name}")
            owners[file_name] = name

        self.root.mkdir(parents=True, exist_ok=True)
        entries = []
        for name, obj in bundle.objects.items():
            type_name = type(obj).__name__
            if type_name not in ARTIFACT_TYPES:
                raise InputError(f"cannot persist {name}: unsupported type {type_name}")
            file_name = self._file_name(name)
            # json writes floats with repr, the shortest string that round-trips exactly.
            (self.root / file_name).write_text(json.dumps(obj.to_dict()), encoding="utf-8")
            entries.append({"name": name, "type": type_name, "file": file_name})

        manifest = {
            "schema_version": SCHEMA_VERSION,
            "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "objects": entries,
            "meta": bundle.meta,
        }
        (self.root / MANIFEST).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        logger.info(f"Saved {len(entries)} artifacts to {self.root}")
        return self.root

    def load(self) -> Bundle:
        manifest_path = self.root / MANIFEST
        if not manifest_path.exists():
            raise InputError(f"{self.root} is not an artifact bundle (no {MANIFEST})")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))

        found = manifest.get("schema_version")
        if found != SCHEMA_VERSION:
            raise ArtifactVersionError(found, SCHEMA_VERSION)

        bundle = Bundle(meta=manifest.get("meta", {}))
        for entry in manifest.get("objects", []):
            cls = ARTIFACT_TYPES.get(entry["type"])
            if cls is None:
                raise InputError(f"unknown artifact type {entry['type']!r} in {manifest_path}")
            data = json.loads((self.root / entry["file"]).read_text(encoding="utf-8"))
            bundle.objects[entry["name"]] = cls.from_dict(data)
        logger.debug(f"Loaded {len(bundle.objects)} artifacts from {self.root}")
        return bundle


def save_artifacts(root: Path, objects: Dict[str, Any], meta: Optional[Dict[str, Any]] = None) -> Path:
    return ArtifactStore(root).save(Bundle(objects=dict(objects), meta=meta or {}))


def load_artifacts(root: Path) -> Bundle:
    return ArtifactStore(root).load()
