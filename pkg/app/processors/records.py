"""Result persistence: JSON-lines records with BPF1 field references, CSV tables and the config echo."""
from typing import Any, Dict, List, Optional, Sequence
import json
import logging
import math
import os
import threading

import numpy as np
from pydantic import BaseModel, Field

from app.processors.fields import RadialProfile, write_field
from app.processors.optimizer import SolutionRecord

logger = logging.getLogger(__name__)


class RecordLine(BaseModel):
    kind: str = "solution"
    cell: Dict[str, Any] = Field(default_factory=dict)
    field_path: Optional[str] = None
    lam: Optional[float] = None
    energy: Optional[float] = None
    constraint: Optional[float] = None
    residual: Optional[float] = None
    gradient_norm: Optional[float] = None
    barycenter: Optional[List[Optional[float]]] = None
    sign_class: Optional[str] = None
    morse_index: Optional[int] = None
    spectrum: Optional[Dict[str, Any]] = None
    iterations: int = 0
    converged: bool = False
    certified: bool = False
    status: str = ""
    start_index: Optional[int] = None
    min_norm_ratio: Optional[float] = None
    error: Optional[str] = None
    extra: Dict[str, Any] = Field(default_factory=dict)


def _finite(x: Optional[float]) -> Optional[float]:
    # JSON has no NaN; missing numbers are written as null
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def record_line(rec: SolutionRecord, field_path: Optional[str], cell: Dict[str, Any]) -> RecordLine:
    return RecordLine(
        cell=cell,
        field_path=field_path,
        lam=_finite(rec.lam),
        energy=_finite(rec.energy),
        constraint=_finite(rec.constraint),
        residual=_finite(rec.residual),
        gradient_norm=_finite(rec.gradient_norm),
        barycenter=[_finite(x) for x in rec.barycenter],
        sign_class=rec.sign_class.value,
        morse_index=rec.morse_index,
        spectrum=rec.spectrum,
        iterations=rec.iterations,
        converged=rec.converged,
        certified=rec.certified,
        status=rec.status,
        start_index=rec.start_index,
        min_norm_ratio=_finite(rec.min_norm_ratio),
        error=rec.error,
    )


class RecordWriter:
    """Single writer for one run directory; safe to call from worker threads."""

    def __init__(self, out_dir: str, name: str = "records.jsonl"):
        self.out_dir = out_dir
        self.fields_dir = os.path.join(out_dir, "fields")
        os.makedirs(self.fields_dir, exist_ok=True)
        self.path = os.path.join(out_dir, name)
        self._lock = threading.Lock()
        self._count = 0
        # one file per run
        open(self.path, "w", encoding="utf-8").close()

    def _append(self, line: RecordLine) -> None:
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line.model_dump_json() + "\n")
            self._count += 1

    def write_solution(self, rec: SolutionRecord, cell: Optional[Dict[str, Any]] = None, tag: str = "u") -> RecordLine:
        cell = dict(cell or {})
        suffix = "_".join(f"{k}{v}" for k, v in sorted(cell.items()))
        filename = f"{tag}_{suffix}.bpf" if suffix else f"{tag}.bpf"
        field_path = None
        if rec.error is None:
            field_path = os.path.join("fields", filename)
            write_field(os.path.join(self.out_dir, field_path), rec.u)
        problems = rec.violations()
        if problems:
            logger.warning(f"[Records] Writing flagged record {cell}: {'; '.join(problems)}")
        line = record_line(rec, field_path, cell)
        line.extra["violations"] = problems
        self._append(line)
        return line

    def write_entry(self, kind: str, cell: Optional[Dict[str, Any]] = None, **values: Any) -> RecordLine:
        clean = {k: (_finite(v) if isinstance(v, float) else v) for k, v in values.items()}
        line = RecordLine(kind=kind, cell=dict(cell or {}), extra=clean)
        self._append(line)
        return line

    @property
    def count(self) -> int:
        return self._count


def read_records(path: str) -> List[RecordLine]:
    with open(path, "r", encoding="utf-8") as f:
        return [RecordLine.model_validate_json(line) for line in f if line.strip()]


def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence[float]]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    data = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))
    np.savetxt(path, data, delimiter=",", header=",".join(header), comments="", fmt="%.17g")


def write_profile_csv(path: str, profile: RadialProfile) -> None:
    rows = np.column_stack([profile.grid.r, profile.values])
    write_csv(path, ["r", "u"], rows)


def echo_config(out_dir: str, config: BaseModel) -> str:
    path = os.path.join(out_dir, "config.json")
    os.makedirs(out_dir, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(config.model_dump_json(indent=2))
    return path


def load_config_echo(path: str) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
