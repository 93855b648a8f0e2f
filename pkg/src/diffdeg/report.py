"""Versioned JSON run reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Optional

SCHEMA = "diffdeg.run-report"
SCHEMA_VERSION = 1


@dataclass
class RunReport:
    kind: str = "attack"
    seed: Optional[int] = None
    config: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    flows: list = field(default_factory=list)
    detector: Optional[list] = None
    results: Optional[dict] = None
    run_timestamp: Optional[str] = None

    def to_dict(self) -> dict:
        doc = {"schema": SCHEMA, "schema_version": SCHEMA_VERSION}
        doc.update(asdict(self))
        return _encode(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunReport":
        if doc.get("schema") != SCHEMA:
            raise ValueError(f"not a run report (schema={doc.get('schema')!r})")
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {doc.get('schema_version')!r}")
        body = {k: v for k, v in doc.items() if k not in ("schema", "schema_version")}
        return cls(**_decode(body))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


# JSON has no infinity; encode non-finite floats as tagged strings.
def _encode(obj: Any) -> Any:
    if isinstance(obj, float) and not math.isfinite(obj):
        return {"non_finite": "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")}
    if isinstance(obj, dict):
        return {str(k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    return obj


def _decode(obj: Any) -> Any:
    if isinstance(obj, dict):
        if set(obj) == {"non_finite"}:
            return float(obj["non_finite"])
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    return obj


def write_report(report: RunReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.dumps())


def read_report(path) -> RunReport:
    with open(path, encoding="utf-8") as fh:
        return RunReport.from_dict(json.load(fh))


def without_run_timestamp(doc: dict) -> dict:
    return {k: v for k, v in doc.items() if k != "run_timestamp"}
