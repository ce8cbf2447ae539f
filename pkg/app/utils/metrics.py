"""
Metrics Stream
Append-only JSON-lines records for training and evaluation runs
"""
import json
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)


def _to_json(value: Any) -> Any:
    if isinstance(value, float) and value != value:
        return "nan"
    if hasattr(value, "item"):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    return value


class MetricsWriter:
    """
    Writes one JSON object per line. Every record carries the step, wallclock
    seconds since the writer was opened and the run's config hash.
    """

    def __init__(self, path: Path, config_hash: str = "", append: bool = True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        self.started = time.monotonic()
        if not append and self.path.exists():
            self.path.unlink()

    def write(self, step: int, **values: Any) -> Dict[str, Any]:
        record = {"step": int(step)}
        record.update({key: _to_json(value) for key, value in values.items()})
        record["wallclock"] = round(time.monotonic() - self.started, 3)
        if self.config_hash:
            record["config_hash"] = self.config_hash
        with self.path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        return record

    def truncate_after(self, step: int) -> None:
        """Drop records past `step`, used when a run resumes from an earlier checkpoint"""
        if not self.path.exists():
            return
        kept = [record for record in read_metrics(self.path) if record.get("step", 0) <= step]
        self.path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in kept), encoding="utf-8")


def read_metrics(path: Path, key: Optional[str] = None) -> List[Dict[str, Any]]:
    """Parse a metrics file; with `key` only records containing it are returned"""
    path = Path(path)
    records = []
    if not path.exists():
        return records
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            logger.warning(f"⚠️ Skipping malformed metrics line {path}:{line_no}: {e}")
            continue
        if key is None or key in record:
            records.append(record)
    return records


def write_json(path: Path, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_to_json), encoding="utf-8")
    return path
