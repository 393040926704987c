"""Trace CSV files: one flow per file, label recoverable from the filename.

Columns are exactly ``time,size,Max_Winc,Mbps,Smoothed,rtt_ms``. A single
``# ccid-trace v1`` comment line precedes the header for format versioning;
readers skip ``#`` lines. Floats are written with ``repr`` so a read/write
cycle reproduces the file byte for byte.

Filenames follow ``<protocol>_<seed>_<timestamp>.csv`` with a lowercase
protocol prefix (``vegas``/``reno``/``cubic``/``bbr``).
"""

from __future__ import annotations

import csv
from pathlib import Path

from .protocols import ProtocolLabel
from .simulate import FeatureRecord, FlowTrace

TRACE_MAGIC = "# ccid-trace v1"
TRACE_COLUMNS = ("time", "size", "Max_Winc", "Mbps", "Smoothed", "rtt_ms")


class TraceFormatError(ValueError):
    pass


def trace_filename(label: ProtocolLabel, seed: int, timestamp: str) -> str:
    return f"{label.value}_{seed}_{timestamp}.csv"


def label_from_filename(path: str | Path) -> ProtocolLabel:
    """Parse the protocol from the filename prefix (text before the first _)."""
    stem = Path(path).name
    prefix = stem.split("_", 1)[0].lower()
    try:
        return ProtocolLabel(prefix)
    except ValueError:
        raise TraceFormatError(
            f"{path}: cannot infer protocol from filename prefix {prefix!r}"
        ) from None


def write_records(records: list[FeatureRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(TRACE_MAGIC + "\n")
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    repr(r.time_s),
                    r.size_bytes,
                    r.max_win_bytes,
                    repr(r.throughput_mbps),
                    repr(r.smoothed_mbps),
                    repr(r.rtt_ms),
                ]
            )


def write_trace(trace: FlowTrace, path: str | Path) -> None:
    write_records(trace.records, path)


def read_records(path: str | Path) -> list[FeatureRecord]:
    """Read a trace CSV, reporting the offending file and line on errors."""
    records = []
    with open(path, "r", newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        if header is None:
            raise TraceFormatError(f"{path}: empty trace file")
        if tuple(header) != TRACE_COLUMNS:
            missing = [c for c in TRACE_COLUMNS if c not in header]
            raise TraceFormatError(
                f"{path}: bad header {header!r}, missing columns {missing}"
            )
        for lineno, row in enumerate(reader, start=3):
            if not row:
                continue
            try:
                records.append(
                    FeatureRecord(
                        time_s=float(row[0]),
                        size_bytes=int(row[1]),
                        max_win_bytes=int(row[2]),
                        throughput_mbps=float(row[3]),
                        smoothed_mbps=float(row[4]),
                        rtt_ms=float(row[5]),
                    )
                )
            except (ValueError, IndexError) as exc:
                raise TraceFormatError(f"{path}: line {lineno}: {exc}") from None
    return records


def discover_traces(directory: str | Path) -> list[tuple[ProtocolLabel, Path]]:
    """All trace CSVs under ``directory``, labeled, in sorted filename order."""
    paths = sorted(Path(directory).glob("*.csv"))
    return [(label_from_filename(p), p) for p in paths]
