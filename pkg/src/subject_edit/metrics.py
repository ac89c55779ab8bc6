"""Frame/prompt/reference similarity scores on a 0-100 scale, and the report writer."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .types import FrameVideo

CSV_COLUMNS = ("method", "text_alignment", "image_alignment", "temporal_consistency")
DISPLAY_COLUMNS = ("Text Alignment", "Image Alignment", "Temporal Consistency")
MISSING_CELL = "\\"


class EmbedderInterface(Protocol):
    """Joint text/image embedder; both heads return vectors of one shared dimension."""

    def embed_image(self, frame: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    norm = np.linalg.norm(v)
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("embedding has zero or non-finite norm")
    return v / norm


def cosine_score(u: np.ndarray, v: np.ndarray) -> float:
    # Chord form: identical directions give exactly 100.0.
    a, b = _unit(u), _unit(v)
    return 100.0 * (1.0 - float(np.sum((a - b) ** 2)) / 2.0)


class ToyJointEmbedder:
    """Frozen random projection of area-pooled pixels, plus a bag of hashed tokens for text."""

    def __init__(self, dim: int = 64, grid: int = 8, seed: int = 0):
        self.dim, self.grid, self.seed = dim, grid, seed
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((grid * grid * 3, dim)) / math.sqrt(grid * grid * 3)

    def _pool(self, frame: np.ndarray) -> np.ndarray:
        frame = np.asarray(frame, dtype=np.float64)
        h, w, _ = frame.shape
        rows = np.array_split(np.arange(h), self.grid)
        cols = np.array_split(np.arange(w), self.grid)
        pooled = np.empty((self.grid, self.grid, 3))
        for i, r in enumerate(rows):
            for j, c in enumerate(cols):
                pooled[i, j] = frame[r[0]:r[-1] + 1, c[0]:c[-1] + 1].mean(axis=(0, 1))
        return pooled.ravel()

    def embed_image(self, frame: np.ndarray) -> np.ndarray:
        # Centering keeps the embedding from being dominated by mean brightness.
        return _unit((self._pool(frame) - 0.5) @ self.projection)

    def embed_text(self, text: str) -> np.ndarray:
        tokens = text.lower().split()
        if not tokens:
            raise ValueError("empty text")
        acc = np.zeros(self.dim)
        for tok in tokens:
            digest = hashlib.blake2b(f"{self.seed}:{tok}".encode(), digest_size=8).digest()
            acc += np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(self.dim)
        return _unit(acc)


def _frames(v: FrameVideo | np.ndarray) -> np.ndarray:
    return v.frames if isinstance(v, FrameVideo) else np.asarray(v)


def text_alignment(frames: FrameVideo, prompt: str, emb: EmbedderInterface) -> float:
    f = _frames(frames)
    if len(f) < 1:
        raise ValueError("need at least one frame")
    t = emb.embed_text(prompt)
    return float(np.mean([cosine_score(emb.embed_image(x), t) for x in f]))


def image_alignment(frames: FrameVideo, refs: FrameVideo, emb: EmbedderInterface) -> float:
    f, r = _frames(frames), _frames(refs)
    if len(f) < 1 or len(r) < 1:
        raise ValueError("need at least one frame and one reference")
    ef = [emb.embed_image(x) for x in f]
    er = [emb.embed_image(x) for x in r]
    return float(np.mean([cosine_score(a, b) for a in ef for b in er]))


def temporal_consistency(frames: FrameVideo, emb: EmbedderInterface) -> float:
    f = _frames(frames)
    if len(f) < 2:
        raise ValueError(f"temporal consistency needs at least 2 frames, got {len(f)}")
    e = [emb.embed_image(x) for x in f]
    return float(np.mean([cosine_score(a, b) for a, b in zip(e[:-1], e[1:])]))


@dataclass(frozen=True)
class MetricRow:
    method: str
    text_alignment: float | None
    image_alignment: float | None
    temporal_consistency: float | None
    group: str = ""  # section heading in the rendered table; not part of the CSV

    def cells(self) -> tuple[float | None, float | None, float | None]:
        return self.text_alignment, self.image_alignment, self.temporal_consistency


def default_group(row: MetricRow) -> str:
    return "Reference image guided editing" if row.image_alignment is not None else "Text guided editing"


def rows_to_csv(rows: Sequence[MetricRow]) -> str:
    if not rows:
        raise ValueError("report needs at least one row")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        # repr keeps every float bit so the CSV round-trips exactly
        writer.writerow([row.method, *("" if v is None else repr(float(v)) for v in row.cells())])
    return buf.getvalue()


def rows_from_csv(text: str) -> list[MetricRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != CSV_COLUMNS:
        raise ValueError(f"expected header {','.join(CSV_COLUMNS)}, got {header}")
    rows = []
    for rec in reader:
        if len(rec) != len(CSV_COLUMNS):
            raise ValueError(f"malformed row {rec}")
        vals = [None if c == "" else float(c) for c in rec[1:]]
        rows.append(MetricRow(rec[0], *vals))
    return rows


def render_table(rows: Sequence[MetricRow], title: str = "") -> str:
    if not rows:
        raise ValueError("report needs at least one row")
    header = ("Method", *DISPLAY_COLUMNS)
    groups: dict[str, list[MetricRow]] = {}
    for row in rows:
        groups.setdefault(row.group or default_group(row), []).append(row)

    def fmt(v: float | None) -> str:
        return MISSING_CELL if v is None else f"{v:.2f}"

    body = {g: [(r.method, *map(fmt, r.cells())) for r in rs] for g, rs in groups.items()}
    widths = [len(h) for h in header]
    for lines in body.values():
        for line in lines:
            widths = [max(w, len(c)) for w, c in zip(widths, line)]

    def line(cells: Iterable[str]) -> str:
        cells = list(cells)
        first = cells[0].ljust(widths[0])
        return " | ".join([first, *(c.rjust(w) for c, w in zip(cells[1:], widths[1:]))])

    rule = "-+-".join("-" * w for w in widths)
    out = [title] if title else []
    out += [line(header), rule]
    for g, lines in body.items():
        out.append(f"[{g}]")
        out += [line(l) for l in lines]
    return "\n".join(out) + "\n"


def evaluation_report(rows: Sequence[MetricRow], out_dir: str | Path, stem: str = "metrics",
                      title: str = "") -> tuple[Path, Path]:
    """Write `<stem>.csv` and the rendered `<stem>.txt`; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.txt"
    csv_path.write_text(rows_to_csv(rows))
    txt_path.write_text(render_table(rows, title))
    return csv_path, txt_path
