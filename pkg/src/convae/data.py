"""Drive-cycle containers, file formats, normalization and window sampling.

A cycle is a ``T x F`` matrix sampled every 0.1 s.  On disk each cycle is one
CSV file (header of feature names, one row per step); per-feature maxima
live in a JSON sidecar, and a JSON manifest lists the cycles of a dataset.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, IngestionError, StateError, TooShortError
from .tensor import Tensor

logger = logging.getLogger(__name__)

HEALTHY = "healthy"
FAULTED = "faulted"
LABELS = (HEALTHY, FAULTED)

WINDOW = 128
WIDTH = 64
WINDOWS_PER_CYCLE = 64
CYCLES_PER_BATCH = 4
NORMALIZED_SLACK = 0.05

MANIFEST_NAME = "manifest.json"
MAXIMA_NAME = "maxima.json"


class DataWarning(UserWarning):
    """Normalized values fall outside ``[0, 1 + 0.05]``."""


@dataclass(frozen=True)
class DriveCycle:
    id: str
    label: str
    matrix: np.ndarray
    feature_names: tuple
    feature_maxima: np.ndarray
    normalized: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ContractError(f"cycle matrix must be 2-D, got shape {m.shape}")
        mx = np.array(self.feature_maxima, dtype=np.float64)
        names = tuple(self.feature_names)
        if len(names) != m.shape[1] or mx.shape != (m.shape[1],):
            raise ContractError(
                f"cycle {self.id}: {m.shape[1]} columns, {len(names)} names, {mx.shape} maxima"
            )
        if self.label not in LABELS:
            raise ContractError(f"label must be one of {LABELS}, got {self.label!r}")
        m.setflags(write=False)
        mx.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "feature_maxima", mx)
        object.__setattr__(self, "feature_names", names)

    @property
    def length(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_features(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class SampleWindow:
    """A ``W x F`` crop of a normalized cycle and its zero-padded ``W x width`` form."""

    cycle_id: str
    start_index: int
    matrix: np.ndarray
    padded: np.ndarray
    label: str = HEALTHY


@dataclass(frozen=True)
class Batch:
    samples: tuple
    n_features: int

    @property
    def size(self) -> int:
        return len(self.samples)

    def array(self) -> np.ndarray:
        """Stacked ``(B, W, width, 1)`` array."""
        return np.stack([s.padded for s in self.samples])[..., None]

    def tensor(self, dtype=np.float64) -> Tensor:
        return Tensor(self.array(), dtype=dtype)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def normalize(cycle: DriveCycle) -> DriveCycle:
    """Divide every column by its domain maximum.

    The divisor is the provided maximum, never the observed one.  Applying
    this twice raises :class:`StateError`.
    """
    if cycle.normalized:
        raise StateError(f"cycle {cycle.id} is already normalized")
    mx = cycle.feature_maxima
    if np.any(mx <= 0):
        bad = [cycle.feature_names[i] for i in np.flatnonzero(mx <= 0)]
        raise ConfigurationError(f"non-positive maxima for features {bad}")
    out = cycle.matrix / mx
    if out.size and (out.max() > 1 + NORMALIZED_SLACK or out.min() < -NORMALIZED_SLACK):
        warnings.warn(
            f"cycle {cycle.id}: normalized values span [{out.min():.3f}, {out.max():.3f}]",
            DataWarning,
            stacklevel=2,
        )
    return replace(cycle, matrix=out, normalized=True)


# ---------------------------------------------------------------------------
# windows and batches
# ---------------------------------------------------------------------------


def _pad_width(mat: np.ndarray, width: int) -> np.ndarray:
    if mat.shape[1] > width:
        raise ContractError(f"{mat.shape[1]} features exceed the padded width {width}")
    out = np.zeros((mat.shape[0], width), dtype=mat.dtype)
    out[:, : mat.shape[1]] = mat
    return out


def _make_window(cycle: DriveCycle, start: int, window: int, width: int) -> SampleWindow:
    mat = cycle.matrix[start : start + window]
    return SampleWindow(cycle.id, int(start), mat, _pad_width(mat, width), cycle.label)


def _check_sampleable(cycle: DriveCycle, window: int) -> None:
    if not cycle.normalized:
        raise StateError(f"cycle {cycle.id} must be normalized before sampling")
    if cycle.length < window:
        raise TooShortError(f"cycle {cycle.id} has {cycle.length} steps, window needs {window}")


def sample_windows(
    cycle: DriveCycle,
    window: int = WINDOW,
    count: int = WINDOWS_PER_CYCLE,
    rng: Optional[np.random.Generator] = None,
    width: int = WIDTH,
) -> list[SampleWindow]:
    """Crop ``count`` windows at uniform random starts in ``[0, T - window]``.

    Starts are drawn with replacement, so duplicates are possible.
    """
    _check_sampleable(cycle, window)
    rng = np.random.default_rng() if rng is None else rng
    starts = rng.integers(0, cycle.length - window + 1, size=count)
    return [_make_window(cycle, s, window, width) for s in starts]


def tile_windows(
    cycle: DriveCycle, window: int = WINDOW, stride: Optional[int] = None, width: int = WIDTH
) -> list[SampleWindow]:
    """Contiguous windows starting at 0, stride, 2*stride, ... (stride defaults to window)."""
    _check_sampleable(cycle, window)
    stride = window if stride is None else stride
    return [_make_window(cycle, s, window, width) for s in range(0, cycle.length - window + 1, stride)]


def assemble_batch(
    cycles: Sequence[DriveCycle],
    rng: np.random.Generator,
    windows_per_cycle: int = WINDOWS_PER_CYCLE,
    window: int = WINDOW,
    width: int = WIDTH,
) -> Batch:
    """``windows_per_cycle`` random windows from each cycle, in cycle order."""
    if not cycles:
        raise ContractError("a batch needs at least one cycle")
    n_features = {c.n_features for c in cycles}
    if len(n_features) != 1:
        raise ContractError(f"cycles in a batch disagree on feature count: {sorted(n_features)}")
    samples = []
    for c in cycles:
        samples.extend(sample_windows(c, window, windows_per_cycle, rng, width))
    return Batch(tuple(samples), n_features.pop())


def cycle_groups(n_cycles: int, group: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle cycle indices and cut them into groups of exactly ``group``.

    The permutation is tiled to fill the final group, so every cycle appears
    at least once and all groups have equal size.
    """
    if n_cycles < 1:
        raise ContractError("no cycles to group")
    perm = rng.permutation(n_cycles)
    n_groups = -(-n_cycles // group)
    idx = np.resize(perm, n_groups * group)
    return [idx[i * group : (i + 1) * group] for i in range(n_groups)]


# ---------------------------------------------------------------------------
# feature augmentation and fixed-length chunking
# ---------------------------------------------------------------------------


def augment_features(data: np.ndarray, replicas: int, rng: np.random.Generator) -> np.ndarray:
    """Concatenate ``replicas`` copies of the columns, each copy independently shuffled."""
    if replicas < 1:
        raise ContractError(f"replicas must be >= 1, got {replicas}")
    data = np.asarray(data)
    f = data.shape[1]
    return np.concatenate([data[:, rng.permutation(f)] for _ in range(replicas)], axis=1)


def chunk_windows(data: np.ndarray, chunk: int = 126, target: int = WINDOW) -> np.ndarray:
    """Cut a ``T x F`` series into ``floor(T / chunk)`` chunks, zero-padding time to ``target``.

    Returns an array of shape ``(n_chunks, target, F)``.
    """
    if chunk > target:
        raise ContractError(f"chunk {chunk} longer than target {target}")
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0] // chunk
    out = np.zeros((n, target, data.shape[1]))
    out[:, :chunk] = data[: n * chunk].reshape(n, chunk, data.shape[1])
    return out


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_dataset(
    cycles: Sequence[DriveCycle], seed: int, validation_fraction: float = 0.2
) -> tuple[list[DriveCycle], list[DriveCycle], list[DriveCycle]]:
    """Seeded train/validation split of healthy cycles; faulted cycles form the test set."""
    if not 0.0 <= validation_fraction < 1.0:
        raise ConfigurationError(f"validation_fraction must be in [0, 1), got {validation_fraction}")
    healthy = [c for c in cycles if c.label == HEALTHY]
    faulted = [c for c in cycles if c.label == FAULTED]
    order = np.random.default_rng(seed).permutation(len(healthy))
    n_val = int(round(validation_fraction * len(healthy)))
    if healthy and n_val == len(healthy):
        n_val -= 1
    val = [healthy[i] for i in sorted(order[:n_val])]
    train = [healthy[i] for i in sorted(order[n_val:])]
    return train, val, faulted


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def ingest_csv(
    path,
    schema: Optional[Sequence[str]] = None,
    maxima: Optional[Sequence[float]] = None,
    label: str = HEALTHY,
    cycle_id: Optional[str] = None,
) -> DriveCycle:
    """Read one cycle CSV into a raw (unnormalized) :class:`DriveCycle`.

    ``schema`` fixes the expected column order; ``maxima`` (per column, or a
    name-to-maximum mapping) default to ones.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        if schema is not None:
            schema = list(schema)
            missing = [s for s in schema if s not in header]
            if missing:
                raise IngestionError(f"{path}: missing column(s) {missing}")
            if header != schema:
                raise IngestionError(f"{path}: header {header} does not match schema order {schema}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                for col, v in zip(header, row):
                    try:
                        float(v)
                    except ValueError:
                        raise IngestionError(
                            f"{path}: row {lineno}, column {col!r}: non-numeric value {v!r}"
                        ) from None
    if not rows:
        raise IngestionError(f"{path}: empty cycle (header only)")
    if maxima is None:
        mx = np.ones(len(header))
    elif isinstance(maxima, dict):
        try:
            mx = np.array([maxima[h] for h in header], dtype=np.float64)
        except KeyError as exc:
            raise IngestionError(f"{path}: no maximum for column {exc.args[0]!r}") from None
    else:
        mx = np.asarray(maxima, dtype=np.float64)
    return DriveCycle(cycle_id or path.stem, label, np.array(rows), tuple(header), mx)


def write_csv(cycle: DriveCycle, path) -> None:
    """Write a cycle in the canonical CSV layout (shortest round-trip float repr)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cycle.feature_names)
        for row in cycle.matrix.tolist():
            w.writerow([repr(v) for v in row])


def write_maxima(names: Sequence[str], maxima: Sequence[float], path) -> None:
    data = {n: float(m) for n, m in zip(names, maxima)}
    Path(path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def load_maxima(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"{path}: cannot read maxima: {exc}") from exc
    if not isinstance(data, dict):
        raise IngestionError(f"{path}: maxima must map feature name to maximum")
    return {str(k): float(v) for k, v in data.items()}


def write_dataset(cycles: Sequence[DriveCycle], out_dir, extra: Optional[dict] = None) -> Path:
    """Write cycle CSVs, the maxima sidecar and a manifest into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    names: Iterable[str] = ()
    maxima: Iterable[float] = ()
    for c in cycles:
        fname = f"{c.id}.csv"
        write_csv(c, out / fname)
        entries.append({"id": c.id, "label": c.label, "file": fname, "seed": c.meta.get("seed")})
        names, maxima = c.feature_names, c.feature_maxima
    write_maxima(names, maxima, out / MAXIMA_NAME)
    manifest = {"format": "convae-dataset/1", "maxima": MAXIMA_NAME, "cycles": entries}
    if extra:
        manifest.update(extra)
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_dataset(data_dir, normalized: bool = True) -> list[DriveCycle]:
    """Load every cycle listed in ``data_dir``'s manifest, normalized by default."""
    root = Path(data_dir)
    try:
        manifest = json.loads((root / MANIFEST_NAME).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"{root}: cannot read manifest: {exc}") from exc
    maxima = load_maxima(root / manifest.get("maxima", MAXIMA_NAME))
    cycles = []
    for entry in manifest.get("cycles", []):
        c = ingest_csv(root / entry["file"], maxima=maxima, label=entry["label"], cycle_id=entry["id"])
        if entry.get("seed") is not None:
            c.meta["seed"] = entry["seed"]
        cycles.append(normalize(c) if normalized else c)
    return cycles
