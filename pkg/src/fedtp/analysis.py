"""Attention rollout, cross-client map divergence, and artifact export."""

from __future__ import annotations

import csv
import itertools
import json
import math
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

FILTER_FRACTION = 0.3
METRICS_HEADER = ["round", "client_id", "train_loss", "test_acc", "weighted_acc"]


class RolloutError(ValueError):
    pass


def fuse_heads(block: np.ndarray, mode: str = "max") -> np.ndarray:
    if mode == "max":
        return block.max(axis=0)
    if mode == "mean":
        return block.mean(axis=0)
    raise RolloutError(f"unknown head fusion {mode!r}")


def filter_smallest(a: np.ndarray, fraction: float = FILTER_FRACTION) -> np.ndarray:
    """Zero the ``floor(fraction * a.size)`` smallest entries.

    Ties at the cutoff go to the lower flat index.
    """
    k = int(math.floor(fraction * a.size + 1e-9))
    out = a.copy()
    if k:
        flat = out.reshape(-1)
        flat[np.argsort(flat, kind="stable")[:k]] = 0.0
    return out


def add_residual(a: np.ndarray) -> np.ndarray:
    """``0.5 A + 0.5 I`` with rows renormalized to sum to one."""
    r = 0.5 * a + 0.5 * np.eye(a.shape[0])
    return r / r.sum(axis=-1, keepdims=True)


def minmax(v: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant input maps to all ones."""
    lo, hi = float(v.min()), float(v.max())
    if hi - lo <= 0:
        return np.ones_like(v, dtype=float)
    return (v - lo) / (hi - lo)


def attention_rollout(
    trace: Sequence[np.ndarray],
    grid: tuple[int, int] | None = None,
    num_blocks: int | None = None,
    filter_fraction: float = FILTER_FRACTION,
    head_fusion: str = "max",
    cls_token: bool = True,
) -> np.ndarray:
    """Patch saliency map from one sample's per-block attention.

    ``trace`` holds one ``heads x m x m`` array per block. Per block the
    heads are fused by elementwise max, the smallest ``filter_fraction`` of
    entries are zeroed, the residual path is added and rows renormalized;
    the block matrices are then multiplied in depth order. The class-token
    row (or the mean row under mean pooling) is reshaped to ``grid`` and
    min-max normalized.
    """
    if not trace:
        raise RolloutError("empty attention trace")
    if num_blocks is not None and len(trace) != num_blocks:
        raise RolloutError(f"trace has {len(trace)} blocks, expected {num_blocks}")
    m = trace[0].shape[-1]
    result = np.eye(m)
    for b, block in enumerate(trace):
        block = np.asarray(block, dtype=float)
        if block.ndim == 2:
            block = block[None]
        if block.ndim != 3 or block.shape[1:] != (m, m):
            raise RolloutError(f"block {b} has shape {block.shape}, expected heads x {m} x {m}")
        a = fuse_heads(block, head_fusion)
        if filter_fraction:
            a = filter_smallest(a, filter_fraction)
        result = add_residual(a) @ result
    row = result[0, 1:] if cls_token else result.mean(axis=0)
    n = row.size
    if grid is None:
        side = int(round(math.sqrt(n)))
        if side * side != n:
            raise RolloutError(f"cannot infer a square grid for {n} patches")
        grid = (side, side)
    return minmax(row.reshape(grid))


def map_divergence(maps: Sequence[np.ndarray]) -> float:
    """Mean L2 distance over unordered pairs of maps."""
    if len(maps) < 2:
        raise RolloutError("need at least two maps")
    shape = np.shape(maps[0])
    for mp in maps:
        if np.shape(mp) != shape:
            raise RolloutError(f"map grids differ: {np.shape(mp)} vs {shape}")
    dists = [float(np.linalg.norm(np.asarray(a) - np.asarray(b))) for a, b in itertools.combinations(maps, 2)]
    return float(np.mean(dists))


def pgm_bytes(saliency: np.ndarray) -> bytes:
    """Binary PGM (P5) with 8-bit values ``round(255 * s)``, halves rounded up."""
    s = np.asarray(saliency, dtype=float)
    if s.ndim != 2:
        raise ValueError("saliency map must be 2-D")
    px = np.floor(np.clip(s, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return format(float(x), ".10g")


def summary_row(report) -> list[str]:
    losses = report.train_loss
    loss = float(np.mean(list(losses.values()))) if losses else None
    acc = float(np.mean(list(report.test_acc.values()))) if report.test_acc else None
    return [str(report.round), "all", _fmt(loss), _fmt(acc), _fmt(report.weighted_acc)]


def write_metrics(path, reports) -> None:
    """One summary row per round: mean sampled train loss, mean client accuracy, pooled accuracy."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in reports:
            w.writerow(summary_row(r))


def write_client_metrics(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in reports:
            ids = sorted(set(r.train_loss) | set(r.test_acc))
            for i in ids:
                w.writerow([r.round, i, _fmt(r.train_loss.get(i)), _fmt(r.test_acc.get(i)), _fmt(r.weighted_acc)])


def write_embeddings(path, embeddings: Sequence[np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        dim = len(embeddings[0]) if len(embeddings) else 0
        w.writerow(["client_id"] + [f"e{j}" for j in range(dim)])
        for i, z in enumerate(embeddings):
            w.writerow([i] + [repr(float(v)) for v in z])


def export_artifacts(
    run_dir,
    reports=(),
    embeddings: Sequence[np.ndarray] | None = None,
    maps: Mapping[str, np.ndarray] | None = None,
    config: dict | None = None,
) -> list[Path]:
    """Write metrics CSVs, round log, config echo, embeddings and PGM maps."""
    run_dir = Path(run_dir)
    written = []
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        if reports:
            write_metrics(run_dir / "metrics.csv", reports)
            write_client_metrics(run_dir / "client_metrics.csv", reports)
            with open(run_dir / "rounds.jsonl", "w") as fh:
                for r in reports:
                    fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
            written += [run_dir / "metrics.csv", run_dir / "client_metrics.csv", run_dir / "rounds.jsonl"]
        if config is not None:
            (run_dir / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True))
            written.append(run_dir / "config.json")
        if embeddings:
            write_embeddings(run_dir / "embeddings.csv", embeddings)
            written.append(run_dir / "embeddings.csv")
        if maps:
            (run_dir / "maps").mkdir(exist_ok=True)
            for name, mp in maps.items():
                p = run_dir / "maps" / f"{name}.pgm"
                p.write_bytes(pgm_bytes(mp))
                written.append(p)
    except OSError as err:
        raise OSError(f"failed writing artifacts under {run_dir}: {err}") from err
    return written
