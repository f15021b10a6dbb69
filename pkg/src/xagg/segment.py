"""Superpixel (SLIC) and square-grid partitions of an image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage import segmentation

_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class SegmentMap:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or not np.issubdtype(labels.dtype, np.integer):
            raise ValueError("segment labels must be a 2-d integer array")
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def n_segments(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def shape(self):
        return self.labels.shape


def check_segment_map(seg: SegmentMap) -> None:
    """Raise if labels are not contiguous 0..S-1 or a segment is not 4-connected."""
    labels = seg.labels
    present = np.unique(labels)
    if present[0] != 0 or not np.array_equal(present, np.arange(len(present))):
        raise ValueError("labels are not contiguous from 0")
    for s in present:
        _, count = ndimage.label(labels == s, structure=_FOUR)
        if count != 1:
            raise ValueError(f"segment {s} has {count} components")


def grid_segments(shape, cell: int) -> SegmentMap:
    """Row-major square tiling; cells on the right and bottom edges are truncated."""
    if cell < 1:
        raise ValueError("cell must be >= 1")
    h, w = shape[-2:]
    cols = -(-w // cell)
    rr, cc = np.indices((h, w))
    return SegmentMap((rr // cell) * cols + cc // cell)


def enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Keep the largest 4-connected piece of each label; merge the rest into neighbours.

    Each stray piece (smallest first) joins the largest adjacent region.
    Labels are then renumbered in raster order of first appearance.
    """
    comp = np.zeros(labels.shape, dtype=np.int64)
    n_comp = 0
    owner = []
    for s in np.unique(labels):
        lab, count = ndimage.label(labels == s, structure=_FOUR)
        comp[lab > 0] = lab[lab > 0] + n_comp
        owner.extend([s] * count)
        n_comp += count
    comp -= 1
    sizes = np.bincount(comp.ravel(), minlength=n_comp)
    owner = np.array(owner)
    keep = np.zeros(n_comp, dtype=bool)
    for s in np.unique(owner):
        ids = np.flatnonzero(owner == s)
        keep[ids[np.argmax(sizes[ids])]] = True

    # adjacency between components
    pairs = set()
    for a, b in ((comp[:, :-1], comp[:, 1:]), (comp[:-1, :], comp[1:, :])):
        diff = a != b
        for u, v in zip(a[diff].tolist(), b[diff].tolist()):
            pairs.add((u, v))
            pairs.add((v, u))
    neighbours = [set() for _ in range(n_comp)]
    for u, v in pairs:
        neighbours[u].add(v)

    parent = np.arange(n_comp)

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    size = sizes.copy()
    # only regions holding a kept piece may absorb; strays with no such
    # neighbour wait until one of their neighbours has been absorbed
    pending = sorted(np.flatnonzero(~keep), key=lambda i: (sizes[i], i))
    while pending:
        waiting = []
        for c in pending:
            cands = {find(v) for v in neighbours[c]}
            cands = [r for r in cands if keep[r]]
            if not cands:
                waiting.append(c)
                continue
            target = max(cands, key=lambda r: (size[r], -r))
            parent[c] = target
            size[target] += size[c]
        if len(waiting) == len(pending):
            break
        pending = waiting
    roots = np.array([find(i) for i in range(n_comp)])
    merged = roots[comp]
    _, first = np.unique(merged.ravel(), return_index=True)
    order = np.unique(merged.ravel())[np.argsort(first)]
    remap = np.empty(merged.max() + 1, dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[merged]


def slic(x, n_segments: int = 49, compactness: float = 0.1, max_iters: int = 10, seed: int = 0) -> SegmentMap:
    """Grayscale SLIC superpixels with orphan pieces merged into their largest neighbour.

    Clustering is scikit-image's SLIC (regular grid start, intensity plus
    scaled position).  It is deterministic, so ``seed`` has no effect; it is
    accepted for interface symmetry.
    """
    img = np.asarray(x, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    h, w = img.shape
    if not 1 <= n_segments <= h * w:
        raise ValueError(f"n_segments must be in [1, {h * w}], got {n_segments}")
    labels = segmentation.slic(img, n_segments=n_segments, compactness=compactness, max_num_iter=max_iters,
                               channel_axis=None, start_label=0, enforce_connectivity=False)
    return SegmentMap(enforce_connectivity(labels))
