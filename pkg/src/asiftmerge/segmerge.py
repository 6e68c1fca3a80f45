"""Keypoint-seeded maximal-similarity region merging.

The flow is: mean-shift initial over-segmentation, 512-bin RGB histograms
per region, seeding (regions holding matched keypoints are object, seedless
regions on the image frame are background, the rest unlabeled), then
iterated merging in which an unlabeled region joins the neighbour whose
histogram is closest to its own. Whatever stays unlabeled at the end is
object.

Histogram distance is a dissimilarity: the merge rule picks the *minimum*
distance, i.e. the most similar neighbour.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ImageTooSmallError, InvariantError, NoObjectSeedError

N_BINS = 512
TIE_EPS = 1e-12
MIN_SEGMENT_DIM = 16


class Metric(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    CITYBLOCK = "cityblock"


class RegionLabel(enum.IntEnum):
    NONE = 0
    OBJECT = 1
    BACKGROUND = 2


@dataclass(frozen=True)
class MergeParams:
    metric: Metric = Metric.EUCLIDEAN
    spatial_bandwidth: float = 8.0
    range_bandwidth: float = 6.0
    min_region_px: int = 20
    min_seed_keypoints: int = 1
    # histogram source: original pixels (default) or mean-shift filtered colors
    filtered_histograms: bool = False
    max_shift_iters: int = 20
    shift_epsilon: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))
        if min(self.spatial_bandwidth, self.range_bandwidth, self.min_region_px,
               self.min_seed_keypoints, self.max_shift_iters, self.shift_epsilon) <= 0:
            raise ValueError("merge parameters must be positive")


@dataclass
class Segmentation:
    labels: np.ndarray                  # (h, w) region id per pixel
    region_count: int
    filtered: np.ndarray | None = field(default=None, repr=False)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


# --------------------------------------------------------------------------
# initial segmentation

def _window_offsets(hs: float):
    r = math.ceil(hs) + 1
    offs = []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            # the mode may sit up to half a pixel from the rounded centre
            ex = max(abs(dx) - 0.5, 0.0)
            ey = max(abs(dy) - 0.5, 0.0)
            if ex * ex + ey * ey <= hs * hs:
                offs.append((dy, dx))
    return offs


def mean_shift_filter(img: np.ndarray, hs: float, hr: float, max_iter: int = 20,
                      eps: float = 0.1) -> np.ndarray:
    """Joint spatial-range mean-shift filtering with a uniform kernel.

    Every pixel seeks the mode of the pixels inside the unit ball of
    ``(dx/hs, dy/hs, dcolor/hr)``; the output is the color of that mode.
    """
    h, w, _ = img.shape
    col = img.reshape(-1, 3).astype(np.float64)
    cr, cg, cb = col[:, 0].copy(), col[:, 1].copy(), col[:, 2].copy()
    yy, xx = np.divmod(np.arange(h * w), w)
    pos_x = xx.astype(np.float64)
    pos_y = yy.astype(np.float64)
    cur = col.copy()
    active = np.arange(h * w)
    offsets = _window_offsets(hs)
    inv_hs2 = 1.0 / (hs * hs)
    inv_hr2 = 1.0 / (hr * hr)

    for _ in range(max_iter):
        if active.size == 0:
            break
        ax, ay = pos_x[active], pos_y[active]
        ar, ag, ab = cur[active, 0], cur[active, 1], cur[active, 2]
        rx = np.rint(ax).astype(np.intp)
        ry = np.rint(ay).astype(np.intp)
        n = np.zeros(active.size)
        sx = np.zeros(active.size)
        sy = np.zeros(active.size)
        sr = np.zeros(active.size)
        sg = np.zeros(active.size)
        sb = np.zeros(active.size)
        for dy, dx in offsets:
            nx = rx + dx
            ny = ry + dy
            ok = (nx >= 0) & (nx < w) & (ny >= 0) & (ny < h)
            idx = np.where(ok, ny * w + nx, 0)
            vr, vg, vb = cr[idx], cg[idx], cb[idx]
            d = (((nx - ax) ** 2 + (ny - ay) ** 2) * inv_hs2
                 + ((vr - ar) ** 2 + (vg - ag) ** 2 + (vb - ab) ** 2) * inv_hr2)
            m = ok & (d <= 1.0)
            n += m
            sx += np.where(m, nx, 0)
            sy += np.where(m, ny, 0)
            sr += np.where(m, vr, 0)
            sg += np.where(m, vg, 0)
            sb += np.where(m, vb, 0)
        has = n > 0
        safe = np.where(has, n, 1)
        new_x = np.where(has, sx / safe, ax)
        new_y = np.where(has, sy / safe, ay)
        new_r = np.where(has, sr / safe, ar)
        new_g = np.where(has, sg / safe, ag)
        new_b = np.where(has, sb / safe, ab)
        shift = np.sqrt((new_x - ax) ** 2 + (new_y - ay) ** 2 + (new_r - ar) ** 2
                        + (new_g - ag) ** 2 + (new_b - ab) ** 2)
        pos_x[active], pos_y[active] = new_x, new_y
        cur[active, 0], cur[active, 1], cur[active, 2] = new_r, new_g, new_b
        active = active[shift >= eps]
    return cur.reshape(h, w, 3)


def _relabel_raster_order(labels: np.ndarray) -> tuple[np.ndarray, int]:
    flat = labels.ravel()
    uniq, first = np.unique(flat, return_index=True)
    order = uniq[np.argsort(first)]
    lut = np.empty(int(uniq.max()) + 1, dtype=np.int64)
    lut[order] = np.arange(len(order))
    return lut[flat].reshape(labels.shape), len(order)


def _adjacent_pairs(labels: np.ndarray) -> np.ndarray:
    """Unique unordered pairs ``(a, b)``, ``a < b``, of 4-adjacent labels."""
    pairs = []
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        pairs.append(np.stack([np.minimum(a[diff], b[diff]), np.maximum(a[diff], b[diff])], 1))
    p = np.concatenate(pairs)
    if len(p) == 0:
        return p.reshape(0, 2)
    return np.unique(p, axis=0)


def _tolerance_components(filtered: np.ndarray, tol: float) -> np.ndarray:
    h, w, _ = filtered.shape
    ids = np.arange(h * w).reshape(h, w)
    rows, cols = [], []
    horiz = np.all(np.abs(filtered[:, 1:] - filtered[:, :-1]) <= tol, axis=2)
    vert = np.all(np.abs(filtered[1:, :] - filtered[:-1, :]) <= tol, axis=2)
    rows += [ids[:, :-1][horiz], ids[:-1, :][vert]]
    cols += [ids[:, 1:][horiz], ids[1:, :][vert]]
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    graph = coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(h * w, h * w))
    _, comp = connected_components(graph, directed=False)
    return comp.reshape(h, w)


def _absorb_small(labels: np.ndarray, filtered: np.ndarray, min_px: int) -> np.ndarray:
    """Merge every region below ``min_px`` into its closest-mean-color neighbour."""
    n = int(labels.max()) + 1
    flat = labels.ravel()
    size = np.bincount(flat, minlength=n).astype(np.int64)
    csum = np.stack([np.bincount(flat, weights=filtered[..., c].ravel(), minlength=n)
                     for c in range(3)], 1)
    adj: list[set] = [set() for _ in range(n)]
    for a, b in _adjacent_pairs(labels):
        adj[a].add(int(b))
        adj[b].add(int(a))
    parent = np.arange(n)
    heap = [(int(size[i]), i) for i in range(n) if 0 < size[i] < min_px]
    heapq.heapify(heap)
    while heap:
        sz, r = heapq.heappop(heap)
        if parent[r] != r or size[r] != sz or sz >= min_px or not adj[r]:
            continue
        mean = csum[r] / size[r]
        best = min(adj[r], key=lambda j: (float(np.sum((csum[j] / size[j] - mean) ** 2)), j))
        parent[r] = best
        size[best] += size[r]
        csum[best] += csum[r]
        for j in adj[r]:
            adj[j].discard(r)
            if j != best:
                adj[j].add(best)
                adj[best].add(j)
        adj[r] = set()
        if size[best] < min_px:
            heapq.heappush(heap, (int(size[best]), best))
    # resolve chains of absorbed regions
    for i in range(n):
        root = i
        while parent[root] != root:
            root = parent[root]
        parent[i] = root
    return parent[labels]


def initial_segment(img: np.ndarray, p: MergeParams = MergeParams()) -> Segmentation:
    """Mean-shift over-segmentation into 4-connected regions numbered in raster order."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    if h < MIN_SEGMENT_DIM or w < MIN_SEGMENT_DIM:
        raise ImageTooSmallError(f"segmentation needs at least {MIN_SEGMENT_DIM}x{MIN_SEGMENT_DIM}")
    filtered = mean_shift_filter(img, p.spatial_bandwidth, p.range_bandwidth,
                                 p.max_shift_iters, p.shift_epsilon)
    comp = _tolerance_components(filtered, p.range_bandwidth)
    comp, _ = _relabel_raster_order(comp)
    comp = _absorb_small(comp, filtered, p.min_region_px)
    labels, count = _relabel_raster_order(comp)
    return Segmentation(labels, count, filtered)


# --------------------------------------------------------------------------
# histograms and distance

def color_bins(img: np.ndarray) -> np.ndarray:
    """512-bin index of every pixel: 8 uniform levels per RGB channel."""
    q = np.asarray(img).astype(np.int64) // 32
    return q[..., 0] * 64 + q[..., 1] * 8 + q[..., 2]


def histogram_counts(labels: np.ndarray, img: np.ndarray, n_regions: int) -> np.ndarray:
    """Raw ``(n_regions, 512)`` pixel counts per region and bin."""
    idx = labels.ravel().astype(np.int64) * N_BINS + color_bins(img).ravel()
    return np.bincount(idx, minlength=n_regions * N_BINS).reshape(n_regions, N_BINS)


def region_histogram(seg: Segmentation, region_id: int, img: np.ndarray) -> np.ndarray:
    sel = seg.labels == region_id
    if not sel.any():
        raise KeyError(f"region {region_id} does not exist")
    counts = np.bincount(color_bins(np.asarray(img)[sel]), minlength=N_BINS)
    return counts / counts.sum()


def similarity(a: np.ndarray, b: np.ndarray, metric: Metric = Metric.EUCLIDEAN) -> float:
    """Histogram distance; 0 for identical histograms, larger means less similar."""
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if Metric(metric) is Metric.CITYBLOCK:
        return float(np.sum(np.abs(diff)))
    return float(np.sqrt(np.sum(diff * diff)))


# --------------------------------------------------------------------------
# region adjacency graph

class RegionAdjacencyGraph:
    """Mutable region graph; merged nodes keep the absorbing region's id."""

    def __init__(self, seg: Segmentation, counts: np.ndarray, labels: Sequence[RegionLabel],
                 seeds: Sequence[int], pairs: Iterable, metric: Metric = Metric.EUCLIDEAN):
        n = seg.region_count
        self.segmentation = seg
        self.metric = Metric(metric)
        self.counts = {i: counts[i].astype(np.int64) for i in range(n)}
        self.size = {i: int(counts[i].sum()) for i in range(n)}
        self.label = {i: RegionLabel(labels[i]) for i in range(n)}
        self.seeds = {i: int(seeds[i]) for i in range(n)}
        self.adj: dict[int, set] = {i: set() for i in range(n)}
        for a, b in pairs:
            a, b = int(a), int(b)
            if a != b:
                self.adj[a].add(b)
                self.adj[b].add(a)
        self.owner = np.arange(n)
        self.initial_count = n
        self.merge_events = 0
        self._dist: dict[tuple[int, int], float] = {}

    def __len__(self) -> int:
        return len(self.counts)

    def __contains__(self, node: int) -> bool:
        return node in self.counts

    def hist(self, node: int) -> np.ndarray:
        return self.counts[node] / self.size[node]

    def distance(self, a: int, b: int) -> float:
        key = (a, b) if a < b else (b, a)
        d = self._dist.get(key)
        if d is None:
            d = self._dist[key] = similarity(self.hist(a), self.hist(b), self.metric)
        return d

    def most_similar_neighbor(self, node: int) -> int | None:
        """Neighbour at minimal histogram distance; ties go to the lower id."""
        nbrs = self.adj[node]
        if not nbrs:
            return None
        dists = {j: self.distance(node, j) for j in nbrs}
        lo = min(dists.values())
        return min(j for j, d in dists.items() if d <= lo + TIE_EPS)

    def nodes_with(self, label: RegionLabel) -> list[int]:
        return sorted(i for i, lab in self.label.items() if lab == label)

    def merge(self, keep: int, gone: int) -> None:
        """Fold region ``gone`` into ``keep``; only unlabeled regions may be absorbed."""
        if gone not in self.adj[keep]:
            raise InvariantError(f"merging non-adjacent regions {keep} and {gone}")
        if self.label[gone] != RegionLabel.NONE or self.label[keep] == RegionLabel.OBJECT:
            raise InvariantError(
                f"illegal merge {self.label[gone].name} -> {self.label[keep].name}")
        self.counts[keep] = self.counts[keep] + self.counts.pop(gone)
        self.size[keep] += self.size.pop(gone)
        self.seeds[keep] += self.seeds.pop(gone)
        del self.label[gone]
        for j in self.adj.pop(gone):
            self.adj[j].discard(gone)
            if j != keep:
                self.adj[j].add(keep)
                self.adj[keep].add(j)
        self.owner[self.owner == gone] = keep
        for j in list(self.adj[keep]) + [gone]:
            self._dist.pop((keep, j) if keep < j else (j, keep), None)
        self.merge_events += 1
        if self.merge_events > self.initial_count - 1 or len(self) != self.initial_count - self.merge_events:
            raise InvariantError("merge bookkeeping out of step")

    def pixel_labels(self) -> np.ndarray:
        """Current node id of every pixel."""
        return self.owner[self.segmentation.labels]

    def mask(self, label: RegionLabel = RegionLabel.OBJECT) -> np.ndarray:
        node_label = np.zeros(self.initial_count, dtype=np.int64)
        for i in range(self.initial_count):
            node_label[i] = self.label[int(self.owner[i])]
        return node_label[self.segmentation.labels] == label


def _seed_counts(seg: Segmentation, points) -> np.ndarray:
    seeds = np.zeros(seg.region_count, dtype=np.int64)
    for pt in points:
        x = min(max(int(round(pt[0])), 0), seg.width - 1)
        y = min(max(int(round(pt[1])), 0), seg.height - 1)
        seeds[seg.labels[y, x]] += 1
    return seeds


def border_regions(seg: Segmentation) -> np.ndarray:
    lab = seg.labels
    frame = np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]])
    touch = np.zeros(seg.region_count, dtype=bool)
    touch[np.unique(frame)] = True
    return touch


def seed_labels(seg: Segmentation, img: np.ndarray, points, p: MergeParams = MergeParams()
                ) -> RegionAdjacencyGraph:
    """Label regions from matched points and the image frame, and build the graph.

    Raises :class:`NoObjectSeedError` when no region holds enough points.
    """
    seeds = _seed_counts(seg, points)
    touch = border_regions(seg)
    labels = np.full(seg.region_count, RegionLabel.NONE)
    labels[touch & (seeds == 0)] = RegionLabel.BACKGROUND
    labels[seeds >= p.min_seed_keypoints] = RegionLabel.OBJECT
    if not np.any(labels == RegionLabel.OBJECT):
        raise NoObjectSeedError("no region holds a matched keypoint")
    source = seg.filtered if (p.filtered_histograms and seg.filtered is not None) else img
    if source is seg.filtered:
        source = np.clip(np.rint(source), 0, 255).astype(np.uint8)
    counts = histogram_counts(seg.labels, source, seg.region_count)
    return RegionAdjacencyGraph(seg, counts, labels, seeds, _adjacent_pairs(seg.labels), p.metric)


# --------------------------------------------------------------------------
# merging

def _background_stage(g: RegionAdjacencyGraph) -> bool:
    merged = False
    while True:
        changed = False
        for b in g.nodes_with(RegionLabel.BACKGROUND):
            for y in sorted(j for j in g.adj[b] if g.label[j] == RegionLabel.NONE):
                if g.most_similar_neighbor(y) == b:
                    g.merge(b, y)
                    changed = True
        if not changed:
            return merged
        merged = True


def _unlabeled_stage(g: RegionAdjacencyGraph) -> bool:
    merged = False
    while True:
        changed = False
        for x in g.nodes_with(RegionLabel.NONE):
            if x not in g:
                continue
            for y in sorted(j for j in g.adj[x] if g.label[j] == RegionLabel.NONE):
                if y in g.adj[x] and g.most_similar_neighbor(y) == x:
                    g.merge(x, y)
                    changed = True
        if not changed:
            return merged
        merged = True


def merge_regions(g: RegionAdjacencyGraph, p: MergeParams | None = None) -> np.ndarray:
    """Run the two merging stages to a fixpoint and return the object mask.

    Stage one lets each background region absorb unlabeled neighbours that
    are most similar to it; stage two does the same among unlabeled regions.
    The stages alternate until neither merges anything, then every remaining
    unlabeled region becomes object. ``g`` is modified in place.
    """
    if p is not None and p.metric != g.metric:
        g.metric = p.metric
        g._dist.clear()
    if RegionLabel.OBJECT not in g.label.values():
        raise NoObjectSeedError("graph has no object region")
    while True:
        a = _background_stage(g)
        b = _unlabeled_stage(g)
        if not (a or b):
            break
    for i, lab in g.label.items():
        if lab == RegionLabel.NONE:
            g.label[i] = RegionLabel.OBJECT
    return g.mask(RegionLabel.OBJECT)


# --------------------------------------------------------------------------
# boundaries

# clockwise on screen (y grows downward), starting west
_MOORE = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)]


def _trace(comp: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    h, w = comp.shape

    def fg(x, y):
        return 0 <= x < w and 0 <= y < h and comp[y, x]

    p = start
    back = 0  # start is first in raster order, so its west neighbour is background
    contour = [p]
    seen_states = set()
    while True:
        nxt = None
        for k in range(1, 9):
            d = (back + k) % 8
            q = (p[0] + _MOORE[d][0], p[1] + _MOORE[d][1])
            if fg(*q):
                prev = _MOORE[(back + k - 1) % 8]
                rel = (p[0] + prev[0] - q[0], p[1] + prev[1] - q[1])
                nxt = (q, _MOORE.index(rel))
                break
        if nxt is None:
            break
        state = (p, nxt)
        if state in seen_states:
            break
        seen_states.add(state)
        p, back = nxt
        contour.append(p)
    # drop repeats: the walk returns to the start and revisits thin parts
    out, seen = [], set()
    for q in contour:
        if q not in seen:
            seen.add(q)
            out.append(q)
    return out


def extract_boundary(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """Clockwise outer contour of every 4-connected foreground component.

    Components are ordered by their first pixel in raster order; each
    contour lists ``(x, y)`` pixels once, starting at that first pixel.
    """
    mask = np.asarray(mask, dtype=bool)
    comps, n = ndimage.label(mask)
    if n == 0:
        return []
    contours = []
    flat = comps.ravel()
    uniq, first = np.unique(flat[flat > 0], return_index=True)
    starts = np.flatnonzero(flat > 0)[first]
    for lab, s in sorted(zip(uniq, starts), key=lambda t: t[1]):
        y, x = divmod(int(s), mask.shape[1])
        contours.append(_trace(comps == lab, (x, y)))
    return contours


def format_contours(contours) -> str:
    """One contour per line as comma-separated ``x y`` pairs."""
    return "".join(",".join(f"{x} {y}" for x, y in c) + "\n" for c in contours)
