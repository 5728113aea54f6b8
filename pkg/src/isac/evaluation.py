"""Benchmark prompts, oracle detection with any-two voting, and accuracies."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np
from scipy import ndimage

from isac.errors import ConfigError
from isac.prompts import render_prompt
from isac.toybench import BACKGROUND, TOY_CATEGORIES

# Countable COCO classes grouped by category, for the full-scale benchmark.
COCO_CATEGORIES = {
    "animal": ["cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe"],
    "vehicle": ["bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat"],
    "sports": [
        "skateboard", "snowboard", "skis", "sports ball", "baseball bat",
        "baseball glove", "tennis racket", "surfboard", "kite", "frisbee",
    ],
    "food": [
        "banana", "apple", "sandwich", "orange", "broccoli",
        "carrot", "hot dog", "pizza", "donut", "cake",
    ],
}


@dataclass(frozen=True)
class Detection:
    cls: int
    box: tuple[int, int, int, int]  # x0, y0, x1, y1 (exclusive ends)
    detector: str = ""

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate box {self.box}")


@dataclass(frozen=True)
class DetectorParams:
    name: str
    min_area: int
    fg_distance: float


DETECTORS = (
    DetectorParams("det-a", 4, 0.15),
    DetectorParams("det-b", 9, 0.25),
    DetectorParams("det-c", 16, 0.35),
)


def detect(image: np.ndarray, palette: np.ndarray, params: DetectorParams, background=BACKGROUND):
    """Connected components of non-background pixels, labelled by palette.

    A pixel is foreground when its color is farther than ``fg_distance``
    from the background; each 4-connected component takes the majority
    nearest-palette class of its pixels.
    """
    palette = np.asarray(palette, dtype=float)
    if palette.ndim != 2 or palette.shape[1] != 3 or len(palette) == 0:
        raise ConfigError("palette must be a non-empty (k, 3) array")
    fg = np.linalg.norm(image - np.asarray(background), axis=-1) > params.fg_distance
    labels, count = ndimage.label(fg)
    nearest = np.argmin(np.linalg.norm(image[..., None, :] - palette, axis=-1), axis=-1)
    out = []
    for comp in range(1, count + 1):
        ys, xs = np.nonzero(labels == comp)
        if len(ys) < params.min_area:
            continue
        votes = np.bincount(nearest[ys, xs], minlength=len(palette))
        box = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
        out.append(Detection(int(np.argmax(votes)), box, params.name))
    return out


def box_iou(a, b) -> float:
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def greedy_match(left, right, iou_threshold=0.5):
    """One-to-one same-class matches, taken in descending IoU order."""
    cand = []
    for i, a in enumerate(left):
        for j, b in enumerate(right):
            if a.cls == b.cls:
                iou = box_iou(a.box, b.box)
                if iou >= iou_threshold:
                    cand.append((-iou, i, j))
    cand.sort()
    used_l, used_r, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_l and j not in used_r:
            used_l.add(i)
            used_r.add(j)
            pairs.append((i, j))
    return pairs


def ensemble_filter(per_detector, iou_threshold=0.5):
    """Keep detections corroborated by at least one other detector.

    Matched detections are merged into groups; each group is reported once,
    by its member from the earliest detector.
    """
    if len(per_detector) != 3:
        raise ValueError("ensemble voting expects exactly three detection lists")
    nodes = [(d, i) for d, dets in enumerate(per_detector) for i in range(len(dets))]
    parent = {n: n for n in nodes}

    def find(n):
        while parent[n] != n:
            parent[n] = parent[parent[n]]
            n = parent[n]
        return n

    matched = set()
    for a, b in combinations(range(3), 2):
        for i, j in greedy_match(per_detector[a], per_detector[b], iou_threshold):
            matched.update({(a, i), (b, j)})
            ra, rb = find((a, i)), find((b, j))
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups = {}
    for n in sorted(matched):
        groups.setdefault(find(n), n)
    return [per_detector[d][i] for d, i in sorted(groups.values())]


def detect_ensemble(image, palette, detectors=DETECTORS, iou_threshold=0.5):
    return ensemble_filter([detect(image, palette, p) for p in detectors], iou_threshold)


@dataclass(frozen=True)
class BenchPrompt:
    prompt_id: str
    kind: str  # "multi-class" | "multi-instance"
    category: str
    classes: tuple[str, ...]
    counts: tuple[int, ...]
    text: str

    @property
    def size_param(self) -> int:
        return len(self.classes) if self.kind == "multi-class" else self.counts[0]


def class_index(category_table, category, name) -> int:
    return category_table[category].index(name)


def multiclass_accuracy(kept, prompt: BenchPrompt, category_table=TOY_CATEGORIES) -> float:
    if prompt.kind != "multi-class":
        raise ValueError("multi-class accuracy needs a multi-class prompt")
    wanted = {class_index(category_table, prompt.category, c) for c in prompt.classes}
    found = {d.cls for d in kept} & wanted
    return 100.0 * len(found) / len(wanted)


def multiinstance_accuracy(kept, prompt: BenchPrompt, category_table=TOY_CATEGORIES) -> float:
    if prompt.kind != "multi-instance":
        raise ValueError("multi-instance accuracy needs a multi-instance prompt")
    target = class_index(category_table, prompt.category, prompt.classes[0])
    n = prompt.counts[0]
    hits = sum(1 for d in kept if d.cls == target)
    return 100.0 * min(hits, n) / n


def accuracy(kept, prompt: BenchPrompt, category_table=TOY_CATEGORIES) -> float:
    if prompt.kind == "multi-class":
        return multiclass_accuracy(kept, prompt, category_table)
    return multiinstance_accuracy(kept, prompt, category_table)


@dataclass
class BenchmarkSuite:
    prompts: list[BenchPrompt]
    seed: int
    category_table: dict = field(default_factory=dict)


def combination_count(category_table, category, k) -> int:
    return math.comb(len(category_table[category]), k)


def sample_size(count: int, fraction: float) -> int:
    """Prompts kept from ``count`` combinations (20% of 126 -> 25)."""
    return max(1, min(count, int(math.floor(fraction * count + 1e-9))))


def build_benchmark(category_table, kind, size_param, fraction=1.0, seed=0) -> BenchmarkSuite:
    if not category_table:
        raise ConfigError("category table is empty")
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    prompts = []
    for cat in sorted(category_table):
        names = category_table[cat]
        if kind == "multi-class":
            if size_param > len(names):
                raise ConfigError(f"k={size_param} exceeds {len(names)} classes in {cat!r}")
            combos = list(combinations(names, size_param))
            keep = sample_size(len(combos), fraction)
            picks = sorted(rng.choice(len(combos), size=keep, replace=False)) if keep < len(combos) else range(len(combos))
            for i in picks:
                classes = combos[i]
                counts = (1,) * size_param
                prompts.append(
                    BenchPrompt(f"{cat}-k{size_param}-{i}", kind, cat, classes, counts, render_prompt(classes, counts))
                )
        elif kind == "multi-instance":
            for name in names:
                prompts.append(
                    BenchPrompt(
                        f"{cat}-n{size_param}-{name}", kind, cat, (name,), (size_param,),
                        render_prompt((name,), (size_param,)),
                    )
                )
        else:
            raise ConfigError(f"unknown prompt kind {kind!r}")
    return BenchmarkSuite(prompts, seed, dict(category_table))


def synthetic_suite(seed: int = 0, per_cell: int = 5) -> BenchmarkSuite:
    """20 toy prompts: multi-class k in {2, 3} and multi-instance n in {2, 3}."""
    rng = np.random.default_rng(seed)
    prompts = []
    for kind in ("multi-class", "multi-instance"):
        for size in (2, 3):
            pool = build_benchmark(TOY_CATEGORIES, kind, size, 1.0, seed).prompts
            idx = sorted(rng.choice(len(pool), size=min(per_cell, len(pool)), replace=False))
            prompts.extend(pool[i] for i in idx)
    return BenchmarkSuite(prompts, seed, dict(TOY_CATEGORIES))


def prompt_config(base, prompt: BenchPrompt):
    """RunConfig for one benchmark prompt, inheriting everything else."""
    return replace(base, prompt=prompt.text, classes=prompt.classes, counts=prompt.counts, category=prompt.category)


@dataclass
class EvalResult:
    config_id: str
    rows: list[dict]
    failures: int = 0

    def mean(self, kind: str | None = None) -> float:
        vals = [r["accuracy"] for r in self.rows if kind is None or r["kind"] == kind]
        return float(np.mean(vals)) if vals else float("nan")

    def by_size(self, kind: str) -> dict[int, float]:
        sizes = sorted({r["size_param"] for r in self.rows if r["kind"] == kind})
        return {
            s: float(np.mean([r["accuracy"] for r in self.rows if r["kind"] == kind and r["size_param"] == s]))
            for s in sizes
        }


def evaluate_image(image, prompt: BenchPrompt, palette, category_table=TOY_CATEGORIES) -> float:
    return accuracy(detect_ensemble(image, palette), prompt, category_table)


def _run_cell(args):
    from isac.engine import run

    config_id, config, prompt, seed = args
    from isac.toybench import TOY_PALETTE

    try:
        rec = run(prompt_config(config, prompt), seed)
    except Exception as exc:  # recorded, not fatal
        return {"config_id": config_id, "prompt_id": prompt.prompt_id, "seed": seed, "error": repr(exc)}
    acc = evaluate_image(rec.image, prompt, TOY_PALETTE)
    return {
        "config_id": config_id,
        "prompt_id": prompt.prompt_id,
        "seed": seed,
        "kind": prompt.kind,
        "size_param": prompt.size_param,
        "accuracy": acc,
        "final_L_ins": rec.reports[-1].L_ins,
    }


def ablation_run(configs: dict, suite: BenchmarkSuite, seeds, jobs: int = 1) -> list[EvalResult]:
    """Every (config, prompt, seed) cell; one EvalResult per config, in order."""
    cells = [(cid, cfg, p, s) for cid, cfg in configs.items() for p in suite.prompts for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(_run_cell, cells, chunksize=4))
    else:
        rows = [_run_cell(c) for c in cells]
    results = []
    for cid in configs:
        mine = [r for r in rows if r["config_id"] == cid]
        ok = [r for r in mine if "error" not in r]
        results.append(EvalResult(cid, ok, failures=len(mine) - len(ok)))
    return results
