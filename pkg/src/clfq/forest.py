"""Random-forest binary classifier with a compact portable model format.

Training is fully deterministic: each tree owns an RNG stream derived from
(seed, tree index), rows are put into a canonical order by row id before
any bootstrap is drawn, and split ties break toward the lowest feature
index and threshold.  The [0, 100] quality score is the class-1
probability times 100, rounded half away from zero.
"""

import io
import json
import math
import struct
from dataclasses import dataclass

import numpy as np


class TrainingError(ValueError):
    pass


class ModelFormatError(ValueError):
    """Unreadable model file; `offset` points at the failing byte."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


MODEL_MAGIC = b"CLFQ"
MODEL_VERSION = 1


@dataclass(frozen=True)
class TrainParams:
    n_trees: int = 100
    max_depth: int = 25
    split_candidates: int = 10
    min_samples_leaf: int = 2
    pruning: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.split_candidates < 1:
            raise ValueError("split_candidates must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")


@dataclass
class LabeledDataset:
    """Feature rows with binary labels and per-row provenance ids."""

    ids: list
    X: np.ndarray  # (n, d) float64
    y: np.ndarray  # (n,) int, 0 = low quality, 1 = high quality

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.size or len(self.ids) != self.y.size:
            raise TrainingError("ids, X and y must have matching row counts")
        if self.y.size < 2:
            raise TrainingError("need at least 2 rows")
        if not np.isin(self.y, (0, 1)).all():
            raise TrainingError("labels must be 0 or 1")

    def canonical(self) -> "LabeledDataset":
        """Rows sorted by id; the ordering every bootstrap is drawn against."""
        order = sorted(range(len(self.ids)), key=lambda i: str(self.ids[i]))
        return LabeledDataset(
            [self.ids[i] for i in order], self.X[order], self.y[order]
        )


@dataclass
class TreeNodes:
    """One tree as flat arrays; feature == -1 marks a leaf."""

    feature: np.ndarray    # (m,) int32
    threshold: np.ndarray  # (m,) float64
    left: np.ndarray       # (m,) int32
    right: np.ndarray      # (m,) int32
    value: np.ndarray      # (m,) float64, class-1 fraction at the node

    def predict_one(self, x: np.ndarray) -> float:
        i = 0
        while self.feature[i] >= 0:
            i = self.left[i] if x[self.feature[i]] <= self.threshold[i] else self.right[i]
        return float(self.value[i])

    def n_nodes(self) -> int:
        return self.feature.size


@dataclass
class ForestModel:
    feature_names: tuple
    params: TrainParams
    trees: list
    importance: np.ndarray  # percent per feature, sums to 100
    pad_to: int = 0         # >0: accept shorter vectors and zero-pad to this length
    version: int = MODEL_VERSION

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def importance_table(self) -> list:
        """(name, percent) pairs sorted by descending importance."""
        order = np.argsort(-self.importance, kind="stable")
        return [(self.feature_names[i], float(self.importance[i])) for i in order]


@dataclass
class TrainReport:
    training_error: float
    oob_error: float
    oob_excluded: int
    model: ForestModel


# --- Training -------------------------------------------------------------------


class _TreeBuilder:
    def __init__(self, X, y, params: TrainParams, rng: np.random.Generator):
        self.X = X
        self.y = y
        self.p = params
        self.rng = rng
        self.nodes = []  # [feature, threshold, left, right, value, gain]

    def build(self, indices: np.ndarray) -> int:
        return self._grow(indices, depth=0)

    def _grow(self, idx: np.ndarray, depth: int) -> int:
        node_id = len(self.nodes)
        y = self.y[idx]
        pos = int(y.sum())
        n = idx.size
        value = pos / n
        self.nodes.append([-1, 0.0, -1, -1, value, 0.0])
        if depth >= self.p.max_depth or pos in (0, n) or n < 2 * self.p.min_samples_leaf:
            return node_id
        split = self._best_split(idx)
        if split is None:
            return node_id
        feature, threshold, gain = split
        go_left = self.X[idx, feature] <= threshold
        left_id = self._grow(idx[go_left], depth + 1)
        right_id = self._grow(idx[~go_left], depth + 1)
        self.nodes[node_id][0] = feature
        self.nodes[node_id][1] = threshold
        self.nodes[node_id][2] = left_id
        self.nodes[node_id][3] = right_id
        self.nodes[node_id][5] = gain
        return node_id

    def _best_split(self, idx: np.ndarray):
        """Best (feature, threshold, impurity decrease) among sampled candidates.

        Thresholds are midpoints between consecutive sorted unique values.
        Candidates are scanned in ascending feature index and ascending
        threshold with strict improvement, so ties resolve to the lowest
        feature, then the lowest threshold.
        """
        n_features = self.X.shape[1]
        k = min(self.p.split_candidates, n_features)
        candidates = np.sort(self.rng.choice(n_features, size=k, replace=False))
        y = self.y[idx].astype(np.float64)
        n = idx.size
        pos_total = y.sum()
        parent_gini = 1.0 - (pos_total / n) ** 2 - ((n - pos_total) / n) ** 2
        min_leaf = self.p.min_samples_leaf

        best = None
        best_score = 0.0
        for f in candidates:
            x = self.X[idx, f]
            order = np.argsort(x, kind="stable")
            xs = x[order]
            ys = y[order]
            # Split after position i (1-based count i+1 on the left); valid only
            # between distinct neighbouring values.
            cum_pos = np.cumsum(ys)
            counts_left = np.arange(1, n)
            boundary = xs[:-1] != xs[1:]
            lo = min_leaf - 1
            hi = n - min_leaf
            usable = np.zeros(n - 1, dtype=bool)
            usable[lo:hi] = True
            usable &= boundary
            if not usable.any():
                continue
            pos_left = cum_pos[:-1][usable]
            n_left = counts_left[usable].astype(np.float64)
            n_right = n - n_left
            pos_right = pos_total - pos_left
            gini_left = 1.0 - (pos_left / n_left) ** 2 - ((n_left - pos_left) / n_left) ** 2
            gini_right = 1.0 - (pos_right / n_right) ** 2 - ((n_right - pos_right) / n_right) ** 2
            weighted = (n_left * gini_left + n_right * gini_right) / n
            decrease = parent_gini - weighted
            j = int(np.argmax(decrease))
            if decrease[j] > best_score + 1e-15:
                thr_idx = np.nonzero(usable)[0][j]
                threshold = (xs[thr_idx] + xs[thr_idx + 1]) / 2.0
                best_score = float(decrease[j])
                best = (int(f), float(threshold), best_score * n)
        return best


def _tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    entropy = seed & 0xFFFFFFFFFFFFFFFF  # SeedSequence wants non-negative entropy
    return np.random.default_rng(np.random.SeedSequence(entropy=entropy, spawn_key=(tree_index,)))


def _prune_tree(nodes: list, X: np.ndarray, y: np.ndarray, held_out: np.ndarray) -> list:
    """Reduced-error pruning against a held-out row set (tree's own OOB rows).

    Bottom-up: an internal node becomes a leaf when that does not increase
    the misclassification count of the held-out rows routed through it.
    """
    if held_out.size == 0:
        return nodes
    reach: dict = {0: held_out}
    order = []  # nodes in topological (parent-before-child) order
    stack = [0]
    while stack:
        i = stack.pop()
        order.append(i)
        f = nodes[i][0]
        if f >= 0:
            rows = reach[i]
            go_left = X[rows, f] <= nodes[i][1]
            reach[nodes[i][2]] = rows[go_left]
            reach[nodes[i][3]] = rows[~go_left]
            stack.append(nodes[i][2])
            stack.append(nodes[i][3])

    subtree_err = {}
    for i in reversed(order):
        rows = reach[i]
        f = nodes[i][0]
        leaf_err = int(np.sum((nodes[i][4] >= 0.5) != y[rows])) if rows.size else 0
        if f < 0:
            subtree_err[i] = leaf_err
            continue
        child_err = subtree_err[nodes[i][2]] + subtree_err[nodes[i][3]]
        if leaf_err <= child_err:
            nodes[i][0] = -1
            nodes[i][2] = -1
            nodes[i][3] = -1
            nodes[i][5] = 0.0
            subtree_err[i] = leaf_err
        else:
            subtree_err[i] = child_err
    return _compact(nodes)


def _compact(nodes: list) -> list:
    """Drop unreachable nodes and renumber."""
    keep = []
    stack = [0]
    while stack:
        i = stack.pop()
        keep.append(i)
        if nodes[i][0] >= 0:
            stack.extend((nodes[i][3], nodes[i][2]))
    keep.sort()
    remap = {old: new for new, old in enumerate(keep)}
    out = []
    for old in keep:
        f, t, l, r, v, g = nodes[old]
        out.append([f, t, remap[l] if f >= 0 else -1, remap[r] if f >= 0 else -1, v, g])
    return out


def train(data: LabeledDataset, params: TrainParams, feature_names=None) -> TrainReport:
    """Train a forest; returns the model plus training and out-of-bag errors."""
    ds = data.canonical()
    n, d = ds.X.shape
    if len(np.unique(ds.y)) < 2:
        raise TrainingError("training data contains a single class")
    if feature_names is None:
        feature_names = tuple(f"feature_{i}" for i in range(d))
    if len(feature_names) != d:
        raise TrainingError(f"{len(feature_names)} feature names for {d} columns")

    importance = np.zeros(d)
    trees = []
    oob_votes = np.zeros(n)
    oob_counts = np.zeros(n, dtype=int)
    for t in range(params.n_trees):
        rng = _tree_rng(params.seed, t)
        bootstrap = rng.integers(0, n, size=n)
        builder = _TreeBuilder(ds.X, ds.y, params, rng)
        builder.build(bootstrap)
        nodes = builder.nodes
        oob_rows = np.setdiff1d(np.arange(n), bootstrap)
        if params.pruning:
            nodes = _prune_tree(nodes, ds.X, ds.y, oob_rows)
        for nd in nodes:
            if nd[0] >= 0:
                importance[nd[0]] += nd[5]
        tree = TreeNodes(
            feature=np.array([nd[0] for nd in nodes], dtype=np.int32),
            threshold=np.array([nd[1] for nd in nodes], dtype=np.float64),
            left=np.array([nd[2] for nd in nodes], dtype=np.int32),
            right=np.array([nd[3] for nd in nodes], dtype=np.int32),
            value=np.array([nd[4] for nd in nodes], dtype=np.float64),
        )
        trees.append(tree)
        for row in oob_rows:
            oob_votes[row] += 1.0 if tree.predict_one(ds.X[row]) >= 0.5 else 0.0
            oob_counts[row] += 1

    total = importance.sum()
    importance = importance / total * 100.0 if total > 0 else np.full(d, 100.0 / d)
    model = ForestModel(tuple(feature_names), params, trees, importance)

    probs = np.array([predict_prob(model, x) for x in ds.X])
    training_error = float(np.mean((probs >= 0.5).astype(int) != ds.y))
    covered = oob_counts > 0
    if covered.any():
        oob_pred = (oob_votes[covered] / oob_counts[covered]) >= 0.5
        oob_error = float(np.mean(oob_pred.astype(int) != ds.y[covered]))
    else:
        oob_error = math.nan
    return TrainReport(
        training_error=training_error,
        oob_error=oob_error,
        oob_excluded=int(np.sum(~covered)),
        model=model,
    )


# --- Inference --------------------------------------------------------------------


def _as_vector(m: ForestModel, fv) -> np.ndarray:
    values = np.asarray(getattr(fv, "values", fv), dtype=np.float64).ravel()
    if values.size != m.n_features:
        if 0 < m.pad_to == m.n_features and values.size < m.pad_to:
            values = np.concatenate([values, np.zeros(m.pad_to - values.size)])
        else:
            raise ValueError(f"feature vector has {values.size} values, model expects {m.n_features}")
    return values


def predict_prob(m: ForestModel, fv) -> float:
    """Mean class-1 leaf fraction over all trees, in [0, 1]."""
    x = _as_vector(m, fv)
    return float(np.mean([tree.predict_one(x) for tree in m.trees]))


def quality_score(m: ForestModel, fv) -> int:
    """100 * class-1 probability, rounded half away from zero."""
    return prob_to_score(predict_prob(m, fv))


def prob_to_score(p: float) -> int:
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"probability {p} outside [0, 1]")
    # The epsilon absorbs float representation error so that e.g. 0.145
    # (stored as 0.1449999...) still lands on 15 like its decimal value.
    return min(100, int(math.floor(p * 100.0 + 0.5 + 1e-9)))


# --- Serialization ------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ModelFormatError("truncated model file", offset=self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def model_to_bytes(m: ForestModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", m.version))
    buf.write(struct.pack("<I", m.n_features))
    for name in m.feature_names:
        buf.write(_pack_str(name))
    p = m.params
    buf.write(
        struct.pack(
            "<IIIIBq", p.n_trees, p.max_depth, p.split_candidates, p.min_samples_leaf, int(p.pruning), p.seed
        )
    )
    buf.write(struct.pack("<I", m.pad_to))
    buf.write(np.asarray(m.importance, dtype="<f8").tobytes())
    buf.write(struct.pack("<I", len(m.trees)))
    for tree in m.trees:
        buf.write(struct.pack("<I", tree.n_nodes()))
        buf.write(tree.feature.astype("<i4").tobytes())
        buf.write(tree.threshold.astype("<f8").tobytes())
        buf.write(tree.left.astype("<i4").tobytes())
        buf.write(tree.right.astype("<i4").tobytes())
        buf.write(tree.value.astype("<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(blob: bytes) -> ForestModel:
    r = _Reader(blob)
    if r.take(4) != MODEL_MAGIC:
        raise ModelFormatError("bad magic, not a model file", offset=0)
    (version,) = r.unpack("<I")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}", offset=4)
    (n_features,) = r.unpack("<I")
    names = []
    for _ in range(n_features):
        (ln,) = r.unpack("<H")
        raw = r.take(ln)
        try:
            names.append(raw.decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise ModelFormatError(f"bad feature name encoding: {exc}", offset=r.pos - ln) from exc
    header_at = r.pos
    n_trees, max_depth, split_candidates, min_leaf, pruning, seed = r.unpack("<IIIIBq")
    try:
        params = TrainParams(
            n_trees=n_trees,
            max_depth=max_depth,
            split_candidates=split_candidates,
            min_samples_leaf=min_leaf,
            pruning=bool(pruning),
            seed=seed,
        )
    except ValueError as exc:
        raise ModelFormatError(f"invalid training parameters: {exc}", offset=header_at) from exc
    (pad_to,) = r.unpack("<I")
    importance = np.frombuffer(r.take(8 * n_features), dtype="<f8").copy()
    (tree_count,) = r.unpack("<I")
    trees = []
    for _ in range(tree_count):
        (m,) = r.unpack("<I")
        feature = np.frombuffer(r.take(4 * m), dtype="<i4").copy()
        threshold = np.frombuffer(r.take(8 * m), dtype="<f8").copy()
        left = np.frombuffer(r.take(4 * m), dtype="<i4").copy()
        right = np.frombuffer(r.take(4 * m), dtype="<i4").copy()
        value = np.frombuffer(r.take(8 * m), dtype="<f8").copy()
        if feature.size and (feature.max() >= n_features or feature.min() < -1):
            raise ModelFormatError("node feature index out of range", offset=r.pos)
        trees.append(TreeNodes(feature, threshold, left, right, value))
    if r.pos != len(blob):
        raise ModelFormatError("trailing bytes after model payload", offset=r.pos)
    return ForestModel(tuple(names), params, trees, importance, pad_to=pad_to, version=version)


def save_model(m: ForestModel, path) -> None:
    from pathlib import Path

    Path(path).write_bytes(model_to_bytes(m))


def load_model(path) -> ForestModel:
    from pathlib import Path

    return model_from_bytes(Path(path).read_bytes())


def model_to_json(m: ForestModel) -> str:
    """Human-inspectable JSON export of a model."""
    doc = {
        "format": MODEL_MAGIC.decode(),
        "version": m.version,
        "feature_names": list(m.feature_names),
        "params": {
            "n_trees": m.params.n_trees,
            "max_depth": m.params.max_depth,
            "split_candidates": m.params.split_candidates,
            "min_samples_leaf": m.params.min_samples_leaf,
            "pruning": m.params.pruning,
            "seed": m.params.seed,
        },
        "pad_to": m.pad_to,
        "importance_pct": {n: v for n, v in m.importance_table()},
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "value": t.value.tolist(),
            }
            for t in m.trees
        ],
    }
    return json.dumps(doc, indent=2)
