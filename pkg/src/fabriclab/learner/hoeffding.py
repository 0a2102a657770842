"""Incremental decision tree with drift-adaptive subtree replacement.

Leaves accumulate per-class counts and per-feature streaming histograms
(bounded number of bins; candidate split thresholds are the midpoints
between adjacent bin centers). A leaf splits when the information-gain gap
between the best and second-best candidate clears the Hoeffding bound, or
when the bound itself has shrunk below the tie threshold.

Every internal node carries one error monitor per branch. When a branch
monitor reports drift, a background subtree starts training on the samples
routed through that branch; it replaces the foreground subtree once its
windowed error is lower.
"""

from __future__ import annotations

import json
import math
from bisect import bisect_left

from .adwin import AdwinDetector


def hoeffding_bound(value_range: float, delta: float, n: int) -> float:
    """Deviation bound for a mean of n observations in a range of width
    ``value_range``, violated with probability at most delta."""
    if n <= 0:
        raise ValueError("n must be positive")
    return math.sqrt(value_range * value_range * math.log(1.0 / delta) / (2.0 * n))


def _entropy(counts, total: float) -> float:
    if total <= 0.0:
        return 0.0
    h = 0.0
    for c in counts:
        if c > 0:
            p = c / total
            h -= p * math.log2(p)
    return h


class _Histogram:
    """Fixed-size streaming sketch of one numeric feature.

    Bins are disjoint value ranges carrying per-class counts. When over
    budget, the two adjacent bins with the narrowest separating gap are
    merged, preferring pairs whose majority class agrees so that class
    boundaries stay sharp. Candidate split thresholds are the midpoints of
    the gaps between adjacent bins, which keeps every training sample of a
    clean concept on the correct side of the learned split.
    """

    __slots__ = ("max_bins", "lows", "highs", "class_counts")

    _MIXED_PENALTY = 1e18

    def __init__(self, max_bins: int = 16):
        self.max_bins = max_bins
        self.lows: list[float] = []
        self.highs: list[float] = []
        self.class_counts: list[dict[int, int]] = []

    def add(self, value: float, label: int) -> None:
        idx = bisect_left(self.highs, value)
        if idx < len(self.lows) and self.lows[idx] <= value <= self.highs[idx]:
            counts = self.class_counts[idx]
            counts[label] = counts.get(label, 0) + 1
            return
        self.lows.insert(idx, value)
        self.highs.insert(idx, value)
        self.class_counts.insert(idx, {label: 1})
        if len(self.lows) > self.max_bins:
            self._merge_cheapest()

    def _majority(self, counts: dict[int, int]) -> int:
        return min(counts, key=lambda c: (-counts[c], c))

    def _merge_cheapest(self) -> None:
        best_i = 0
        best_cost = math.inf
        for i in range(len(self.lows) - 1):
            cost = self.lows[i + 1] - self.highs[i]
            if self._majority(self.class_counts[i]) != self._majority(self.class_counts[i + 1]):
                cost += self._MIXED_PENALTY
            if cost < best_cost:
                best_cost = cost
                best_i = i
        a, b = self.class_counts[best_i], self.class_counts[best_i + 1]
        for cls, cnt in b.items():
            a[cls] = a.get(cls, 0) + cnt
        self.highs[best_i] = self.highs[best_i + 1]
        del self.lows[best_i + 1]
        del self.highs[best_i + 1]
        del self.class_counts[best_i + 1]

    def candidate_splits(self):
        """Yield (threshold, class counts at-or-below threshold)."""
        below: dict[int, int] = {}
        for i in range(len(self.lows) - 1):
            for cls, cnt in self.class_counts[i].items():
                below[cls] = below.get(cls, 0) + cnt
            yield (self.highs[i] + self.lows[i + 1]) / 2.0, dict(below)

    def to_state(self):
        return {
            "lows": list(self.lows),
            "highs": list(self.highs),
            "counts": [dict(c) for c in self.class_counts],
        }

    @classmethod
    def from_state(cls, state, max_bins: int):
        h = cls(max_bins)
        h.lows = list(state["lows"])
        h.highs = list(state["highs"])
        h.class_counts = [{int(k): v for k, v in c.items()} for c in state["counts"]]
        return h


def best_split_gains(class_counts: dict[int, int], hists: list[_Histogram]):
    """Rank all (feature, threshold) candidates by information gain.

    Returns (best, second) where each is (gain, feature, threshold); the
    second-best is taken over candidates on any feature other than the
    best one, matching the attribute-comparison form of the split test.
    """
    total = float(sum(class_counts.values()))
    parent_h = _entropy(class_counts.values(), total)
    per_feature_best: list[tuple[float, int, float]] = []
    for f, hist in enumerate(hists):
        best = None
        for threshold, below in hist.candidate_splits():
            n_left = float(sum(below.values()))
            n_right = total - n_left
            if n_left <= 0.0 or n_right <= 0.0:
                continue
            right = {c: class_counts[c] - below.get(c, 0) for c in class_counts}
            gain = (
                parent_h
                - (n_left / total) * _entropy(below.values(), n_left)
                - (n_right / total) * _entropy(right.values(), n_right)
            )
            if best is None or gain > best[0]:
                best = (gain, f, threshold)
        if best is not None:
            per_feature_best.append(best)
    if not per_feature_best:
        return None, None
    per_feature_best.sort(key=lambda t: (-t[0], t[1]))
    best = per_feature_best[0]
    second = per_feature_best[1] if len(per_feature_best) > 1 else (0.0, -1, 0.0)
    return best, second


class _Leaf:
    __slots__ = ("class_counts", "hists", "n", "majority_hint")

    def __init__(self, n_features: int, max_bins: int, majority_hint: int | None = None):
        self.class_counts: dict[int, int] = {}
        self.hists = [_Histogram(max_bins) for _ in range(n_features)]
        self.n = 0
        self.majority_hint = majority_hint

    def majority(self, default: int) -> int:
        if self.class_counts:
            return min(self.class_counts, key=lambda c: (-self.class_counts[c], c))
        if self.majority_hint is not None:
            return self.majority_hint
        return default

    def learn(self, x, y: int) -> None:
        self.class_counts[y] = self.class_counts.get(y, 0) + 1
        self.n += 1
        for f, hist in enumerate(self.hists):
            hist.add(x[f], y)


class _Split:
    __slots__ = (
        "feature",
        "threshold",
        "children",
        "monitors",
        "backgrounds",
        "bg_n",
        "bg_errors",
        "drift_pending",
        "evidence",
    )

    def __init__(self, feature: int, threshold: float, children, adwin_delta: float, evidence):
        self.feature = feature
        self.threshold = threshold
        self.children = children
        self.monitors = [AdwinDetector(adwin_delta), AdwinDetector(adwin_delta)]
        self.backgrounds: list = [None, None]
        self.bg_n = [0, 0]
        self.bg_errors = [0, 0]
        self.drift_pending = [False, False]
        self.evidence = evidence

    def branch(self, x) -> int:
        return 0 if x[self.feature] <= self.threshold else 1


class HoeffdingAdaptiveTree:
    """Streaming classifier over fixed-length numeric feature vectors.

    Single-owner: instances are never shared mutably. ``update`` consumes one
    labelled sample, ``predict`` is side-effect free.
    """

    def __init__(
        self,
        n_features: int,
        split_confidence: float = 1e-6,
        tie_threshold: float = 0.05,
        grace_period: int = 50,
        value_range: float = 1.0,
        adwin_delta: float = 0.002,
        max_bins: int = 16,
        max_nodes: int = 512,
        min_background_samples: int = 30,
        background_patience: int = 400,
        default_class: int = 0,
    ):
        if n_features < 1:
            raise ValueError("n_features must be >= 1")
        self.n_features = n_features
        self.split_confidence = split_confidence
        self.tie_threshold = tie_threshold
        self.grace_period = grace_period
        self.value_range = value_range
        self.adwin_delta = adwin_delta
        self.max_bins = max_bins
        self.max_nodes = max_nodes
        self.min_background_samples = min_background_samples
        self.background_patience = background_patience
        self.default_class = default_class
        self.root = _Leaf(n_features, max_bins)
        self.n_samples = 0
        self.classes_seen: set[int] = set()

    # -- inference -----------------------------------------------------------

    def predict(self, x) -> int:
        node = self.root
        while isinstance(node, _Split):
            node = node.children[node.branch(x)]
        return node.majority(self.default_class)

    def class_observations(self, x) -> dict[int, int]:
        """Per-class counts at the leaf x routes to (uncertainty probe)."""
        node = self.root
        while isinstance(node, _Split):
            node = node.children[node.branch(x)]
        return dict(node.class_counts)

    # -- training --------------------------------------------------------------

    def update(self, x, y: int) -> None:
        if len(x) != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {len(x)}")
        for value in x:
            if not math.isfinite(value):
                raise ValueError("non-finite feature value")
        error = self.predict(x) != y
        self.n_samples += 1
        self.classes_seen.add(y)

        node = self.root
        parent: _Split | None = None
        parent_branch = 0
        while isinstance(node, _Split):
            branch = node.branch(x)
            self._monitor(node, branch, error, x, y)
            parent, parent_branch = node, branch
            node = node.children[branch]
        node.learn(x, y)
        if node.n % self.grace_period == 0 and len(node.class_counts) > 1:
            self._attempt_split(node, parent, parent_branch)

    def _monitor(self, node: _Split, branch: int, error: bool, x, y: int) -> None:
        monitor = node.monitors[branch]
        drift = monitor.add(1.0 if error else 0.0)
        if drift and monitor.last_change_increased:
            node.drift_pending[branch] = True
            if node.backgrounds[branch] is None and self._node_budget() > 0:
                node.backgrounds[branch] = _Leaf(self.n_features, self.max_bins)
                node.bg_n[branch] = 0
                node.bg_errors[branch] = 0
        bg = node.backgrounds[branch]
        if bg is None:
            return
        bg_pred = self._subtree_predict(bg, x)
        node.bg_errors[branch] += int(bg_pred != y)
        node.bg_n[branch] += 1
        self._subtree_update(node, branch, bg, x, y)
        bg_error_rate = node.bg_errors[branch] / node.bg_n[branch]
        if (
            node.drift_pending[branch]
            and node.bg_n[branch] >= self.min_background_samples
            and bg_error_rate < monitor.mean
        ):
            node.children[branch] = node.backgrounds[branch]
            self._discard_background(node, branch)
            node.monitors[branch] = AdwinDetector(self.adwin_delta)
        elif node.bg_n[branch] >= self.background_patience and bg_error_rate >= monitor.mean:
            # background never overtook the foreground: stale alarm
            self._discard_background(node, branch)

    def _discard_background(self, node: _Split, branch: int) -> None:
        node.backgrounds[branch] = None
        node.bg_n[branch] = 0
        node.bg_errors[branch] = 0
        node.drift_pending[branch] = False

    def _subtree_predict(self, node, x) -> int:
        while isinstance(node, _Split):
            node = node.children[node.branch(x)]
        return node.majority(self.default_class)

    def _subtree_update(self, owner: _Split, branch: int, node, x, y: int) -> None:
        # Background subtrees learn and may split, but carry no monitors.
        parent = None
        parent_branch = 0
        while isinstance(node, _Split):
            parent, parent_branch = node, node.branch(x)
            node = node.children[parent_branch]
        node.learn(x, y)
        if node.n % self.grace_period == 0 and len(node.class_counts) > 1:
            split = self._make_split(node)
            if split is not None:
                if parent is None:
                    owner.backgrounds[branch] = split
                else:
                    parent.children[parent_branch] = split

    def _attempt_split(self, leaf: _Leaf, parent: _Split | None, branch: int) -> None:
        split = self._make_split(leaf)
        if split is None:
            return
        if (
            parent is not None
            and split.feature == parent.feature
            and self._try_refine_threshold(parent, branch, leaf, split.threshold)
        ):
            return
        if parent is None:
            self.root = split
        else:
            parent.children[branch] = split

    def _try_refine_threshold(
        self, parent: _Split, branch: int, leaf: _Leaf, new_threshold: float
    ) -> bool:
        """Fold a same-feature boundary refinement into the parent node.

        A child whose justified split only carves off a sliver bordering the
        parent's threshold, with the sliver belonging to the sibling's class,
        sharpens the existing boundary rather than growing the tree.
        """
        sibling = parent.children[1 - branch]
        if not isinstance(sibling, _Leaf) or not sibling.class_counts:
            return False
        if branch == 1 and not new_threshold > parent.threshold:
            return False
        if branch == 0 and not new_threshold < parent.threshold:
            return False
        hist = leaf.hists[parent.feature]
        sliver: dict[int, int] = {}
        for i in range(len(hist.lows)):
            inside = hist.highs[i] <= new_threshold if branch == 1 else hist.lows[i] > new_threshold
            if inside:
                for cls, cnt in hist.class_counts[i].items():
                    sliver[cls] = sliver.get(cls, 0) + cnt
        if not sliver:
            return False
        n_sliver = sum(sliver.values())
        if n_sliver >= leaf.n:
            return False
        sliver_majority = min(sliver, key=lambda c: (-sliver[c], c))
        remainder = {c: leaf.class_counts.get(c, 0) - sliver.get(c, 0) for c in leaf.class_counts}
        remainder = {c: n for c, n in remainder.items() if n > 0}
        if not remainder:
            return False
        remainder_majority = min(remainder, key=lambda c: (-remainder[c], c))
        if sliver_majority != sibling.majority(self.default_class):
            return False
        if sliver_majority == remainder_majority:
            return False
        parent.threshold = new_threshold
        parent.evidence["refined_threshold"] = new_threshold
        leaf.class_counts = remainder
        leaf.n -= n_sliver
        sibling.n += n_sliver
        for cls, cnt in sliver.items():
            sibling.class_counts[cls] = sibling.class_counts.get(cls, 0) + cnt
        # move the separable bins of the split feature over to the sibling
        sib_hist = sibling.hists[parent.feature]
        keep_lo, keep_hi, keep_counts = [], [], []
        for i in range(len(hist.lows)):
            inside = hist.highs[i] <= new_threshold if branch == 1 else hist.lows[i] > new_threshold
            if inside:
                for cls, cnt in hist.class_counts[i].items():
                    for _ in range(cnt):
                        sib_hist.add((hist.lows[i] + hist.highs[i]) / 2.0, cls)
            else:
                keep_lo.append(hist.lows[i])
                keep_hi.append(hist.highs[i])
                keep_counts.append(hist.class_counts[i])
        hist.lows, hist.highs, hist.class_counts = keep_lo, keep_hi, keep_counts
        return True

    def _make_split(self, leaf: _Leaf) -> _Split | None:
        if self._node_budget() < 2:
            return None
        best, second = best_split_gains(leaf.class_counts, leaf.hists)
        if best is None or best[0] <= 1e-12:
            return None
        value_range = self.value_range
        eps = hoeffding_bound(value_range, self.split_confidence, leaf.n)
        gap = best[0] - second[0]
        if gap <= eps and eps >= self.tie_threshold:
            return None
        evidence = {
            "n": leaf.n,
            "class_counts": dict(leaf.class_counts),
            "hists": [h.to_state() for h in leaf.hists],
            "feature": best[1],
            "threshold": best[2],
            "gain_best": best[0],
            "gain_second": second[0],
            "epsilon": eps,
            "value_range": value_range,
            "delta": self.split_confidence,
            "tie_threshold": self.tie_threshold,
        }
        majority = leaf.majority(self.default_class)
        children = [
            _Leaf(self.n_features, self.max_bins, majority_hint=majority),
            _Leaf(self.n_features, self.max_bins, majority_hint=majority),
        ]
        return _Split(best[1], best[2], children, self.adwin_delta, evidence)

    # -- introspection -----------------------------------------------------------

    def _node_budget(self) -> int:
        return self.max_nodes - self.n_nodes

    @property
    def n_nodes(self) -> int:
        count = 0
        stack = [self.root]
        while stack:
            node = stack.pop()
            count += 1
            if isinstance(node, _Split):
                stack.extend(node.children)
                stack.extend(b for b in node.backgrounds if b is not None)
        return count

    def iter_splits(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, _Split):
                yield node
                stack.extend(node.children)
                stack.extend(b for b in node.backgrounds if b is not None)

    def get_params(self) -> dict:
        return {
            "n_features": self.n_features,
            "split_confidence": self.split_confidence,
            "tie_threshold": self.tie_threshold,
            "grace_period": self.grace_period,
            "value_range": self.value_range,
            "adwin_delta": self.adwin_delta,
            "max_bins": self.max_bins,
            "max_nodes": self.max_nodes,
            "min_background_samples": self.min_background_samples,
            "background_patience": self.background_patience,
            "default_class": self.default_class,
        }

    # -- serialization ---------------------------------------------------------

    def to_blob(self) -> bytes:
        state = {
            "params": self.get_params(),
            "n_samples": self.n_samples,
            "classes_seen": sorted(self.classes_seen),
            "root": self._node_state(self.root),
        }
        return b"\x01" + json.dumps(state, sort_keys=True).encode()

    @classmethod
    def from_blob(cls, blob: bytes) -> "HoeffdingAdaptiveTree":
        if not blob or blob[0] != 1:
            raise ValueError("unsupported model blob version")
        state = json.loads(blob[1:].decode())
        tree = cls(**state["params"])
        tree.n_samples = state["n_samples"]
        tree.classes_seen = set(state["classes_seen"])
        tree.root = tree._node_from_state(state["root"])
        return tree

    def _node_state(self, node):
        if isinstance(node, _Leaf):
            return {
                "kind": "leaf",
                "class_counts": dict(node.class_counts),
                "hists": [h.to_state() for h in node.hists],
                "n": node.n,
                "majority_hint": node.majority_hint,
            }
        return {
            "kind": "split",
            "feature": node.feature,
            "threshold": node.threshold,
            "children": [self._node_state(c) for c in node.children],
            "monitors": [m.to_blob().decode("latin1") for m in node.monitors],
            "backgrounds": [
                self._node_state(b) if b is not None else None for b in node.backgrounds
            ],
            "bg_n": list(node.bg_n),
            "bg_errors": list(node.bg_errors),
            "drift_pending": list(node.drift_pending),
            "evidence": node.evidence,
        }

    def _node_from_state(self, state):
        if state["kind"] == "leaf":
            leaf = _Leaf(self.n_features, self.max_bins, state["majority_hint"])
            leaf.class_counts = {int(k): v for k, v in state["class_counts"].items()}
            leaf.hists = [_Histogram.from_state(h, self.max_bins) for h in state["hists"]]
            leaf.n = state["n"]
            return leaf
        evidence = state["evidence"]
        evidence["class_counts"] = {int(k): v for k, v in evidence["class_counts"].items()}
        split = _Split(
            state["feature"],
            state["threshold"],
            [self._node_from_state(c) for c in state["children"]],
            self.adwin_delta,
            evidence,
        )
        split.monitors = [
            AdwinDetector.from_blob(m.encode("latin1")) for m in state["monitors"]
        ]
        split.backgrounds = [
            self._node_from_state(b) if b is not None else None for b in state["backgrounds"]
        ]
        split.bg_n = list(state["bg_n"])
        split.bg_errors = list(state["bg_errors"])
        split.drift_pending = list(state["drift_pending"])
        return split
