"""Passive Mealy machine inference by EDSM red-blue state merging.

The labeled sequences from clustering build a prefix-tree transducer; the
red-blue loop then folds blue subtrees into red states whenever the fold
produces no output conflict, preferring the merge consolidating the most
agreeing labeled observations. Blues rejected by every red are promoted.
The result is a partial machine consistent with all training data by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import InputSymbol, MealyMachine, RdplearnError


class LabelConflictError(RdplearnError):
    """The same (prefix, symbol) carries two different labels in the data."""


@dataclass
class PrefixTree:
    """Tree transducer: one node per distinct prefix of the training input."""

    obs_width: int
    num_actions: int
    children: list[dict[InputSymbol, int]] = field(default_factory=lambda: [{}])
    outputs: list[dict[InputSymbol, int]] = field(default_factory=lambda: [{}])
    freqs: list[dict[InputSymbol, int]] = field(default_factory=lambda: [{}])

    @property
    def num_nodes(self) -> int:
        return len(self.children)

    def insert(self, syms, labels):
        if len(syms) != len(labels):
            raise RdplearnError("symbol and label sequences must align")
        node = 0
        for sym, label in zip(syms, labels):
            out = self.outputs[node]
            if sym in out:
                if out[sym] != label:
                    raise LabelConflictError(
                        f"symbol {sym} labeled both {out[sym]} and {label}")
            else:
                out[sym] = label
            self.freqs[node][sym] = self.freqs[node].get(sym, 0) + 1
            nxt = self.children[node].get(sym)
            if nxt is None:
                nxt = self.num_nodes
                self.children[node][sym] = nxt
                self.children.append({})
                self.outputs.append({})
                self.freqs.append({})
            node = nxt


def build_prefix_tree(labeled, obs_width: int | None = None,
                      num_actions: int | None = None) -> PrefixTree:
    """Build the tree from (symbol sequence, label sequence) pairs."""
    if obs_width is None or num_actions is None:
        for syms, _ in labeled:
            if syms:
                obs_width = obs_width or syms[0].obs.width
                num_actions = num_actions or max(max(s.action for s in syms) + 1
                                                 for syms, _ in labeled if syms)
                break
        else:
            obs_width, num_actions = obs_width or 1, num_actions or 1
    tree = PrefixTree(obs_width, num_actions)
    for syms, labels in labeled:
        tree.insert(syms, labels)
    return tree


class _Merger:
    """Union-find over tree nodes with fold-based merge scoring.

    Scoring folds on a copy-on-write overlay so trials are free of side
    effects; applying re-runs the fold mutating the real structures.
    """

    def __init__(self, tree: PrefixTree):
        self.parent = list(range(tree.num_nodes))
        self.children = [dict(d) for d in tree.children]
        self.outputs = [dict(d) for d in tree.outputs]
        self.freqs = [dict(d) for d in tree.freqs]

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def fold(self, red: int, blue: int, mutate: bool):
        """Merge blue's subtree into red; returns the agreement score or None.

        Score counts blue-side observation frequencies landing on symbols the
        red side already has evidence for (with equal labels); any label
        disagreement rejects the whole merge.
        """
        over_parent: dict[int, int] = {}
        oc: dict[int, dict] = {}
        oo: dict[int, dict] = {}
        of: dict[int, dict] = {}

        def xfind(x: int) -> int:
            x = self.find(x)
            while x in over_parent:
                x = over_parent[x]
            return x

        def resolve(store, overlay, x):
            return overlay.get(x, store[x])

        def writable(store, overlay, x):
            if mutate:
                return store[x]
            if x not in overlay:
                overlay[x] = dict(store[x])
            return overlay[x]

        score = 0
        stack = [(red, blue)]
        while stack:
            a, b = stack.pop()
            a, b = xfind(a), xfind(b)
            if a == b:
                continue
            if mutate:
                self.parent[b] = a
            else:
                over_parent[b] = a
            outs_b = resolve(self.outputs, oo, b)
            freqs_b = resolve(self.freqs, of, b)
            outs_a = resolve(self.outputs, oo, a)
            conflicts = [sym for sym, lab in outs_b.items()
                         if sym in outs_a and outs_a[sym] != lab]
            if conflicts:
                return None
            wa_out = writable(self.outputs, oo, a)
            wa_freq = writable(self.freqs, of, a)
            for sym, lab in outs_b.items():
                if sym in wa_out:
                    score += freqs_b[sym]
                    wa_freq[sym] += freqs_b[sym]
                else:
                    wa_out[sym] = lab
                    wa_freq[sym] = freqs_b[sym]
            kids_b = resolve(self.children, oc, b)
            wa_kids = writable(self.children, oc, a)
            for sym, child in kids_b.items():
                if sym in wa_kids:
                    stack.append((wa_kids[sym], child))
                else:
                    wa_kids[sym] = child
            if mutate:
                self.children[b] = {}
                self.outputs[b] = {}
                self.freqs[b] = {}
        return score


def edsm_learn(tree: PrefixTree) -> MealyMachine:
    """Red-blue EDSM over the prefix tree; fully deterministic tie-breaking.

    Merge scores are cached across loop iterations. Applied merges can
    invalidate cached scores anywhere in the touched subtrees, so the picked
    candidate is re-scored immediately before applying; a REJECT can never
    turn mergeable again (merging only adds output evidence), which makes
    cached REJECTs safe for promotion decisions.
    """
    merger = _Merger(tree)
    reds: list[int] = [merger.find(0)]
    red_pos = {reds[0]: 0}
    cache: dict[tuple[int, int], int | None] = {}

    def blues() -> list[int]:
        red_set = set(reds)
        seen = []
        for r in reds:
            for child in merger.children[r].values():
                rep = merger.find(child)
                if rep not in red_set:
                    seen.append(rep)
        return sorted(set(seen))

    def cached_score(red: int, blue: int) -> int | None:
        key = (red, blue)
        if key not in cache:
            cache[key] = merger.fold(red, blue, mutate=False)
        return cache[key]

    while True:
        frontier = blues()
        if not frontier:
            break
        while True:
            promote = None
            for b in frontier:
                if all(cached_score(r, b) is None for r in reds):
                    promote = b
                    break
            if promote is not None:
                red_pos[promote] = len(reds)
                reds.append(promote)
                break
            best = None  # (-score, red position, blue id)
            for b in frontier:
                for r in reds:
                    s = cached_score(r, b)
                    if s is not None:
                        cand = (-s, red_pos[r], b)
                        if best is None or cand < best:
                            best = cand
            _, rpos, blue = best
            fresh = merger.fold(reds[rpos], blue, mutate=False)
            if fresh != cache[(reds[rpos], blue)]:
                cache[(reds[rpos], blue)] = fresh  # stale entry; pick again
                continue
            applied = merger.fold(reds[rpos], blue, mutate=True)
            assert applied is not None, "fresh-scored merge must fold cleanly"
            break

    transitions: dict[tuple[int, InputSymbol], int] = {}
    outputs: dict[tuple[int, InputSymbol], int] = {}
    for state, r in enumerate(reds):
        for sym, child in merger.children[r].items():
            transitions[(state, sym)] = red_pos[merger.find(child)]
            outputs[(state, sym)] = merger.outputs[r][sym]
    return MealyMachine(len(reds), red_pos[merger.find(0)], tree.obs_width,
                        tree.num_actions, transitions, outputs)


def consistency_check(machine: MealyMachine, labeled) -> bool:
    """True iff the machine reproduces every training label sequence."""
    from .core import UndefinedTransitionError

    for syms, labels in labeled:
        try:
            if machine.run(syms) != list(labels):
                return False
        except UndefinedTransitionError:
            return False
    return True
