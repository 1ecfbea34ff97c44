"""History clustering: empirical outcome distributions, KL-merge, model selection.

Each sampled history context (the symbol sequence ending with the pending
action) gets an empirical distribution over (affected-proposition assignment,
reward) outcomes. Contexts with enough samples become base clusters; bases are
greedily merged under a KL threshold, remaining rare contexts are folded into
the closest surviving cluster, and the per-epsilon models compete on a
log-likelihood loss with a support-size penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .core import Observation, RdplearnError, Trace, InputSymbol

HistoryKey = tuple[InputSymbol, ...]
Assignment = tuple[int, ...]
Outcome = tuple[Assignment, float]


class UnknownContextError(RdplearnError):
    """The requested history context never occurs in the sample."""


class MismatchedMaskError(RdplearnError):
    """Two distributions over different affected-proposition sets were combined."""


class UndefinedKLError(RdplearnError):
    """KL(p || q) is undefined because supp(p) is not contained in supp(q)."""


class UnassignedPrefixError(RdplearnError):
    """A trace prefix has no cluster in the model's assignment."""


def mask_positions(mask: int) -> tuple[int, ...]:
    """Ascending bit positions set in the mask."""
    out = []
    pos = 0
    while mask:
        if mask & 1:
            out.append(pos)
        mask >>= 1
        pos += 1
    return tuple(out)


def project_obs(obs: Observation, mask: int) -> Assignment:
    return tuple(obs.bits[p] for p in mask_positions(mask))


def apply_assignment(obs: Observation, mask: int, assignment: Assignment) -> Observation:
    """Replace the masked bits of `obs` with `assignment`; other bits unchanged."""
    return obs.replace_bits(mask_positions(mask), assignment)


def diff_mask(a: Observation, b: Observation) -> int:
    mask = 0
    for i, (x, y) in enumerate(zip(a.bits, b.bits)):
        if x != y:
            mask |= 1 << i
    return mask


@dataclass
class OutcomeDistribution:
    """A distribution over (assignment to affected propositions, reward) outcomes.

    `weight` is the number of samples behind the distribution. Empirical
    distributions carry raw `counts`, and probabilities are exactly
    counts/weight; hand-specified distributions (ground-truth label tables)
    carry probabilities only.
    """

    affected: int
    outcomes: dict[Outcome, float]
    weight: int
    counts: dict[Outcome, int] | None = None

    def __post_init__(self):
        total = sum(self.outcomes.values())
        if abs(total - 1.0) > 1e-9:
            raise RdplearnError(f"outcome probabilities sum to {total}, not 1")
        if any(p <= 0.0 for p in self.outcomes.values()):
            raise RdplearnError("zero/negative-probability outcomes must be omitted")
        width = len(mask_positions(self.affected))
        if any(len(assign) != width for assign, _ in self.outcomes):
            raise RdplearnError("assignment width inconsistent with affected mask")
        if self.counts is not None and sum(self.counts.values()) != self.weight:
            raise RdplearnError("counts must sum to weight")

    @classmethod
    def from_counts(cls, affected: int, counts: Mapping[Outcome, int]) -> "OutcomeDistribution":
        weight = sum(counts.values())
        if weight < 1:
            raise RdplearnError("empirical distribution needs at least one sample")
        probs = {o: c / weight for o, c in counts.items() if c > 0}
        return cls(affected, probs, weight, dict(counts))

    @classmethod
    def from_probs(cls, affected: int, probs: Mapping[Outcome, float], weight: int = 0) -> "OutcomeDistribution":
        return cls(affected, {o: p for o, p in probs.items() if p > 0.0}, weight, None)

    @property
    def support(self) -> frozenset[Outcome]:
        return frozenset(self.outcomes)

    @property
    def expected_reward(self) -> float:
        return sum(p * r for (_, r), p in self.outcomes.items())

    def signature(self) -> tuple:
        """Hashable identity of (mask, distribution); equal iff KL would be 0."""
        return (self.affected, tuple(sorted(self.outcomes.items())))


def kl_divergence(p: OutcomeDistribution, q: OutcomeDistribution) -> float:
    """KL(p || q) in nats over supp(p); requires matching masks and support cover."""
    if p.affected != q.affected:
        raise MismatchedMaskError(f"masks differ: {p.affected:b} vs {q.affected:b}")
    total = 0.0
    for outcome, pp in p.outcomes.items():
        qq = q.outcomes.get(outcome)
        if qq is None:
            raise UndefinedKLError(f"outcome {outcome} not in support of q")
        total += pp * math.log(pp / qq)
    return total


def merge_distributions(d1: OutcomeDistribution, d2: OutcomeDistribution) -> OutcomeDistribution:
    """Weight-averaged combination: P = (w1*P1 + w2*P2) / (w1+w2).

    When both sides carry raw counts the merge sums them, which equals the
    weighted average exactly and makes repeated merging order-independent.
    """
    if d1.affected != d2.affected:
        raise MismatchedMaskError("cannot merge distributions over different masks")
    if d1.counts is not None and d2.counts is not None:
        counts = dict(d1.counts)
        for outcome, c in d2.counts.items():
            counts[outcome] = counts.get(outcome, 0) + c
        return OutcomeDistribution.from_counts(d1.affected, counts)
    w = d1.weight + d2.weight
    probs: dict[Outcome, float] = {}
    for outcome in d1.support | d2.support:
        probs[outcome] = (d1.weight * d1.outcomes.get(outcome, 0.0)
                          + d2.weight * d2.outcomes.get(outcome, 0.0)) / w
    return OutcomeDistribution.from_probs(d1.affected, probs, weight=w)


@dataclass
class Cluster:
    id: int
    dist: OutcomeDistribution
    members: frozenset[HistoryKey]


def merge_pair(c1: Cluster, c2: Cluster) -> Cluster:
    """Merge two clusters; the result keeps the smaller id."""
    return Cluster(min(c1.id, c2.id), merge_distributions(c1.dist, c2.dist),
                   c1.members | c2.members)


@dataclass
class ClusteredModel:
    clusters: list[Cluster]
    assignment: dict[HistoryKey, int]
    epsilon: float
    loss: float = math.nan

    def cluster_of(self, ctx: HistoryKey) -> Cluster:
        if ctx not in self.assignment:
            raise UnassignedPrefixError(f"context of length {len(ctx)} not in model")
        return self.clusters[self.assignment[ctx]]


def _traces_of(sample) -> Sequence[Trace]:
    return getattr(sample, "traces", sample)


def collect_contexts(sample) -> dict[HistoryKey, dict[tuple[Observation, float], int]]:
    """Group sampled steps by history context.

    Returns raw (next observation, reward) counts per context; the affected
    mask and outcome projection are derived afterwards.
    """
    table: dict[HistoryKey, dict[tuple[Observation, float], int]] = {}
    for trace in _traces_of(sample):
        syms = trace.input_symbols()
        for i, step in enumerate(trace.steps):
            ctx = syms[: i + 1]
            raw = (step.next_obs, step.reward)
            bucket = table.setdefault(ctx, {})
            bucket[raw] = bucket.get(raw, 0) + 1
    return table


def _context_distribution(ctx: HistoryKey, raw_counts: Mapping[tuple[Observation, float], int]) -> OutcomeDistribution:
    source = ctx[-1].obs
    mask = 0
    for (next_obs, _r) in raw_counts:
        mask |= diff_mask(source, next_obs)
    counts: dict[Outcome, int] = {}
    for (next_obs, r), c in raw_counts.items():
        outcome = (project_obs(next_obs, mask), r)
        counts[outcome] = counts.get(outcome, 0) + c
    return OutcomeDistribution.from_counts(mask, counts)


def affected_propositions(sample, ctx: HistoryKey) -> int:
    """Bitmask of propositions that change in any sampled continuation of ctx."""
    table = collect_contexts(sample)
    if ctx not in table:
        raise UnknownContextError(f"context of length {len(ctx)} never sampled")
    source = ctx[-1].obs
    mask = 0
    for (next_obs, _r) in table[ctx]:
        mask |= diff_mask(source, next_obs)
    return mask


def base_distributions(sample, min_samples: int):
    """Split sampled contexts into (bases, rare) by the min_samples threshold.

    Distributions are built over the affected mask pooled across all contexts
    sharing the same (observation, action) pending symbol. Pooling is exact:
    bits a context never changed are pinned to its source observation, so the
    wider projection loses nothing, while sampling luck no longer fragments
    same-symbol contexts into incomparable masks.

    Both lists hold (context, OutcomeDistribution) pairs sorted by context so
    downstream merging is deterministic.
    """
    if min_samples < 1:
        raise RdplearnError("min_samples must be >= 1")
    table = collect_contexts(sample)
    pooled: dict[InputSymbol, int] = {}
    for ctx, raw_counts in table.items():
        source = ctx[-1].obs
        mask = 0
        for (next_obs, _r) in raw_counts:
            mask |= diff_mask(source, next_obs)
        sym = ctx[-1]
        pooled[sym] = pooled.get(sym, 0) | mask
    bases, rare = [], []
    for ctx in sorted(table):
        mask = pooled[ctx[-1]]
        counts: dict[Outcome, int] = {}
        for (next_obs, r), c in table[ctx].items():
            outcome = (project_obs(next_obs, mask), r)
            counts[outcome] = counts.get(outcome, 0) + c
        dist = OutcomeDistribution.from_counts(mask, counts)
        (bases if dist.weight >= min_samples else rare).append((ctx, dist))
    return bases, rare


@dataclass
class _Work:
    dist: OutcomeDistribution
    members: set[HistoryKey] = field(default_factory=set)


def reproject(dist: OutcomeDistribution, source: Observation, target_mask: int) -> OutcomeDistribution:
    """Re-express `dist` over a superset mask.

    Bits in target_mask but not in dist.affected never changed in the sample
    behind `dist`, so their post-action values equal the source observation's;
    the reprojection is exact, not an approximation.
    """
    if target_mask & dist.affected != dist.affected:
        raise MismatchedMaskError("target mask must contain the distribution's mask")
    if target_mask == dist.affected:
        return dist
    own = mask_positions(dist.affected)
    counts: dict[Outcome, int] = {}
    for (assignment, r), c in (dist.counts or {}).items():
        filled = source.replace_bits(own, assignment)
        key = (project_obs(filled, target_mask), r)
        counts[key] = counts.get(key, 0) + c
    return OutcomeDistribution.from_counts(target_mask, counts)


def _best_base_pair(work: list[_Work], epsilon: float, min_samples: int):
    """Smallest-KL eligible pair among current clusters, or None.

    Eligibility: same mask, both weights >= min_samples, and at least one KL
    direction defined (nested supports) with value <= epsilon. Both directions
    are tried; requiring the heavier side as the KL's first argument would
    permanently strand a light deterministic cluster next to a heavy mixed
    one even when they are statistically indistinguishable.
    """
    best = None
    n = len(work)
    for i in range(n):
        for j in range(i + 1, n):
            a, b = work[i], work[j]
            if a.dist.affected != b.dist.affected:
                continue
            if min(a.dist.weight, b.dist.weight) < min_samples:
                continue
            for hi, lo in ((i, j), (j, i)):
                p1, p2 = work[hi].dist, work[lo].dist
                if not p1.support <= p2.support:
                    continue
                kl = kl_divergence(p1, p2)
                if kl <= epsilon:
                    cand = (kl, min(hi, lo), max(hi, lo))
                    if best is None or cand < best:
                        best = cand
    return best


def merge_round(bases, rare, epsilon: float, min_samples: int) -> ClusteredModel:
    """One full clustering pass at a fixed epsilon.

    Identical distributions are pooled up front (they sit at KL 0, which the
    greedy smallest-KL-first rule would merge before anything else anyway);
    the greedy loop then recomputes eligible pairs after every merge. Rare
    contexts are assigned against the frozen post-merge clusters and their
    counts folded in afterwards, so the result does not depend on rare order.
    """
    if epsilon < 0:
        raise RdplearnError("epsilon must be >= 0")

    work: list[_Work] = []
    by_sig: dict[tuple, int] = {}
    for ctx, dist in bases:
        sig = dist.signature()
        if sig in by_sig:
            w = work[by_sig[sig]]
            w.dist = merge_distributions(w.dist, dist)
            w.members.add(ctx)
        else:
            by_sig[sig] = len(work)
            work.append(_Work(dist, {ctx}))

    while True:
        best = _best_base_pair(work, epsilon, min_samples)
        if best is None:
            break
        _, hi, lo = best
        keep, drop = min(hi, lo), max(hi, lo)
        work[keep] = _Work(merge_distributions(work[hi].dist, work[lo].dist),
                           work[keep].members | work[drop].members)
        del work[drop]

    # Rare contexts: target = surviving cluster covering the rare support with
    # the smallest KL(P || Q); evaluated against frozen targets so the result
    # is independent of rare order. A cluster over a superset mask is eligible
    # through the exact reprojection above (the rare's sample pins the extra
    # bits to the source observation's values).
    frozen = [w.dist for w in work]
    pending: list[tuple[int, HistoryKey, OutcomeDistribution]] = []
    singletons: list[tuple[HistoryKey, OutcomeDistribution]] = []
    target_cache: dict[tuple, int | None] = {}
    for ctx, dist in rare:
        source = ctx[-1].obs
        sig = (dist.signature(), source)
        if sig in target_cache:
            target = target_cache[sig]
        else:
            best_t = None
            for idx, q in enumerate(frozen):
                if q.affected & dist.affected != dist.affected:
                    continue
                lifted = reproject(dist, source, q.affected)
                if not lifted.support <= q.support:
                    continue
                cand = (kl_divergence(lifted, q), idx)
                if best_t is None or cand < best_t:
                    best_t = cand
            target = None if best_t is None else best_t[1]
            target_cache[sig] = target
        if target is None:
            singletons.append((ctx, dist))
        else:
            pending.append((target, ctx, reproject(dist, source, frozen[target].affected)))
    for idx, ctx, dist in pending:
        work[idx].dist = merge_distributions(work[idx].dist, dist)
        work[idx].members.add(ctx)

    clusters = [Cluster(i, w.dist, frozenset(w.members)) for i, w in enumerate(work)]
    for ctx, dist in singletons:
        clusters.append(Cluster(len(clusters), dist, frozenset({ctx})))
    assignment = {ctx: c.id for c in clusters for ctx in c.members}
    return ClusteredModel(clusters, assignment, epsilon)


def trace_likelihood(trace: Trace, model: ClusteredModel) -> float:
    """Log-probability of the trace's outcomes under its clusters' distributions.

    Returns -inf when an observed outcome falls outside its cluster's support.
    """
    syms = trace.input_symbols()
    total = 0.0
    for i, step in enumerate(trace.steps):
        cluster = model.cluster_of(syms[: i + 1])
        outcome = (project_obs(step.next_obs, cluster.dist.affected), step.reward)
        p = cluster.dist.outcomes.get(outcome)
        if p is None:
            return -math.inf
        total += math.log(p)
    return total


def _support_penalty(model: ClusteredModel, lam: float) -> float:
    return lam * math.log(sum(len(c.dist.support) for c in model.clusters))


def _loss_from_contexts(model, context_table, lam: float) -> float:
    nll = 0.0
    for ctx, raw_counts in context_table.items():
        cluster = model.cluster_of(ctx)
        mask = cluster.dist.affected
        for (next_obs, r), n in raw_counts.items():
            p = cluster.dist.outcomes.get((project_obs(next_obs, mask), r))
            if p is None:
                return math.inf
            nll -= n * math.log(p)
    return nll + _support_penalty(model, lam)


def model_loss(model: ClusteredModel, sample, lam: float) -> float:
    """Negative log-likelihood of the sample plus lam * log(sum of support sizes)."""
    if lam < 0:
        raise RdplearnError("lambda must be >= 0")
    return _loss_from_contexts(model, collect_contexts(sample), lam)


def select_model(bases, rare, epsilons: Sequence[float], sample, lam: float,
                 min_samples: int) -> ClusteredModel:
    """Run merge_round per epsilon, score each, return the lowest-loss model."""
    if not epsilons:
        raise RdplearnError("epsilon grid must be non-empty")
    context_table = collect_contexts(sample)
    best = None
    for eps in epsilons:
        model = merge_round(bases, rare, eps, min_samples)
        model.loss = _loss_from_contexts(model, context_table, lam)
        if best is None or model.loss < best.loss:
            best = model
    return best


def label_traces(sample, model: ClusteredModel, min_weight: int | None = None):
    """Per trace: its input symbols and the cluster id of every prefix context.

    With `min_weight` set, each sequence is truncated at the first position
    whose context has fewer than that many samples. Labels there are the MAP
    of a near-single draw and carry no class information; context counts only
    shrink along a trace, so truncation keeps exactly the well-backed prefix.
    """
    counts: dict[HistoryKey, int] | None = None
    if min_weight is not None:
        counts = {ctx: sum(raw.values()) for ctx, raw in collect_contexts(sample).items()}
    out = []
    for trace in _traces_of(sample):
        syms = trace.input_symbols()
        keep = len(syms)
        if counts is not None:
            keep = 0
            while keep < len(syms) and counts[syms[: keep + 1]] >= min_weight:
                keep += 1
        labels = [model.assignment.get(syms[: i + 1]) for i in range(keep)]
        if any(l is None for l in labels):
            raise UnassignedPrefixError("trace has a prefix outside the model")
        out.append((syms[:keep], labels))
    return out


def model_report(model: ClusteredModel) -> str:
    """One line per cluster: id, mask, weight, expected reward, outcome probs."""
    lines = []
    for c in model.clusters:
        outs = " ".join(
            f"{''.join(map(str, assign)) or '-'}:{r:g}@{p:.6f}"
            for (assign, r), p in sorted(c.dist.outcomes.items())
        )
        lines.append(f"cluster {c.id} mask={c.dist.affected:b} weight={c.dist.weight} "
                     f"expreward={c.dist.expected_reward:.6f} outcomes: {outs}")
    return "\n".join(lines) + "\n"
