"""Candidate character sets, batched ranking, and the analysis experiments.

Everything here works on encoded coordinates (position 0 is the begin
marker, surface character i sits at i+1, the end marker follows the last
character).  Scores are the relevant part of a head logit as produced by
the scoring kernels, so ranking candidates never rebuilds the model graph.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import Rng
from .corpus import (
    BOW_ID, EOW_ID, PAD_ID, DEFAULT_TOY_RULESET,
    SegmentAnnotation, SyntheticConfig, ToyRuleset, WordSample,
    generate_toy_corpus, inject_synthetic,
)
from .decomposition import cnn_kernel_context, lstm_kernel_context
from .models import (
    CnnConfig, Dataset, LstmConfig, TaggerModel, TrainConfig,
    TrainingDiverged, evaluate_accuracy, train,
)

__all__ = [
    "AttributionError",
    "MAX_EXHAUSTIVE_CHARS",
    "LARGE_WORD_MAX_SIZE",
    "real_positions",
    "enumerate_candidates",
    "candidate_scores",
    "RankedCandidate",
    "rank_candidates",
    "SegmentationEval",
    "topk_segmentation_eval",
    "render_pattern",
    "PatternRow",
    "PatternReport",
    "pattern_frequency",
    "singleton_score_matrix",
    "pair_score_matrix",
    "SyntheticCell",
    "SyntheticReport",
    "split_three",
    "synthetic_experiment",
    "SuffixEval",
    "suffix_attribution_eval",
    "toy_rule_experiment",
    "InteractionReport",
    "interaction_analysis",
]

MAX_EXHAUSTIVE_CHARS = 16   # full subset scan only below this many characters
LARGE_WORD_MAX_SIZE = 4     # subset cardinality cap beyond that

DEFAULT_LEVELS = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)


class AttributionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Candidates and scoring
# ---------------------------------------------------------------------------

def real_positions(ids) -> list[int]:
    """Encoded positions that hold surface characters."""
    return [i for i, v in enumerate(ids)
            if v not in (PAD_ID, BOW_ID, EOW_ID)]


def _universe(ids, include_boundaries: bool) -> list[int]:
    pos = real_positions(ids)
    if include_boundaries:
        pos = [0] + pos + [list(ids).index(EOW_ID)]
    return sorted(pos)


def enumerate_candidates(ids, mode: str, sizes=None,
                         include_boundaries: bool = False) -> list[tuple[int, ...]]:
    """Candidate index sets in deterministic (size, lexicographic) order.

    Modes: ``singletons`` (one position each), ``windows`` (contiguous runs),
    ``subsets`` (every combination).  The subset mode refuses unbounded
    enumeration on long words; cap the sizes instead.
    """
    universe = _universe(ids, include_boundaries)
    L = len(universe)
    if L == 0:
        return []
    if mode == "singletons":
        return [(p,) for p in universe]
    if sizes is None:
        wanted = range(1, L + 1)
    else:
        wanted = sorted(set(int(k) for k in sizes))
        if any(k < 1 for k in wanted):
            raise AttributionError("candidate sizes must be >= 1")
    if mode == "windows":
        out = []
        for k in wanted:
            if k > L:
                continue
            for start in range(L - k + 1):
                out.append(tuple(universe[start:start + k]))
        return out
    if mode == "subsets":
        max_k = max((k for k in wanted if k <= L), default=0)
        if L > MAX_EXHAUSTIVE_CHARS and max_k > LARGE_WORD_MAX_SIZE:
            raise AttributionError(
                f"{L} positions with subsets up to size {max_k} is too many "
                f"candidates; cap sizes at {LARGE_WORD_MAX_SIZE} for words "
                f"over {MAX_EXHAUSTIVE_CHARS} characters")
        out = []
        for k in wanted:
            if k > L:
                continue
            out.extend(itertools.combinations(universe, k))
        return out
    raise AttributionError(
        f"unknown candidate mode {mode!r} (singletons, windows, subsets)")


def _context(model: TaggerModel, ids):
    if model.arch == "cnn":
        return cnn_kernel_context(model, ids)
    return lstm_kernel_context(model, ids)


def masks_for(candidates, seq_len: int) -> np.ndarray:
    masks = np.zeros((len(candidates), seq_len), dtype=bool)
    for r, cand in enumerate(candidates):
        masks[r, list(cand)] = True
    return masks


def candidate_scores(model: TaggerModel, ids, candidates, class_name: str,
                     label: str, ctx=None) -> np.ndarray:
    """Relevant score of each candidate set for one head column."""
    if not candidates:
        return np.zeros(0)
    w, _ = model.head(class_name)
    col = model.schema.label_index(class_name, label)
    wcol = np.ascontiguousarray(w[:, col:col + 1])
    if ctx is None:
        ctx = _context(model, ids)
    masks = masks_for(candidates, len(ids))
    if model.arch == "cnn":
        return kernels.cnn_cd_scores(ctx, masks, wcol)[:, 0]
    return kernels.lstm_cd_scores(ctx, masks, wcol)[:, 0]


@dataclass(frozen=True)
class RankedCandidate:
    positions: tuple[int, ...]
    score: float


def rank_candidates(model: TaggerModel, ids, class_name: str, label: str,
                    candidates, ctx=None) -> list[RankedCandidate]:
    """Descending by score; ties resolved by position order."""
    scores = candidate_scores(model, ids, candidates, class_name, label, ctx)
    order = sorted(range(len(candidates)),
                   key=lambda r: (-scores[r], tuple(candidates[r])))
    return [RankedCandidate(positions=tuple(candidates[r]),
                            score=float(scores[r])) for r in order]


# ---------------------------------------------------------------------------
# Segmentation recovery
# ---------------------------------------------------------------------------

def encoded_annotation(ann: SegmentAnnotation) -> tuple[int, ...]:
    return tuple(sorted(i + 1 for i in ann.index_set))


@dataclass
class SegmentationEval:
    """How often the annotated character set ranks in the top k."""

    topk: dict[int, int]
    evaluated: int = 0
    skipped: int = 0
    mispredicted: int = 0
    per_word: list[dict] = field(default_factory=list)

    def rate(self, k: int) -> float:
        return self.topk[k] / self.evaluated if self.evaluated else 0.0


def topk_segmentation_eval(model: TaggerModel,
                           annotations: list[SegmentAnnotation],
                           ks=(1, 2, 3),
                           only_correct: bool = False,
                           mode: str = "subsets") -> SegmentationEval:
    """Rank all same-size character sets and look up the annotated one.

    With ``mode="subsets"`` the candidate pool is every same-size set and
    words too long for the exhaustive scan are counted as skipped.  With
    ``mode="windows"`` only consecutive runs compete; an annotation whose
    character set is not contiguous then counts as evaluated but can never
    rank, so it misses at every k.
    """
    if mode not in ("subsets", "windows"):
        raise AttributionError(f"unknown evaluation mode {mode!r}")
    result = SegmentationEval(topk={k: 0 for k in ks})
    for ann in annotations:
        ids = model.encode(ann.surface)
        gt = encoded_annotation(ann)
        L = len(ann.surface)
        if (mode == "subsets" and L > MAX_EXHAUSTIVE_CHARS
                and len(gt) > LARGE_WORD_MAX_SIZE):
            result.skipped += 1
            continue
        if only_correct:
            if model.predict(ann.surface)[ann.class_name] != ann.value:
                result.mispredicted += 1
                continue
        cands = enumerate_candidates(ids, mode, sizes=[len(gt)])
        ranked = rank_candidates(model, ids, ann.class_name, ann.value, cands)
        rank = next((i for i, rc in enumerate(ranked) if rc.positions == gt),
                    None)
        if rank is not None:
            for k in ks:
                if rank < k:
                    result.topk[k] += 1
        result.evaluated += 1
        result.per_word.append({
            "surface": ann.surface,
            "value": ann.value,
            "rank": None if rank is None else rank + 1,
            "candidates": len(cands),
            "top": list(ranked[0].positions),
            "top_score": ranked[0].score,
            "hit": {k: rank is not None and rank < k for k in ks},
        })
    return result


# ---------------------------------------------------------------------------
# Pattern mining
# ---------------------------------------------------------------------------

def render_pattern(surface: str, positions) -> str:
    """Human-readable pattern: ^/$ markers, '_' per skipped character."""
    L = len(surface)
    pieces = []
    prev = None
    for p in sorted(positions):
        if p < 0 or p > L + 1:
            raise AttributionError(f"position {p} outside word {surface!r}")
        if prev is not None:
            pieces.append("_" * (p - prev - 1))
        if p == 0:
            pieces.append("^")
        elif p == L + 1:
            pieces.append("$")
        else:
            pieces.append(surface[p - 1])
        prev = p
    return "".join(pieces)


@dataclass(frozen=True)
class PatternRow:
    pattern: str
    size: int
    count: int
    share: float


@dataclass
class PatternReport:
    label: str
    rows: list[PatternRow]
    evaluated: int
    skipped: int
    mispredicted: int
    total: int


def pattern_frequency(model: TaggerModel, samples: list[WordSample],
                      class_name: str, label: str, sizes=(1, 2, 3),
                      include_boundaries: bool = True,
                      only_correct: bool = True) -> PatternReport:
    """Most frequent top-scoring character patterns for one class value.

    For every (correctly predicted) word carrying the label, the highest
    positive-scoring candidate of each size contributes one pattern; counts
    aggregate over words.  Boundary markers take part, so patterns can
    express word-final or word-initial evidence.
    """
    words = [s for s in samples if s.features.get(class_name) == label]
    counts: dict[tuple[int, str], int] = {}
    evaluated = skipped = mispredicted = 0
    for s in words:
        L = len(s.surface)
        if L + 2 > MAX_EXHAUSTIVE_CHARS and max(sizes) > LARGE_WORD_MAX_SIZE:
            skipped += 1
            continue
        if only_correct and model.predict(s.surface)[class_name] != label:
            mispredicted += 1
            continue
        ids = model.encode(s.surface)
        cands = enumerate_candidates(ids, "subsets", sizes=sizes,
                                     include_boundaries=include_boundaries)
        if not cands:
            skipped += 1
            continue
        scores = candidate_scores(model, ids, cands, class_name, label)
        evaluated += 1
        for k in sizes:
            rows = [(i, c) for i, c in enumerate(cands) if len(c) == k]
            if not rows:
                continue
            best_i, best_c = min(rows, key=lambda rc: (-scores[rc[0]], rc[1]))
            if scores[best_i] > 0.0:
                key = (k, render_pattern(s.surface, best_c))
                counts[key] = counts.get(key, 0) + 1
    rows = [PatternRow(pattern=pat, size=k, count=c,
                       share=c / evaluated if evaluated else 0.0)
            for (k, pat), c in counts.items()]
    rows.sort(key=lambda r: (r.size, -r.count, r.pattern))
    return PatternReport(label=label, rows=rows, evaluated=evaluated,
                         skipped=skipped, mispredicted=mispredicted,
                         total=len(words))


# ---------------------------------------------------------------------------
# Heatmap matrices
# ---------------------------------------------------------------------------

def singleton_score_matrix(model: TaggerModel, surface: str, class_name: str):
    """(labels, chars, matrix) where matrix[l, i] scores character i alone."""
    ids = model.encode(surface)
    cands = enumerate_candidates(ids, "singletons")
    ctx = _context(model, ids)
    w, _ = model.head(class_name)
    masks = masks_for(cands, len(ids))
    if model.arch == "cnn":
        scores = kernels.cnn_cd_scores(ctx, masks, np.ascontiguousarray(w))
    else:
        scores = kernels.lstm_cd_scores(ctx, masks, np.ascontiguousarray(w))
    labels = list(model.schema.labels(class_name))
    chars = [surface[p - 1] for (p,) in cands]
    return labels, chars, scores.T.copy()


def pair_score_matrix(model: TaggerModel, surface: str, class_name: str,
                      label: str):
    """(chars, matrix) with singleton scores on the diagonal, pairs off it."""
    ids = model.encode(surface)
    singles = enumerate_candidates(ids, "singletons")
    pairs = enumerate_candidates(ids, "subsets", sizes=[2])
    cands = singles + pairs
    scores = candidate_scores(model, ids, cands, class_name, label)
    pos_index = {p: i for i, (p,) in enumerate(singles)}
    L = len(singles)
    matrix = np.zeros((L, L))
    for (p,), sc in zip(singles, scores[:len(singles)]):
        i = pos_index[p]
        matrix[i, i] = sc
    for cand, sc in zip(pairs, scores[len(singles):]):
        i, j = pos_index[cand[0]], pos_index[cand[1]]
        matrix[i, j] = sc
        matrix[j, i] = sc
    chars = [surface[p - 1] for (p,) in singles]
    return chars, matrix


# ---------------------------------------------------------------------------
# Synthetic-marker validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticCell:
    p_syn: float
    seed: int
    n_words: int
    predicted: int
    syn_top1: int
    gt_top1: int
    retrained: bool


@dataclass
class SyntheticReport:
    levels: tuple[float, ...]
    seeds: tuple[int, ...]
    symbol: str
    cells: list[SyntheticCell]

    def totals(self, p_syn: float) -> dict:
        rows = [c for c in self.cells if c.p_syn == p_syn]
        n = sum(c.n_words for c in rows)
        agg = {
            "p_syn": p_syn,
            "n_words": n,
            "predicted": sum(c.predicted for c in rows),
            "syn_top1": sum(c.syn_top1 for c in rows),
            "gt_top1": sum(c.gt_top1 for c in rows),
        }
        for key in ("predicted", "syn_top1", "gt_top1"):
            agg[f"{key}_rate"] = agg[key] / n if n else 0.0
        return agg


def _flip_labels(samples, class_name, values, prob, rng):
    if prob <= 0.0:
        return list(samples)
    out = []
    for s in samples:
        feats = dict(s.features)
        if rng.random() < prob:
            others = [v for v in values if v != feats[class_name]]
            feats[class_name] = others[rng.choice_index([1.0] * len(others))]
        out.append(WordSample(surface=s.surface, features=feats))
    return out


def split_three(samples, rng, valid_frac=0.15, test_frac=0.15):
    idx = list(range(len(samples)))
    rng.shuffle(idx)
    n_valid = int(len(samples) * valid_frac)
    n_test = int(len(samples) * test_frac)
    valid = [samples[i] for i in idx[:n_valid]]
    test = [samples[i] for i in idx[n_valid:n_valid + n_test]]
    train_s = [samples[i] for i in idx[n_valid + n_test:]]
    return train_s, valid, test


def synthetic_experiment(levels=DEFAULT_LEVELS, seeds=(1, 2, 3),
                         n_words=800, ruleset: ToyRuleset | None = None,
                         symbol: str = "#", label_noise: float = 0.15,
                         arch: str = "cnn", model_config=None,
                         train_config: TrainConfig | None = None,
                         progress=None) -> SyntheticReport:
    """Train with an injected marker at several correlation levels.

    The marker is prepended with probability p_syn to words carrying the
    positive value and 1-p_syn to the rest.  Label noise keeps the real
    suffix cue imperfect so a perfectly correlated marker is the easier
    feature.  At evaluation every positive test word gets the marker, and
    we measure prediction accuracy plus whether the top singleton
    attribution is the marker or a true morphological character.
    """
    ruleset = ruleset or DEFAULT_TOY_RULESET
    schema = ruleset.schema()
    class_name = ruleset.rules[0].class_name
    positive = ruleset.rules[0].value
    values = [r.value for r in ruleset.rules]
    if model_config is None:
        model_config = (CnnConfig(embed_dim=16, widths=(1, 2, 3),
                                  counts=(12, 12, 12))
                        if arch == "cnn" else
                        LstmConfig(embed_dim=16, hidden=24))
    cells: list[SyntheticCell] = []
    for seed in seeds:
        rng = Rng(seed)
        base, annotations = generate_toy_corpus(ruleset, n_words,
                                                rng.split("corpus"))
        ann_by_surface = {a.surface: a for a in annotations}
        noisy = _flip_labels(base, class_name, values, label_noise,
                             rng.split("noise"))
        train_s, valid_s, test_s = split_three(noisy, rng.split("split"))
        for level in levels:
            cfg = SyntheticConfig(p_syn=level, symbol=symbol,
                                  class_name=class_name,
                                  positive_value=positive)
            inj_rng = rng.split(f"inject:{level}")
            train_inj = inject_synthetic(train_s, cfg, inj_rng)
            valid_inj = inject_synthetic(valid_s, cfg, inj_rng)
            dataset = Dataset.build(schema, train_inj, valid_inj)
            tc = train_config or TrainConfig(lr=3e-3, max_epochs=60,
                                             patience=8, seed=seed)
            retrained = False
            try:
                model, _ = train(arch, dataset, tc, model_config)
            except TrainingDiverged:
                retrained = True
                tc2 = TrainConfig(lr=tc.lr / 2.0, batch_size=tc.batch_size,
                                  max_epochs=tc.max_epochs,
                                  patience=tc.patience, seed=tc.seed + 1000,
                                  unk_substitution_prob=tc.unk_substitution_prob)
                model, _ = train(arch, dataset, tc2, model_config)
            pos_words = [s for s in test_s
                         if s.features[class_name] == positive]
            n = len(pos_words)
            predicted = syn = gt = 0
            for s in pos_words:
                forced = symbol + s.surface
                if model.predict(forced)[class_name] == positive:
                    predicted += 1
                ids = model.encode(forced)
                cands = enumerate_candidates(ids, "singletons")
                top = rank_candidates(model, ids, class_name, positive,
                                      cands)[0]
                if top.positions == (1,):
                    syn += 1
                ann = ann_by_surface.get(s.surface)
                if ann is not None:
                    gt_pos = {i + 2 for i in ann.index_set}
                    if top.positions[0] in gt_pos:
                        gt += 1
            cells.append(SyntheticCell(p_syn=level, seed=seed, n_words=n,
                                       predicted=predicted, syn_top1=syn,
                                       gt_top1=gt, retrained=retrained))
            if progress is not None:
                progress(cells[-1])
    return SyntheticReport(levels=tuple(levels), seeds=tuple(seeds),
                           symbol=symbol, cells=cells)


# ---------------------------------------------------------------------------
# Toy-rule recovery
# ---------------------------------------------------------------------------

@dataclass
class SuffixEval:
    n_words: int = 0
    n_correct: int = 0
    n_attributed: int = 0

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_words if self.n_words else 0.0

    @property
    def attribution_rate(self) -> float:
        return self.n_attributed / self.n_correct if self.n_correct else 0.0


def suffix_attribution_eval(model: TaggerModel,
                            annotations: list[SegmentAnnotation]) -> SuffixEval:
    """Of the correctly predicted words, how many put the top singleton
    attribution on an annotated rule character."""
    ev = SuffixEval()
    for ann in annotations:
        ev.n_words += 1
        if model.predict(ann.surface)[ann.class_name] != ann.value:
            continue
        ev.n_correct += 1
        ids = model.encode(ann.surface)
        cands = enumerate_candidates(ids, "singletons")
        top = rank_candidates(model, ids, ann.class_name, ann.value, cands)[0]
        if top.positions[0] in set(encoded_annotation(ann)):
            ev.n_attributed += 1
    return ev


def toy_rule_experiment(n_words: int = 1500, seed: int = 1, arch: str = "cnn",
                        ruleset: ToyRuleset | None = None, model_config=None,
                        train_config: TrainConfig | None = None):
    """Train on a deterministic suffix rule and check it is recovered."""
    ruleset = ruleset or DEFAULT_TOY_RULESET
    schema = ruleset.schema()
    rng = Rng(seed)
    samples, annotations = generate_toy_corpus(ruleset, n_words,
                                               rng.split("corpus"))
    train_s, valid_s, test_s = split_three(samples, rng.split("split"))
    if model_config is None:
        model_config = (CnnConfig(embed_dim=16, widths=(1, 2, 3),
                                  counts=(12, 12, 12))
                        if arch == "cnn" else
                        LstmConfig(embed_dim=16, hidden=24))
    tc = train_config or TrainConfig(lr=3e-3, max_epochs=40, patience=6,
                                     seed=seed)
    dataset = Dataset.build(schema, train_s, valid_s, test_s)
    model, history = train(arch, dataset, tc, model_config)
    report = evaluate_accuracy(model, test_s)
    ann_by_surface = {a.surface: a for a in annotations}
    test_anns = [ann_by_surface[s.surface] for s in test_s
                 if s.surface in ann_by_surface]
    suffix = suffix_attribution_eval(model, test_anns)
    return model, report, suffix


# ---------------------------------------------------------------------------
# Interaction analysis
# ---------------------------------------------------------------------------

GROUP_PATTERN_END_FINAL = "pattern-end-final"
GROUP_PATTERN_END_INNER = "pattern-end-inner"
GROUP_OUTSIDE_PATTERN = "outside-pattern"
INTERACTION_GROUPS = (GROUP_PATTERN_END_FINAL, GROUP_PATTERN_END_INNER,
                      GROUP_OUTSIDE_PATTERN)


@dataclass
class InteractionReport:
    max_scores: dict[str, list[float]]
    min_scores: dict[str, list[float]]
    kw_max: object | None
    kw_min: object | None
    dunn_max: list
    dunn_min: list
    notices: list[str]
    group_order: tuple[str, ...]


def interaction_analysis(model: TaggerModel,
                         annotations: list[SegmentAnnotation],
                         max_subset_size: int = 4) -> InteractionReport:
    """Compare score ranges of characters by their role in the annotation.

    For each annotated word three characters are examined where available:
    the last annotated character (grouped by whether it is also word-final)
    and the last character outside the annotation.  Each character's
    max/min relevant score over all candidate sets containing it measures
    how much interactions can raise or sink its contribution; the groups
    are then compared with a Kruskal-Wallis test and Dunn post-hocs.
    """
    from .stats import StatsError, dunn_bonferroni, kruskal_wallis

    max_scores = {g: [] for g in INTERACTION_GROUPS}
    min_scores = {g: [] for g in INTERACTION_GROUPS}
    notices: list[str] = []
    skipped = 0
    for ann in annotations:
        L = len(ann.surface)
        if L > MAX_EXHAUSTIVE_CHARS and max_subset_size > LARGE_WORD_MAX_SIZE:
            skipped += 1
            continue
        ids = model.encode(ann.surface)
        sizes = range(1, min(max_subset_size, L) + 1)
        cands = enumerate_candidates(ids, "subsets", sizes=sizes)
        scores = candidate_scores(model, ids, cands, ann.class_name,
                                  ann.value)
        pattern_end = max(ann.index_set) + 1        # encoded
        word_final = L                              # encoded last character
        targets = []
        if pattern_end == word_final:
            targets.append((pattern_end, GROUP_PATTERN_END_FINAL))
        else:
            targets.append((pattern_end, GROUP_PATTERN_END_INNER))
        gt_enc = set(encoded_annotation(ann))
        outside = [p for p in real_positions(ids)
                   if p not in gt_enc and p != word_final]
        if outside:
            targets.append((outside[-1], GROUP_OUTSIDE_PATTERN))
        for pos, group in targets:
            member = [s for c, s in zip(cands, scores) if pos in c]
            if not member:
                continue
            max_scores[group].append(float(max(member)))
            min_scores[group].append(float(min(member)))
    if skipped:
        notices.append(f"{skipped} words skipped (too long for subset scan)")

    def _test(groups: dict[str, list[float]]):
        usable = [g for g in INTERACTION_GROUPS if len(groups[g]) >= 2]
        for g in INTERACTION_GROUPS:
            if 0 < len(groups[g]) < 2:
                notices.append(
                    f"group {g} has fewer than two members; excluded")
        if len(usable) < 2:
            notices.append("fewer than two usable groups; tests skipped")
            return None, [], usable
        data = [groups[g] for g in usable]
        try:
            kw = kruskal_wallis(data)
            dunn = dunn_bonferroni(data)
        except StatsError as exc:
            notices.append(f"test skipped: {exc}")
            return None, [], usable
        return kw, dunn, usable

    kw_max, dunn_max, order = _test(max_scores)
    kw_min, dunn_min, _ = _test(min_scores)
    return InteractionReport(max_scores=max_scores, min_scores=min_scores,
                             kw_max=kw_max, kw_min=kw_min,
                             dunn_max=dunn_max, dunn_min=dunn_min,
                             notices=notices, group_order=tuple(order))
