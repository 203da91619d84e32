"""Corpus ingestion: CoNLL-U files, segmentation annotations, vocabularies.

Also provides the deterministic toy-corpus generator used for desk-scale
validation and the synthetic-character injection used by the synthetic
attribution experiment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

from .autodiff import Rng

__all__ = [
    "CorpusError",
    "NA_LABEL",
    "WordSample",
    "FeatureSchema",
    "CharVocab",
    "SegmentAnnotation",
    "SyntheticConfig",
    "ToyRuleset",
    "ToyRule",
    "builtin_schema",
    "parse_conllu",
    "parse_conllu_file",
    "dedupe",
    "dedupe_and_split",
    "parse_segmentation",
    "parse_segmentation_file",
    "encode_word",
    "decode_ids",
    "inject_synthetic",
    "generate_toy_corpus",
    "write_conllu",
    "write_segments",
]

NA_LABEL = "NA"

# Reserved vocabulary slots.  Start/end-of-word render as ^ and $.
PAD_ID = 0
UNK_ID = 1
BOW_ID = 2
EOW_ID = 3
BOW_CHAR = "^"
EOW_CHAR = "$"
PAD_CHAR = "·"  # middle dot, rendering only
UNK_CHAR = "⁇"  # double question mark, rendering only

# Finnish segmentation source draws on the first 520 lines of the training
# file, which therefore have to be dropped before training.
FINNISH_TRAIN_SKIP_LINES = 520


class CorpusError(ValueError):
    """Malformed corpus input."""


@dataclass(frozen=True)
class WordSample:
    """A word as a character string plus one label per feature class."""

    surface: str
    features: dict[str, str]

    def __post_init__(self):
        if not self.surface:
            raise CorpusError("empty surface")


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature classes with their ordered label sets (NA included)."""

    language: str
    classes: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        for name, labels in self.classes:
            if NA_LABEL not in labels:
                raise CorpusError(f"class {name} lacks the {NA_LABEL} label")
            if len(set(labels)) != len(labels):
                raise CorpusError(f"duplicate labels in class {name}")

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.classes)

    def labels(self, class_name: str) -> tuple[str, ...]:
        for name, labels in self.classes:
            if name == class_name:
                return labels
        raise CorpusError(f"unknown feature class: {class_name}")

    def label_index(self, class_name: str, label: str) -> int:
        labels = self.labels(class_name)
        try:
            return labels.index(label)
        except ValueError:
            raise CorpusError(
                f"unknown value {label!r} for class {class_name}") from None

    def complete(self, partial: dict[str, str]) -> dict[str, str]:
        """Keep schema classes only and fill the absent ones with NA."""
        out = {}
        for name, labels in self.classes:
            value = partial.get(name, NA_LABEL)
            if value not in labels:
                raise CorpusError(f"unknown value {value!r} for class {name}")
            out[name] = value
        return out

    def to_dict(self) -> dict:
        return {"language": self.language,
                "classes": [[n, list(ls)] for n, ls in self.classes]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(language=d["language"],
                   classes=tuple((n, tuple(ls)) for n, ls in d["classes"]))


_SCHEMAS = {
    "fi": [
        ("Number", ["Sing", "Plur"]),
        ("PartForm", ["Past", "Pres", "Agt", "Neg"]),
        ("Case", ["Ela", "Ine", "Ins", "Par", "Ill", "Com", "Nom", "All",
                  "Acc", "Ade", "Gen", "Ess", "Abl", "Tra", "Abe"]),
        ("Person", ["1", "2", "3"]),
        ("Derivation", ["Ja", "Minen", "Sti", "Vs", "Tar", "Llinen", "Inen",
                        "U", "Ttaa", "Ttain", "Lainen", "Ton"]),
        ("Person[psor]", ["1", "2", "3"]),
        ("VerbForm", ["Inf", "Part", "Fin"]),
        ("Mood", ["Imp", "Cnd", "Pot", "Ind"]),
        ("Tense", ["Past", "Pres"]),
        ("Clitic", ["Pa,S", "Han", "Ko", "Pa", "Han,Pa", "Han,Ko", "Ko,S",
                    "S", "Kin", "Kaan", "Ka"]),
        ("Degree", ["Pos", "Cmp", "Sup"]),
        ("Voice", ["Pass", "Act"]),
    ],
    "es": [
        ("Person", ["1", "2", "3"]),
        ("Mood", ["Imp", "Ind", "Sub", "Cnd"]),
        ("Tense", ["Fut", "Imp", "Pres", "Past"]),
        ("Gender", ["Fem", "Masc"]),
        ("VerbForm", ["Inf", "Ger", "Part", "Fin"]),
        ("Number", ["Sing", "Plur"]),
    ],
    "sv": [
        ("Gender", ["Neut", "Masc", "Fem", "Com"]),
        ("Degree", ["Sup", "Cmp", "Pos"]),
        ("Number", ["Sing", "Plur"]),
        ("Case", ["Gen", "Nom", "Acc"]),
        ("Poss", ["Yes"]),
        ("Voice", ["Act", "Pass"]),
        ("Tense", ["Pres", "Past"]),
        ("Definite", ["Ind", "Def"]),
        ("VerbForm", ["Sup", "Part", "Inf", "Fin", "Stem"]),
    ],
}


def builtin_schema(language: str) -> FeatureSchema:
    """Feature schema for one of the built-in languages (fi, es, sv)."""
    try:
        spec = _SCHEMAS[language]
    except KeyError:
        raise CorpusError(f"no built-in schema for language {language!r}; "
                          f"known: {sorted(_SCHEMAS)}") from None
    return FeatureSchema(
        language=language,
        classes=tuple((name, (NA_LABEL, *values)) for name, values in spec))


# ---------------------------------------------------------------------------
# CoNLL-U
# ---------------------------------------------------------------------------

def parse_conllu(text: str, schema: FeatureSchema,
                 skip_lines: int = 0) -> list[WordSample]:
    """One WordSample per token row of a CoNLL-U document.

    Comments, blank lines, multiword-token ranges and empty nodes are
    skipped; FEATS keys outside the schema are dropped and absent classes
    filled with NA.  The first ``skip_lines`` physical lines are ignored.
    """
    if skip_lines < 0:
        raise CorpusError("skip_lines must be >= 0")
    samples = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if lineno <= skip_lines:
            continue
        line = line.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise CorpusError(
                f"line {lineno}: expected 10 tab-separated columns, got {len(cols)}")
        token_id = cols[0]
        if "-" in token_id or "." in token_id:
            continue  # multiword range / empty node
        form = cols[1]
        feats = cols[5]
        raw: dict[str, str] = {}
        if feats != "_":
            for pair in feats.split("|"):
                key, sep, value = pair.partition("=")
                if not sep:
                    raise CorpusError(
                        f"line {lineno}: malformed feature {pair!r}")
                raw[key] = value
        kept = {k: v for k, v in raw.items() if k in schema.class_names}
        try:
            features = schema.complete(kept)
        except CorpusError as exc:
            raise CorpusError(f"line {lineno}: {exc}") from None
        if not form:
            raise CorpusError(f"line {lineno}: empty FORM")
        samples.append(WordSample(surface=form, features=features))
    return samples


def parse_conllu_file(path, schema: FeatureSchema,
                      skip_lines: int = 0) -> list[WordSample]:
    with open(path, encoding="utf-8") as fh:
        return parse_conllu(fh.read(), schema, skip_lines=skip_lines)


def dedupe(samples: list[WordSample]) -> tuple[list[WordSample], int, int]:
    """Drop duplicate surfaces, first occurrence wins.

    Returns (unique samples, duplicates dropped, duplicates whose features
    disagreed with the kept occurrence).
    """
    if not samples:
        raise CorpusError("dedupe of empty sample list")
    seen: dict[str, WordSample] = {}
    dropped = conflicts = 0
    for s in samples:
        kept = seen.get(s.surface)
        if kept is None:
            seen[s.surface] = s
        else:
            dropped += 1
            if kept.features != s.features:
                conflicts += 1
    return list(seen.values()), dropped, conflicts


@dataclass
class SplitReport:
    kept: int
    dropped: int
    conflicts: int


def dedupe_and_split(train: list[WordSample], valid: list[WordSample],
                     test: list[WordSample]):
    """Deduplicate each split independently; returns splits plus reports."""
    out = []
    reports = {}
    for name, split in (("train", train), ("valid", valid), ("test", test)):
        unique, dropped, conflicts = dedupe(split)
        out.append(unique)
        reports[name] = SplitReport(len(unique), dropped, conflicts)
    return (*out, reports)


# ---------------------------------------------------------------------------
# Vocabulary and encoding
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CharVocab:
    """Character-to-id map with reserved pad/unk/start/end slots."""

    chars: tuple[str, ...]  # regular characters, id = index + 4
    char_counts: dict[str, int] = field(default_factory=dict, compare=False)

    @classmethod
    def build(cls, samples: list[WordSample]) -> "CharVocab":
        counts: dict[str, int] = {}
        for s in samples:
            for ch in s.surface:
                counts[ch] = counts.get(ch, 0) + 1
        counts.pop(BOW_CHAR, None)
        counts.pop(EOW_CHAR, None)
        return cls(chars=tuple(sorted(counts)), char_counts=counts)

    @property
    def size(self) -> int:
        return len(self.chars) + 4

    @cached_property
    def _lookup(self) -> dict[str, int]:
        return {ch: i + 4 for i, ch in enumerate(self.chars)}

    def id_of(self, ch: str) -> int:
        if ch == BOW_CHAR:
            return BOW_ID
        if ch == EOW_CHAR:
            return EOW_ID
        return self._lookup.get(ch, UNK_ID)

    def char_of(self, idx: int) -> str:
        if idx == PAD_ID:
            return PAD_CHAR
        if idx == UNK_ID:
            return UNK_CHAR
        if idx == BOW_ID:
            return BOW_CHAR
        if idx == EOW_ID:
            return EOW_CHAR
        return self.chars[idx - 4]

    def is_singleton(self, ch: str) -> bool:
        return self.char_counts.get(ch, 0) == 1

    def to_dict(self) -> dict:
        return {"chars": list(self.chars),
                "char_counts": dict(sorted(self.char_counts.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "CharVocab":
        return cls(chars=tuple(d["chars"]), char_counts=dict(d["char_counts"]))


def encode_word(surface: str, vocab: CharVocab, min_len: int = 0) -> list[int]:
    """``[^] + chars + [$]`` right-padded with the pad id up to ``min_len``."""
    ids = [BOW_ID]
    ids.extend(vocab.id_of(ch) for ch in surface)
    ids.append(EOW_ID)
    while len(ids) < min_len:
        ids.append(PAD_ID)
    return ids


def decode_ids(ids: list[int], vocab: CharVocab) -> str:
    """Inverse of encode_word for in-vocabulary words (markers/pads dropped)."""
    return "".join(vocab.char_of(i) for i in ids
                   if i not in (PAD_ID, BOW_ID, EOW_ID))


# ---------------------------------------------------------------------------
# Segmentation annotations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SegmentAnnotation:
    """Ground-truth character positions realizing one feature of a word."""

    surface: str
    class_name: str
    value: str
    index_set: frozenset[int]

    def __post_init__(self):
        if not self.index_set:
            raise CorpusError(f"{self.surface}: empty index set")
        bad = [i for i in self.index_set if not 0 <= i < len(self.surface)]
        if bad:
            raise CorpusError(
                f"{self.surface}: indices {sorted(bad)} outside the surface")


def parse_segmentation(text: str,
                       schema: FeatureSchema | None = None) -> list[SegmentAnnotation]:
    """Parse the annotation TSV: ``surface<TAB>Class=Value<TAB>i,j,k``.

    Indices are 0-based into the raw surface.  Lines annotating the lemma
    are skipped; ``#`` starts a comment.
    """
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise CorpusError(
                f"line {lineno}: expected 3 tab-separated columns, got {len(cols)}")
        surface, feature, indices = cols
        key, sep, value = feature.partition("=")
        if not sep:
            raise CorpusError(f"line {lineno}: malformed feature {feature!r}")
        if key.lower() == "lemma":
            continue
        if schema is not None:
            if key not in schema.class_names:
                raise CorpusError(f"line {lineno}: unknown class {key!r}")
            if value not in schema.labels(key):
                raise CorpusError(
                    f"line {lineno}: unknown value {value!r} for class {key}")
        try:
            idx = frozenset(int(tok) for tok in indices.split(","))
        except ValueError:
            raise CorpusError(
                f"line {lineno}: malformed index list {indices!r}") from None
        try:
            out.append(SegmentAnnotation(surface, key, value, idx))
        except CorpusError as exc:
            raise CorpusError(f"line {lineno}: {exc}") from None
    return out


def parse_segmentation_file(path, schema: FeatureSchema | None = None
                            ) -> list[SegmentAnnotation]:
    with open(path, encoding="utf-8") as fh:
        return parse_segmentation(fh.read(), schema)


def write_segments(annotations: list[SegmentAnnotation], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in annotations:
            idx = ",".join(str(i) for i in sorted(a.index_set))
            fh.write(f"{a.surface}\t{a.class_name}={a.value}\t{idx}\n")


# ---------------------------------------------------------------------------
# Synthetic-character injection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Binary-task config for prepending an informative synthetic character.

    Words whose ``class_name`` label equals ``positive_value`` form the
    class t=1 and receive the symbol with probability ``p_syn``; all other
    words receive it with probability ``1 - p_syn``.
    """

    p_syn: float
    symbol: str = "#"
    class_name: str = "Number"
    positive_value: str = "Sing"

    def __post_init__(self):
        if not 0.0 <= self.p_syn <= 1.0:
            raise CorpusError(f"p_syn {self.p_syn} outside [0, 1]")
        if len(self.symbol) != 1:
            raise CorpusError("synthetic symbol must be a single character")

    def is_positive(self, sample: WordSample) -> bool:
        return sample.features.get(self.class_name) == self.positive_value


def inject_synthetic(samples: list[WordSample], config: SyntheticConfig,
                     rng: Rng, force: bool = False) -> list[WordSample]:
    """Prepend the synthetic symbol per independent Bernoulli draws.

    With ``force`` the symbol is added to every t=1 word and to no other,
    which is the deterministic test-time variant.
    """
    clashes = [s.surface for s in samples if config.symbol in s.surface]
    if clashes:
        raise CorpusError(
            f"synthetic symbol {config.symbol!r} already occurs in "
            f"{len(clashes)} surfaces (e.g. {clashes[0]!r})")
    out = []
    for s in samples:
        positive = config.is_positive(s)
        if force:
            inject = positive
        else:
            p = config.p_syn if positive else 1.0 - config.p_syn
            inject = rng.random() < p
        surface = config.symbol + s.surface if inject else s.surface
        out.append(WordSample(surface=surface, features=dict(s.features)))
    return out


# ---------------------------------------------------------------------------
# Toy corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToyRule:
    suffix: str  # may be empty: label realized by no specific characters
    class_name: str
    value: str
    weight: float = 1.0


@dataclass(frozen=True)
class ToyRuleset:
    """Suffix -> feature-value sampling rules over a small alphabet."""

    rules: tuple[ToyRule, ...]
    alphabet: str = "bcdfghjklmn"
    stem_len: tuple[int, int] = (3, 7)

    def __post_init__(self):
        if not self.rules:
            raise CorpusError("empty ruleset")

    def schema(self) -> FeatureSchema:
        classes: dict[str, list[str]] = {}
        for r in self.rules:
            values = classes.setdefault(r.class_name, [NA_LABEL])
            if r.value not in values:
                values.append(r.value)
        return FeatureSchema(
            language="toy",
            classes=tuple((n, tuple(vs)) for n, vs in classes.items()))

    def to_dict(self) -> dict:
        return {"alphabet": self.alphabet, "stem_len": list(self.stem_len),
                "rules": [{"suffix": r.suffix, "class": r.class_name,
                           "value": r.value, "weight": r.weight}
                          for r in self.rules]}

    @classmethod
    def from_dict(cls, d: dict) -> "ToyRuleset":
        return cls(rules=tuple(ToyRule(r["suffix"], r["class"], r["value"],
                                       float(r.get("weight", 1.0)))
                               for r in d["rules"]),
                   alphabet=d.get("alphabet", "bcdfghjklmn"),
                   stem_len=tuple(d.get("stem_len", (3, 7))))

    @classmethod
    def load(cls, path) -> "ToyRuleset":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


DEFAULT_TOY_RULESET = ToyRuleset(rules=(
    ToyRule(suffix="a", class_name="Number", value="Sing", weight=1.0),
    ToyRule(suffix="s", class_name="Number", value="Plur", weight=1.0),
))


def generate_toy_corpus(ruleset: ToyRuleset, n_words: int, rng: Rng
                        ) -> tuple[list[WordSample], list[SegmentAnnotation]]:
    """Random unique stems plus rule-drawn suffixes, with suffix annotations.

    The emitted annotations mark the suffix character positions, so the
    corpus doubles as segmentation ground truth.  Surfaces are unique by
    construction (rejection sampling), keeping the label function
    well-defined.
    """
    weights = [r.weight for r in ruleset.rules]
    lo, hi = ruleset.stem_len
    alphabet = list(ruleset.alphabet)
    samples: list[WordSample] = []
    annotations: list[SegmentAnnotation] = []
    seen: set[str] = set()
    attempts = 0
    while len(samples) < n_words:
        attempts += 1
        if attempts > 50 * n_words:
            raise CorpusError("could not generate enough unique toy words; "
                              "enlarge the alphabet or stem length range")
        rule = ruleset.rules[rng.choice_index(weights)]
        stem_len = int(rng.integers(lo, hi + 1))
        stem = "".join(alphabet[int(rng.integers(0, len(alphabet)))]
                       for _ in range(stem_len))
        surface = stem + rule.suffix
        if surface in seen:
            continue
        seen.add(surface)
        features = {rule.class_name: rule.value}
        samples.append(WordSample(surface=surface, features=features))
        if rule.suffix:
            idx = frozenset(range(len(stem), len(surface)))
            annotations.append(SegmentAnnotation(
                surface, rule.class_name, rule.value, idx))
    schema = ruleset.schema()
    samples = [WordSample(s.surface, schema.complete(s.features))
               for s in samples]
    return samples, annotations


def write_conllu(samples: list[WordSample], path) -> None:
    """Emit one single-token sentence per word (round-trips via parse_conllu)."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            feats = "|".join(f"{k}={v}" for k, v in s.features.items()
                             if v != NA_LABEL) or "_"
            fh.write(f"1\t{s.surface}\t_\t_\t_\t{feats}\t_\t_\t_\t_\n\n")
