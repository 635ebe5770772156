"""
Core domain types shared by every fungen module.

Vocabulary, sequences, label registries, annotation sets, motifs, backbone
structures and the condition bundle that groups them. All types are
immutable after construction.
"""

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from .errors import (
    InvalidMotif,
    InvalidResidue,
    InvalidStructure,
    SequenceTooLong,
    SpanOutOfRange,
    UnknownLabel,
)

logger = logging.getLogger(__name__)

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"
MASK_SYMBOL = "<mask>"
MASK_PLACEHOLDER = "X"
ANNOTATION_TYPES = ("go", "ipr", "ec")
BACKBONE_ATOMS = ("N", "CA", "C", "O")


class Vocabulary:
    """The 20 standard amino acids followed by the absorbing mask token."""

    def __init__(self, letters: str = AMINO_ACIDS):
        if len(set(letters)) != len(letters):
            raise ValueError("vocabulary symbols must be unique")
        self.tokens = tuple(letters) + (MASK_SYMBOL,)
        self.mask_id = len(self.tokens) - 1
        self._ids = {symbol: index for index, symbol in enumerate(letters)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_residues(self) -> int:
        return self.mask_id

    def id_of(self, symbol: str, position: int = 0) -> int:
        try:
            return self._ids[symbol]
        except KeyError:
            raise InvalidResidue(position, symbol) from None

    def symbol_of(self, token_id: int) -> str:
        if token_id == self.mask_id:
            return MASK_PLACEHOLDER
        return self.tokens[token_id]


DEFAULT_VOCAB = Vocabulary()
VOCAB_SIZE = len(DEFAULT_VOCAB)
MASK_ID = DEFAULT_VOCAB.mask_id


@dataclass(frozen=True)
class Sequence:
    """Token ids over the vocabulary; may hold mask tokens while being denoised."""

    ids: tuple

    def __post_init__(self):
        ids = tuple(int(token) for token in self.ids)
        if not ids:
            raise InvalidResidue(0, "")
        for position, token in enumerate(ids):
            if not 0 <= token < VOCAB_SIZE:
                raise InvalidResidue(position, str(token))
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.ids)

    def to_array(self) -> np.ndarray:
        return np.asarray(self.ids, dtype=np.int64)

    @classmethod
    def from_array(cls, array) -> "Sequence":
        return cls(tuple(int(token) for token in np.asarray(array).tolist()))

    @classmethod
    def all_mask(cls, length: int) -> "Sequence":
        return cls((MASK_ID,) * length)

    def mask_positions(self) -> list:
        return [index for index, token in enumerate(self.ids) if token == MASK_ID]

    def has_mask(self) -> bool:
        return MASK_ID in self.ids


def encode_sequence(text: str, vocab: Vocabulary = DEFAULT_VOCAB, max_len: Optional[int] = None) -> Sequence:
    """
    Encode an amino-acid string.

    Args:
        text: One-letter residue codes
        vocab: Vocabulary to look symbols up in
        max_len: Reject sequences longer than this when given

    Returns:
        Sequence: Token ids, one per character

    Raises:
        InvalidResidue: A symbol outside the 20 standard residues (including 'X')
        SequenceTooLong: len(text) > max_len
    """
    if not text:
        raise InvalidResidue(0, "")
    if max_len is not None and len(text) > max_len:
        raise SequenceTooLong(len(text), max_len)
    return Sequence(tuple(vocab.id_of(symbol, position) for position, symbol in enumerate(text)))


def decode_sequence(seq: Sequence, vocab: Vocabulary = DEFAULT_VOCAB) -> str:
    """Render token ids as letters; mask tokens become 'X'."""
    return "".join(vocab.symbol_of(token) for token in seq.ids)


class LabelRegistry:
    """Ordered label string <-> integer id map for one annotation type."""

    def __init__(self, kind: str, labels: Iterable[str] = ()):
        self.kind = kind
        self.labels = tuple(labels)
        if len(set(self.labels)) != len(self.labels):
            raise ValueError(f"duplicate labels in {kind} registry")
        self._ids = {label: index for index, label in enumerate(self.labels)}

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelRegistry) and self.kind == other.kind and self.labels == other.labels

    def id_of(self, label: str) -> int:
        try:
            return self._ids[label]
        except KeyError:
            raise UnknownLabel(self.kind, label) from None

    def label_of(self, label_id: int) -> str:
        if not 0 <= label_id < len(self.labels):
            raise UnknownLabel(self.kind, label_id)
        return self.labels[label_id]


@dataclass(frozen=True)
class Registries:
    """GO, IPR and EC label registries built at curation time and stored with checkpoints."""

    go: LabelRegistry = field(default_factory=lambda: LabelRegistry("go"))
    ipr: LabelRegistry = field(default_factory=lambda: LabelRegistry("ipr"))
    ec: LabelRegistry = field(default_factory=lambda: LabelRegistry("ec"))

    def get(self, kind: str) -> LabelRegistry:
        return getattr(self, kind)

    def sizes(self) -> dict:
        return {kind: len(self.get(kind)) for kind in ANNOTATION_TYPES}

    def to_json(self) -> dict:
        return {kind: list(self.get(kind).labels) for kind in ANNOTATION_TYPES}

    @property
    def content_hash(self) -> str:
        canonical = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_json(cls, payload: dict) -> "Registries":
        return cls(**{kind: LabelRegistry(kind, payload.get(kind, [])) for kind in ANNOTATION_TYPES})

    @classmethod
    def from_sizes(cls, go: int = 0, ipr: int = 0, ec: int = 0) -> "Registries":
        """Registries with placeholder label names, for models built without a curated dataset."""
        sizes = {"go": go, "ipr": ipr, "ec": ec}
        return cls(**{kind: LabelRegistry(kind, [f"{kind}{i}" for i in range(n)]) for kind, n in sizes.items()})


@dataclass(frozen=True)
class AnnotationSet:
    """Label ids per annotation type; any or all of the sets may be empty."""

    go: frozenset = frozenset()
    ipr: frozenset = frozenset()
    ec: frozenset = frozenset()

    def __post_init__(self):
        for kind in ANNOTATION_TYPES:
            object.__setattr__(self, kind, frozenset(int(label) for label in getattr(self, kind)))

    def get(self, kind: str) -> frozenset:
        return getattr(self, kind)

    def is_empty(self) -> bool:
        return not (self.go or self.ipr or self.ec)

    def validate(self, sizes: dict) -> None:
        """Raise UnknownLabel for any id outside its registry."""
        for kind in ANNOTATION_TYPES:
            for label in self.get(kind):
                if not 0 <= label < sizes.get(kind, 0):
                    raise UnknownLabel(kind, label)

    @classmethod
    def from_labels(cls, registries: Registries, go=(), ipr=(), ec=()) -> "AnnotationSet":
        """Resolve label strings against the registries."""
        return cls(
            go=frozenset(registries.go.id_of(label) for label in go),
            ipr=frozenset(registries.ipr.id_of(label) for label in ipr),
            ec=frozenset(registries.ec.id_of(label) for label in ec),
        )

    def to_labels(self, registries: Registries) -> dict:
        return {kind: sorted(registries.get(kind).label_of(i) for i in self.get(kind)) for kind in ANNOTATION_TYPES}


_MOTIF_PART = re.compile(r"^\s*(\d+)-(\d+):([A-Za-z]+)\s*$")


@dataclass(frozen=True)
class MotifSpec:
    """
    Residue spans that carry a function.

    spans holds (start, end, residue_ids) triples, 0-based half-open, sorted and
    non-overlapping. dynamic_update lets the sampler rewrite the motif positions
    instead of holding them fixed.
    """

    spans: tuple = ()
    dynamic_update: bool = False

    def __post_init__(self):
        spans = []
        for start, end, residues in sorted(self.spans, key=lambda span: (span[0], span[1])):
            start, end, residues = int(start), int(end), tuple(int(token) for token in residues)
            if not 0 <= start < end:
                raise InvalidMotif(f"span ({start}, {end}) must satisfy 0 <= start < end")
            if len(residues) != end - start:
                raise InvalidMotif(f"span ({start}, {end}) has {len(residues)} residues, expected {end - start}")
            if any(not 0 <= token < MASK_ID for token in residues):
                raise InvalidMotif(f"span ({start}, {end}) holds a mask or out-of-range token")
            if spans and start < spans[-1][1]:
                raise InvalidMotif(f"span ({start}, {end}) overlaps span ({spans[-1][0]}, {spans[-1][1]})")
            spans.append((start, end, residues))
        object.__setattr__(self, "spans", tuple(spans))

    def __len__(self) -> int:
        return sum(end - start for start, end, _ in self.spans)

    @property
    def end(self) -> int:
        return self.spans[-1][1] if self.spans else 0

    def check_fits(self, length: int) -> None:
        for start, end, _ in self.spans:
            if end > length:
                raise SpanOutOfRange(start, end, length)

    def residue_positions(self) -> list:
        """(position, token id) pairs covered by the motif, in position order."""
        return [(start + offset, token) for start, _, residues in self.spans for offset, token in enumerate(residues)]

    @classmethod
    def from_strings(cls, spans, dynamic_update: bool = False, vocab: Vocabulary = DEFAULT_VOCAB) -> "MotifSpec":
        """Build from (start, end, "RESIDUES") triples."""
        triples = []
        for start, end, text in spans:
            triples.append((start, end, tuple(vocab.id_of(symbol, start + i) for i, symbol in enumerate(text))))
        return cls(tuple(triples), dynamic_update)

    @classmethod
    def parse(cls, text: str, dynamic_update: bool = False, vocab: Vocabulary = DEFAULT_VOCAB) -> "MotifSpec":
        """
        Parse "start-end:RESIDUES[,start-end:RESIDUES...]" with 0-based half-open spans.

        Raises:
            InvalidMotif: Malformed text or inconsistent span
        """
        triples = []
        for part in text.split(","):
            match = _MOTIF_PART.match(part)
            if not match:
                raise InvalidMotif(f"cannot parse motif part {part!r}; expected start-end:RESIDUES")
            start, end, residues = int(match.group(1)), int(match.group(2)), match.group(3).upper()
            triples.append((start, end, residues))
        return cls.from_strings(triples, dynamic_update, vocab)

    def to_text(self, vocab: Vocabulary = DEFAULT_VOCAB) -> str:
        return ",".join(
            f"{start}-{end}:{''.join(vocab.symbol_of(t) for t in residues)}" for start, end, residues in self.spans
        )


def apply_motif(seq: Sequence, motif: MotifSpec) -> Sequence:
    """
    Write motif residues into their spans; other positions are unchanged.

    Raises:
        SpanOutOfRange: A span ends past len(seq)
    """
    motif.check_fits(len(seq))
    ids = list(seq.ids)
    for position, token in motif.residue_positions():
        ids[position] = token
    return Sequence(tuple(ids))


@dataclass(frozen=True, eq=False)
class BackboneStructure:
    """Per-residue N, CA, C, O coordinates in Angstrom, shape [L, 4, 3]."""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[1:] != (4, 3):
            raise InvalidStructure(f"backbone coordinates must have shape [L, 4, 3], got {list(coords.shape)}")
        if not np.all(np.isfinite(coords)):
            raise InvalidStructure("backbone coordinates must be finite")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, BackboneStructure) and np.array_equal(self.coords, other.coords)

    __hash__ = None


@dataclass(frozen=True)
class ConditionBundle:
    """Any subset of annotation, motif and structure conditions, including none."""

    annotations: Optional[AnnotationSet] = None
    motif: Optional[MotifSpec] = None
    structure: Optional[BackboneStructure] = None

    def is_empty(self) -> bool:
        return self.annotations is None and self.motif is None and self.structure is None

    def without(self, *channels: str) -> "ConditionBundle":
        """Copy with the named channels set to absent."""
        return replace(self, **{channel: None for channel in channels})

    def normalized(self) -> "ConditionBundle":
        """Collapse empty annotation sets and motifs to absent."""
        annotations = self.annotations if self.annotations is not None and not self.annotations.is_empty() else None
        motif = self.motif if self.motif is not None and self.motif.spans else None
        return ConditionBundle(annotations, motif, self.structure)
