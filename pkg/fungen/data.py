"""
Dataset ingestion, curation and the synthetic corpus.

Real data arrives as FASTA sequences, an annotation TSV (id, go, ipr, ec) and
optional PDB backbones. Curation drops rare labels, picks one motif span per
record from its IPR domain boundaries and splits off a validation set. The
synthetic corpus plants class signatures in random backgrounds so that
function is decidable by an exact oracle.
"""

import csv
import json
import logging
import re
import struct
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from io import StringIO
from pathlib import Path
from typing import Optional

import numpy as np
from Bio import SeqIO
from Bio.PDB import PDBParser
from Bio.PDB.PDBExceptions import PDBConstructionException
from Bio.SeqIO.FastaIO import SimpleFastaParser
from Bio.Seq import Seq
from Bio.SeqRecord import SeqRecord
from numpy.lib.stride_tricks import sliding_window_view

from .config import CurationConfig, SyntheticSpec
from .errors import (
    ConfigError,
    DataError,
    EmptyDataset,
    IncompleteResidue,
    InvalidSpec,
    LengthMismatch,
    ParseError,
)
from .metrics import LabeledPredictions
from .seqcore import (
    AMINO_ACIDS,
    ANNOTATION_TYPES,
    BACKBONE_ATOMS,
    MASK_ID,
    AnnotationSet,
    BackboneStructure,
    ConditionBundle,
    LabelRegistry,
    MotifSpec,
    Registries,
    Sequence,
    decode_sequence,
    encode_sequence,
)
from .structure import ideal_helix
from .utils import atomic_directory, atomic_write_json, make_rng

logger = logging.getLogger(__name__)

ANNOTATION_COLUMNS = ("id",) + ANNOTATION_TYPES
TRAIN_FASTA = "train.fasta"
VAL_FASTA = "val.fasta"
ANNOTATIONS_TSV = "annotations.tsv"
REGISTRIES_JSON = "registries.json"
STRUCTURES_DIR = "structures"
ORACLE_JSON = "oracle.json"
STRUCTURE_HEADER = struct.Struct("<Q")
PROJECTION_SCALE = 0.5

_IPR_ITEM = re.compile(r"^([^:\s]+)(?::(\d+)-(\d+))?$")


@dataclass(frozen=True)
class RawAnnotation:
    """Label strings from one annotation TSV row; ipr_spans holds (label, start, end), 0-based half-open."""

    go: tuple = ()
    ipr: tuple = ()
    ec: tuple = ()
    ipr_spans: tuple = ()


@dataclass(frozen=True)
class RawRecord:
    id: str
    sequence: str
    annotation: RawAnnotation = field(default_factory=RawAnnotation)


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    """One curated example: a clean sequence with its conditions."""

    id: str
    sequence: Sequence
    annotations: AnnotationSet = field(default_factory=AnnotationSet)
    motif: Optional[MotifSpec] = None
    structure: Optional[BackboneStructure] = None

    def __post_init__(self):
        if self.motif is not None:
            self.motif.check_fits(len(self.sequence))
        if self.structure is not None and len(self.structure) != len(self.sequence):
            raise LengthMismatch(len(self.structure), len(self.sequence))

    def __len__(self) -> int:
        return len(self.sequence)

    def bundle(self) -> ConditionBundle:
        return ConditionBundle(self.annotations, self.motif, self.structure)

    def example(self) -> tuple:
        """(sequence, bundle) pair as consumed by training."""
        return self.sequence, self.bundle()


@dataclass
class CuratedDataset:
    train: list
    val: list
    registries: Registries
    extra: dict = field(default_factory=dict)

    def examples(self, split: str = "train") -> list:
        return [record.example() for record in getattr(self, split)]


# Parsing


def parse_fasta(path) -> list:
    """
    Read (id, sequence) pairs from a FASTA file.

    The id is the header up to the first whitespace; sequences are
    concatenated across lines and uppercased. CRLF line endings are accepted.

    Args:
        path: FASTA file

    Returns:
        list: (id, sequence) tuples in file order

    Raises:
        ParseError: Text before the first header, empty record or duplicate id
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ParseError(f"cannot read FASTA: {e}", path=str(path)) from e

    header_lines = []
    for number, line in enumerate(text.splitlines(), start=1):
        if line.startswith(">"):
            header_lines.append(number)
        elif line.strip() and not header_lines:
            raise ParseError("sequence data before the first FASTA header", line=number, path=str(path))

    entries, seen = [], {}
    for number, (title, sequence) in zip(header_lines, SimpleFastaParser(StringIO(text))):
        record_id = title.split(None, 1)[0] if title.strip() else ""
        if not record_id:
            raise ParseError("FASTA header without an id", line=number, path=str(path))
        if record_id in seen:
            raise ParseError(f"duplicate id {record_id!r} (first seen on line {seen[record_id]})", line=number,
                             path=str(path))
        sequence = "".join(sequence.split()).upper()
        if not sequence:
            raise ParseError(f"record {record_id!r} has no sequence", line=number, path=str(path))
        seen[record_id] = number
        entries.append((record_id, sequence))

    logger.debug(f"Parsed {len(entries)} FASTA records from {path}")
    return entries


def _split_cell(cell: Optional[str]) -> list:
    return [item.strip() for item in (cell or "").split(";") if item.strip()]


def parse_annotations(path) -> dict:
    """
    Read the annotation TSV.

    Columns are id, go, ipr and ec with a header row. go and ec cells are
    semicolon lists of labels; ipr cells list "IPR:start-end" items with
    1-based inclusive domain boundaries, stored as 0-based half-open spans.
    Missing cells are empty sets.

    Returns:
        dict: id -> RawAnnotation

    Raises:
        ParseError: Missing header column, duplicate id or malformed span
    """
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as e:
        raise ParseError(f"cannot read annotations: {e}", path=str(path)) from e

    annotations = {}
    with handle:
        reader = csv.DictReader(handle, delimiter="\t")
        missing = [column for column in ANNOTATION_COLUMNS if column not in (reader.fieldnames or ())]
        if missing:
            raise ParseError(f"annotation header lacks columns {missing}", line=1, column=missing[0], path=str(path))

        for line, row in enumerate(reader, start=2):
            record_id = (row.get("id") or "").strip()
            if not record_id:
                raise ParseError("row without an id", line=line, column="id", path=str(path))
            if record_id in annotations:
                raise ParseError(f"duplicate id {record_id!r}", line=line, column="id", path=str(path))

            ipr_labels, spans = [], []
            for item in _split_cell(row.get("ipr")):
                match = _IPR_ITEM.match(item)
                if not match:
                    raise ParseError(f"malformed ipr item {item!r}", line=line, column="ipr", path=str(path))
                label = match.group(1)
                if label not in ipr_labels:
                    ipr_labels.append(label)
                if match.group(2) is not None:
                    start, end = int(match.group(2)), int(match.group(3))
                    if start < 1 or end < start:
                        raise ParseError(f"span {start}-{end} must satisfy 1 <= start <= end", line=line,
                                         column="ipr", path=str(path))
                    spans.append((label, start - 1, end))

            annotations[record_id] = RawAnnotation(
                go=tuple(dict.fromkeys(_split_cell(row.get("go")))),
                ipr=tuple(ipr_labels),
                ec=tuple(dict.fromkeys(_split_cell(row.get("ec")))),
                ipr_spans=tuple(spans),
            )

    logger.debug(f"Parsed annotations for {len(annotations)} ids from {path}")
    return annotations


def _select_altloc(atom):
    """The blank or 'A' alternate location of an atom, or None."""
    if atom.is_disordered():
        for altloc in (" ", "A"):
            if atom.disordered_has_id(altloc):
                return atom.disordered_get(altloc)
        return None
    return atom if atom.get_altloc() in (" ", "A") else None


def parse_backbone(path) -> BackboneStructure:
    """
    Extract N, CA, C and O coordinates per residue from PDB ATOM records.

    Only the first model is read; HETATM residues and alternate locations other
    than blank or 'A' are skipped.

    Raises:
        IncompleteResidue: A residue lacks one of the four backbone atoms
        ParseError: Unreadable file or no ATOM residues
    """
    parser = PDBParser(QUIET=True)
    try:
        structure = parser.get_structure(Path(path).stem, str(path))
    except (OSError, ValueError, PDBConstructionException) as e:
        raise ParseError(f"cannot parse backbone: {e}", path=str(path)) from e

    models = list(structure)
    if not models:
        raise ParseError("no ATOM records", path=str(path))

    coords = []
    residues = [residue for chain in models[0] for residue in chain if residue.id[0] == " "]
    for index, residue in enumerate(residues):
        row = []
        for name in BACKBONE_ATOMS:
            atom = _select_altloc(residue[name]) if name in residue else None
            if atom is None:
                raise IncompleteResidue(index, name)
            row.append(atom.get_coord())
        coords.append(row)

    if not coords:
        raise ParseError("no ATOM residues", path=str(path))
    return BackboneStructure(np.asarray(coords, dtype=np.float64))


def parse_backbones(paths, workers: int = 1) -> dict:
    """Parse several PDB files, one per id (the file stem); parallel across files."""
    paths = [Path(path) for path in paths]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            structures = list(pool.map(parse_backbone, paths))
    else:
        structures = [parse_backbone(path) for path in paths]
    return {path.stem: structure for path, structure in zip(paths, structures)}


def join_records(entries, annotations: dict) -> list:
    """Pair FASTA entries with their annotation rows; sequences without a row get no labels."""
    unmatched = set(annotations) - {record_id for record_id, _ in entries}
    if unmatched:
        logger.warning(f"{len(unmatched)} annotation rows have no matching sequence")
    return [RawRecord(record_id, text, annotations.get(record_id, RawAnnotation())) for record_id, text in entries]


# Curation


def _cooccurrence(records) -> dict:
    counts = defaultdict(Counter)
    for record in records:
        for ipr in record.annotation.ipr:
            counts[ipr].update(record.annotation.go)
    return counts


def select_motif(record: RawRecord, sequence: Sequence, cooccurrence: dict) -> tuple:
    """
    Pick the motif span most relevant to the record's GO terms.

    An IPR span scores the corpus-wide co-occurrence count of its IPR label
    with each of the record's GO terms, summed; ties go to the longer span,
    then the earlier start. When the two best spans overlap, their
    intersection is used.

    Returns:
        tuple: (MotifSpec or None, tie flag)
    """
    spans = [(label, start, end) for label, start, end in record.annotation.ipr_spans if end <= len(sequence)]
    if not spans:
        return None, False

    def relevance(span):
        return sum(cooccurrence.get(span[0], Counter())[go] for go in record.annotation.go)

    ranked = sorted(spans, key=lambda span: (-relevance(span), -(span[2] - span[1]), span[1]))
    tie = len(ranked) > 1 and relevance(ranked[0]) == relevance(ranked[1])
    start, end = ranked[0][1], ranked[0][2]
    if len(ranked) > 1:
        other_start, other_end = ranked[1][1], ranked[1][2]
        if max(start, other_start) < min(end, other_end):
            start, end = max(start, other_start), min(end, other_end)
    residues = sequence.ids[start:end]
    return MotifSpec(((start, end, residues),)), tie


def curate(records, config: CurationConfig) -> CuratedDataset:
    """
    Filter labels, attach motifs and split train from validation.

    Labels supported by fewer than min_label_count sequences are removed from
    the registries and from every record; records left without labels are
    dropped. For each surviving label in GO, IPR, EC order (labels sorted),
    records carrying it are taken in id order until val_per_label of them sit
    in validation. A record is not moved when that would leave one of its
    labels with fewer than min_label_count - val_per_label training sequences.

    Args:
        records: RawRecord list
        config: Curation thresholds

    Returns:
        CuratedDataset: Train and validation records with the label registries

    Raises:
        EmptyDataset: No records, or no label survives filtering
    """
    records = list(records)
    if not records:
        raise EmptyDataset("no records to curate")

    accepted, rejected = [], Counter()
    for record in records:
        try:
            encoded = encode_sequence(record.sequence, max_len=config.max_len)
        except DataError as e:
            rejected[type(e).__name__] += 1
            continue
        accepted.append((record, encoded))
    if rejected:
        logger.warning(f"Skipped {sum(rejected.values())} sequences during curation: {dict(rejected)}")

    support = {kind: Counter() for kind in ANNOTATION_TYPES}
    for record, _ in accepted:
        for kind in ANNOTATION_TYPES:
            support[kind].update(set(getattr(record.annotation, kind)))

    kept = {
        kind: sorted(label for label, count in support[kind].items() if count >= config.min_label_count)
        for kind in ANNOTATION_TYPES
    }
    for kind in ANNOTATION_TYPES:
        dropped = len(support[kind]) - len(kept[kind])
        if dropped:
            logger.info(f"Dropped {dropped} {kind} labels with fewer than {config.min_label_count} sequences")
    registries = Registries(**{kind: LabelRegistry(kind, kept[kind]) for kind in ANNOTATION_TYPES})

    surviving = []
    for record, encoded in accepted:
        labels = {kind: [label for label in getattr(record.annotation, kind) if label in registries.get(kind)]
                  for kind in ANNOTATION_TYPES}
        if any(labels.values()):
            surviving.append((record, encoded, labels))
    if not surviving:
        raise EmptyDataset("no label has enough supporting sequences")

    cooccurrence = _cooccurrence(record for record, _, _ in surviving)
    curated, ties = {}, 0
    for record, encoded, labels in surviving:
        motif, tie = select_motif(record, encoded, cooccurrence)
        ties += tie
        annotations = AnnotationSet.from_labels(registries, **labels)
        curated[record.id] = DatasetRecord(record.id, encoded, annotations, motif)
    if ties:
        logger.warning(f"{ties} records had tied motif relevance; broke ties by span length, then start")

    validation = _split_validation(curated, registries, config)
    order = [record.id for record, _, _ in surviving]
    train = [curated[record_id] for record_id in order if record_id not in validation]
    val = [curated[record_id] for record_id in sorted(validation)]
    logger.info(f"Curated {len(train)} training and {len(val)} validation records "
                f"(labels: {registries.sizes()})")
    return CuratedDataset(train, val, registries)


def _split_validation(curated: dict, registries: Registries, config: CurationConfig) -> set:
    floor = config.min_label_count - config.val_per_label
    holders = defaultdict(list)
    for record_id in sorted(curated):
        for kind in ANNOTATION_TYPES:
            for label_id in curated[record_id].annotations.get(kind):
                holders[(kind, label_id)].append(record_id)
    train_count = {key: len(ids) for key, ids in holders.items()}

    validation = set()
    for kind in ANNOTATION_TYPES:
        for label_id in range(len(registries.get(kind))):
            key = (kind, label_id)
            taken = sum(1 for record_id in holders[key] if record_id in validation)
            for record_id in holders[key]:
                if taken >= config.val_per_label:
                    break
                if record_id in validation:
                    continue
                record_keys = [(k, i) for k in ANNOTATION_TYPES for i in curated[record_id].annotations.get(k)]
                if any(train_count[other] - 1 < floor for other in record_keys):
                    continue
                validation.add(record_id)
                for other in record_keys:
                    train_count[other] -= 1
                taken += 1
    return validation


def downsample(records, factor: int) -> list:
    """Every factor-th record, starting with the first."""
    if factor < 1:
        raise ConfigError(f"downsample factor must be at least 1, got {factor}", key="factor")
    return list(records)[::factor]


def read_id_list(path) -> set:
    """Ids one per line; blank lines and lines starting with '#' are ignored."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ParseError(f"cannot read id list: {e}", path=str(path)) from e
    return {line.strip() for line in lines if line.strip() and not line.lstrip().startswith("#")}


def exclude_ids(records, path) -> list:
    """Drop records whose id is listed in a hold-out file."""
    excluded = read_id_list(path)
    kept = [record for record in records if record.id not in excluded]
    logger.info(f"Excluded {len(records) - len(kept)} held-out records listed in {path}")
    return kept


# Synthetic corpus


class SyntheticOracle:
    """
    Exact function predictor for the synthetic corpus.

    The confidence for a class is the best fraction of matching residues between
    any of its signatures and any equally long window of the sequence.
    """

    def __init__(self, signatures, labels=None):
        self.signatures = [list(group) for group in signatures]
        self.labels = list(labels) if labels is not None else [f"class{i}" for i in range(len(self.signatures))]
        self._encoded = [[encode_sequence(text).to_array() for text in group] for group in self.signatures]

    def confidence(self, seq) -> dict:
        """class id -> confidence in [0, 1]."""
        ids = seq.to_array() if isinstance(seq, Sequence) else encode_sequence(seq).to_array()
        scores = {}
        for class_id, group in enumerate(self._encoded):
            best = 0.0
            for signature in group:
                if ids.shape[0] < signature.shape[0]:
                    continue
                windows = sliding_window_view(ids, signature.shape[0])
                matches = (windows == signature[None, :]) & (windows != MASK_ID)
                best = max(best, float(matches.mean(axis=1).max()))
            scores[class_id] = best
        return scores

    def __call__(self, seq: Sequence, annotations: AnnotationSet) -> float:
        """Mean confidence over the requested GO classes; 0 when none are requested."""
        requested = sorted(annotations.go)
        if not requested:
            return 0.0
        scores = self.confidence(seq)
        return float(np.mean([scores.get(class_id, 0.0) for class_id in requested]))

    def to_json(self) -> dict:
        return {"labels": self.labels, "signatures": self.signatures}

    @classmethod
    def from_json(cls, payload: dict) -> "SyntheticOracle":
        return cls(payload["signatures"], payload.get("labels"))


@dataclass
class SyntheticCorpus:
    records: list
    oracle: SyntheticOracle
    registries: Registries


def _draw_signatures(spec: SyntheticSpec, rng: np.random.Generator) -> list:
    if spec.signatures is not None:
        return [[text.upper() for text in group] for group in spec.signatures]
    seen, groups = set(), []
    for _ in range(spec.n_classes):
        group = []
        while len(group) < spec.signatures_per_class:
            text = "".join(AMINO_ACIDS[i] for i in rng.integers(0, len(AMINO_ACIDS), spec.signature_length))
            if text not in seen:
                seen.add(text)
                group.append(text)
        groups.append(group)
    return groups


def _place(length: int, pieces: list, rng: np.random.Generator) -> list:
    """Random non-overlapping start offsets for pieces of the given lengths, in piece order."""
    free = length - sum(pieces)
    order = rng.permutation(len(pieces))
    slots = np.sort(rng.choice(free + len(pieces), size=len(pieces), replace=False))
    starts, cursor = [0] * len(pieces), 0
    for rank, (piece, slot) in enumerate(zip(order, slots)):
        starts[piece] = int(slot - rank + cursor)
        cursor += pieces[piece]
    return starts


def make_synthetic(spec: SyntheticSpec) -> SyntheticCorpus:
    """
    Build a corpus where function is carried by planted signatures.

    Each record is a uniform random background with the signatures of its 1 to
    max_labels classes written at random non-overlapping positions. Its GO set
    holds the class ids and its motif is the first planted span.

    Raises:
        InvalidSpec: The planted signatures may not fit the shortest background
    """
    rng = make_rng(spec.seed)
    signatures = _draw_signatures(spec, rng)
    longest = max(len(text) for group in signatures for text in group)
    needed = spec.max_labels * spec.insertions_per_label * longest
    if needed > spec.background_min:
        raise InvalidSpec(f"up to {needed} signature residues do not fit a {spec.background_min}-residue background")

    oracle = SyntheticOracle(signatures)
    registries = Registries(go=LabelRegistry("go", oracle.labels))
    records = []
    for index in range(spec.n_records):
        length = int(rng.integers(spec.background_min, spec.background_max + 1))
        ids = rng.integers(0, MASK_ID, size=length)
        n_labels = int(rng.integers(1, spec.max_labels + 1))
        classes = sorted(int(c) for c in rng.choice(spec.n_classes, size=n_labels, replace=False))
        planted = [
            signatures[c][int(rng.integers(len(signatures[c])))]
            for c in classes
            for _ in range(spec.insertions_per_label)
        ]
        starts = _place(length, [len(text) for text in planted], rng)
        for text, start in zip(planted, starts):
            ids[start: start + len(text)] = encode_sequence(text).to_array()
        sequence = Sequence.from_array(ids)
        first = (starts[0], starts[0] + len(planted[0]), sequence.ids[starts[0]: starts[0] + len(planted[0])])
        records.append(DatasetRecord(f"syn{index:05d}", sequence, AnnotationSet(go=classes), MotifSpec((first,))))

    logger.info(f"Generated {len(records)} synthetic records over {spec.n_classes} classes")
    return SyntheticCorpus(records, oracle, registries)


def make_synthetic_structures(records, seed: int = 0) -> list:
    """
    Attach backbones that encode the sequence.

    Residue i sits on an ideal helix offset by a fixed random projection of its
    residue type, so each position's coordinates depend only on its own residue.
    """
    rng = make_rng(seed)
    projection = rng.normal(0.0, PROJECTION_SCALE, size=(MASK_ID, 4, 3))
    out = []
    for record in records:
        ids = record.sequence.to_array()
        coords = ideal_helix(len(ids)) + projection[ids]
        out.append(replace(record, structure=BackboneStructure(coords)))
    return out


def oracle_predictions(oracle: SyntheticOracle, records) -> LabeledPredictions:
    """Oracle confidences against each record's GO labels."""
    scores, truths, ids = [], [], []
    for record in records:
        confidence = oracle.confidence(record.sequence)
        scores.append({oracle.labels[c]: value for c, value in confidence.items()})
        truths.append({oracle.labels[c] for c in record.annotations.go})
        ids.append(record.id)
    return LabeledPredictions(scores, truths, ids)


# Dataset directories


def _fasta_text(records) -> str:
    handle = StringIO()
    SeqIO.write(
        (SeqRecord(Seq(decode_sequence(record.sequence)), id=record.id, description="") for record in records),
        handle,
        "fasta",
    )
    return handle.getvalue()


def _annotations_text(records, registries: Registries) -> str:
    handle = StringIO()
    writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
    writer.writerow(list(ANNOTATION_COLUMNS) + ["motif"])
    for record in records:
        labels = record.annotations.to_labels(registries)
        motif = record.motif.to_text() if record.motif is not None else ""
        writer.writerow([record.id] + [";".join(labels[kind]) for kind in ANNOTATION_TYPES] + [motif])
    return handle.getvalue()


def encode_structure(structure: BackboneStructure) -> bytes:
    """8-byte little-endian residue count followed by little-endian float32 [L, 4, 3]."""
    return STRUCTURE_HEADER.pack(len(structure)) + np.ascontiguousarray(structure.coords, dtype="<f4").tobytes()


def decode_structure(data: bytes, path: str = "") -> BackboneStructure:
    if len(data) < STRUCTURE_HEADER.size:
        raise ParseError("structure file shorter than its header", path=path)
    (length,) = STRUCTURE_HEADER.unpack_from(data)
    expected = STRUCTURE_HEADER.size + length * 12 * 4
    if len(data) != expected:
        raise ParseError(f"structure file holds {len(data)} bytes, expected {expected}", path=path)
    coords = np.frombuffer(data, dtype="<f4", offset=STRUCTURE_HEADER.size).reshape(length, 4, 3)
    return BackboneStructure(coords.astype(np.float64))


def write_dataset(path, dataset: CuratedDataset) -> Path:
    """
    Write a dataset directory atomically.

    Layout: train.fasta, val.fasta, annotations.tsv (both splits),
    registries.json (label lists plus content hash), structures/<id>.bin for
    records with coordinates, and any extra JSON payloads by file name.
    """
    records = list(dataset.train) + list(dataset.val)
    with atomic_directory(path) as tmp:
        (tmp / TRAIN_FASTA).write_text(_fasta_text(dataset.train), encoding="utf-8")
        (tmp / VAL_FASTA).write_text(_fasta_text(dataset.val), encoding="utf-8")
        (tmp / ANNOTATIONS_TSV).write_text(_annotations_text(records, dataset.registries), encoding="utf-8")
        registries = dict(dataset.registries.to_json(), content_hash=dataset.registries.content_hash)
        (tmp / REGISTRIES_JSON).write_text(json.dumps(registries, indent=2) + "\n", encoding="utf-8")
        with_structure = [record for record in records if record.structure is not None]
        if with_structure:
            (tmp / STRUCTURES_DIR).mkdir()
            for record in with_structure:
                (tmp / STRUCTURES_DIR / f"{record.id}.bin").write_bytes(encode_structure(record.structure))
        for name, payload in dataset.extra.items():
            (tmp / name).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote dataset with {len(dataset.train)} train and {len(dataset.val)} val records to {path}")
    return Path(path)


def read_registries(path) -> Registries:
    """
    Load registries.json and check its content hash.

    Raises:
        ParseError: Unreadable file or hash mismatch
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot read registries: {e}", path=str(path)) from e
    registries = Registries.from_json(payload)
    stored = payload.get("content_hash")
    if stored is not None and stored != registries.content_hash:
        raise ParseError("registries content hash does not match its labels", path=str(path))
    return registries


def write_registries(path, registries: Registries) -> None:
    atomic_write_json(path, dict(registries.to_json(), content_hash=registries.content_hash))


def read_dataset(path) -> CuratedDataset:
    """
    Load a directory written by write_dataset.

    Raises:
        ParseError: Missing or malformed files
    """
    path = Path(path)
    registries = read_registries(path / REGISTRIES_JSON)
    rows = {}
    with open(path / ANNOTATIONS_TSV, newline="", encoding="utf-8") as handle:
        for line, row in enumerate(csv.DictReader(handle, delimiter="\t"), start=2):
            try:
                annotations = AnnotationSet.from_labels(
                    registries, **{kind: _split_cell(row.get(kind)) for kind in ANNOTATION_TYPES}
                )
                motif = MotifSpec.parse(row["motif"]) if row.get("motif") else None
            except DataError as e:
                raise ParseError(str(e), line=line, path=str(path / ANNOTATIONS_TSV)) from e
            rows[row["id"]] = (annotations, motif)

    def load(split_file):
        records = []
        for record_id, text in parse_fasta(path / split_file):
            annotations, motif = rows.get(record_id, (AnnotationSet(), None))
            structure = None
            binary = path / STRUCTURES_DIR / f"{record_id}.bin"
            if binary.exists():
                structure = decode_structure(binary.read_bytes(), str(binary))
            records.append(DatasetRecord(record_id, encode_sequence(text), annotations, motif, structure))
        return records

    extra = {}
    oracle_path = path / ORACLE_JSON
    if oracle_path.exists():
        extra[ORACLE_JSON] = json.loads(oracle_path.read_text(encoding="utf-8"))
    dataset = CuratedDataset(load(TRAIN_FASTA), load(VAL_FASTA), registries, extra)
    logger.info(f"Read dataset {path}: {len(dataset.train)} train, {len(dataset.val)} val")
    return dataset


def read_oracle(dataset: CuratedDataset) -> Optional[SyntheticOracle]:
    payload = dataset.extra.get(ORACLE_JSON)
    return SyntheticOracle.from_json(payload) if payload else None


def read_label_table(path) -> dict:
    """
    Read an id/label TSV (header row, columns id and label); an id may repeat with several labels.

    Returns:
        dict: id -> set of labels
    """
    table = defaultdict(set)
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            reader = csv.DictReader(handle, delimiter="\t")
            if not reader.fieldnames or not {"id", "label"} <= set(reader.fieldnames):
                raise ParseError("label table needs id and label columns", line=1, path=str(path))
            for line, row in enumerate(reader, start=2):
                if not row.get("id") or not row.get("label"):
                    raise ParseError("empty id or label", line=line, path=str(path))
                table[row["id"]].add(row["label"])
    except OSError as e:
        raise ParseError(f"cannot read label table: {e}", path=str(path)) from e
    return dict(table)
