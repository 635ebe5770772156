"""
Evaluation metrics for generated sequences.

Distribution distances between generated and reference sets (spectrum
embeddings with linear and Gaussian MMD, MRR across functional classes),
function-prediction scores (F1, AUPR, AUC, F_max), recovery, repetition,
novelty and diversity.
"""

import csv
import io
import logging
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from Bio.Align import PairwiseAligner
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial.distance import cdist, pdist
from sklearn.metrics import auc, f1_score, precision_recall_curve, roc_auc_score

from .errors import (
    ClassMismatch,
    DegenerateBandwidth,
    EmptySet,
    InvalidOrder,
    InvalidPrediction,
    InvalidResidue,
    LengthMismatch,
    NonFiniteMetric,
    NoPositives,
    ParseError,
    SequenceTooShort,
)
from .seqcore import MASK_ID, MASK_PLACEHOLDER, Sequence, decode_sequence, encode_sequence
from .utils import atomic_write_text, format_float, round_floats

logger = logging.getLogger(__name__)

N_RESIDUES = MASK_ID
DEFAULT_K = 3
FMAX_THRESHOLDS = np.round(np.arange(10, 101) / 100.0, 2)
ALIGNMENT_PARAMS = {"mode": "global", "match": 1.0, "mismatch": 0.0, "gap": -1.0, "affine": False}

SeqLike = Union[Sequence, str]


def _ids(seq: SeqLike) -> np.ndarray:
    if isinstance(seq, Sequence):
        return seq.to_array()
    return encode_sequence(seq).to_array()


def _text(seq: SeqLike) -> str:
    return decode_sequence(seq) if isinstance(seq, Sequence) else seq


@dataclass(frozen=True, eq=False)
class SpectrumEmbedding:
    """Normalized k-mer counts over the 20 residues, dimension 20**k."""

    k: int
    vector: np.ndarray


def spectrum_embed(seq: SeqLike, k: int = DEFAULT_K) -> SpectrumEmbedding:
    """
    k-mer frequency vector; entry m is count(m) / (L - k + 1).

    k-mers index in base 20 with the first residue most significant.

    Raises:
        SequenceTooShort: L < k
        InvalidResidue: The sequence holds a mask token
    """
    ids = _ids(seq)
    if ids.shape[0] < k:
        raise SequenceTooShort(int(ids.shape[0]), k)
    masked = np.flatnonzero(ids == MASK_ID)
    if masked.size:
        raise InvalidResidue(int(masked[0]), MASK_PLACEHOLDER)
    powers = N_RESIDUES ** np.arange(k - 1, -1, -1, dtype=np.int64)
    codes = sliding_window_view(ids, k) @ powers
    counts = np.bincount(codes, minlength=N_RESIDUES**k).astype(np.float64)
    return SpectrumEmbedding(k, counts / codes.shape[0])


def embed_set(seqs, k: int = DEFAULT_K) -> np.ndarray:
    """Stacked spectrum embeddings, [n, 20**k]."""
    return np.stack([spectrum_embed(seq, k).vector for seq in seqs]) if len(seqs) else np.zeros((0, N_RESIDUES**k))


def _as_matrix(points, which: str) -> np.ndarray:
    matrix = np.asarray([p.vector if isinstance(p, SpectrumEmbedding) else p for p in points], dtype=np.float64)
    if matrix.shape[0] == 0:
        raise EmptySet(which)
    return matrix.reshape(matrix.shape[0], -1)


def mmd_linear(S, P) -> float:
    """
    Euclidean distance between the mean embeddings of two sets (not squared).

    Raises:
        EmptySet: Either set is empty
    """
    S, P = _as_matrix(S, "generated"), _as_matrix(P, "reference")
    return float(np.linalg.norm(S.mean(axis=0) - P.mean(axis=0)))


def median_bandwidth(S: np.ndarray, P: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the pooled set."""
    distances = pdist(np.vstack([S, P]))
    if distances.size == 0:
        raise DegenerateBandwidth()
    sigma = float(np.median(distances))
    if sigma == 0.0:
        raise DegenerateBandwidth()
    return sigma


def mmd_gaussian(S, P) -> float:
    """
    Squared MMD with a Gaussian kernel, biased estimator (diagonal terms included).

    The kernel is exp(-gamma * |x - y|^2) with gamma = 1 / (2 sigma^2), where sigma
    is the median pairwise distance of the pooled set. Returned as max(MMD^2, 0).

    Raises:
        EmptySet: Either set is empty
        DegenerateBandwidth: All pooled points coincide
    """
    S, P = _as_matrix(S, "generated"), _as_matrix(P, "reference")
    gamma = 1.0 / (2.0 * median_bandwidth(S, P) ** 2)
    k_ss = np.exp(-gamma * cdist(S, S, "sqeuclidean")).mean()
    k_pp = np.exp(-gamma * cdist(P, P, "sqeuclidean")).mean()
    k_sp = np.exp(-gamma * cdist(S, P, "sqeuclidean")).mean()
    return float(max(k_ss + k_pp - 2.0 * k_sp, 0.0))


def mrr(S_by_class: dict, P_by_class: dict) -> float:
    """
    Mean reciprocal rank of each class's own reference set by linear MMD.

    For class c the generated set S_c is compared with every reference set;
    rank_c counts the references strictly closer than P_c, plus one.

    Raises:
        ClassMismatch: The two maps have different class keys
        EmptySet: A class set is empty
    """
    if set(S_by_class) != set(P_by_class):
        raise ClassMismatch(sorted(set(S_by_class) ^ set(P_by_class), key=str))
    classes = sorted(S_by_class, key=str)
    means = {c: _as_matrix(P_by_class[c], f"reference {c}").mean(axis=0) for c in classes}
    reciprocal = []
    for c in classes:
        own_mean = _as_matrix(S_by_class[c], f"generated {c}").mean(axis=0)
        row = np.array([np.linalg.norm(own_mean - means[other]) for other in classes])
        own = row[classes.index(c)]
        rank = 1 + int(np.sum(row < own))
        reciprocal.append(1.0 / rank)
    return float(np.mean(reciprocal))


def propagate_ancestors(labels, parents: dict) -> set:
    """Close a label set upward under a child -> parents map."""
    closed, stack = set(labels), list(labels)
    while stack:
        for parent in parents.get(stack.pop(), ()):
            if parent not in closed:
                closed.add(parent)
                stack.append(parent)
    return closed


@dataclass
class LabeledPredictions:
    """Per-sequence label confidences and ground-truth label sets, aligned by index."""

    scores: list
    truths: list
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.scores) != len(self.truths):
            raise LengthMismatch(len(self.scores), len(self.truths))
        self.truths = [set(truth) for truth in self.truths]
        for row in self.scores:
            for label, value in row.items():
                if not 0.0 <= value <= 1.0:
                    raise InvalidPrediction(label, value)

    def __len__(self) -> int:
        return len(self.scores)

    def classes(self) -> list:
        labels = set()
        for row, truth in zip(self.scores, self.truths):
            labels.update(row)
            labels.update(truth)
        return sorted(labels, key=str)

    def matrices(self, classes: Optional[list] = None) -> tuple:
        """(classes, y_true [n, C] int, y_score [n, C] float); missing scores count as 0."""
        classes = classes if classes is not None else self.classes()
        column = {label: index for index, label in enumerate(classes)}
        y_true = np.zeros((len(self), len(classes)), dtype=np.int64)
        y_score = np.zeros((len(self), len(classes)), dtype=np.float64)
        for row, (scores, truth) in enumerate(zip(self.scores, self.truths)):
            for label in truth:
                y_true[row, column[label]] = 1
            for label, value in scores.items():
                y_score[row, column[label]] = value
        return classes, y_true, y_score

    def propagated(self, parents: dict) -> "LabeledPredictions":
        """Truths closed upward; an ancestor's score is the max over its scored descendants."""
        scores = []
        for row in self.scores:
            lifted = dict(row)
            for label, value in row.items():
                for ancestor in propagate_ancestors([label], parents):
                    lifted[ancestor] = max(lifted.get(ancestor, 0.0), value)
            scores.append(lifted)
        truths = [propagate_ancestors(truth, parents) for truth in self.truths]
        return LabeledPredictions(scores, truths, list(self.ids))


def _threshold_vector(classes: list, threshold) -> np.ndarray:
    if isinstance(threshold, dict):
        default = threshold.get("*", 0.5)
        values = []
        for label in classes:
            prefix = next((key for key in threshold if key != "*" and str(label).startswith(key)), None)
            values.append(threshold[prefix] if prefix is not None else default)
        return np.array(values)
    return np.full(len(classes), float(threshold))


def multilabel_metrics(preds: LabeledPredictions, threshold=0.5, parents: Optional[dict] = None) -> dict:
    """
    Micro/macro F1 at a threshold and threshold-free macro AUPR and AUC.

    Args:
        preds: Predictions and truths
        threshold: One confidence threshold, or {label prefix: threshold} with "*" as fallback
        parents: Optional child -> parents map applied before scoring

    Returns:
        dict: micro_f1, macro_f1, macro_aupr, macro_auc plus the evaluated and skipped class counts.
        Micro F1 pools every class; macro averages skip classes without positives, and AUC also
        skips classes without negatives.

    Raises:
        NoPositives: No class has a positive instance
    """
    if parents:
        preds = preds.propagated(parents)
    classes, y_true, y_score = preds.matrices()
    positives = y_true.sum(axis=0) > 0
    if not positives.any():
        raise NoPositives()
    negatives = (y_true == 0).sum(axis=0) > 0
    y_pred = (y_score >= _threshold_vector(classes, threshold)[None, :]).astype(np.int64)

    micro_f1 = f1_score(y_true, y_pred, average="micro", zero_division=0)
    macro_f1 = f1_score(y_true[:, positives], y_pred[:, positives], average="macro", zero_division=0)

    auprs, aucs = [], []
    for column in np.flatnonzero(positives):
        precision, recall, _ = precision_recall_curve(y_true[:, column], y_score[:, column])
        auprs.append(auc(recall, precision))
        if negatives[column]:
            aucs.append(roc_auc_score(y_true[:, column], y_score[:, column]))

    skipped = [classes[i] for i in np.flatnonzero(~positives)]
    if skipped:
        logger.warning(f"{len(skipped)} classes without positives excluded from macro averages")
    return {
        "micro_f1": float(micro_f1),
        "macro_f1": float(macro_f1),
        "macro_aupr": float(np.mean(auprs)),
        "macro_auc": float(np.mean(aucs)) if aucs else float("nan"),
        "classes_evaluated": int(positives.sum()),
        "classes_skipped": len(skipped),
    }


def f_max(preds: LabeledPredictions, parents: Optional[dict] = None) -> float:
    """
    Best pooled F1 over thresholds 0.10, 0.11, ..., 1.00.

    At each threshold, true/false positives and false negatives are pooled over
    all sequences. A threshold where nothing is predicted scores 0.
    """
    if parents:
        preds = preds.propagated(parents)
    classes, y_true, y_score = preds.matrices()
    best = 0.0
    for tau in FMAX_THRESHOLDS:
        predicted = y_score >= tau
        tp = int(np.sum(predicted & (y_true == 1)))
        fp = int(np.sum(predicted & (y_true == 0)))
        fn = int(np.sum(~predicted & (y_true == 1)))
        if tp + fp == 0:
            continue
        precision = tp / (tp + fp)
        recall = tp / (tp + fn) if tp + fn else 0.0
        if precision + recall > 0:
            best = max(best, 2 * precision * recall / (precision + recall))
    return float(best)


def success_rate(preds: LabeledPredictions, threshold: float = 0.5) -> float:
    """Fraction of sequences with a non-empty truth whose every true label scores at least threshold."""
    evaluated = [(scores, truth) for scores, truth in zip(preds.scores, preds.truths) if truth]
    if not evaluated:
        return 0.0
    hits = sum(all(scores.get(label, 0.0) >= threshold for label in truth) for scores, truth in evaluated)
    return hits / len(evaluated)


def aar(generated: SeqLike, reference: SeqLike) -> float:
    """
    Fraction of positions where two equal-length sequences agree.

    Raises:
        LengthMismatch: Lengths differ
    """
    a, b = _ids(generated), _ids(reference)
    if a.shape[0] != b.shape[0]:
        raise LengthMismatch(int(a.shape[0]), int(b.shape[0]))
    return float(np.mean(a == b))


def _repeats(text: str, n: int) -> int:
    counts = Counter(text[i: i + n] for i in range(len(text) - n + 1))
    return sum(1 for count in counts.values() if count >= 2)


def ngram_repeats(seqs, n: int, reduce: str = "sum") -> float:
    """
    Distinct n-grams occurring at least twice within a sequence, summed (or averaged) over the set.

    Raises:
        InvalidOrder: n < 2
    """
    if n < 2:
        raise InvalidOrder(n)
    per_sequence = [_repeats(_text(seq), n) for seq in seqs]
    if reduce == "mean":
        return float(np.mean(per_sequence)) if per_sequence else 0.0
    return int(sum(per_sequence))


def ngram_table(seqs, orders=(2, 3, 4, 5, 6)) -> dict:
    return {n: ngram_repeats(seqs, n) for n in orders}


def make_aligner() -> PairwiseAligner:
    aligner = PairwiseAligner()
    aligner.mode = ALIGNMENT_PARAMS["mode"]
    aligner.match_score = ALIGNMENT_PARAMS["match"]
    aligner.mismatch_score = ALIGNMENT_PARAMS["mismatch"]
    aligner.open_gap_score = ALIGNMENT_PARAMS["gap"]
    aligner.extend_gap_score = ALIGNMENT_PARAMS["gap"]
    return aligner


def alignment_score(a: SeqLike, b: SeqLike, aligner: Optional[PairwiseAligner] = None) -> float:
    return float((aligner or make_aligner()).score(_text(a), _text(b)))


def identity(a: SeqLike, b: SeqLike, aligner: Optional[PairwiseAligner] = None) -> float:
    """Identical aligned columns over alignment length, for the first optimal global alignment."""
    alignment = (aligner or make_aligner()).align(_text(a), _text(b))[0]
    top, bottom = alignment[0], alignment[1]
    matches = sum(1 for x, y in zip(top, bottom) if x == y and x != "-")
    return matches / len(top)


def _identity_pairs(pairs, workers: int) -> list:
    aligner = make_aligner()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda pair: identity(pair[0], pair[1], make_aligner()), pairs))
    return [identity(a, b, aligner) for a, b in pairs]


def novelty(generated, training, workers: int = 1) -> list:
    """Per generated sequence: 1 - max identity to any training sequence."""
    if not generated:
        raise EmptySet("generated")
    if not training:
        raise EmptySet("training")
    pairs = [(g, t) for g in generated for t in training]
    identities = np.array(_identity_pairs(pairs, workers)).reshape(len(generated), len(training))
    return [float(1.0 - row.max()) for row in identities]


def diversity(generated, reference=None, workers: int = 1) -> float:
    """
    1 - mean pairwise identity.

    Without a reference the pairs are all unordered pairs within the generated
    set (a single sequence gives 0); with one they are all generated x reference pairs.
    """
    if reference is None:
        pairs = [(generated[i], generated[j]) for i in range(len(generated)) for j in range(i + 1, len(generated))]
    else:
        pairs = [(g, r) for g in generated for r in reference]
    if not pairs:
        return 0.0
    return float(1.0 - np.mean(_identity_pairs(pairs, workers)))


def novelty_diversity(generated, training, workers: int = 1) -> tuple:
    """(per-sequence novelty list, intra-set diversity)."""
    return novelty(generated, training, workers), diversity(generated, workers=workers)


def export_embeddings(records, path, k: int = DEFAULT_K) -> int:
    """
    Write spectrum embeddings as CSV with columns id, label, v_0 .. v_{20**k - 1}.

    Args:
        records: (id, label, sequence) triples
        path: Output CSV, written atomically
        k: k-mer order

    Returns:
        int: Rows written
    """
    handle = io.StringIO()
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(["id", "label"] + [f"v_{i}" for i in range(N_RESIDUES**k)])
    count = 0
    for record_id, label, seq in records:
        vector = spectrum_embed(seq, k).vector
        writer.writerow([record_id, label] + [repr(format_float(value)) for value in vector])
        count += 1
    atomic_write_text(path, handle.getvalue())
    logger.info(f"Exported {count} embeddings (k={k}) to {path}")
    return count


def read_embeddings(path) -> tuple:
    """(ids, labels, [n, d] matrix) from an exported CSV."""
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    ids = [row[0] for row in rows[1:]]
    labels = [row[1] for row in rows[1:]]
    width = len(rows[0]) - 2
    matrix = np.array([[float(v) for v in row[2:]] for row in rows[1:]], dtype=np.float64).reshape(-1, width)
    return ids, labels, matrix


@dataclass
class MetricReport:
    """Named scalar results, per-class tables and metadata describing how they were computed."""

    values: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, name: str, value: float) -> None:
        value = float(value)
        if not math.isfinite(value):
            raise NonFiniteMetric(name)
        self.values[name] = value

    def to_json(self) -> dict:
        return round_floats({"values": self.values, "tables": self.tables, "metadata": self.metadata})


def merge_external_scores(report: MetricReport, path) -> MetricReport:
    """
    Merge precomputed per-sequence scores (e.g. sctm, plddt) from a TSV with an id column.

    Each numeric column is added to the report as external_<column>_mean.

    Raises:
        ParseError: Missing id column or a non-numeric cell
    """
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle, delimiter="\t")
        if not reader.fieldnames or "id" not in reader.fieldnames:
            raise ParseError("external score TSV needs an id column", line=1, path=str(path))
        columns = [name for name in reader.fieldnames if name != "id"]
        values = {name: [] for name in columns}
        for line, row in enumerate(reader, start=2):
            for name in columns:
                try:
                    values[name].append(float(row[name]))
                except (TypeError, ValueError):
                    raise ParseError(f"non-numeric value {row[name]!r}", line=line, column=name, path=str(path))
    for name, column in values.items():
        if column:
            report.add(f"external_{name}_mean", float(np.mean(column)))
    report.metadata["external_scores"] = {"path": str(path), "columns": columns}
    return report


def read_predictions(path) -> dict:
    """
    Read precomputed function predictions from a TSV with id, label and score columns.

    Returns:
        dict: id -> {label: score}

    Raises:
        ParseError: Missing column or a non-numeric score
    """
    predictions = {}
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle, delimiter="\t")
        if not reader.fieldnames or not {"id", "label", "score"} <= set(reader.fieldnames):
            raise ParseError("prediction TSV needs id, label and score columns", line=1, path=str(path))
        for line, row in enumerate(reader, start=2):
            try:
                score = float(row["score"])
            except (TypeError, ValueError):
                raise ParseError(f"non-numeric score {row['score']!r}", line=line, column="score", path=str(path))
            predictions.setdefault(row["id"], {})[row["label"]] = score
    return predictions
