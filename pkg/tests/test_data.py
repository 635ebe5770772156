import json
from collections import Counter

import numpy as np
import pytest

from fungen.config import CurationConfig, SyntheticSpec
from fungen.data import (
    CuratedDataset,
    RawAnnotation,
    RawRecord,
    curate,
    decode_structure,
    downsample,
    encode_structure,
    exclude_ids,
    join_records,
    make_synthetic,
    make_synthetic_structures,
    oracle_predictions,
    parse_annotations,
    parse_backbone,
    parse_backbones,
    parse_fasta,
    read_dataset,
    read_label_table,
    read_oracle,
    read_registries,
    select_motif,
    write_dataset,
    write_registries,
)
from fungen.errors import ConfigError, EmptyDataset, IncompleteResidue, InvalidSpec, ParseError
from fungen.metrics import multilabel_metrics
from fungen.seqcore import BackboneStructure, Sequence, decode_sequence, encode_sequence
from fungen.structure import featurize_structure

from .conftest import random_text

# FASTA


def test_parse_fasta(tmp_path):
    path = tmp_path / "in.fasta"
    path.write_text(">P1 some protein\nMKV\nlaa\n>P2\r\nACDE\r\n")
    assert parse_fasta(path) == [("P1", "MKVLAA"), ("P2", "ACDE")]


def test_parse_fasta_errors(tmp_path):
    path = tmp_path / "in.fasta"
    path.write_text(">P1\nMKV\n>P1\nAAA\n")
    with pytest.raises(ParseError) as info:
        parse_fasta(path)
    assert info.value.line == 3

    path.write_text(">P1\n>P2\nAAA\n")
    with pytest.raises(ParseError):
        parse_fasta(path)

    path.write_text("MKV\n>P1\nAAA\n")
    with pytest.raises(ParseError) as info:
        parse_fasta(path)
    assert info.value.line == 1


# Annotation TSV


def _write_annotations(tmp_path, rows):
    path = tmp_path / "annotations.tsv"
    path.write_text("id\tgo\tipr\tec\n" + "".join("\t".join(row) + "\n" for row in rows))
    return path


def test_parse_annotations(tmp_path):
    path = _write_annotations(tmp_path, [("P1", "GO:1;GO:2", "IPR9:5-20", "EC:1.1.1.1"), ("P2", "GO:3", "", "")])
    table = parse_annotations(path)
    assert table["P1"] == RawAnnotation(("GO:1", "GO:2"), ("IPR9",), ("EC:1.1.1.1",), (("IPR9", 4, 20),))
    assert table["P2"].ipr == () and table["P2"].ipr_spans == ()


def test_parse_annotations_bad_span(tmp_path):
    path = _write_annotations(tmp_path, [("P1", "GO:1", "IPR9:20-5", "")])
    with pytest.raises(ParseError) as info:
        parse_annotations(path)
    assert info.value.line == 2
    assert info.value.column == "ipr"


def test_parse_annotations_missing_column(tmp_path):
    path = tmp_path / "annotations.tsv"
    path.write_text("id\tgo\tec\nP1\tGO:1\t\n")
    with pytest.raises(ParseError):
        parse_annotations(path)


def test_join_records():
    records = join_records([("P1", "MKV"), ("P2", "AAA")], {"P1": RawAnnotation(go=("GO:1",))})
    assert records[0].annotation.go == ("GO:1",)
    assert records[1].annotation == RawAnnotation()


# PDB backbones


def _atom(serial, name, resseq, xyz, altloc=" ", record="ATOM", resname="ALA", occupancy=1.0):
    x, y, z = xyz
    return (f"{record:<6s}{serial:5d} {name:<4s}{altloc}{resname:3s} A{resseq:4d}    "
            f"{x:8.3f}{y:8.3f}{z:8.3f}{occupancy:6.2f}{0.0:6.2f}          {name.strip()[0]:>2s}")


def _residue_lines(start_serial, resseq, origin, skip=()):
    lines = []
    for offset, name in enumerate(("N", "CA", "C", "O", "CB")):
        if name in skip:
            continue
        xyz = (origin[0] + offset * 1.111, origin[1] - offset * 0.5, origin[2] + 0.25)
        lines.append(_atom(start_serial + offset, f" {name}" if len(name) < 4 else name, resseq, xyz))
    return lines


def test_parse_backbone(tmp_path):
    lines = _residue_lines(1, 1, (11.104, 6.134, -6.504)) + _residue_lines(6, 2, (14.0, 2.5, 3.125))
    lines.append(_atom(11, " O", 101, (1.0, 1.0, 1.0), record="HETATM", resname="HOH"))
    path = tmp_path / "P1.pdb"
    path.write_text("\n".join(lines) + "\nEND\n")
    structure = parse_backbone(path)
    assert structure.coords.shape == (2, 4, 3)
    np.testing.assert_allclose(structure.coords[0, 0], [11.104, 6.134, -6.254], atol=1e-3)
    np.testing.assert_allclose(structure.coords[1, 3], [14.0 + 3 * 1.111, 2.5 - 1.5, 3.375], atol=1e-3)


def test_parse_backbone_altloc(tmp_path):
    lines = [
        _atom(1, " N", 1, (0.0, 0.0, 0.0)),
        _atom(2, " CA", 1, (1.0, 0.0, 0.0), altloc="A", occupancy=0.6),
        _atom(3, " CA", 1, (9.0, 9.0, 9.0), altloc="B", occupancy=0.4),
        _atom(4, " C", 1, (2.0, 0.0, 0.0)),
        _atom(5, " O", 1, (3.0, 0.0, 0.0)),
    ]
    path = tmp_path / "alt.pdb"
    path.write_text("\n".join(lines) + "\n")
    np.testing.assert_allclose(parse_backbone(path).coords[0, 1], [1.0, 0.0, 0.0], atol=1e-3)


def test_parse_backbone_incomplete(tmp_path):
    path = tmp_path / "bad.pdb"
    path.write_text("\n".join(_residue_lines(1, 1, (0.0, 0.0, 0.0), skip=("O",))) + "\n")
    with pytest.raises(IncompleteResidue) as info:
        parse_backbone(path)
    assert info.value.index == 0
    assert info.value.missing == "O"


def test_parse_backbones_by_stem(tmp_path):
    for name in ("a", "b"):
        (tmp_path / f"{name}.pdb").write_text("\n".join(_residue_lines(1, 1, (0.0, 0.0, 0.0))) + "\n")
    structures = parse_backbones(sorted(tmp_path.glob("*.pdb")), workers=2)
    assert sorted(structures) == ["a", "b"]


# Curation


def _raw(index, go=(), ipr_spans=(), text="MKVLAAGHHT"):
    ipr = tuple(dict.fromkeys(label for label, _, _ in ipr_spans))
    return RawRecord(f"r{index:03d}", text, RawAnnotation(go=tuple(go), ipr=ipr, ipr_spans=tuple(ipr_spans)))


def test_curate_filters_rare_labels():
    records = [_raw(i, go=["GO:A"]) for i in range(150)] + [_raw(150 + i, go=["GO:B"]) for i in range(99)]
    dataset = curate(records, CurationConfig(min_label_count=100, val_per_label=30))
    assert list(dataset.registries.go.labels) == ["GO:A"]
    assert len(dataset.val) == 30
    assert len(dataset.train) == 120
    assert [record.id for record in dataset.val] == [f"r{i:03d}" for i in range(30)]
    assert not {r.id for r in dataset.train} & {r.id for r in dataset.val}


def test_curate_conserves_records_and_keeps_floor():
    rng = np.random.default_rng(0)
    records = []
    for i in range(300):
        labels = [label for label in ("GO:A", "GO:B", "GO:C") if rng.random() < 0.5] or ["GO:A"]
        records.append(_raw(i, go=labels))
    config = CurationConfig(min_label_count=100, val_per_label=30)
    dataset = curate(records, config)
    assert len(dataset.train) + len(dataset.val) == 300
    train_counts = Counter(label for record in dataset.train for label in record.annotations.go)
    val_counts = Counter(label for record in dataset.val for label in record.annotations.go)
    for label_id in range(len(dataset.registries.go)):
        assert train_counts[label_id] >= config.min_label_count - config.val_per_label
        assert val_counts[label_id] >= 30


def test_curate_skips_invalid_sequences():
    records = [_raw(i, go=["GO:A"]) for i in range(3)]
    records.append(_raw(3, go=["GO:A"], text="MKXV"))
    records.append(_raw(4, go=["GO:A"], text="M" * 50))
    dataset = curate(records, CurationConfig(min_label_count=1, val_per_label=0, max_len=20))
    assert [record.id for record in dataset.train] == ["r000", "r001", "r002"]


def test_curate_empty():
    with pytest.raises(EmptyDataset):
        curate([], CurationConfig())
    with pytest.raises(EmptyDataset):
        curate([_raw(0, go=["GO:A"])], CurationConfig(min_label_count=2))


def test_curate_attaches_motif():
    records = [_raw(i, go=["GO:A"], ipr_spans=[("IPR1", 2, 6)]) for i in range(4)]
    dataset = curate(records, CurationConfig(min_label_count=1, val_per_label=1))
    motif = dataset.train[0].motif
    assert motif.spans[0][:2] == (2, 6)
    assert decode_sequence(Sequence(motif.spans[0][2])) == "VLAA"


def test_select_motif_prefers_relevant_span():
    record = _raw(0, go=["GO:1"], ipr_spans=[("IPR1", 0, 4), ("IPR2", 6, 10)])
    sequence = encode_sequence(record.sequence)
    cooccurrence = {"IPR1": Counter({"GO:1": 1}), "IPR2": Counter({"GO:1": 3})}
    motif, tie = select_motif(record, sequence, cooccurrence)
    assert motif.spans[0][:2] == (6, 10)
    assert not tie


def test_select_motif_intersects_overlapping_tie():
    record = _raw(0, go=["GO:1"], ipr_spans=[("IPR2", 4, 9), ("IPR1", 0, 5), ("IPR3", 2, 30)])
    sequence = encode_sequence(record.sequence)
    motif, tie = select_motif(record, sequence, {})
    assert tie
    assert motif.spans[0][:2] == (4, 5)


def test_select_motif_without_spans():
    record = _raw(0, go=["GO:1"])
    assert select_motif(record, encode_sequence(record.sequence), {}) == (None, False)


def test_downsample_and_exclude(tmp_path):
    records = [_raw(i) for i in range(7)]
    assert [r.id for r in downsample(records, 3)] == ["r000", "r003", "r006"]
    with pytest.raises(ConfigError):
        downsample(records, 0)
    path = tmp_path / "holdout.txt"
    path.write_text("# held out\nr001\n\nr004\n")
    assert [r.id for r in exclude_ids(records, path)] == ["r000", "r002", "r003", "r005", "r006"]


# Synthetic corpus


def test_synthetic_deterministic(small_spec, tmp_path):
    first, second = make_synthetic(small_spec), make_synthetic(small_spec)
    write_dataset(tmp_path / "a", CuratedDataset(first.records, [], first.registries))
    write_dataset(tmp_path / "b", CuratedDataset(second.records, [], second.registries))
    for name in ("train.fasta", "annotations.tsv", "registries.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_synthetic_records(small_corpus, small_spec):
    assert len(small_corpus.records) == small_spec.n_records
    assert small_corpus.registries.sizes() == {"go": 4, "ipr": 0, "ec": 0}
    for record in small_corpus.records:
        classes = sorted(record.annotations.go)
        assert 1 <= len(classes) <= small_spec.max_labels
        assert small_spec.background_min <= len(record) <= small_spec.background_max
        start, end, residues = record.motif.spans[0]
        assert decode_sequence(Sequence(residues)) == small_corpus.oracle.signatures[classes[0]][0]
        assert decode_sequence(record.sequence)[start:end] == small_corpus.oracle.signatures[classes[0]][0]


def test_oracle_exact_match(small_corpus):
    oracle = small_corpus.oracle
    for record in small_corpus.records:
        confidence = oracle.confidence(record.sequence)
        for class_id in record.annotations.go:
            assert confidence[class_id] == 1.0
        assert oracle(record.sequence, record.annotations) == 1.0


def test_oracle_null_distribution(small_corpus):
    rng = np.random.default_rng(5)
    for _ in range(200):
        confidence = small_corpus.oracle.confidence(random_text(rng, 60))
        assert max(confidence.values()) < 0.8


def test_oracle_macro_f1(small_corpus):
    preds = oracle_predictions(small_corpus.oracle, small_corpus.records)
    assert multilabel_metrics(preds, threshold=0.99)["macro_f1"] == 1.0


def test_oracle_json_round_trip(small_corpus):
    restored = type(small_corpus.oracle).from_json(json.loads(json.dumps(small_corpus.oracle.to_json())))
    record = small_corpus.records[0]
    assert restored.confidence(record.sequence) == small_corpus.oracle.confidence(record.sequence)


def test_synthetic_signatures_must_fit():
    spec = SyntheticSpec(n_classes=4, signature_length=12, background_min=20, background_max=30, max_labels=2)
    with pytest.raises(InvalidSpec):
        make_synthetic(spec)


def test_synthetic_structures_locality(small_corpus):
    record = small_corpus.records[0]
    ids = record.sequence.to_array()
    ids[5] = (ids[5] + 1) % 20
    mutated = type(record)(record.id, Sequence.from_array(ids), record.annotations)
    first, again, changed = make_synthetic_structures([record, record, mutated], seed=2)
    np.testing.assert_array_equal(first.structure.coords, again.structure.coords)
    differs = np.any(first.structure.coords != changed.structure.coords, axis=(1, 2))
    assert list(np.flatnonzero(differs)) == [5]


def test_synthetic_structures_featurize(small_corpus):
    for record in make_synthetic_structures(small_corpus.records[:10]):
        assert len(featurize_structure(record.structure)) == len(record)


# Dataset directories


def test_dataset_round_trip(small_corpus, tmp_path):
    records = make_synthetic_structures(small_corpus.records)
    dataset = CuratedDataset(records[:30], records[30:], small_corpus.registries,
                             {"oracle.json": small_corpus.oracle.to_json()})
    write_dataset(tmp_path / "data", dataset)
    loaded = read_dataset(tmp_path / "data")
    assert loaded.registries.content_hash == small_corpus.registries.content_hash
    assert [r.id for r in loaded.train] == [r.id for r in records[:30]]
    for original, restored in zip(records, loaded.train + loaded.val):
        assert restored.sequence == original.sequence
        assert restored.annotations == original.annotations
        assert restored.motif == original.motif
        np.testing.assert_allclose(restored.structure.coords, original.structure.coords, atol=1e-4)
    assert read_oracle(loaded).signatures == small_corpus.oracle.signatures


def test_structure_codec_errors():
    data = encode_structure(BackboneStructure(np.ones((3, 4, 3))))
    assert len(data) == 8 + 3 * 12 * 4
    assert len(decode_structure(data)) == 3
    with pytest.raises(ParseError):
        decode_structure(data[:-1])
    with pytest.raises(ParseError):
        decode_structure(b"\x01")


def test_registries_hash_checked(small_corpus, tmp_path):
    path = tmp_path / "registries.json"
    write_registries(path, small_corpus.registries)
    assert read_registries(path).content_hash == small_corpus.registries.content_hash
    payload = json.loads(path.read_text())
    payload["go"] = payload["go"][::-1]
    path.write_text(json.dumps(payload))
    with pytest.raises(ParseError):
        read_registries(path)


def test_read_label_table(tmp_path):
    path = tmp_path / "labels.tsv"
    path.write_text("id\tlabel\ng1\tclass0\ng1\tclass1\ng2\tclass1\n")
    assert read_label_table(path) == {"g1": {"class0", "class1"}, "g2": {"class1"}}
    path.write_text("id\tname\ng1\tx\n")
    with pytest.raises(ParseError):
        read_label_table(path)
