"""
Command-line entry point.

    fungen curate    FASTA + annotation TSV (+ PDB backbones) -> dataset directory
    fungen synth     synthetic signature corpus -> dataset directory
    fungen train     dataset directory -> checkpoint directory
    fungen generate  checkpoint + conditions -> FASTA
    fungen evaluate  generated FASTA vs reference -> metric report JSON
    fungen inspect   checkpoint -> manifest summary JSON

Every flag maps onto a run-config key and wins over --config and --set.
Errors are printed on stderr as one JSON line; the exit status is 1 for usage
errors, 2 for data errors and 3 for numerical failures.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__, get_settings
from .checkpoint import checkpoint_summary, load_checkpoint, read_manifest, save_checkpoint
from .config import RunConfig, load_config
from .data import (
    CuratedDataset,
    DatasetRecord,
    curate,
    decode_structure,
    downsample,
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
    write_dataset,
    write_registries,
)
from .denoiser import init_params
from .diffusion import make_schedule
from .errors import ConfigError, DataError, FungenError, UsageError
from .generation import GeneratedRecord, generate_reranked, sample_scored, write_fasta
from .metrics import (
    ALIGNMENT_PARAMS,
    LabeledPredictions,
    MetricReport,
    aar,
    diversity,
    embed_set,
    export_embeddings,
    f_max,
    merge_external_scores,
    mmd_gaussian,
    mmd_linear,
    mrr,
    multilabel_metrics,
    ngram_table,
    novelty,
    read_predictions,
)
from .seqcore import AnnotationSet, ConditionBundle, MotifSpec, encode_sequence
from .training import format_log, train
from .utils import atomic_write_json

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of exiting."""

    def error(self, message):
        raise UsageError(message)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Run config JSON (relative paths also searched in FUNGEN_CONFIG_DIR)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config key by dotted path, e.g. train.lr=1e-4")
    parser.add_argument("--seed", type=int, help="Seed for every random draw of the subcommand")
    parser.add_argument("--workers", type=int, help="Worker pool size; 1 is fully deterministic")
    parser.add_argument("--log-level", default=None, help="Root log level (default WARNING)")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="fungen", description="Conditional discrete diffusion for protein sequences")
    parser.add_argument("--version", action="version", version=f"fungen {__version__}")
    commands = parser.add_subparsers(dest="command", parser_class=ArgumentParser)
    commands.required = True

    p = commands.add_parser("curate", help="Build a dataset directory from FASTA and annotations")
    _common(p)
    p.add_argument("--fasta", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--structures", help="Directory of <id>.pdb backbones")
    p.add_argument("--exclude", help="File of held-out ids, one per line")
    p.add_argument("--downsample", type=int, help="Keep every Nth record (default 1)")
    p.add_argument("--min-label-count", type=int)
    p.add_argument("--val-per-label", type=int)
    p.add_argument("--out", required=True)

    p = commands.add_parser("synth", help="Write a synthetic signature corpus")
    _common(p)
    p.add_argument("--n-records", type=int)
    p.add_argument("--n-classes", type=int)
    p.add_argument("--with-structures", action="store_true", help="Attach sequence-encoding backbones")
    p.add_argument("--val-frac", type=float, help="Tail fraction held out for validation (default 0.1)")
    p.add_argument("--out", required=True)

    p = commands.add_parser("train", help="Train a denoiser on a dataset directory")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="Checkpoint to continue from (e.g. for the second stage)")
    p.add_argument("--stage", choices=["joint", "agfm", "rcfe"])
    p.add_argument("--max-steps", type=int)
    p.add_argument("--out", required=True)

    p = commands.add_parser("generate", help="Sample sequences from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="Sequences to write (default 1)")
    p.add_argument("--len", dest="length", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--go", default="", help="Comma-separated GO labels")
    p.add_argument("--ipr", default="", help="Comma-separated IPR labels")
    p.add_argument("--ec", default="", help="Comma-separated EC labels")
    p.add_argument("--motif", help="start-end:RESIDUES[,...], 0-based half-open")
    p.add_argument("--motif-mode", choices=["fixed", "dynamic"])
    p.add_argument("--structure", help="Backbone as PDB or structures/<id>.bin")
    p.add_argument("--rerank", type=int, help="Candidates per sequence scored by the dataset oracle")
    p.add_argument("--data", help="Dataset directory providing the oracle for --rerank")
    p.add_argument("--id-prefix", default="gen")

    p = commands.add_parser("evaluate", help="Score generated sequences")
    _common(p)
    p.add_argument("--generated", required=True, help="Generated FASTA")
    p.add_argument("--reference", help="Reference FASTA")
    p.add_argument("--data", help="Dataset directory; its validation split is the default reference")
    p.add_argument("--generated-labels", help="id/label TSV for generated sequences")
    p.add_argument("--reference-labels", help="id/label TSV for reference sequences")
    p.add_argument("--predictions", help="id/label/score TSV of function predictions for generated sequences")
    p.add_argument("--threshold", type=parse_threshold,
                   help="Float, or PREFIX=VALUE pairs joined by commas (default 0.5)")
    p.add_argument("--k", type=int, help="Spectrum k-mer order (default 3)")
    p.add_argument("--out", help="Report path; printed to stdout when omitted")
    for flag in ("mmd", "mrr", "function", "fmax", "aar", "ngram", "novelty"):
        p.add_argument(f"--{flag}", action="store_true")
    p.add_argument("--embeddings", help="Write spectrum embeddings CSV here")
    p.add_argument("--sctm-tsv", help="Per-sequence external scores to merge")

    p = commands.add_parser("inspect", help="Summarize a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    return parser


FLAG_KEYS = {
    "min_label_count": "curation.min_label_count",
    "downsample": "curation.downsample",
    "val_per_label": "curation.val_per_label",
    "n_records": "synthetic.n_records",
    "n_classes": "synthetic.n_classes",
    "val_frac": "synthetic.val_frac",
    "stage": "train.stage",
    "max_steps": "train.max_steps",
    "length": "sample.length",
    "steps": "sample.steps",
    "temperature": "sample.temperature",
    "motif_mode": "sample.motif_mode",
    "rerank": "sample.n_candidates",
    "n": "sample.n_sequences",
    "threshold": "evaluate.threshold",
    "k": "evaluate.k",
    "workers": "workers",
}


def flag_overrides(args) -> list:
    """Config overrides implied by explicit flags."""
    overrides = []
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={json.dumps(value)}")
    if args.seed is not None:
        for key in ("seed", "train.seed", "sample.seed", "synthetic.seed"):
            overrides.append(f"{key}={args.seed}")
    return overrides


def configure_logging(level) -> None:
    level = (level or get_settings()["log_level"]).upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ConfigError(f"unknown log level {level!r}", key="log_level")
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)


def _labels(text: str) -> list:
    return [label.strip() for label in text.split(",") if label.strip()]


def _load_structure(path: str):
    if path.endswith(".bin"):
        return decode_structure(Path(path).read_bytes(), path)
    return parse_backbone(path)


def _schedule_for(checkpoint, config: RunConfig):
    training = read_manifest(checkpoint).get("training", {})
    return make_schedule(training.get("T", config.train.T), training.get("schedule_kind", config.train.schedule_kind))


def cmd_curate(args, config: RunConfig) -> dict:
    records = join_records(parse_fasta(args.fasta), parse_annotations(args.annotations))
    if args.exclude:
        records = exclude_ids(records, args.exclude)
    records = downsample(records, config.curation.downsample)
    dataset = curate(records, config.curation)

    if args.structures:
        paths = sorted(Path(args.structures).glob("*.pdb"))
        structures = parse_backbones(paths, config.workers)
        dataset.train = _attach(dataset.train, structures)
        dataset.val = _attach(dataset.val, structures)

    write_dataset(args.out, dataset)
    if config.curation.registries_path:
        write_registries(config.curation.registries_path, dataset.registries)
    return {"success": True, "out": args.out, "train": len(dataset.train), "val": len(dataset.val),
            "registry_hash": dataset.registries.content_hash}


def _attach(records, structures: dict) -> list:
    attached = []
    for record in records:
        structure = structures.get(record.id)
        if structure is not None and len(structure) != len(record):
            logger.warning(f"Structure for {record.id} has {len(structure)} residues, sequence has {len(record)}; "
                           f"ignoring it")
            structure = None
        attached.append(replace(record, structure=structure))
    return attached


def cmd_synth(args, config: RunConfig) -> dict:
    corpus = make_synthetic(config.synthetic)
    records = corpus.records
    if args.with_structures:
        records = make_synthetic_structures(records, config.synthetic.seed)
    n_val = int(round(len(records) * config.synthetic.val_frac))
    split = len(records) - n_val
    dataset = CuratedDataset(records[:split], records[split:], corpus.registries,
                             {"oracle.json": corpus.oracle.to_json()})
    write_dataset(args.out, dataset)
    return {"success": True, "out": args.out, "train": split, "val": n_val,
            "registry_hash": corpus.registries.content_hash}


def cmd_train(args, config: RunConfig) -> dict:
    dataset = read_dataset(args.data)
    registries = dataset.registries
    longest = max((len(record) for record in dataset.train), default=0)

    if args.init:
        model, model_config, _ = load_checkpoint(args.init, expected_hash=registries.content_hash)
        model.to(torch.float32)
    else:
        sizes = registries.sizes()
        model_config = config.model.model_copy(update={"n_go": sizes["go"], "n_ipr": sizes["ipr"],
                                                       "n_ec": sizes["ec"]})
        model = init_params(model_config, seed=config.seed)
    if longest > model_config.max_len:
        raise ConfigError(f"longest training sequence ({longest}) exceeds model.max_len ({model_config.max_len})",
                          key="model.max_len")

    result = train(dataset.examples("train"), config.train, model)
    files = {"train_log.jsonl": format_log(result.log),
             "train_manifest.json": json.dumps(result.manifest, indent=2) + "\n"}
    save_checkpoint(result.model, registries, args.out, extra={"training": result.manifest}, files=files)
    return {"success": True, "out": args.out, "steps": len(result.log),
            "final_loss": result.manifest["final_loss"]}


def cmd_generate(args, config: RunConfig) -> dict:
    model, _, registries = load_checkpoint(args.checkpoint)
    schedule = _schedule_for(args.checkpoint, config)

    annotations = AnnotationSet.from_labels(registries, go=_labels(args.go), ipr=_labels(args.ipr),
                                            ec=_labels(args.ec))
    motif = MotifSpec.parse(args.motif, dynamic_update=config.sample.motif_mode == "dynamic") if args.motif else None
    structure = _load_structure(args.structure) if args.structure else None
    bundle = ConditionBundle(annotations, motif, structure)

    scorer = None
    if args.rerank:
        oracle = read_oracle(read_dataset(args.data)) if args.data else None
        if oracle is None:
            raise UsageError("--rerank needs --data pointing at a dataset with an oracle")
        scorer = oracle

    records = []
    stride = config.sample.n_candidates
    for index in range(config.sample.n_sequences):
        cfg = config.sample.model_copy(update={"seed": config.sample.seed + index * stride})
        if scorer is not None:
            best = generate_reranked(bundle, model, schedule, cfg, scorer, config.workers)
            records.append(GeneratedRecord(f"{args.id_prefix}{index}", best.sequence, best.mode, best.seed,
                                           best.model_confidence, best.func_score))
        else:
            drawn = sample_scored(bundle, model, schedule, cfg)
            records.append(GeneratedRecord(f"{args.id_prefix}{index}", drawn.sequence, drawn.mode, drawn.seed,
                                           drawn.model_confidence))
    write_fasta(records, args.out)
    return {"success": True, "out": args.out, "count": len(records)}


def parse_threshold(text: str):
    try:
        return float(text)
    except ValueError:
        pass
    thresholds = {}
    for item in text.split(","):
        prefix, _, value = item.partition("=")
        try:
            thresholds[prefix.strip() or "*"] = float(value)
        except ValueError:
            raise ConfigError(f"cannot parse threshold {item!r}", key="threshold") from None
    return thresholds


def _group(ids: list, sequences: dict, labels: dict) -> dict:
    groups = {}
    for record_id in ids:
        for label in labels.get(record_id, ()):
            groups.setdefault(label, []).append(sequences[record_id])
    return groups


def cmd_evaluate(args, config: RunConfig) -> dict:
    # Generated headers carry id|mode=...|seed=...; only the id part names the sequence.
    generated = {record_id.split("|", 1)[0]: encode_sequence(text) for record_id, text in parse_fasta(args.generated)}
    gen_ids = list(generated)
    k = config.evaluate.k

    dataset = read_dataset(args.data) if args.data else None
    if args.reference:
        reference = {record_id.split("|", 1)[0]: encode_sequence(text)
                     for record_id, text in parse_fasta(args.reference)}
    elif dataset is not None:
        reference = {record.id: record.sequence for record in dataset.val}
    else:
        reference = {}
    ref_ids = list(reference)

    gen_labels = read_label_table(args.generated_labels) if args.generated_labels else {}
    if args.reference_labels:
        ref_labels = read_label_table(args.reference_labels)
    elif dataset is not None and not args.reference:
        ref_labels = {record.id: set(record.annotations.to_labels(dataset.registries)["go"]) for record in dataset.val}
    else:
        ref_labels = {}

    report = MetricReport(metadata={"generated": args.generated, "n_generated": len(gen_ids),
                                    "n_reference": len(ref_ids), "k": k})

    def need_reference(flag):
        if not ref_ids:
            raise UsageError(f"--{flag} needs --reference or --data")

    if args.mmd:
        need_reference("mmd")
        S, P = embed_set([generated[i] for i in gen_ids], k), embed_set([reference[i] for i in ref_ids], k)
        report.add("mmd_linear", mmd_linear(S, P))
        report.add("mmd_gaussian_squared", mmd_gaussian(S, P))
    if args.mrr:
        need_reference("mrr")
        S_by = {c: embed_set(seqs, k) for c, seqs in _group(gen_ids, generated, gen_labels).items()}
        P_by = {c: embed_set(seqs, k) for c, seqs in _group(ref_ids, reference, ref_labels).items()}
        report.add("mrr", mrr(S_by, P_by))
    if args.function or args.fmax:
        preds = _predictions(args, dataset, gen_ids, generated, gen_labels)
        if args.function:
            values = multilabel_metrics(preds, config.evaluate.threshold)
            for name in ("micro_f1", "macro_f1", "macro_aupr", "macro_auc"):
                if np.isfinite(values[name]):
                    report.add(name, values[name])
            report.tables["function_classes"] = {"evaluated": values["classes_evaluated"],
                                                 "skipped": values["classes_skipped"]}
        if args.fmax:
            report.add("f_max", f_max(preds))
    if args.aar:
        need_reference("aar")
        if len(gen_ids) != len(ref_ids):
            raise UsageError(f"--aar pairs sequences in file order; got {len(gen_ids)} generated and "
                             f"{len(ref_ids)} reference")
        scores = [aar(generated[g], reference[r]) for g, r in zip(gen_ids, ref_ids)]
        report.add("aar", float(np.mean(scores)))
    if args.ngram:
        report.tables["ngram_repeats"] = {str(n): count for n, count in
                                          ngram_table([generated[i] for i in gen_ids]).items()}
    if args.novelty:
        need_reference("novelty")
        values = novelty([generated[i] for i in gen_ids], [reference[i] for i in ref_ids], config.workers)
        report.add("novelty_mean", float(np.mean(values)))
        report.add("diversity", diversity([generated[i] for i in gen_ids], workers=config.workers))
        report.tables["novelty"] = dict(zip(gen_ids, values))
        report.metadata["alignment"] = dict(ALIGNMENT_PARAMS, identity="matches / alignment length")
    if args.embeddings:
        rows = [(i, ";".join(sorted(gen_labels.get(i, ()))) or "generated", generated[i]) for i in gen_ids]
        rows += [(i, ";".join(sorted(ref_labels.get(i, ()))) or "reference", reference[i]) for i in ref_ids]
        export_embeddings(rows, args.embeddings, k)
    if args.sctm_tsv:
        merge_external_scores(report, args.sctm_tsv)

    payload = report.to_json()
    if args.out:
        atomic_write_json(args.out, payload)
        return {"success": True, "out": args.out}
    return dict(payload, success=True)


def _predictions(args, dataset, gen_ids: list, generated: dict, gen_labels: dict) -> LabeledPredictions:
    truths = [gen_labels.get(i, set()) for i in gen_ids]
    if args.predictions:
        table = read_predictions(args.predictions)
        return LabeledPredictions([table.get(i, {}) for i in gen_ids], truths, gen_ids)
    oracle = read_oracle(dataset) if dataset is not None else None
    if oracle is None:
        raise UsageError("--function/--fmax need --predictions or --data with an oracle")
    records = [DatasetRecord(i, generated[i]) for i in gen_ids]
    preds = oracle_predictions(oracle, records)
    return LabeledPredictions(preds.scores, truths, gen_ids)


def cmd_inspect(args, config: RunConfig) -> dict:
    summary = checkpoint_summary(args.checkpoint)
    load_checkpoint(args.checkpoint)
    return dict(summary, success=True)


COMMANDS = {
    "curate": cmd_curate,
    "synth": cmd_synth,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
}


def _print_error(error: dict) -> None:
    sys.stderr.write(json.dumps(error, default=str) + "\n")


def dispatch(argv=None) -> int:
    """
    Run one subcommand.

    Args:
        argv: Arguments without the program name; sys.argv[1:] when None

    Returns:
        int: Exit status (0 ok, 1 usage, 2 data, 3 numerical or unexpected)
    """
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.log_level)
        config = load_config(args.config, list(args.overrides) + flag_overrides(args))
        if config.workers == 1:
            torch.set_num_threads(1)
        result = COMMANDS[args.command](args, config)
    except FungenError as e:
        logger.error(f"{type(e).__name__}: {e}")
        _print_error(e.to_dict())
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        _print_error({"success": False, "error": str(e), "type": "DataError"})
        return DataError.exit_code
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        _print_error({"success": False, "error": str(e), "type": type(e).__name__})
        return 3

    sys.stdout.write(json.dumps(result, default=str) + "\n")
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
