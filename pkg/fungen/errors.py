"""
Error types for fungen.

Every error carries its diagnostic fields and the process exit code the CLI
uses when the error escapes a subcommand.
"""


class FungenError(Exception):
    """Base class for all fungen errors."""

    exit_code = 3

    def __init__(self, message: str, **fields):
        super().__init__(message)
        self.fields = fields
        for name, value in fields.items():
            setattr(self, name, value)

    def to_dict(self) -> dict:
        """Single-line JSON diagnostic payload."""
        return {"success": False, "error": str(self), "type": type(self).__name__, **self.fields}


class UsageError(FungenError):
    """Bad arguments, bad configuration, or an operation called out of its domain."""

    exit_code = 1


class DataError(FungenError):
    """Input data that cannot be parsed or violates a data contract."""

    exit_code = 2


class NumericalError(FungenError):
    """A computation produced or received non-finite or degenerate numbers."""

    exit_code = 3


# Usage


class ConfigError(UsageError):
    def __init__(self, message: str, key: str = ""):
        super().__init__(message, key=key)


class InvalidSchedule(UsageError):
    def __init__(self, message: str):
        super().__init__(message)


class StepOutOfRange(UsageError):
    def __init__(self, t: int, T: int):
        super().__init__(f"step {t} outside [1, {T}]", t=t, T=T)


class InvalidOrder(UsageError):
    def __init__(self, n: int):
        super().__init__(f"n-gram order must be at least 2, got {n}", n=n)


# Data


class InvalidResidue(DataError):
    def __init__(self, position: int, symbol: str):
        super().__init__(f"invalid residue {symbol!r} at position {position}", position=position, symbol=symbol)


class SequenceTooLong(DataError):
    def __init__(self, length: int, max_len: int):
        super().__init__(f"sequence length {length} exceeds max length {max_len}", length=length, max_len=max_len)


class SequenceTooShort(DataError):
    def __init__(self, length: int, k: int):
        super().__init__(f"sequence length {length} is shorter than k={k}", length=length, k=k)


class InvalidMotif(DataError):
    def __init__(self, message: str):
        super().__init__(message)


class SpanOutOfRange(DataError):
    def __init__(self, start: int, end: int, length: int):
        super().__init__(f"motif span ({start}, {end}) outside sequence of length {length}", start=start, end=end,
                         length=length)


class UnknownLabel(DataError):
    def __init__(self, kind: str, label):
        super().__init__(f"unknown {kind} label {label!r}", kind=kind, label=label)


class AlreadyCorrupted(DataError):
    def __init__(self, position: int):
        super().__init__(f"input already holds a mask token at position {position}", position=position)


class InvalidStructure(DataError):
    def __init__(self, message: str):
        super().__init__(message)


class StructureTooShort(DataError):
    def __init__(self, length: int):
        super().__init__(f"structure has {length} residues, at least 3 are required", length=length)


class ParseError(DataError):
    def __init__(self, message: str, line: int = 0, column: str = "", path: str = ""):
        super().__init__(message, line=line, column=column, path=path)


class IncompleteResidue(DataError):
    def __init__(self, index: int, missing: str):
        super().__init__(f"residue {index} is missing backbone atom {missing}", index=index, missing=missing)


class EmptyDataset(DataError):
    def __init__(self, message: str = "no records survive curation"):
        super().__init__(message)


class InvalidSpec(DataError):
    def __init__(self, message: str):
        super().__init__(message)


class CorruptCheckpoint(DataError):
    def __init__(self, message: str, path: str = ""):
        super().__init__(message, path=path)


class LengthMismatch(DataError):
    def __init__(self, left: int, right: int):
        super().__init__(f"length mismatch: {left} vs {right}", left=left, right=right)


class EmptySet(DataError):
    def __init__(self, which: str):
        super().__init__(f"{which} set is empty", which=which)


class ClassMismatch(DataError):
    def __init__(self, missing: list):
        super().__init__(f"class keys differ between sets: {missing}", missing=missing)


class NoPositives(DataError):
    def __init__(self):
        super().__init__("no class has a positive ground-truth instance")


class InvalidPrediction(DataError):
    def __init__(self, label: str, value: float):
        super().__init__(f"confidence {value!r} for label {label!r} lies outside [0, 1]", label=label, value=value)


# Numerical


class InvalidDistribution(NumericalError):
    def __init__(self, message: str):
        super().__init__(message)


class DegenerateBandwidth(NumericalError):
    def __init__(self):
        super().__init__("median pairwise distance is zero; Gaussian bandwidth undefined")


class DivergedAtStep(NumericalError):
    def __init__(self, step: int):
        super().__init__(f"training diverged at step {step}", step=step)


class ScorerError(NumericalError):
    def __init__(self, value, seed: int):
        super().__init__(f"scorer returned non-finite value {value!r} for candidate seed {seed}", seed=seed)


class NonFiniteMetric(NumericalError):
    def __init__(self, name: str):
        super().__init__(f"metric {name} is not finite", name=name)