# errors.py

"""Exception hierarchy shared by every pipeline stage."""

from typing import Iterable, List, Optional, Tuple


class DprError(Exception):
    """Base class for all pipeline errors."""


class ConfigurationError(DprError):
    """Invalid configuration or mismatched dimensions.

    Carries every problem found so callers can report them together.
    """

    def __init__(self, messages: Iterable[str] | str):
        if isinstance(messages, str):
            messages = [messages]
        self.messages: List[str] = list(messages)
        super().__init__("; ".join(self.messages))


class PreprocessingError(DprError):
    """A raw record could not be turned into a patient description."""

    def __init__(self, message: str, record_id: Optional[str] = None):
        self.record_id = record_id
        prefix = f"record {record_id}: " if record_id is not None else ""
        super().__init__(prefix + message)


class RelationConflictError(DprError):
    """Two labels disagree about the same directed drug pair."""

    def __init__(self, conflicts: List[Tuple[int, int, int, int]]):
        # (drug_a, drug_b, first_class, second_class)
        self.conflicts = conflicts
        lines = [f"R[{a}][{b}]: {c1} vs {c2}" for a, b, c1, c2 in conflicts]
        super().__init__(f"{len(conflicts)} conflicting labels: " + ", ".join(lines))


class GraphConstructionError(DprError):
    pass


class SamplingError(DprError):
    pass


class UnknownVariantError(DprError):
    pass


class StageError(DprError):
    """A pipeline stage is missing an upstream artifact."""

    def __init__(self, stage: str, missing: str, hint: str):
        self.stage = stage
        self.missing = missing
        super().__init__(f"stage '{stage}' needs {missing}; run '{hint}' first")
