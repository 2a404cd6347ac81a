"""Exception hierarchy; the CLI maps these onto exit codes."""


class VoxcompleteError(Exception):
    """Base class for all package errors."""


class CoordinateRangeError(VoxcompleteError):
    """A coordinate fell outside the 21-bit packed-key budget."""


class StructureError(VoxcompleteError):
    """Inconsistent grid/feature/label structure (e.g. orphan voxel)."""


class ConfigError(VoxcompleteError):
    """Bad configuration: shape mismatch, missing checkpoint, invalid option."""


class FormatError(VoxcompleteError):
    """A binary or JSON artifact failed to parse."""


class EmptyInputError(VoxcompleteError):
    """An operation that needs at least one voxel/point received none."""


class CompletionOverflow(VoxcompleteError):
    """Inference-mode pruning kept more voxels than the configured cap."""


class TrainingDiverged(VoxcompleteError):
    """Loss became non-finite; carries the offending batch for diagnosis."""

    def __init__(self, step: int, batch_ids):
        self.step = step
        self.batch_ids = list(batch_ids)
        super().__init__(f"non-finite loss at step {step}, batch {self.batch_ids}")
