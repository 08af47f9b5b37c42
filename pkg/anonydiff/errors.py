"""
Exceptions raised by anonydiff. Every error carries a short machine-readable
``code`` that the command line reports as ``ERROR: <code>: <message>``.
"""


class AnonyDiffError(Exception):
    code = 'error'


class InvalidFactorsError(AnonyDiffError, ValueError):
    code = 'invalid-factors'


class IdenticalIdentitiesError(AnonyDiffError, ValueError):
    code = 'identical-identities'


class InsufficientDataError(AnonyDiffError, ValueError):
    code = 'insufficient-data'


class ShapeMismatchError(AnonyDiffError, ValueError):
    code = 'shape-mismatch'


class DimensionMismatchError(AnonyDiffError, ValueError):
    code = 'dimension-mismatch'


class NonUnitNormError(AnonyDiffError, ValueError):
    code = 'non-unit-norm'


class ZeroVectorError(AnonyDiffError, ValueError):
    code = 'zero-vector'


class EmptyInputError(AnonyDiffError, ValueError):
    code = 'empty-input'


class InvalidRangeError(AnonyDiffError, ValueError):
    code = 'invalid-range'


class InvalidConfigError(AnonyDiffError, ValueError):
    code = 'invalid-config'


class MalformedConfigError(AnonyDiffError, ValueError):
    code = 'malformed-config'


class MisalignedStatesError(AnonyDiffError, ValueError):
    code = 'misaligned-states'


class UntrainedNetworkError(AnonyDiffError):
    code = 'untrained-network'


class UntrainedProbeError(AnonyDiffError):
    code = 'untrained-probe'


class DivergedSamplingError(AnonyDiffError):
    code = 'diverged-sampling'


class DivergedTrainingError(AnonyDiffError):
    code = 'diverged-training'

    def __init__(self, message, last_checkpoint=None):
        if last_checkpoint is not None:
            message = f'{message} (last good checkpoint: {last_checkpoint})'
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class ExhaustedDatasetError(AnonyDiffError):
    code = 'exhausted-dataset'


class HashMismatchError(AnonyDiffError):
    code = 'hash-mismatch'


class MissingFileError(AnonyDiffError, FileNotFoundError):
    code = 'missing-file'


class DatasetIOError(AnonyDiffError, OSError):
    code = 'io'
