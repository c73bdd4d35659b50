"""Exception hierarchy.

Grouped by the CLI exit code each family maps to.
"""


class DrnnVoError(Exception):
    pass


# geometry -------------------------------------------------------------------

class NotARotation(DrnnVoError, ValueError):
    pass


class UnscaledIncrement(DrnnVoError, ValueError):
    pass


class AlreadyScaled(DrnnVoError, ValueError):
    pass


# dataset / alignment (exit code 2) ------------------------------------------

class DatasetError(DrnnVoError):
    pass


class MalformedCalib(DatasetError):
    pass


class MalformedPoses(DatasetError):
    pass


class IndexOutOfRange(DatasetError, IndexError):
    pass


class AlignmentMismatch(DatasetError):
    pass


# synthetic generation (exit code 5) -----------------------------------------

class DegenerateScene(DrnnVoError):
    pass


# features / epipolar --------------------------------------------------------

class ImageTooSmall(DrnnVoError, ValueError):
    pass


class NoMatches(DrnnVoError):
    pass


class DegenerateConfiguration(DrnnVoError):
    pass


class EstimationFailed(DrnnVoError):
    pass


class CheiralityAmbiguous(DrnnVoError):
    pass


# network (exit codes 3 and 4) -----------------------------------------------

class EmptyMatches(DrnnVoError, ValueError):
    pass


class EmptyInput(DrnnVoError, ValueError):
    pass


class ModelFormatError(DrnnVoError):
    pass


class TrainingError(DrnnVoError):
    pass


class SingularNormalMatrix(TrainingError):
    pass


class NonFiniteLoss(TrainingError):
    pass


# evaluation -----------------------------------------------------------------

class EmptySeries(DrnnVoError, ValueError):
    pass
