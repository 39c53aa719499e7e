"""Exception hierarchy.

Input problems (bad files, bad configuration, mismatched grids) derive from
``InputError``; problems that only show up while computing (non-finite data,
degenerate classes, singular systems) derive from ``NumericalError``.  The CLI
maps the two families onto exit codes 2 and 3.
"""


class LongsegError(Exception):
    pass


class InputError(LongsegError):
    pass


class FormatError(InputError):
    """Malformed or truncated file."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ValidationError(InputError):
    pass


class GridMismatchError(InputError):
    pass


class StateError(LongsegError):
    """Operation applied to an object in the wrong state (e.g. double log)."""


class NumericalError(LongsegError):
    pass


class NonFiniteDataError(NumericalError):
    def __init__(self, message, voxels=()):
        super().__init__(message)
        self.voxels = list(voxels)


class DegenerateVoxelError(NumericalError):
    def __init__(self, message, voxels=()):
        super().__init__(message)
        self.voxels = list(voxels)


class EmptyClassError(NumericalError):
    def __init__(self, k):
        super().__init__(f"class {k} has zero total responsibility")
        self.k = k


class NotSPDError(NumericalError):
    pass


class InfiniteEnergyError(NumericalError):
    """Deformation energy is +inf (an inverted or collapsed tetrahedron)."""


class SingularSystemError(NumericalError):
    pass
