"""Exception types raised across the membrane solver."""


class MembraneCutFEMError(Exception):
    """Base class for solver errors."""


class GeometryError(MembraneCutFEMError):
    """A cell, mapping or mesh is geometrically invalid."""


class DegenerateCutError(GeometryError):
    """A cut cell does not produce a usable polygon."""

    def __init__(self, message: str, cell: int | None = None):
        super().__init__(message)
        self.cell = cell


class MultiComponentCutError(DegenerateCutError):
    """A cell is cut into more than one polygon."""


class SurfaceMissesMeshError(MembraneCutFEMError):
    """The discrete level set has no sign change on the mesh."""


class ContractViolation(ValueError):
    """A documented precondition was not met by the caller."""
