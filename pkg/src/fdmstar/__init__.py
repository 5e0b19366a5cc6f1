"""Fast diagonalization (FDM) star-patch preconditioners for high-order
quadrilateral and hexahedral discretizations."""

__version__ = "0.1.0"
