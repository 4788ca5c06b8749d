class FormatError(Exception):
    """A file or stream does not conform to one of the on-disk formats."""


class NumericalError(Exception):
    """A non-finite value was encountered where finite data is required."""
