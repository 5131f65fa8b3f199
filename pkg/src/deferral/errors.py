class DeferralError(ValueError):
    """Bad input: malformed files, invalid arguments, unfittable data."""


class InvariantError(RuntimeError):
    """An internal invariant was breached; indicates a bug, not bad input."""
