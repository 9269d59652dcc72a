"""Exception types shared across the package."""


class CodedArqError(Exception):
    pass


class ModeMismatch(CodedArqError):
    """State storage mode (binary vs lifetime) does not match the operation."""


class NotAClique(CodedArqError):
    """A multi-user combination was requested that is not a clique of the state."""


class EmptyCombination(CodedArqError):
    """All XOR coefficients are zero."""


class AllExpired(CodedArqError):
    """No strictly positive lifetime entry exists in the state."""


class Unrepresentable(CodedArqError):
    """No detailed state maps to the requested aggregated state."""


class InfeasibleAction(CodedArqError):
    """The abstract action is not feasible in the current aggregated state."""


class SchemeMismatch(CodedArqError):
    """Two objects built for different aggregation schemes were combined."""


class AmbiguousSlice(CodedArqError):
    """A policy slice has several switch points and overwrite was not authorized."""


class NoData(CodedArqError):
    """The learned transition model is empty."""


class TooLarge(CodedArqError):
    """Exact enumeration was requested beyond the size guard."""


class DegeneratePolicy(CodedArqError):
    """No recurrent class is reachable from the designated start state."""
