"""Exception hierarchy for the sevar package."""


class SevarError(Exception):
    """Base class for all package errors."""


# --- expression engine ---------------------------------------------------

class ExprSyntaxError(SevarError):
    """Malformed expression text; carries the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class UnknownIdentifierError(ExprSyntaxError):
    pass


class TauNotAllowedError(SevarError):
    """tau used in a Lagrangian declared for the planar group."""


class JetOrderLimitError(SevarError):
    """Derivative order above the supported maximum requested at parse time."""


class MissingJetOrderError(SevarError):
    """A jet value of higher order than the jet provides was requested."""


class DivisionByZeroError(SevarError):
    """Division by zero during evaluation; message names the subexpression."""


class EvaluationDomainError(SevarError):
    """Function evaluated outside its real domain (e.g. sqrt of a negative)."""


# --- geometry -------------------------------------------------------------

class DegenerateTangentError(SevarError):
    """Tangent vector has (numerically) zero length."""


class UndefinedTorsionError(SevarError):
    """Torsion requested where ||x_s x x_ss|| is below tolerance."""


class DegenerateCurvatureError(SevarError):
    """Curvature below tolerance where a formula divides by it."""


class NotArcLengthError(SevarError):
    """Operation requires an arc-length parametrized jet."""


class InconsistentPoseError(SevarError):
    """Initial pose incompatible with the initial invariant jet."""


# --- numerics -------------------------------------------------------------

class StepUnderflowError(SevarError):
    """Integrator step size collapsed below machine resolution."""


class MaxStepsExceededError(SevarError):
    """Integrator exceeded its step budget."""


class OutOfSpanError(SevarError):
    """Evaluation point outside the integrated span."""


class NoConvergenceError(SevarError):
    """Newton iteration failed to converge."""


# --- solvers --------------------------------------------------------------

class StiffnessFailureError(SevarError):
    """The explicit integrator could not proceed (likely stiffness/blow-up)."""


class DegenerateLeadingCoefficientError(SevarError):
    """Highest-derivative coefficient of the scalar EL equation vanishes."""


class SingularHighestDerivativeSystemError(SevarError):
    """2x2 system for the highest derivatives is singular."""


class InconsistentInitialJetError(SevarError):
    """Initial jet violates an algebraic Euler-Lagrange constraint."""


class CurvatureCollapseError(SevarError):
    """Curvature fell below the positivity floor; may carry a partial result."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class DegenerateConstantsError(SevarError):
    """c1^2 + c2^2 ~ 0: the planar linear reconstruction is undefined."""


class DegenerateC1Error(SevarError):
    """|c1| ~ 0: the canonicalization of the constant vector is undefined."""


class UpsilonOneVanishesError(SevarError):
    """First invariant component crosses zero inside the reconstruction span."""

    def __init__(self, message, zeros=()):
        super().__init__(message)
        self.zeros = tuple(zeros)


class NegativeRadiusSquaredError(SevarError):
    """Squared cylindrical radius went negative beyond rounding tolerance."""


# --- CLI ------------------------------------------------------------------

class ConfigError(SevarError):
    """Invalid run configuration."""
