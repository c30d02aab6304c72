"""Exception hierarchy shared across the package.

The CLI maps :class:`ConfigError` to exit code 2 and :class:`NumericalError`
to exit code 3.
"""


class ConfigError(ValueError):
    """Invalid user-supplied configuration or inconsistent inputs."""


class NumericalError(RuntimeError):
    """A numerical stage (assembly, solve, optimization) failed."""


class InvalidGridError(ConfigError):
    pass


class AssemblyError(NumericalError):
    pass


class SolverError(NumericalError):
    pass


class BudgetExhausted(RuntimeError):
    """The forward-solve budget of a :class:`SolveLedger` ran out.

    Deliberately not a :class:`NumericalError`, so samplers and optimizers
    that absorb solver failures let it propagate.
    """
