# stdlib
from typing import Any


class HerdError(Exception):
    """Base class for every error raised by the toolkit."""

    cause = "herd-error"

    def record(self) -> dict[str, Any]:
        """Machine-readable form, used for failure records and CLI output."""
        return {"cause": self.cause, "message": str(self)}


class GuardViolation(HerdError):
    cause = "guard-violation"

    def __init__(self, kind: str, pair: tuple[int, int], distance: float):
        self.kind = kind
        self.pair = pair
        self.distance = distance
        super().__init__(
            f"{kind} pair {pair} closer than guard radius (distance {distance:.3e} m)"
        )

    def record(self) -> dict[str, Any]:
        return {**super().record(), "kind": self.kind, "pair": list(self.pair)}


class RankDeficient(HerdError):
    cause = "rank-deficient"

    def __init__(self, rank: int, required: int):
        self.rank = rank
        self.required = required
        super().__init__(f"input Jacobian has rank {rank}, need {required}")


class LowExcitation(HerdError):
    cause = "low-excitation"

    def __init__(self, evader: int, norm: float):
        self.evader = evader
        self.norm = norm
        super().__init__(f"evader {evader} field norm {norm:.3e} below excitation floor")


class NoConvergence(HerdError):
    cause = "no-convergence"

    def __init__(self, iterations: int, residual: float):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"root search stopped after {iterations} iterations (residual {residual:.3e})"
        )


class GridMismatch(HerdError):
    cause = "grid-mismatch"


class DegenerateAngle(HerdError):
    cause = "degenerate-angle"


class DegenerateBarrier(HerdError):
    cause = "degenerate-barrier"


class ConfigError(HerdError):
    cause = "config-error"


class TraceSchemaError(HerdError):
    cause = "trace-schema"


class UnknownKind(HerdError):
    cause = "unknown-kind"


class EmptyData(HerdError):
    cause = "empty-data"
