"""Memory cost (in stored floats) of continual-learning regularizers.

Notation: P parameters (p_l per layer), A relu units, d input dimension,
N coreset size, C classes per task.
"""
from dataclasses import dataclass, field
from fractions import Fraction
from types import SimpleNamespace

from .errors import InputError
from .summaries import stored_float_counts

_FORMULAS = {
    "ewc": lambda c: 2 * c.P,
    "osla": lambda c: c.P + sum(p * p for p in c.p_l),
    "vcl": lambda c: 2 * c.P,
    "vcl-coreset": lambda c: 2 * c.P + c.N * c.d,
    "fromp": lambda c: 2 * c.P + c.N * c.d + c.C**2 * c.N**2,
    "s-fsvi": lambda c: 2 * c.P + c.N * c.d + c.C**2 * c.N**2,
    "var-gp": lambda c: 2 * c.P + c.N * c.d + c.C**2 * c.N**2,
    "ntk-coreset": lambda c: 2 * c.P + c.N * c.d,
    "laftr": lambda c: c.P + c.d + c.d**2,
    "laftr-cw": lambda c: c.P + c.C * (c.d + c.d**2),
    "laftr-coreset": lambda c: c.P + c.N * c.d,
    "bgln-s": lambda c: c.P + c.A + c.d + c.d**2,
    "bgln-d": lambda c: c.P + c.A + c.d + c.d**2,
    "bgln-cw": lambda c: c.P + c.C * (c.A + c.d + c.d**2),
    "bgln-var": lambda c: c.P + c.A + 2 * c.d,
    "bgln-s-coreset": lambda c: c.P + c.A + c.N * c.d,
}
METHODS = tuple(_FORMULAS)
DEFAULT_BASELINE = "fromp"
TABLE_GRID = {"C": (10, 20, 50), "d": (1000, 2000, 3000), "N": (200, 250)}


@dataclass(frozen=True)
class CostParams:
    P: int
    p_l: tuple = field(default=())
    A: int = 0
    d: int = 0
    N: int = 0
    C: int = 1

    def __post_init__(self):
        values = (self.P, self.A, self.d, self.N, self.C) + tuple(self.p_l)
        if any(int(v) != v or v < 0 for v in values):
            raise InputError("cost parameters must be nonnegative integers")
        if self.p_l and sum(self.p_l) != self.P:
            raise InputError(f"sum of p_l ({sum(self.p_l)}) does not equal P ({self.P})")
        if self.A and self.A >= self.P:
            raise InputError("activation count must be smaller than P")

    @classmethod
    def from_network(cls, params, **kw):
        return cls(params.n_params, tuple(params.layer_param_counts), params.n_activations, **kw)


def method_cost(method, cp):
    """Number of floats stored per task by `method`."""
    try:
        formula = _FORMULAS[method]
    except KeyError:
        raise InputError(f"unknown method {method!r}; expected one of {METHODS}") from None
    if method == "osla" and not cp.p_l:
        raise InputError("osla cost needs per-layer parameter counts p_l")
    return formula(cp)


def percent_reduction(method, baseline, cp):
    """100 (B - L) / B for method cost L against baseline cost B."""
    b = method_cost(baseline, cp)
    if b == 0:
        raise InputError("baseline cost is zero")
    return 100.0 * (b - method_cost(method, cp)) / b


def _cost_real(method, P, A=0, d=0, N=0, C=1):
    """Formula evaluated at a possibly fractional P (e.g. from a back-solve)."""
    if method == "osla":
        raise InputError("osla is not affine in P")
    if method not in _FORMULAS:
        raise InputError(f"unknown method {method!r}; expected one of {METHODS}")
    return _FORMULAS[method](SimpleNamespace(P=P, p_l=(), A=A, d=d, N=N, C=C))


def back_solve_params(percent, method="laftr", baseline=DEFAULT_BASELINE, A=0, d=0, N=0, C=1):
    """P implied by one observed percent reduction, other cost parameters fixed.

    Every formula except OSLA is affine in P, so the solve is exact.
    """
    def coeffs(m):
        c0 = _cost_real(m, 0, A, d, N, C)
        return _cost_real(m, 1, A, d, N, C) - c0, c0

    ab, bb = coeffs(baseline)
    al, bl = coeffs(method)
    keep = 1 - Fraction(str(percent)) / 100
    denom = keep * ab - al
    if denom == 0:
        raise InputError("reduction does not depend on P for this method pair")
    return float((bl - keep * bb) / denom)


def reduction_table(P, A=0, methods=("laftr", "laftr-coreset"), baseline=DEFAULT_BASELINE,
                    grid=None):
    """Rows {C, N, d, <method>: percent reduction} over the grid."""
    grid = grid or TABLE_GRID
    rows = []
    for c in grid["C"]:
        for n in grid["N"]:
            for d in grid["d"]:
                b = _cost_real(baseline, P, A, d, n, c)
                if b == 0:
                    raise InputError("baseline cost is zero")
                row = {"C": c, "N": n, "d": d}
                for m in methods:
                    row[m] = 100.0 * (b - _cost_real(m, P, A, d, n, c)) / b
                rows.append(row)
    return rows


def summary_method(summary):
    """Table row whose data terms describe what `summary` stores."""
    if summary.kind == "moments":
        if summary.stats is None:
            return "laftr"
        return "bgln-var" if summary.moments.mode == "diagonal" else "bgln-d"
    if summary.kind == "classwise":
        return "bgln-cw"
    if summary.kind == "coreset":
        return "laftr-coreset" if summary.stats is None else "bgln-s-coreset"
    if summary.kind == "fisher":
        return "ewc"
    raise InputError(f"unknown payload kind {summary.kind!r}")


def audit_summary_cost(summary, cp=None):
    """Compare the formula prediction with the floats actually serialized."""
    method = summary_method(summary)
    if cp is None:
        kw = {}
        if summary.moments is not None:
            kw["d"] = summary.moments.dim
        if summary.coreset is not None:
            kw["N"], kw["d"] = summary.coreset.size, summary.coreset.inputs.shape[1]
        if summary.classwise is not None:
            comp = next(iter(summary.classwise.values()))
            kw["C"], kw["d"] = len(summary.classwise), comp.moments.dim
        cp = CostParams.from_network(summary.theta0, **kw)
    if method == "bgln-cw" and summary.classwise:
        if any(c.moments.mode != "full" for c in summary.classwise.values()):
            raise InputError("classwise cost formula assumes full covariances")
    counts = stored_float_counts(summary)
    actual = sum(counts.values())
    predicted = method_cost(method, cp)
    return {"method": method, "predicted": predicted, "actual": actual,
            "match": predicted == actual, "sections": counts}

