"""Matching bookkeeping at the implemented orders and the composite far-field approximation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fem
from .cell import TransmissionConstants
from .fem import Field
from .geometry import CutoffProfile, DomainSpec, chi
from .macro import MacroField, TraceSplines

# order selector N0 -> (delta exponent, term) pairs included
LEVELS = {
    "2/3": (("u00", 0.0),),
    "1": (("u00", 0.0), ("u01", 1.0)),
    "4/3": (("u00", 0.0), ("u01", 1.0), ("u20", 4.0 / 3.0)),
    # u_{1,1} vanishes, so the 5/3 level adds nothing to the 4/3 one
    "5/3": (("u00", 0.0), ("u01", 1.0), ("u20", 4.0 / 3.0)),
}


@dataclass(frozen=True)
class MatchedConstants:
    l1_u00_plus: float
    l1_u00_minus: float
    L1_U10_plus: float
    L1_U10_minus: float
    Lm1_S1_plus: float
    Lm1_S1_minus: float
    lm1_u20_plus: float
    lm1_u20_minus: float
    u1q_zero: bool = True
    U0q_zero: bool = True

    def record(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def match_low_order(ells: dict, Lm1: dict) -> MatchedConstants:
    """Matched constants from l_1^(+-)(u00) and L_{-1}(S_1^(+-)).

    ells: {"plus": {1: l1, ...}, "minus": {...}} or {"plus": l1, "minus": l1};
    Lm1: {"plus": value, "minus": value}.
    """
    def l1(c):
        v = ells[c]
        return float(v[1] if isinstance(v, dict) else v)

    lp, lm = l1("plus"), l1("minus")
    # the near-field block of order 1 takes the far-field r^{2/3} coefficient as is
    Up, Um = lp, lm
    out = MatchedConstants(lp, lm, Up, Um, float(Lm1["plus"]), float(Lm1["minus"]),
                           Up * float(Lm1["plus"]), Um * float(Lm1["minus"]))
    assert out.L1_U10_plus == out.l1_u00_plus and out.L1_U10_minus == out.l1_u00_minus
    assert out.lm1_u20_plus == out.L1_U10_plus * out.Lm1_S1_plus
    assert out.lm1_u20_minus == out.L1_U10_minus * out.Lm1_S1_minus
    return out


def _trace_interp(mf: MacroField):
    x1, avg = mf.average_trace()
    order = np.argsort(x1)
    x1, avg = x1[order], avg[order]
    return lambda x: np.interp(x, x1, avg)


@dataclass
class CompositeApprox:
    domain: DomainSpec
    tc: TransmissionConstants
    terms: dict  # label -> MacroField on the split limit mesh
    splines: TraceSplines
    profile: CutoffProfile = CutoffProfile()
    matched: Optional[MatchedConstants] = None
    _traces: dict = field(default_factory=dict, repr=False)

    def trace(self, label: str, x1) -> np.ndarray:
        if label not in self._traces:
            self._traces[label] = _trace_interp(self.terms[label])
        return self._traces[label](x1)

    def profile_fn(self, kind: str, p: int):
        return self.tc.profiles.get((kind, p))

    def corrector(self, label: str, x1, X1, X2) -> np.ndarray:
        """Pi term attached to a macroscopic term, at slow x1 and fast (X1, X2)."""
        w0 = 1.0 - chi(self.profile, X2)
        if label == "u00":
            return self.splines.avg_trace(x1) * w0
        if label == "u01":
            out = self.trace("u01", x1) * w0
            W1n = self.profile_fn("n", 1)
            if W1n is not None:
                out = out + self.splines.avg_dx2(x1) * W1n.evaluate(X1, X2)
            W1t = self.profile_fn("t", 1)
            if W1t is not None and np.any(W1t.field.values != 0.0):
                d1 = self.splines.R(x1, 1) + self.splines.singular(x1, 1, 0)[0]
                out = out + d1 * W1t.evaluate(X1, X2)
            return out
        if label == "u20":
            return self.trace("u20", x1) * w0
        raise KeyError(label)


def build_composite(domain: DomainSpec, tc: TransmissionConstants, u00: MacroField,
                    u01: MacroField, u20: Optional[MacroField] = None,
                    splines: Optional[TraceSplines] = None,
                    profile: CutoffProfile = CutoffProfile(),
                    matched: Optional[MatchedConstants] = None) -> CompositeApprox:
    terms = {"u00": u00, "u01": u01}
    if u20 is not None:
        terms["u20"] = u20
    splines = splines or u01.diagnostics["splines"]
    return CompositeApprox(domain, tc, terms, splines, profile, matched)


def _macro_values(mf: MacroField, x, y, node_map=None):
    if node_map is not None:
        return mf.nodal_total()[node_map]
    return mf.evaluate(x, y)


def evaluate_composite(approx: CompositeApprox, delta: float, x, y, level: str = "4/3",
                       node_map: Optional[np.ndarray] = None) -> np.ndarray:
    """Composite far-field value at points (x, y) of the perforated domain.

    With node_map, (x, y) are the perforated-mesh vertices and node_map[i] is the limit
    mesh node at the same position; macroscopic terms are then read node-wise.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    L = approx.domain.L
    # corner switch: the corrector is dropped within delta of a corner along Gamma,
    # where the singular traces make it meaningless, and ramps in up to 2 delta
    wc = np.where(np.abs(x) < L, chi(approx.profile, (L - np.abs(x)) / delta), 0.0)
    layer = wc > 0.0
    X1 = (x + L) / delta
    X2 = y / delta
    cut = 1.0 - wc * (1.0 - chi(approx.profile, X2))
    out = np.zeros(np.broadcast(x, y).shape)
    for label, e in LEVELS[level]:
        if label not in approx.terms:
            continue
        mac = _macro_values(approx.terms[label], x, y, node_map)
        val = cut * mac
        if layer.any():
            val[layer] += wc[layer] * approx.corrector(label, x[layer], X1[layer], X2[layer])
        out += delta ** e * val
    return out


def omega_alpha(domain: DomainSpec, alpha: float):
    """Predicate of Omega_alpha: the domain without the strip (-L-a, L+a) x (-a, a)."""
    L = domain.L

    def pred(x, y):
        return ~((np.abs(x) < L + alpha) & (np.abs(y) < alpha))
    return pred


def approximation_error(u_direct: Field, approx: CompositeApprox, delta: float, alpha: float,
                        level: str = "4/3", node_map: Optional[np.ndarray] = None) -> dict:
    """L2 and H1 norms of u_direct - composite on Omega_alpha (P1 interpolant of the composite)."""
    if alpha <= 0 or alpha >= min(approx.domain.H_B, approx.domain.H_T):
        raise ValueError("alpha leaves an empty or degenerate region")
    v = u_direct.mesh.vertices
    comp = evaluate_composite(approx, delta, v[:, 0], v[:, 1], level, node_map)
    if np.any(~np.isfinite(comp)):
        raise ValueError("composite undefined at some direct-mesh nodes")
    return fem.subdomain_norms(u_direct.mesh, u_direct.values - comp,
                               omega_alpha(approx.domain, alpha))
