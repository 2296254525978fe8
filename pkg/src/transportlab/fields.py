"""Problem data fields: force E(x), absorption q(x,v), source S(t,x,v),
initial datum g(x,v), inflow h(t,x,v).

A FieldSpec is an immutable, pure evaluator.  Supported kinds:

* ``zero``       -- identically zero;
* ``expr``       -- a small closed-form expression language (sums, products,
                    quotients, integer powers, sin/cos/exp/sqrt/abs/tanh,
                    variables t, x, y, vx, vy and the constant pi);
* ``vector``     -- pair of scalar expressions, for the force field;
* ``tabulated``  -- multilinear interpolation of gridded CSV data;
* ``callable``   -- arbitrary python function (internal/testing use);
* ``scaled``     -- eta * base, the parametric-family scaling rule;
* ``product``    -- pointwise product of two specs.

Named builtins cover the stock benchmark fields of the stability
experiments ("demo-E", "demo-profile", "demo-q(eta)", "demo-S(eta)") plus
the default initial bump "default-g".
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import RegularGridInterpolator

__all__ = [
    "FieldError",
    "FieldSpec",
    "CoefficientFamily",
    "AdmissibilityReport",
    "parse_expression",
    "field_zero",
    "field_expr",
    "field_vector",
    "field_callable",
    "field_tabulated",
    "load_tabulated_csv",
    "scale_spec",
    "product_spec",
    "builtin_field",
    "demo_force_field",
    "demo_profile",
    "default_initial_bump",
    "coefficient_family",
    "family_member",
    "eval_field",
    "check_admissibility",
]

ARITY_VARS = {
    "x": ("x", "y"),
    "xv": ("x", "y", "vx", "vy"),
    "txv": ("t", "x", "y", "vx", "vy"),
    "vector-x": ("x", "y"),
}

_FUNCS = {
    "sin": np.sin, "cos": np.cos, "exp": np.exp,
    "sqrt": np.sqrt, "abs": np.abs, "tanh": np.tanh,
}


class FieldError(ValueError):
    """Raised for malformed field definitions or evaluation misuse."""


# ---------------------------------------------------------------------------
# expression language
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\s*(?:(\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?"
                       r"|\d+(?:[eE][+-]?\d+)?)|([A-Za-z_][A-Za-z_0-9]*)|(.))")


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            break
        num, name, sym = m.groups()
        if num is not None:
            tokens.append(("num", float(num)))
        elif name is not None:
            tokens.append(("name", name))
        elif sym.strip():
            if sym not in "+-*/^()":
                raise FieldError(f"unexpected character {sym!r} in expression")
            tokens.append(("op", sym))
        pos = m.end()
    tokens.append(("end", None))
    return tokens


class _Parser:
    def __init__(self, tokens, allowed_vars):
        self.tokens = tokens
        self.pos = 0
        self.allowed = allowed_vars

    def peek(self):
        return self.tokens[self.pos]

    def take(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect_op(self, sym):
        kind, val = self.take()
        if kind != "op" or val != sym:
            raise FieldError(f"expected {sym!r} in expression")

    def parse(self):
        node = self.expr()
        if self.peek()[0] != "end":
            raise FieldError("trailing tokens in expression")
        return node

    def expr(self):
        node = self.term()
        while self.peek() == ("op", "+") or self.peek() == ("op", "-"):
            _, op = self.take()
            rhs = self.term()
            node = ("add" if op == "+" else "sub", node, rhs)
        return node

    def term(self):
        node = self.unary()
        while self.peek() == ("op", "*") or self.peek() == ("op", "/"):
            _, op = self.take()
            rhs = self.unary()
            node = ("mul" if op == "*" else "div", node, rhs)
        return node

    def unary(self):
        if self.peek() == ("op", "-"):
            self.take()
            return ("neg", self.unary())
        if self.peek() == ("op", "+"):
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek() == ("op", "^"):
            self.take()
            kind, val = self.take()
            neg = False
            if (kind, val) == ("op", "-"):
                neg = True
                kind, val = self.take()
            if kind != "num" or float(val) != int(val):
                raise FieldError("exponent must be an integer literal")
            exp = -int(val) if neg else int(val)
            return ("pow", base, exp)
        return base

    def atom(self):
        kind, val = self.take()
        if kind == "num":
            return ("num", val)
        if kind == "name":
            if val == "pi":
                return ("num", math.pi)
            if val in _FUNCS:
                self.expect_op("(")
                arg = self.expr()
                self.expect_op(")")
                return ("call", val, arg)
            if val in self.allowed:
                return ("var", val)
            raise FieldError(
                f"unknown name {val!r} (allowed variables: {', '.join(self.allowed)})")
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        raise FieldError("malformed expression")


def parse_expression(text: str, arity: str):
    """Parse an expression into an AST, restricted to the arity's variables."""
    if arity not in ARITY_VARS:
        raise FieldError(f"unknown arity {arity!r}")
    if arity == "vector-x":
        raise FieldError("vector expressions must be built with field_vector")
    return _Parser(_tokenize(text), ARITY_VARS[arity]).parse()


def _eval_node(node, env):
    op = node[0]
    if op == "num":
        return node[1]
    if op == "var":
        return env[node[1]]
    if op == "add":
        return _eval_node(node[1], env) + _eval_node(node[2], env)
    if op == "sub":
        return _eval_node(node[1], env) - _eval_node(node[2], env)
    if op == "mul":
        return _eval_node(node[1], env) * _eval_node(node[2], env)
    if op == "div":
        return _eval_node(node[1], env) / _eval_node(node[2], env)
    if op == "neg":
        return -_eval_node(node[1], env)
    if op == "pow":
        return _eval_node(node[1], env) ** node[2]
    if op == "call":
        return _FUNCS[node[1]](_eval_node(node[2], env))
    raise FieldError(f"corrupt expression node {op!r}")


# ---------------------------------------------------------------------------
# FieldSpec
# ---------------------------------------------------------------------------

class FieldSpec:
    """Immutable evaluator for one problem-data field.

    Evaluation is pure and vectorized: coordinate arguments broadcast like
    numpy arrays.  ``clamp=True`` clips coordinates of tabulated data into
    the table's bounding box (constant extension, used by trajectory
    integration when a step overshoots the domain).
    """

    def __init__(self, kind: str, arity: str, payload, label: str):
        if arity not in ARITY_VARS:
            raise FieldError(f"unknown arity {arity!r}")
        self.kind = kind
        self.arity = arity
        self.payload = payload
        self.label = label

    def __repr__(self):
        return f"FieldSpec({self.label!r}, arity={self.arity!r})"

    def _require(self, coords):
        missing = [v for v in ARITY_VARS[self.arity] if coords.get(v) is None]
        if missing:
            raise FieldError(
                f"field {self.label!r} of arity {self.arity!r} needs "
                f"coordinates {missing}")

    def eval(self, t=None, x=None, y=None, vx=None, vy=None, clamp=False):
        coords = {"t": t, "x": x, "y": y, "vx": vx, "vy": vy}
        self._require(coords)
        if self.kind == "zero":
            shape = np.broadcast(*(np.asarray(coords[v])
                                   for v in ARITY_VARS[self.arity])).shape
            out = np.zeros(shape) if shape else 0.0
            return (out, out) if self.arity == "vector-x" else out
        if self.kind == "expr":
            env = {v: np.asarray(coords[v], dtype=float)
                   for v in ARITY_VARS[self.arity]}
            return _eval_node(self.payload, env)
        if self.kind == "vector":
            env = {v: np.asarray(coords[v], dtype=float) for v in ("x", "y")}
            return (_eval_node(self.payload[0], env),
                    _eval_node(self.payload[1], env))
        if self.kind == "callable":
            kwargs = {v: coords[v] for v in ARITY_VARS[self.arity]}
            return self.payload(**kwargs)
        if self.kind == "scaled":
            base, factor = self.payload
            out = base.eval(t=t, x=x, y=y, vx=vx, vy=vy, clamp=clamp)
            if isinstance(out, tuple):
                return tuple(factor * c for c in out)
            return factor * out
        if self.kind == "product":
            a, b = self.payload
            return (a.eval(t=t, x=x, y=y, vx=vx, vy=vy, clamp=clamp)
                    * b.eval(t=t, x=x, y=y, vx=vx, vy=vy, clamp=clamp))
        if self.kind == "tabulated":
            interp, bounds = self.payload
            pts = [np.asarray(coords[v], dtype=float)
                   for v in ARITY_VARS[self.arity]]
            shape = np.broadcast(*pts).shape
            pts = [np.broadcast_to(p, shape).ravel() for p in pts]
            stacked = np.stack(pts, axis=-1)
            if clamp:
                for k, (lo, hi) in enumerate(bounds):
                    stacked[:, k] = np.clip(stacked[:, k], lo, hi)
            else:
                for k, (lo, hi) in enumerate(bounds):
                    if np.any(stacked[:, k] < lo - 1e-12) or \
                       np.any(stacked[:, k] > hi + 1e-12):
                        raise FieldError(
                            f"point outside tabulated domain of {self.label!r}")
                    stacked[:, k] = np.clip(stacked[:, k], lo, hi)
            vals = interp(stacked)
            return vals.reshape(shape) if shape else float(vals[0])
        raise FieldError(f"unknown field kind {self.kind!r}")

    def is_zero(self) -> bool:
        if self.kind == "zero":
            return True
        if self.kind == "scaled":
            base, factor = self.payload
            return factor == 0.0 or base.is_zero()
        if self.kind == "product":
            return any(s.is_zero() for s in self.payload)
        return False

    def time_dependent(self) -> bool:
        """Whether evaluation can depend on t (conservatively by arity)."""
        if self.arity != "txv":
            return False
        if self.kind == "expr":
            return _uses_var(self.payload, "t")
        if self.kind == "scaled":
            return self.payload[0].time_dependent()
        if self.kind == "product":
            return any(s.time_dependent() for s in self.payload)
        return not self.is_zero()


def _uses_var(node, name) -> bool:
    op = node[0]
    if op == "var":
        return node[1] == name
    if op in ("add", "sub", "mul", "div"):
        return _uses_var(node[1], name) or _uses_var(node[2], name)
    if op in ("neg",):
        return _uses_var(node[1], name)
    if op == "pow":
        return _uses_var(node[1], name)
    if op == "call":
        return _uses_var(node[2], name)
    return False


# -- constructors -----------------------------------------------------------

def field_zero(arity: str = "xv") -> FieldSpec:
    return FieldSpec("zero", arity, None, "zero")


def field_expr(text: str, arity: str, label: str | None = None) -> FieldSpec:
    node = parse_expression(text, arity)
    return FieldSpec("expr", arity, node, label or text.strip())


def field_vector(e1: str, e2: str, label: str = "vector") -> FieldSpec:
    n1 = parse_expression(e1, "x")
    n2 = parse_expression(e2, "x")
    return FieldSpec("vector", "vector-x", (n1, n2), label)


def field_callable(fn, arity: str, label: str = "callable") -> FieldSpec:
    return FieldSpec("callable", arity, fn, label)


def field_tabulated(points, values, arity: str, label: str = "tabulated") -> FieldSpec:
    interp = RegularGridInterpolator(points, values, method="linear",
                                     bounds_error=False, fill_value=None)
    bounds = [(float(p[0]), float(p[-1])) for p in points]
    return FieldSpec("tabulated", arity, (interp, bounds), label)


def load_tabulated_csv(path, arity: str) -> FieldSpec:
    """Load gridded samples (columns x,y[,vx,vy],value) into a field.

    Rows must fill a complete tensor-product lattice; order is free.
    """
    if arity not in ("x", "xv"):
        raise FieldError("tabulated fields support arity 'x' or 'xv'")
    names = ("x", "y") if arity == "x" else ("x", "y", "vx", "vy")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        header = [h.strip().lower() for h in header]
        expected = list(names) + ["value"]
        if header != expected:
            raise FieldError(
                f"tabulated CSV must have columns {expected}, got {header}")
        for row in reader:
            if row:
                rows.append([float(c) for c in row])
    if not rows:
        raise FieldError("tabulated CSV contains no rows")
    data = np.asarray(rows)
    axes = [np.unique(data[:, k]) for k in range(len(names))]
    shape = tuple(len(a) for a in axes)
    if int(np.prod(shape)) != data.shape[0]:
        raise FieldError("tabulated CSV rows do not fill a complete lattice")
    values = np.full(shape, np.nan)
    idx = tuple(np.searchsorted(axes[k], data[:, k]) for k in range(len(names)))
    values[idx] = data[:, -1]
    if np.any(np.isnan(values)):
        raise FieldError("tabulated CSV has duplicate or missing lattice points")
    return field_tabulated(axes, values, arity, label=f"csv:{path}")


def scale_spec(base: FieldSpec, factor: float, label: str | None = None) -> FieldSpec:
    return FieldSpec("scaled", base.arity, (base, float(factor)),
                     label or f"{factor}*{base.label}")


def product_spec(a: FieldSpec, b: FieldSpec, label: str | None = None) -> FieldSpec:
    if "vector-x" in (a.arity, b.arity):
        raise FieldError("cannot form pointwise products with vector fields")
    order = {"x": 0, "xv": 1, "txv": 2}
    arity = a.arity if order[a.arity] >= order[b.arity] else b.arity
    return FieldSpec("product", arity, (a, b),
                     label or f"({a.label})*({b.label})")


# -- stock benchmark fields ---------------------------------------------------

_PROFILE_TEXT = "0.3*sin(2*pi*x)*cos(4*pi*y) + 0.4"


def demo_force_field() -> FieldSpec:
    """Rotational benchmark force field used by the stability experiments."""
    return field_vector("0.3 + 0.1*cos(2*pi*x)*sin(4*pi*y)",
                        "0.2 + 0.15*sin(2*pi*x)*cos(4*pi*y)",
                        label="demo-E")


def demo_profile(arity: str = "xv") -> FieldSpec:
    """Base absorption/source profile of the eta-scaling families."""
    return field_expr(_PROFILE_TEXT, arity, label="demo-profile")


def default_initial_bump() -> FieldSpec:
    """Positive interior initial datum: Maxwellian in v times a spatial bump.

    Vanishes on the spatial boundary, so it is compatible with zero inflow.
    """
    return field_expr("exp(-(vx*vx + vy*vy)) * sin(pi*x)*sin(pi*y)",
                      "xv", label="default-g")


@dataclass(frozen=True)
class CoefficientFamily:
    """A one-parameter family eta -> eta * profile of coefficients."""

    base: FieldSpec
    role: str  # "absorption" | "source"

    def __post_init__(self):
        if self.role not in ("absorption", "source"):
            raise FieldError(f"unknown family role {self.role!r}")


def coefficient_family(role: str, base: FieldSpec | None = None) -> CoefficientFamily:
    if base is None:
        base = demo_profile("xv" if role == "absorption" else "txv")
    return CoefficientFamily(base=base, role=role)


def family_member(family: CoefficientFamily, eta) -> FieldSpec:
    """The family member eta * profile; eta must be an integer >= 1."""
    if int(eta) != eta or eta < 1:
        raise FieldError(f"family index eta={eta} must be an integer >= 1")
    return scale_spec(family.base, float(eta),
                      label=f"{family.base.label}[eta={int(eta)}]")


_BUILTIN_PATTERNS = [
    (re.compile(r"^zero$"), lambda m, role: field_zero(_role_arity(role))),
    (re.compile(r"^demo-E$"), lambda m, role: demo_force_field()),
    (re.compile(r"^demo-profile$"), lambda m, role: demo_profile(_role_arity(role))),
    (re.compile(r"^demo-q\((\d+)\)$"),
     lambda m, role: family_member(coefficient_family("absorption"), int(m.group(1)))),
    (re.compile(r"^demo-S\((\d+)\)$"),
     lambda m, role: family_member(coefficient_family("source"), int(m.group(1)))),
    (re.compile(r"^default-g$"), lambda m, role: default_initial_bump()),
]


def _role_arity(role: str) -> str:
    return {"E": "vector-x", "q": "xv", "S": "txv", "g": "xv", "h": "txv"}[role]


def builtin_field(name: str, role: str) -> FieldSpec:
    """Resolve a named builtin for the given data role (E, q, S, g, h)."""
    for pattern, make in _BUILTIN_PATTERNS:
        m = pattern.match(name.strip())
        if m:
            spec = make(m, role)
            want = _role_arity(role)
            if spec.arity != want:
                raise FieldError(
                    f"builtin {name!r} has arity {spec.arity}, role {role} "
                    f"needs {want}")
            return spec
    raise FieldError(f"unknown builtin field {name!r}")


# ---------------------------------------------------------------------------
# the spec-level operations
# ---------------------------------------------------------------------------

def eval_field(spec: FieldSpec, point):
    """Evaluate a field at one point given as a tuple matching its arity:

    arity "x"/"vector-x": (x, y); "xv": (x, y, vx, vy);
    "txv": (t, x, y, vx, vy).
    """
    point = tuple(float(c) for c in point)
    n_expected = {"x": 2, "vector-x": 2, "xv": 4, "txv": 5}[spec.arity]
    if len(point) != n_expected:
        raise FieldError(
            f"point of length {len(point)} does not match arity {spec.arity!r}"
            f" (expected {n_expected})")
    if spec.arity in ("x", "vector-x"):
        out = spec.eval(x=point[0], y=point[1])
    elif spec.arity == "xv":
        out = spec.eval(x=point[0], y=point[1], vx=point[2], vy=point[3])
    else:
        out = spec.eval(t=point[0], x=point[1], y=point[2],
                        vx=point[3], vy=point[4])
    if isinstance(out, tuple):
        return tuple(float(c) for c in out)
    return float(out)


@dataclass(frozen=True)
class AdmissibilityReport:
    """Sampled checks of the data assumptions for regular solutions.

    ``max_n_dot_e``: worst boundary-normal component of the force;
    ``c1_bound``: sampled C1 norm of the force over the spatial box;
    ``compatibility_residual``: worst |g - h(0)| over incoming facets.
    Violations are facts to report, not errors: runs proceed regardless.
    """

    max_n_dot_e: float
    c1_bound: float
    compatibility_residual: float
    tangency_ok: bool
    compatibility_ok: bool
    tangency_tol: float
    compatibility_tol: float


def check_admissibility(E: FieldSpec, h: FieldSpec, g: FieldSpec, grid,
                        tangency_tol: float = 1e-8,
                        compatibility_tol: float = 1e-8,
                        refine: int = 4) -> AdmissibilityReport:
    """Sample the force-tangency, force-smoothness and data-compatibility
    conditions on the grid (boundary faces at ``refine``-fold density)."""
    from .grid import classify_boundary  # local import avoids a cycle

    if E.arity != "vector-x":
        raise FieldError("force field must have arity 'vector-x'")

    def refined(lo, hi, n):
        m = n * refine
        return lo + (np.arange(m) + 0.5) * (hi - lo) / m

    ys = refined(grid.y_lo, grid.y_hi, grid.ny)
    xs = refined(grid.x_lo, grid.x_hi, grid.nx)
    worst = 0.0
    for xedge in (grid.x_lo, grid.x_hi):
        e1, _ = E.eval(x=np.full_like(ys, xedge), y=ys)
        worst = max(worst, float(np.max(np.abs(e1))))
    for yedge in (grid.y_lo, grid.y_hi):
        _, e2 = E.eval(x=xs, y=np.full_like(xs, yedge))
        worst = max(worst, float(np.max(np.abs(e2))))

    X, Y = np.meshgrid(xs, ys, indexing="ij")
    e1, e2 = E.eval(x=X, y=Y)
    e1 = np.broadcast_to(e1, X.shape)
    e2 = np.broadcast_to(e2, X.shape)
    hx = xs[1] - xs[0]
    hy = ys[1] - ys[0]
    sup_e = max(float(np.max(np.abs(e1))), float(np.max(np.abs(e2))))
    d11 = np.abs(e1[2:, :] - e1[:-2, :]) / (2 * hx)
    d12 = np.abs(e1[:, 2:] - e1[:, :-2]) / (2 * hy)
    d21 = np.abs(e2[2:, :] - e2[:-2, :]) / (2 * hx)
    d22 = np.abs(e2[:, 2:] - e2[:, :-2]) / (2 * hy)
    sup_de = max(float(np.max(d)) if d.size else 0.0
                 for d in (d11, d12, d21, d22))
    c1 = max(sup_e, sup_de)

    incoming = classify_boundary(grid).incoming
    if len(incoming):
        gv = g.eval(x=incoming.fx, y=incoming.fy,
                    vx=incoming.vx, vy=incoming.vy)
        hv = h.eval(t=np.zeros(len(incoming)), x=incoming.fx, y=incoming.fy,
                    vx=incoming.vx, vy=incoming.vy)
        compat = float(np.max(np.abs(np.asarray(gv) - np.asarray(hv))))
    else:
        compat = 0.0

    return AdmissibilityReport(
        max_n_dot_e=worst,
        c1_bound=c1,
        compatibility_residual=compat,
        tangency_ok=worst <= tangency_tol,
        compatibility_ok=compat <= compatibility_tol,
        tangency_tol=tangency_tol,
        compatibility_tol=compatibility_tol,
    )
