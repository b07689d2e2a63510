"""Scalar fields on the plane with exact derivatives.

Every scalar quantity in the package (conformal factor, tensor components,
cutoff profiles) is carried as a sympy expression in the coordinates (x, y).
Evaluators for the value, gradient and Hessian are lambdified once and cached,
and always return arrays broadcast to the input shape.
"""

from __future__ import annotations

import numbers

import numpy as np
import sympy as sp

X, Y = sp.symbols("x y", real=True)


def _broadcast(fn):
    """Wrap a lambdified callable so constants broadcast like arrays."""

    def wrapped(xs, ys):
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        out = fn(xs, ys)
        return np.broadcast_to(np.asarray(out, dtype=float), np.broadcast_shapes(xs.shape, ys.shape)).copy()

    return wrapped


class ScalarField:
    """A scalar function of (x, y) backed by a sympy expression."""

    def __init__(self, expr):
        expr = sp.sympify(expr, locals={"x": X, "y": Y})
        # parsed strings can carry assumption-free x/y symbols that print the
        # same but differ from X/Y, making diff treat them as constants
        for s in list(expr.free_symbols):
            if s is not X and s.name == "x":
                expr = expr.subs(s, X)
            elif s is not Y and s.name == "y":
                expr = expr.subs(s, Y)
        self.expr = expr
        self._value = None
        self._grad = None
        self._hess = None

    def _compile_value(self):
        if self._value is None:
            self._value = _broadcast(sp.lambdify((X, Y), self.expr, modules="numpy"))
        return self._value

    def _compile_grad(self):
        if self._grad is None:
            gx = sp.diff(self.expr, X)
            gy = sp.diff(self.expr, Y)
            self._grad = (
                _broadcast(sp.lambdify((X, Y), gx, modules="numpy")),
                _broadcast(sp.lambdify((X, Y), gy, modules="numpy")),
            )
        return self._grad

    def _compile_hess(self):
        if self._hess is None:
            hxx = sp.diff(self.expr, X, 2)
            hxy = sp.diff(self.expr, X, Y)
            hyy = sp.diff(self.expr, Y, 2)
            self._hess = tuple(
                _broadcast(sp.lambdify((X, Y), e, modules="numpy")) for e in (hxx, hxy, hyy)
            )
        return self._hess

    def value(self, xs, ys):
        return self._compile_value()(xs, ys)

    def grad(self, xs, ys):
        """Return (f_x, f_y) arrays."""
        gx, gy = self._compile_grad()
        return gx(xs, ys), gy(xs, ys)

    def hess(self, xs, ys):
        """Return (f_xx, f_xy, f_yy) arrays."""
        hxx, hxy, hyy = self._compile_hess()
        return hxx(xs, ys), hxy(xs, ys), hyy(xs, ys)

    def diff(self, var):
        sym = X if var in (0, "x", X) else Y
        return ScalarField(sp.diff(self.expr, sym))

    def __add__(self, other):
        return ScalarField(self.expr + _expr_of(other))

    def __radd__(self, other):
        return ScalarField(_expr_of(other) + self.expr)

    def __sub__(self, other):
        return ScalarField(self.expr - _expr_of(other))

    def __mul__(self, other):
        return ScalarField(self.expr * _expr_of(other))

    def __rmul__(self, other):
        return ScalarField(_expr_of(other) * self.expr)

    def __neg__(self):
        return ScalarField(-self.expr)

    def __repr__(self):
        return f"ScalarField({self.expr})"


def _expr_of(obj):
    if isinstance(obj, ScalarField):
        return obj.expr
    return sp.sympify(obj)


ZERO = ScalarField(0)


def smoothstep_quintic(s):
    """C^2 quintic ramp as a sympy expression of the sympy argument ``s``.

    Equal to 0 for s <= 0 and 1 for s >= 1; the first two derivatives vanish
    at both ends of the transition. The clamp must be an explicit Piecewise:
    differentiation through Min/Max miscompiles, dropping product-rule terms
    of expressions built on top of the ramp.
    """
    p = 6 * s**5 - 15 * s**4 + 10 * s**3
    return sp.Piecewise((0, s <= 0), (1, s >= 1), (p, True))


def parse_expression(spec):
    """Build a ScalarField from the JSON expression vocabulary.

    Accepted forms::

        1.5                                       constant
        {"poly": [{"coef": c, "px": i, "py": j}, ...]}
        {"gaussian": {"amp": a, "center": [cx, cy], "width": w}}
        {"sin": {"amp": a, "kx": kx, "ky": ky, "phase": p}}
        {"cos": {...}}                            same keys as "sin"
        {"sum": [spec, spec, ...]}
        {"product": [spec, spec, ...]}
    """
    if isinstance(spec, numbers.Number):
        return ScalarField(sp.Float(spec))
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ValueError(f"malformed expression spec: {spec!r}")
    kind, body = next(iter(spec.items()))
    if kind == "poly":
        expr = sp.Integer(0)
        for term in body:
            extra = set(term) - {"coef", "px", "py"}
            if extra:
                raise ValueError(f"unknown keys in poly term: {sorted(extra)}")
            expr += sp.Float(term["coef"]) * X ** int(term.get("px", 0)) * Y ** int(term.get("py", 0))
        return ScalarField(expr)
    if kind == "gaussian":
        extra = set(body) - {"amp", "center", "width"}
        if extra:
            raise ValueError(f"unknown keys in gaussian: {sorted(extra)}")
        cx, cy = body.get("center", (0.0, 0.0))
        w = sp.Float(body["width"])
        amp = sp.Float(body.get("amp", 1.0))
        expr = amp * sp.exp(-(((X - cx) ** 2 + (Y - cy) ** 2) / w**2))
        return ScalarField(expr)
    if kind in ("sin", "cos"):
        extra = set(body) - {"amp", "kx", "ky", "phase"}
        if extra:
            raise ValueError(f"unknown keys in {kind}: {sorted(extra)}")
        arg = sp.Float(body.get("kx", 0.0)) * X + sp.Float(body.get("ky", 0.0)) * Y + sp.Float(body.get("phase", 0.0))
        fn = sp.sin if kind == "sin" else sp.cos
        return ScalarField(sp.Float(body.get("amp", 1.0)) * fn(arg))
    if kind == "sum":
        out = sp.Integer(0)
        for sub in body:
            out += parse_expression(sub).expr
        return ScalarField(out)
    if kind == "product":
        out = sp.Integer(1)
        for sub in body:
            out *= parse_expression(sub).expr
        return ScalarField(out)
    raise ValueError(f"unknown expression kind: {kind!r}")
