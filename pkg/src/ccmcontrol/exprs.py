"""Whitelisted arithmetic expressions for inline systems and metrics.

Config files may define dynamics and dual-metric entries as text like
`tanh(x2) + th1*x1^2`. The grammar is deliberately small: +, -, *, /,
^ or ** for powers, unary minus, numeric literals, state variables x1..xn,
parameters th1..thp, and the functions tanh, sin, cos, exp, sqrt, log, abs.
Everything else is rejected at parse time.
"""

from __future__ import annotations

import ast

import numpy as np

from .errors import ConfigError

_FUNCS = {
    "tanh": np.tanh,
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "sqrt": np.sqrt,
    "log": np.log,
    "abs": np.abs,
}

_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Constant,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd, ast.Load,
)


class Expr:
    """One compiled scalar expression over (x, theta)."""

    def __init__(self, text: str, n_states: int, n_params: int):
        self.text = text.strip()
        if not self.text:
            raise ConfigError("empty expression")
        source = self.text.replace("^", "**")
        try:
            tree = ast.parse(source, mode="eval")
        except SyntaxError as e:
            raise ConfigError(f"cannot parse expression '{self.text}': {e.msg}") from None
        allowed_vars = ({f"x{i+1}" for i in range(n_states)}
                        | {f"th{j+1}" for j in range(n_params)})
        for node in ast.walk(tree):
            if not isinstance(node, _ALLOWED_NODES):
                raise ConfigError(
                    f"expression '{self.text}' uses disallowed syntax "
                    f"({type(node).__name__})")
            if isinstance(node, ast.Call):
                if (not isinstance(node.func, ast.Name)
                        or node.func.id not in _FUNCS
                        or len(node.args) != 1 or node.keywords):
                    raise ConfigError(
                        f"expression '{self.text}' calls an unknown function")
            if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
                raise ConfigError(f"expression '{self.text}' has a non-numeric literal")
            if isinstance(node, ast.Name):
                if node.id not in allowed_vars and node.id not in _FUNCS:
                    raise ConfigError(
                        f"expression '{self.text}' references unknown name "
                        f"'{node.id}' (have x1..x{n_states}, th1..th{n_params})")
        self.n_states = n_states
        self.n_params = n_params
        self._code = compile(tree, "<config-expr>", "eval")

    def __call__(self, x, theta=()) -> float:
        env = dict(_FUNCS)
        for i in range(self.n_states):
            env[f"x{i+1}"] = x[i]
        for j in range(self.n_params):
            env[f"th{j+1}"] = theta[j]
        try:
            return float(eval(self._code, {"__builtins__": {}}, env))
        except TypeError:
            raise ConfigError(
                f"expression '{self.text}' does not evaluate to a number") from None

    def __repr__(self):
        return f"Expr({self.text!r})"


class ExprMatrix:
    """Rectangular array of compiled expressions, evaluated to a float array."""

    def __init__(self, rows, n_states: int, n_params: int):
        self.exprs = [[Expr(cell, n_states, n_params) for cell in row] for row in rows]
        self.shape = (len(self.exprs), len(self.exprs[0]) if self.exprs else 0)
        for row in self.exprs:
            if len(row) != self.shape[1]:
                raise ConfigError("expression matrix rows have unequal lengths")

    def __call__(self, x, theta=()) -> np.ndarray:
        return np.array([[e(x, theta) for e in row] for row in self.exprs])

    @property
    def texts(self):
        return [[e.text for e in row] for row in self.exprs]
