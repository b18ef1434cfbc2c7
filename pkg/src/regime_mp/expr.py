"""Small arithmetic expression language for user-defined scalar models.

Grammar: numbers, + - * / ^ (power), unary minus, parentheses, the functions
exp, log, sin, cos, and names. Names resolve to evaluation variables
(t, x, y, z, u, kappa_1..kappa_D, lambda_1..lambda_D) or to constants; a
constant given as a list is indexed by the current regime.
"""
from __future__ import annotations

import ast

import numpy as np

_FUNCS = {"exp": np.exp, "log": np.log, "sin": np.sin, "cos": np.cos}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}


class ExpressionError(ValueError):
    pass


class Expression:
    """Compiled expression; call with a mapping of variable arrays."""

    def __init__(self, text: str, constants: dict | None = None):
        self.text = str(text)
        self.constants = {k: np.asarray(v, dtype=float) for k, v in (constants or {}).items()}
        try:
            # '^' is power; rewrite before parsing so it gets power precedence
            tree = ast.parse(self.text.strip().replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse expression {self.text!r}: {exc.msg}") from None
        self._check(tree.body)
        self.tree = tree.body
        self.names = sorted({n.id for n in ast.walk(tree) if isinstance(n, ast.Name)} - set(_FUNCS))

    def _check(self, node):
        if isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise ExpressionError(f"operator {type(node.op).__name__} not allowed in {self.text!r}")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if not isinstance(node.op, (ast.USub, ast.UAdd)):
                raise ExpressionError(f"unary operator not allowed in {self.text!r}")
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS or len(node.args) != 1 or node.keywords:
                raise ExpressionError(f"only exp, log, sin, cos of one argument are allowed in {self.text!r}")
            self._check(node.args[0])
        elif isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise ExpressionError(f"non-numeric literal in {self.text!r}")
        elif isinstance(node, ast.Name):
            pass
        else:
            raise ExpressionError(f"unsupported syntax {type(node).__name__} in {self.text!r}")

    def check_names(self, allowed):
        unknown = [n for n in self.names if n not in allowed and n not in self.constants]
        if unknown:
            raise ExpressionError(f"unknown names {unknown} in {self.text!r}")

    def __call__(self, env: dict, regime: np.ndarray):
        return self._eval(self.tree, env, regime)

    def _eval(self, node, env, regime):
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env, regime), self._eval(node.right, env, regime))
        if isinstance(node, ast.UnaryOp):
            v = self._eval(node.operand, env, regime)
            return -v if isinstance(node.op, ast.USub) else v
        if isinstance(node, ast.Call):
            return _FUNCS[node.func.id](self._eval(node.args[0], env, regime))
        if isinstance(node, ast.Constant):
            return float(node.value)
        name = node.id
        if name in env:
            return env[name]
        c = self.constants[name]
        return c[np.asarray(regime)] if c.ndim == 1 else c
