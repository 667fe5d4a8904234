"""Small arithmetic expression language for source/target/obstacle data.

Supports numbers, ``+ - * / ^`` (``**`` also accepted), unary minus,
parentheses, ``sin cos exp``, the constant ``pi`` and the variables named by
the caller (``x``, ``y``, or ``h`` for penalty schedules).  Evaluation is
vectorized with numpy.
"""

from __future__ import annotations

import ast
import operator

import numpy as np

_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp}
_CONSTS = {"pi": np.pi}
_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNOPS = {ast.USub: operator.neg, ast.UAdd: operator.pos}


class ExpressionError(ValueError):
    pass


class Expression:
    def __init__(self, text: str, variables=("x", "y")):
        self.text = text
        self.variables = tuple(variables)
        try:
            tree = ast.parse(text.replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
        self._check(tree.body)
        self._tree = tree.body
        self.names = {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}

    def _check(self, node):
        if isinstance(node, ast.Constant):
            if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
                raise ExpressionError(f"unsupported literal {node.value!r} in {self.text!r}")
        elif isinstance(node, ast.Name):
            if node.id not in self.variables and node.id not in _CONSTS:
                raise ExpressionError(f"unknown name {node.id!r} in {self.text!r}")
        elif isinstance(node, ast.BinOp):
            if type(node.op) not in _BINOPS:
                raise ExpressionError(f"unsupported operator in {self.text!r}")
            self._check(node.left)
            self._check(node.right)
        elif isinstance(node, ast.UnaryOp):
            if type(node.op) not in _UNOPS:
                raise ExpressionError(f"unsupported operator in {self.text!r}")
            self._check(node.operand)
        elif isinstance(node, ast.Call):
            if not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS) or node.keywords \
                    or len(node.args) != 1:
                raise ExpressionError(f"only sin/cos/exp of one argument are allowed in {self.text!r}")
            self._check(node.args[0])
        else:
            raise ExpressionError(f"unsupported syntax in {self.text!r}")

    def _eval(self, node, env):
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return env[node.id] if node.id in env else _CONSTS[node.id]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](self._eval(node.left, env), self._eval(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNOPS[type(node.op)](self._eval(node.operand, env))
        return _FUNCS[node.func.id](self._eval(node.args[0], env))

    def __call__(self, *args):
        if len(args) > len(self.variables):
            raise TypeError(f"expected at most {len(self.variables)} arguments")
        env = dict(zip(self.variables, args))
        for v in self.variables[len(args):]:
            # a 1D problem has no y; using it is an error rather than a silent 0
            if v in self.names:
                raise ExpressionError(f"{self.text!r} uses {v!r}, which is not defined here")
        with np.errstate(all="ignore"):
            return self._eval(self._tree, env)

    def __repr__(self):
        return f"Expression({self.text!r})"


def evaluate(text: str, **env):
    return Expression(text, tuple(env))(*env.values())
