"""
Closed-form material expressions.

A small arithmetic grammar over grid coordinates, parsed with `ast` and
evaluated on numpy arrays. Only whitelisted names and functions are
accepted, so config files cannot execute arbitrary code.

Example:
    >>> evaluate("1 + 0.3*x1", {"x1": np.array([0.0, 1.0])})
    array([1. +0.j, 1.3+0.j])
"""

import ast
import logging
from typing import Dict

import numpy as np

from utils.errors import ConfigInvalid

logger = logging.getLogger(__name__)


def _bump(s):
    """C-infinity bump exp(1 - 1/(1 - s^2)) on |s| < 1, zero outside; bump(0) = 1."""
    s = np.asarray(s)
    inside = np.abs(s) < 1.0
    safe = np.where(inside, s, 0.0)
    return np.where(inside, np.exp(1.0 - 1.0 / (1.0 - safe**2)), 0.0)


FUNCTIONS = {
    "exp": np.exp,
    "sin": np.sin,
    "cos": np.cos,
    "log": np.log,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "bump": _bump,
}

CONSTANTS = {"pi": np.pi, "e": np.e}

COORDINATES = ("x1", "r", "theta", "x", "y", "z")

_BINARY = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}

_UNARY = {ast.UAdd: np.positive, ast.USub: np.negative}


def parse(text: str) -> ast.Expression:
    """
    Parse and validate an expression.

    Raises:
        ConfigInvalid: on syntax errors or disallowed constructs
    """
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as e:
        raise ConfigInvalid(f"cannot parse expression '{text}': {e}") from e

    for node in ast.walk(tree):
        if isinstance(node, (ast.Expression, ast.Load, ast.operator, ast.unaryop)):
            continue
        if isinstance(node, ast.BinOp) and type(node.op) in _BINARY:
            continue
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            continue
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float, complex)):
            continue
        if isinstance(node, ast.Name) and (node.id in COORDINATES or node.id in CONSTANTS
                                           or node.id in FUNCTIONS):
            continue
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name)
                and node.func.id in FUNCTIONS and len(node.args) == 1 and not node.keywords):
            continue
        raise ConfigInvalid(f"disallowed construct {type(node).__name__} in '{text}'")
    return tree


def _eval(node, env):
    if isinstance(node, ast.Expression):
        return _eval(node.body, env)
    if isinstance(node, ast.Constant):
        return node.value
    if isinstance(node, ast.Name):
        if node.id in env:
            return env[node.id]
        if node.id in CONSTANTS:
            return CONSTANTS[node.id]
        raise ConfigInvalid(f"coordinate '{node.id}' is not available on this chart")
    if isinstance(node, ast.BinOp):
        return _BINARY[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        return _UNARY[type(node.op)](_eval(node.operand, env))
    if isinstance(node, ast.Call):
        return FUNCTIONS[node.func.id](_eval(node.args[0], env))
    raise ConfigInvalid(f"cannot evaluate {type(node).__name__}")


def evaluate(text: str, coordinates: Dict[str, np.ndarray]) -> np.ndarray:
    """
    Evaluate an expression on coordinate arrays.

    Args:
        text: Expression such as "1 + 0.2*bump(2*r - 3) + 0.01j"
        coordinates: Arrays keyed by coordinate name, all the same shape

    Returns:
        Complex array broadcast to the coordinate shape
    """
    tree = parse(text)
    shape = np.broadcast_shapes(*(np.shape(v) for v in coordinates.values()))
    with np.errstate(all="ignore"):
        value = _eval(tree, coordinates)
    return np.broadcast_to(np.asarray(value, dtype=complex), shape).copy()
