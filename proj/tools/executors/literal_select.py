#!/usr/bin/env python3
"""Stub SQL executor: evaluates `SELECT <expr>[, <expr>...]` over numeric
literals and prints one result row. Exit 2 when the program is not of that
form."""
import ast
import operator
import re
import sys

OPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Mod: operator.mod,
    ast.USub: operator.neg,
    ast.UAdd: operator.pos,
}


def evaluate(node):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return node.value
    if isinstance(node, ast.BinOp) and type(node.op) in OPS:
        return OPS[type(node.op)](evaluate(node.left), evaluate(node.right))
    if isinstance(node, ast.UnaryOp) and type(node.op) in OPS:
        return OPS[type(node.op)](evaluate(node.operand))
    raise ValueError("unsupported expression")


def fmt(v):
    if isinstance(v, float) and v.is_integer():
        v = int(v)
    return str(v)


def main():
    text = open(sys.argv[1]).read() if len(sys.argv) > 1 else sys.stdin.read()
    m = re.fullmatch(r"\s*select\s+(.+?)\s*;?\s*", text, re.IGNORECASE | re.DOTALL)
    if not m:
        print("not a literal SELECT", file=sys.stderr)
        return 2
    try:
        values = [evaluate(ast.parse(part.strip(), mode="eval").body) for part in m.group(1).split(",")]
    except (SyntaxError, ValueError, ZeroDivisionError) as e:
        print(e, file=sys.stderr)
        return 2
    print(",".join(fmt(v) for v in values))
    return 0


if __name__ == "__main__":
    sys.exit(main())
