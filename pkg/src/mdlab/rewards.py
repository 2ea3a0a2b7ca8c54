"""Static reward functions for verifiable toy tasks.

Countdown: reach a target by combining a multiset of small integers with
+ - * / (exact rational arithmetic). Arith: plain integer answers.
Rewards are binary and pure functions of (text, instance).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from collections import Counter
from fractions import Fraction
from typing import Optional, Union

import numpy as np

from .core import ANS_CLOSE, ANS_OPEN, MASK_RENDER

_ANSWER_RE = re.compile(re.escape(ANS_OPEN) + r"(.*?)" + re.escape(ANS_CLOSE), re.DOTALL)


# ---------------------------------------------------------------------------
# Expression AST

@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class BinOp:
    op: str  # + - * /
    left: "Node"
    right: "Node"


Node = Union[Num, BinOp]


class ParseError(ValueError):
    def __init__(self, position: int, expected: str):
        self.position = position
        self.expected = expected
        super().__init__(f"parse error at offset {position}: expected {expected}")


class _Parser:
    """expr := term (('+'|'-') term)*
    term := factor (('*'|'/') factor)*
    factor := integer | '(' expr ')'
    Whitespace is ignored."""

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos] == " ":
            self.pos += 1

    def _peek(self) -> str:
        self._skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def parse(self) -> Node:
        node = self.expr()
        self._skip_ws()
        if self.pos != len(self.text):
            raise ParseError(self.pos, "end of input")
        return node

    def expr(self) -> Node:
        node = self.term()
        while self._peek() and self._peek() in "+-":
            op = self.text[self.pos]
            self.pos += 1
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while self._peek() and self._peek() in "*/":
            op = self.text[self.pos]
            self.pos += 1
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Node:
        c = self._peek()
        if c == "(":
            self.pos += 1
            node = self.expr()
            if self._peek() != ")":
                raise ParseError(self.pos, "')'")
            self.pos += 1
            return node
        if c.isdigit():
            start = self.pos
            while self.pos < len(self.text) and self.text[self.pos].isdigit():
                self.pos += 1
            return Num(int(self.text[start:self.pos]))
        raise ParseError(self.pos, "integer or '('")


def parse_expr(text: str) -> Node:
    return _Parser(text).parse()


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def unparse(node: Node) -> str:
    """Render with minimal parentheses; reparsing yields an equal AST."""
    if isinstance(node, Num):
        return str(node.value)
    prec = _PREC[node.op]
    left = unparse(node.left)
    if isinstance(node.left, BinOp) and _PREC[node.left.op] < prec:
        left = f"({left})"
    # a right child of equal precedence always needs parens: the grammar is
    # left-associative, so "1+(1+1)" must not render as "1+1+1"
    right = unparse(node.right)
    if isinstance(node.right, BinOp) and _PREC[node.right.op] <= prec:
        right = f"({right})"
    return f"{left}{node.op}{right}"


def eval_expr(node: Node) -> Fraction:
    """Exact rational value; raises ZeroDivisionError on division by zero."""
    if isinstance(node, Num):
        return Fraction(node.value)
    a, b = eval_expr(node.left), eval_expr(node.right)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    return a / b


def literals(node: Node) -> Counter:
    if isinstance(node, Num):
        return Counter([node.value])
    return literals(node.left) + literals(node.right)


# ---------------------------------------------------------------------------
# Verdicts

@dataclass(frozen=True)
class CountdownInstance:
    numbers: tuple[int, ...]
    target: int

    def __post_init__(self):
        if not all(1 <= x <= 99 for x in self.numbers):
            raise ValueError("countdown numbers must lie in [1, 99]")
        if self.target < 1:
            raise ValueError("target must be a positive integer")


@dataclass(frozen=True)
class Verdict:
    reward: int  # 0 or 1
    reason: str  # ok | parse_error | wrong_value | wrong_multiset | no_answer

    def __post_init__(self):
        assert (self.reward == 1) == (self.reason == "ok")


def extract_answer(completion: str, task: str = "") -> Optional[str]:
    """Substring between the last matched answer delimiters, or None.

    Completions carrying mask placeholders inside the delimiters are
    unanswerable and yield None.
    """
    matches = _ANSWER_RE.findall(completion)
    if not matches:
        return None
    ans = matches[-1]
    if MASK_RENDER in ans:
        return None
    return ans


def verify_countdown(expr_text: Optional[str], instance: CountdownInstance) -> Verdict:
    if expr_text is None:
        return Verdict(0, "no_answer")
    try:
        node = parse_expr(expr_text)
    except ParseError:
        return Verdict(0, "parse_error")
    if literals(node) != Counter(instance.numbers):
        return Verdict(0, "wrong_multiset")
    try:
        value = eval_expr(node)
    except ZeroDivisionError:
        return Verdict(0, "wrong_value")
    if value == Fraction(instance.target):
        return Verdict(1, "ok")
    return Verdict(0, "wrong_value")


_INT_RE = re.compile(r"^[+-]?\d+$")


def verify_arith(answer_text: Optional[str], gold: int) -> Verdict:
    if answer_text is None:
        return Verdict(0, "no_answer")
    text = answer_text.strip()
    if not _INT_RE.match(text):
        return Verdict(0, "parse_error")
    if int(text) == gold:
        return Verdict(1, "ok")
    return Verdict(0, "wrong_value")


def verify_completion(completion: str, item: dict) -> Verdict:
    """Dispatch on the dataset item's task field."""
    ans = extract_answer(completion)
    if item["task"] == "countdown":
        return verify_countdown(ans, CountdownInstance(tuple(item["numbers"]), item["target"]))
    if item["task"] == "arith":
        return verify_arith(ans, int(item["gold"]))
    raise ValueError(f"unknown task {item['task']!r}")


# ---------------------------------------------------------------------------
# Brute force over expression trees

def all_expression_trees(numbers: tuple[int, ...]):
    """Yield (tree, exact value) for every binary expression tree over the
    full multiset. Division by zero prunes the tree. Deterministic order."""
    def rec(items: tuple[Node, ...]):
        if len(items) == 1:
            yield items[0]
            return
        for i in range(len(items)):
            for j in range(len(items)):
                if i == j:
                    continue
                rest = tuple(items[k] for k in range(len(items)) if k not in (i, j))
                for op in "+-*/":
                    yield from rec((BinOp(op, items[i], items[j]),) + rest)

    seen = set()
    for tree in rec(tuple(Num(v) for v in sorted(numbers))):
        key = unparse(tree)
        if key in seen:
            continue
        seen.add(key)
        try:
            value = eval_expr(tree)
        except ZeroDivisionError:
            continue
        yield tree, value


def reachable_targets(numbers: tuple[int, ...], max_target: int = 999) -> dict[int, str]:
    """Positive integer targets reachable from the multiset, mapped to a
    canonical (first in enumeration order) gold expression."""
    out: dict[int, str] = {}
    for tree, value in all_expression_trees(numbers):
        if value.denominator == 1 and 1 <= value <= max_target:
            target = int(value)
            if target not in out:
                out[target] = unparse(tree)
    return out


def countdown_solvable(numbers: tuple[int, ...], target: int) -> bool:
    return target in reachable_targets(numbers)


# ---------------------------------------------------------------------------
# Instance generation

COUNTDOWN_PROMPT = "nums:{a},{b},{c} target:{t:>3}="
ARITH_PROMPT = "{a:>2}+{b:>2}="


def make_response(answer: str) -> str:
    return f"{ANS_OPEN}{answer}{ANS_CLOSE}"


def gen_instances(task: str, count: int, rng: np.random.Generator,
                  lo: int = 1, hi: int = 9) -> list[dict]:
    """Emit dataset items {task, prompt, response, ...}. Countdown instances
    are solvable by construction (the brute-force enumeration picks the
    target and the gold expression)."""
    items = []
    if task == "countdown":
        while len(items) < count:
            nums = tuple(sorted(int(x) for x in rng.integers(lo, hi + 1, size=3)))
            targets = reachable_targets(nums)
            candidates = sorted(t for t in targets if t <= 999)
            if not candidates:
                continue
            target = int(candidates[int(rng.integers(0, len(candidates)))])
            gold = targets[target]
            a, b, c = nums
            items.append({
                "task": "countdown",
                "numbers": list(nums),
                "target": target,
                "prompt": COUNTDOWN_PROMPT.format(a=a, b=b, c=c, t=target),
                "gold": gold,
                "response": make_response(gold),
                "meta": {"lo": lo, "hi": hi},
            })
    elif task == "arith":
        while len(items) < count:
            a = int(rng.integers(lo, hi + 1))
            b = int(rng.integers(lo, hi + 1))
            gold = a + b
            items.append({
                "task": "arith",
                "prompt": ARITH_PROMPT.format(a=a, b=b),
                "gold": gold,
                "response": make_response(str(gold)),
                "meta": {"a": a, "b": b},
            })
    else:
        raise ValueError(f"unknown task {task!r}")
    return items
