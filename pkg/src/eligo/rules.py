"""Criterion aggregation rule language: parser, evaluator, verdict roll-ups.

Grammar (keywords case-insensitive)::

    expr  := or
    or    := and ("OR" and)*
    and   := unary ("AND" unary)*
    unary := "NOT" unary | "(" expr ")" | atom
    atom  := QID ("IS" | "IS NOT") VALUE
           | ("ANY" | "ALL") "(" QID ("," QID)* ")" "IS" VALUE

Evaluation is two-valued over tri-valued answers: an atom "Q IS NOT YES"
is true when Q is NO *or* UNKNOWN.  Uncertainty is surfaced separately by
the sensitivity analysis, which re-evaluates under every YES/NO completion
of the UNKNOWN answers.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from typing import Iterable, Mapping, Union

from .corpus import CriterionKind, CriterionSpec, TrialSpec, Verdict
from .errors import CatalogError, MissingVerdictError, RuleParseError

# Enumerating 2^k completions is cheap up to here; beyond it the verdict is
# reported UNSTABLE with the capped flag instead of stalling.
SENSITIVITY_CAP = 16


# -- AST ----------------------------------------------------------------------

@dataclass(frozen=True)
class Atom:
    question_id: str
    value: Verdict
    negated: bool = False  # True renders/evaluates as "IS NOT"


@dataclass(frozen=True)
class Not:
    child: "RuleExpr"


@dataclass(frozen=True)
class And:
    children: tuple["RuleExpr", ...]

    def __post_init__(self):
        if not self.children:
            raise ValueError("AND needs at least one operand")


@dataclass(frozen=True)
class Or:
    children: tuple["RuleExpr", ...]

    def __post_init__(self):
        if not self.children:
            raise ValueError("OR needs at least one operand")


@dataclass(frozen=True)
class AnyOf:
    question_ids: tuple[str, ...]
    value: Verdict

    def __post_init__(self):
        if not self.question_ids:
            raise ValueError("ANY needs at least one question id")


@dataclass(frozen=True)
class AllOf:
    question_ids: tuple[str, ...]
    value: Verdict

    def __post_init__(self):
        if not self.question_ids:
            raise ValueError("ALL needs at least one question id")


RuleExpr = Union[Atom, Not, And, Or, AnyOf, AllOf]


# -- tokenizer / parser -------------------------------------------------------

_KEYWORDS = {"AND", "OR", "NOT", "IS", "ANY", "ALL", "YES", "NO", "UNKNOWN"}
_VALUES = {"YES", "NO", "UNKNOWN"}
_TOKEN_RE = re.compile(r"\s*(?:(\()|(\))|(,)|([A-Za-z_][A-Za-z0-9_.\-]*))")


@dataclass(frozen=True)
class _Token:
    kind: str  # LPAREN RPAREN COMMA KEYWORD IDENT EOF
    text: str
    position: int  # 1-based character position


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    index = 0
    while index < len(text):
        match = _TOKEN_RE.match(text, index)
        if match is None or match.end() == match.start():
            # Only whitespace consumed, or an unrecognized character.
            stripped = text[index:].lstrip()
            if not stripped:
                break
            position = len(text) - len(stripped) + 1
            raise RuleParseError(
                f"unexpected character {stripped[0]!r}", position, expected="a token"
            )
        index = match.end()
        lparen, rparen, comma, word = match.groups()
        position = match.end() - len(match.group().lstrip()) + 1
        if lparen:
            tokens.append(_Token("LPAREN", "(", position))
        elif rparen:
            tokens.append(_Token("RPAREN", ")", position))
        elif comma:
            tokens.append(_Token("COMMA", ",", position))
        elif word:
            upper = word.upper()
            kind = "KEYWORD" if upper in _KEYWORDS else "IDENT"
            tokens.append(_Token(kind, word, position))
    tokens.append(_Token("EOF", "", len(text) + 1))
    return tokens


class _Parser:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.index = 0

    @property
    def current(self) -> _Token:
        return self.tokens[self.index]

    def advance(self) -> _Token:
        token = self.current
        self.index += 1
        return token

    def fail(self, expected: str):
        token = self.current
        got = "end of rule" if token.kind == "EOF" else repr(token.text)
        raise RuleParseError(f"unexpected {got}", token.position, expected=expected)

    def keyword(self, word: str) -> bool:
        token = self.current
        if token.kind == "KEYWORD" and token.text.upper() == word:
            self.advance()
            return True
        return False

    def expect_keyword(self, word: str):
        if not self.keyword(word):
            self.fail(word)

    def expect(self, kind: str, label: str) -> _Token:
        if self.current.kind != kind:
            self.fail(label)
        return self.advance()

    def value(self) -> Verdict:
        token = self.current
        if token.kind == "KEYWORD" and token.text.upper() in _VALUES:
            self.advance()
            return Verdict(token.text.upper())
        self.fail("VALUE (YES, NO or UNKNOWN)")

    def question_id(self) -> str:
        return self.expect("IDENT", "question id").text

    def parse(self) -> RuleExpr:
        expr = self.or_expr()
        if self.current.kind != "EOF":
            self.fail("AND, OR or end of rule")
        return expr

    def or_expr(self) -> RuleExpr:
        children = [self.and_expr()]
        while self.keyword("OR"):
            children.append(self.and_expr())
        return children[0] if len(children) == 1 else Or(tuple(children))

    def and_expr(self) -> RuleExpr:
        children = [self.unary()]
        while self.keyword("AND"):
            children.append(self.unary())
        return children[0] if len(children) == 1 else And(tuple(children))

    def unary(self) -> RuleExpr:
        if self.keyword("NOT"):
            return Not(self.unary())
        if self.current.kind == "LPAREN":
            self.advance()
            expr = self.or_expr()
            self.expect("RPAREN", "')'")
            return expr
        return self.atom()

    def atom(self) -> RuleExpr:
        token = self.current
        if token.kind == "KEYWORD" and token.text.upper() in ("ANY", "ALL"):
            quantifier = token.text.upper()
            self.advance()
            self.expect("LPAREN", "'('")
            question_ids = [self.question_id()]
            while self.current.kind == "COMMA":
                self.advance()
                question_ids.append(self.question_id())
            self.expect("RPAREN", "')'")
            self.expect_keyword("IS")
            value = self.value()
            cls = AnyOf if quantifier == "ANY" else AllOf
            return cls(tuple(question_ids), value)
        if token.kind != "IDENT":
            self.fail("question id, '(', NOT, ANY or ALL")
        question_id = self.question_id()
        self.expect_keyword("IS")
        negated = self.keyword("NOT")
        return Atom(question_id, self.value(), negated=negated)


def parse_rule(text: str) -> RuleExpr:
    """Parse rule text into an AST; raise RuleParseError with position + hint."""
    return _Parser(_tokenize(text)).parse()


def print_rule(expr: RuleExpr) -> str:
    """Render an AST canonically so that parse(print_rule(e)) == e."""
    if isinstance(expr, Atom):
        op = "IS NOT" if expr.negated else "IS"
        return f"{expr.question_id} {op} {expr.value.value}"
    if isinstance(expr, Not):
        inner = print_rule(expr.child)
        if isinstance(expr.child, (And, Or)):
            inner = f"({inner})"
        return f"NOT {inner}"
    if isinstance(expr, And):
        # Parenthesize Or for precedence, nested And so it does not flatten.
        parts = [
            f"({print_rule(child)})" if isinstance(child, (And, Or)) else print_rule(child)
            for child in expr.children
        ]
        return " AND ".join(parts)
    if isinstance(expr, Or):
        parts = [
            f"({print_rule(child)})" if isinstance(child, Or) else print_rule(child)
            for child in expr.children
        ]
        return " OR ".join(parts)
    if isinstance(expr, AnyOf):
        return f"ANY({', '.join(expr.question_ids)}) IS {expr.value.value}"
    if isinstance(expr, AllOf):
        return f"ALL({', '.join(expr.question_ids)}) IS {expr.value.value}"
    raise TypeError(f"not a rule expression: {expr!r}")


def referenced_ids(expr: RuleExpr) -> set[str]:
    if isinstance(expr, Atom):
        return {expr.question_id}
    if isinstance(expr, Not):
        return referenced_ids(expr.child)
    if isinstance(expr, (And, Or)):
        ids: set[str] = set()
        for child in expr.children:
            ids |= referenced_ids(child)
        return ids
    return set(expr.question_ids)


def desugar(expr: RuleExpr) -> RuleExpr:
    """Expand ANY/ALL into the equivalent OR/AND of plain atoms."""
    if isinstance(expr, Atom):
        return expr
    if isinstance(expr, Not):
        return Not(desugar(expr.child))
    if isinstance(expr, And):
        return And(tuple(desugar(child) for child in expr.children))
    if isinstance(expr, Or):
        return Or(tuple(desugar(child) for child in expr.children))
    atoms = tuple(Atom(question_id, expr.value) for question_id in expr.question_ids)
    if isinstance(expr, AnyOf):
        return atoms[0] if len(atoms) == 1 else Or(atoms)
    return atoms[0] if len(atoms) == 1 else And(atoms)


def rename_questions(expr: RuleExpr, mapping: Mapping[str, str]) -> RuleExpr:
    """Return a copy of the expression with question ids substituted."""
    if isinstance(expr, Atom):
        return Atom(mapping.get(expr.question_id, expr.question_id), expr.value, expr.negated)
    if isinstance(expr, Not):
        return Not(rename_questions(expr.child, mapping))
    if isinstance(expr, And):
        return And(tuple(rename_questions(child, mapping) for child in expr.children))
    if isinstance(expr, Or):
        return Or(tuple(rename_questions(child, mapping) for child in expr.children))
    ids = tuple(mapping.get(question_id, question_id) for question_id in expr.question_ids)
    return type(expr)(ids, expr.value)


# -- evaluation ---------------------------------------------------------------

@dataclass
class AnswerMap:
    """Tri-valued answers per question; records which lookups were missing."""

    values: dict[str, Verdict]
    missing_ids: set[str] = field(default_factory=set)

    def lookup(self, question_id: str) -> Verdict:
        value = self.values.get(question_id)
        if value is None:
            self.missing_ids.add(question_id)
            return Verdict.UNKNOWN
        return value


def _as_answer_map(answers: AnswerMap | Mapping[str, Verdict]) -> AnswerMap:
    if isinstance(answers, AnswerMap):
        return answers
    return AnswerMap(dict(answers))


def eval_rule(expr: RuleExpr, answers: AnswerMap | Mapping[str, Verdict]) -> bool:
    """Two-valued evaluation; missing answers count as UNKNOWN and are recorded."""
    answer_map = _as_answer_map(answers)
    return _eval(expr, answer_map)


def _eval(expr: RuleExpr, answers: AnswerMap) -> bool:
    if isinstance(expr, Atom):
        hit = answers.lookup(expr.question_id) is expr.value
        return not hit if expr.negated else hit
    if isinstance(expr, Not):
        return not _eval(expr.child, answers)
    if isinstance(expr, And):
        return all(_eval(child, answers) for child in expr.children)
    if isinstance(expr, Or):
        return any(_eval(child, answers) for child in expr.children)
    if isinstance(expr, AnyOf):
        return any(answers.lookup(q) is expr.value for q in expr.question_ids)
    if isinstance(expr, AllOf):
        return all(answers.lookup(q) is expr.value for q in expr.question_ids)
    raise TypeError(f"not a rule expression: {expr!r}")


# -- sensitivity --------------------------------------------------------------

class Stability(str, Enum):
    STABLE = "STABLE"
    UNSTABLE = "UNSTABLE"


@dataclass(frozen=True)
class SensitivityResult:
    status: Stability
    unknown_count: int
    capped: bool = False


def sensitivity(
    expr: RuleExpr, answers: AnswerMap | Mapping[str, Verdict]
) -> SensitivityResult:
    """Check whether the verdict survives every YES/NO completion of UNKNOWNs.

    Enumerates all 2^k completions for the k UNKNOWN answers the expression
    references (missing answers count as UNKNOWN).  Beyond SENSITIVITY_CAP
    unknowns the result defaults to UNSTABLE with the capped flag set.
    """
    answer_map = _as_answer_map(answers)
    base = {q: answer_map.values.get(q, Verdict.UNKNOWN) for q in referenced_ids(expr)}
    unknowns = sorted(q for q, value in base.items() if value is Verdict.UNKNOWN)
    k = len(unknowns)
    if k == 0:
        return SensitivityResult(Stability.STABLE, unknown_count=0)
    if k > SENSITIVITY_CAP:
        return SensitivityResult(Stability.UNSTABLE, unknown_count=k, capped=True)
    first: bool | None = None
    for completion in product((Verdict.YES, Verdict.NO), repeat=k):
        candidate = dict(base)
        candidate.update(zip(unknowns, completion))
        outcome = _eval(expr, AnswerMap(candidate))
        if first is None:
            first = outcome
        elif outcome != first:
            return SensitivityResult(Stability.UNSTABLE, unknown_count=k)
    return SensitivityResult(Stability.STABLE, unknown_count=k)


# -- criterion / trial verdicts -----------------------------------------------

@dataclass(frozen=True)
class CriterionVerdict:
    criterion_id: str
    kind: CriterionKind
    met: bool
    stable: bool
    answers: dict[str, Verdict]  # snapshot of the contributing answers
    missing_ids: tuple[str, ...] = ()

    def passes(self) -> bool:
        """True when this verdict does not block eligibility."""
        return self.met if self.kind is CriterionKind.INCLUSION else not self.met


class TrialStatus(str, Enum):
    ELIGIBLE = "ELIGIBLE"
    INELIGIBLE = "INELIGIBLE"
    UNDETERMINED = "UNDETERMINED"


@dataclass(frozen=True)
class TrialVerdict:
    trial_id: str
    status: TrialStatus
    failing: tuple[str, ...]


def criterion_verdict(
    criterion: CriterionSpec, answers: AnswerMap | Mapping[str, Verdict]
) -> CriterionVerdict:
    """Evaluate one criterion's rule and its stability under UNKNOWN flips."""
    if not criterion.rule_text:
        raise CatalogError(
            f"criterion {criterion.criterion_id!r} has no rule to evaluate"
        )
    expr = parse_rule(criterion.rule_text)
    answer_map = _as_answer_map(answers)
    met = eval_rule(expr, answer_map)
    stable = sensitivity(expr, answer_map).status is Stability.STABLE
    referenced = sorted(referenced_ids(expr))
    snapshot = {q: answer_map.values.get(q, Verdict.UNKNOWN) for q in referenced}
    missing = tuple(q for q in referenced if q not in answer_map.values)
    return CriterionVerdict(
        criterion_id=criterion.criterion_id,
        kind=criterion.kind,
        met=met,
        stable=stable,
        answers=snapshot,
        missing_ids=missing,
    )


def trial_verdict(trial: TrialSpec, verdicts: Iterable[CriterionVerdict]) -> TrialVerdict:
    """Roll criterion verdicts up to one trial status.

    ELIGIBLE only when every criterion passes on a stable verdict;
    INELIGIBLE when some criterion fails on a stable verdict; otherwise the
    outcome hinges on unstable verdicts and is UNDETERMINED.
    """
    by_id = {verdict.criterion_id: verdict for verdict in verdicts}
    failing: list[str] = []
    any_unstable = False
    for criterion_id in trial.criterion_ids:
        verdict = by_id.get(criterion_id)
        if verdict is None:
            raise MissingVerdictError(criterion_id)
        if not verdict.passes():
            failing.append(criterion_id)
        if not verdict.stable:
            any_unstable = True
    if any(by_id[criterion_id].stable for criterion_id in failing):
        status = TrialStatus.INELIGIBLE
    elif failing or any_unstable:
        status = TrialStatus.UNDETERMINED
    else:
        status = TrialStatus.ELIGIBLE
    return TrialVerdict(trial.trial_id, status, tuple(failing))
