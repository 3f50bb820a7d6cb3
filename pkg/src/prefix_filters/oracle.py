"""Validity oracles, error grouping, and an exhaustive soundness checker."""
from __future__ import annotations

import itertools
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Mapping, Protocol, Sequence

from .filter_engine import FilterSpec, eval_expr

if TYPE_CHECKING:
    from .learner import SampleRecord

__all__ = [
    "OracleVerdict",
    "OracleCrashed",
    "SearchSpaceTooLarge",
    "Oracle",
    "BalancedBrackets",
    "MiniMol",
    "LeakDetector",
    "FirstErrorOnly",
    "SubprocessOracle",
    "ErrorGroup",
    "group_by_error",
    "judge_many",
    "brute_force_sound",
    "Counterexample",
]


class OracleCrashed(Exception):
    """The oracle failed to produce a verdict (infrastructure, not signal)."""


class SearchSpaceTooLarge(Exception):
    pass


@dataclass(frozen=True)
class OracleVerdict:
    valid: bool
    error_classes: tuple[str, ...] = ()
    diagnostics: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "error_classes", tuple(self.error_classes))
        if self.valid == bool(self.error_classes):
            raise ValueError("a verdict is valid iff it has no error classes")

    @classmethod
    def ok(cls) -> "OracleVerdict":
        return cls(True, ())

    @classmethod
    def bad(cls, *classes: str, diagnostics: str | None = None) -> "OracleVerdict":
        return cls(False, tuple(classes), diagnostics)


class Oracle(Protocol):
    def judge(self, text: str) -> OracleVerdict: ...


class BalancedBrackets:
    """Balanced ``()[]`` strings; reports the first error found left to right."""

    OPEN = {"(": ")", "[": "]"}
    CLOSE = {")": "(", "]": "["}

    def judge(self, text: str) -> OracleVerdict:
        stack: list[str] = []
        for ch in text:
            if ch in self.OPEN:
                stack.append(ch)
            elif ch in self.CLOSE:
                if not stack:
                    return OracleVerdict.bad("unbalanced_close")
                if stack[-1] != self.CLOSE[ch]:
                    return OracleVerdict.bad("mismatched_close")
                stack.pop()
            else:
                return OracleVerdict.bad("illegal_char")
        if stack:
            return OracleVerdict.bad("unclosed_open")
        return OracleVerdict.ok()


class MiniMol:
    """A toy SMILES-like checker over ``C O N ( ) = 1``.

    Reports every violated rule: ``unbalanced_paren``, ``unclosed_ring``
    (odd count of the ring digit; digits may be reused after closing),
    ``bad_double_bond`` (``=`` must follow an atom, ring digit, or branch
    bracket and precede an atom), ``illegal_char``.
    """

    ATOMS = frozenset("CON")
    ALPHABET = frozenset("CON()=1")

    def judge(self, text: str) -> OracleVerdict:
        classes = []
        depth = 0
        paren_ok = True
        for ch in text:
            if ch == "(":
                depth += 1
            elif ch == ")":
                depth -= 1
                if depth < 0:
                    paren_ok = False
        if depth != 0 or not paren_ok:
            classes.append("unbalanced_paren")
        if text.count("1") % 2:
            classes.append("unclosed_ring")
        for i, ch in enumerate(text):
            if ch != "=":
                continue
            before = text[i - 1] if i > 0 else ""
            after = text[i + 1] if i + 1 < len(text) else ""
            bonded = before in self.ATOMS or (before != "" and before in "1)") or (before == "(" and i > 1)
            if not bonded or after not in self.ATOMS:
                classes.append("bad_double_bond")
                break
        if any(ch not in self.ALPHABET for ch in text):
            classes.append("illegal_char")
        return OracleVerdict.bad(*classes) if classes else OracleVerdict.ok()


class LeakDetector:
    """Flags any protected value that appears verbatim in the text.

    ``protected`` maps a field name (the error class) to its values. A text
    leaking several fields carries every matching class.
    """

    def __init__(self, protected: Mapping[str, Iterable[str]]):
        self.protected = {k: tuple(v for v in vals if v) for k, vals in protected.items()}

    def judge(self, text: str) -> OracleVerdict:
        leaked = [name for name, vals in self.protected.items() if any(v in text for v in vals)]
        return OracleVerdict.bad(*leaked) if leaked else OracleVerdict.ok()


class FirstErrorOnly:
    """Wraps a compiler-style oracle and keeps only its first error class."""

    def __init__(self, inner: Oracle):
        self.inner = inner

    def judge(self, text: str) -> OracleVerdict:
        v = self.inner.judge(text)
        if v.valid:
            return v
        return OracleVerdict(False, v.error_classes[:1], v.diagnostics)


class SubprocessOracle:
    """Runs an external checker per sample.

    The sample goes to stdin. Exit 0 means valid; exit 1 means invalid with
    a whitespace-free class label on the first stdout line. Anything else,
    including a timeout, raises :class:`OracleCrashed`.
    """

    def __init__(self, command: str | Sequence[str], timeout: float = 30.0, first_class_only: bool = False):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("empty oracle command")
        self.timeout = timeout
        self.first_class_only = first_class_only

    def judge(self, text: str) -> OracleVerdict:
        try:
            proc = subprocess.run(
                self.command,
                input=text.encode("utf-8"),
                capture_output=True,
                timeout=self.timeout,
            )
        except subprocess.TimeoutExpired as exc:
            raise OracleCrashed(f"timed out after {self.timeout}s") from exc
        except OSError as exc:
            raise OracleCrashed(f"could not start {self.command[0]!r}: {exc}") from exc
        if proc.returncode == 0:
            return OracleVerdict.ok()
        if proc.returncode != 1:
            raise OracleCrashed(f"exit code {proc.returncode}: {proc.stderr.decode('utf-8', 'replace')[:200]}")
        lines = proc.stdout.decode("utf-8", "replace").splitlines()
        label = lines[0].strip() if lines else ""
        if not label or any(c.isspace() for c in label):
            raise OracleCrashed(f"protocol violation: bad class label {label!r}")
        diagnostics = "\n".join(lines[1:]) or None
        return OracleVerdict.bad(label, diagnostics=diagnostics)


def judge_many(oracle: Oracle, texts: Sequence[str], workers: int = 1) -> list[OracleVerdict | OracleCrashed]:
    """Judge texts in order; crashes are returned in place, not raised."""

    def one(text):
        try:
            return oracle.judge(text)
        except OracleCrashed as exc:
            return exc

    if workers <= 1 or len(texts) <= 1:
        return [one(t) for t in texts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, texts))


@dataclass
class ErrorGroup:
    error_class: str
    members: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.members)

    @property
    def texts(self) -> list[str]:
        return [m.text for m in self.members]


def group_by_error(samples: Iterable["SampleRecord"]) -> tuple[dict[str, ErrorGroup], list["SampleRecord"]]:
    """Split samples into ``(groups by error class, valid samples)``.

    A sample with several classes joins every named group. Samples without
    a verdict (crashed oracle calls) are skipped.
    """
    groups: dict[str, ErrorGroup] = {}
    valid = []
    for s in samples:
        if s.verdict is None:
            continue
        if s.verdict.valid:
            valid.append(s)
            continue
        for cls in dict.fromkeys(s.verdict.error_classes):
            groups.setdefault(cls, ErrorGroup(cls)).members.append(s)
    return groups, valid


@dataclass(frozen=True)
class Counterexample:
    prefix: str
    completion: str


MAX_SEARCH = 10**7


def _shortlex(alphabet: Sequence[str], max_len: int):
    for n in range(max_len + 1):
        for combo in itertools.product(alphabet, repeat=n):
            yield "".join(combo)


def brute_force_sound(
    spec: FilterSpec,
    oracle: Oracle,
    alphabet: Sequence[str] | str,
    max_len: int,
) -> Counterexample | None:
    """Exhaustively check logical soundness up to ``max_len``.

    Returns ``None`` (pass) or the first counterexample in shortlex order of
    prefix then completion: a triggering prefix with an oracle-valid
    completion. The empty prefix only counts as triggering for the empty
    string itself.
    """
    alphabet = sorted(set(alphabet))
    k = len(alphabet)
    total = max_len + 1 if k <= 1 else (k ** (max_len + 1) - 1) // (k - 1)
    if total > MAX_SEARCH:
        raise SearchSpaceTooLarge(f"{total} strings exceeds the limit of {MAX_SEARCH}")
    # first valid completion (shortlex) for every prefix of every valid string
    first_completion: dict[str, str] = {}
    for s in _shortlex(alphabet, max_len):
        if oracle.judge(s).valid:
            for i in range(len(s) + 1):
                first_completion.setdefault(s[:i], s[i:])
    for p in _shortlex(alphabet, max_len):
        if not eval_expr(spec.expr, p):
            continue
        if p == "":
            if "" in first_completion and first_completion[""] == "":
                return Counterexample("", "")
            continue
        if p in first_completion:
            return Counterexample(p, first_completion[p])
    return None
