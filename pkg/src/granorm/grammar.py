"""Context-free grammars over typed constructors.

A grammar declares composite types, each inhabited by named constructors
whose fields are either composite (holding child nodes) or primitive
(holding surface-token lists).  Grammars are read from a small line-based
text format::

    # comment
    root Expr
    Expr = Call(Expr fn, Expr* args)
    Expr = Var(token name)

``root <TypeName>`` must be the first significant line.  Each rule line
declares one type and one or more constructors (alternatives may be
joined with ``|``).  A field type may carry a cardinality suffix:
``?`` optional, ``*`` repeated; no suffix means exactly one.  The only
primitive field type is ``token``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from functools import cached_property

SINGLE = "single"
OPTIONAL = "optional"
MULTIPLE = "multiple"

TOKEN_TYPE = "token"
FIELD_END = "</f>"

_SUFFIX_CARD = {"": SINGLE, "?": OPTIONAL, "*": MULTIPLE}
_CARD_SUFFIX = {v: k for k, v in _SUFFIX_CARD.items()}

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_.]*")
_FIELD_RE = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_.]*)([?*]?)\s+([A-Za-z_][A-Za-z0-9_.]*)\s*$")


class GrammarError(Exception):
    """Raised on malformed grammar text or grammar-violating lookups."""

    def __init__(self, message, line=None, col=None):
        if line is not None:
            message = f"line {line}: {message}" if col is None else f"line {line}, col {col}: {message}"
        super().__init__(message)
        self.line = line
        self.col = col


@dataclass(frozen=True)
class FieldDecl:
    """One constructor field: a name, a field type, and a cardinality."""

    name: str
    type: str
    cardinality: str  # SINGLE | OPTIONAL | MULTIPLE

    @property
    def is_primitive(self):
        return self.type == TOKEN_TYPE


@dataclass(frozen=True)
class Constructor:
    """A named alternative of a composite type."""

    id: int  # position in declaration order, unique across the grammar
    name: str
    result_type: str
    fields: tuple[FieldDecl, ...]


@dataclass(frozen=True)
class GrammarSpec:
    """Immutable grammar: root type, constructors, and the token vocabulary.

    ``token_vocab`` is not part of the grammar text; it is attached from
    corpus statistics via :meth:`with_token_vocab` and always contains the
    reserved field-end marker exactly once.
    """

    root_type: str
    constructors: tuple[Constructor, ...]
    primitive_types: frozenset = frozenset({TOKEN_TYPE})
    token_vocab: tuple[str, ...] = (FIELD_END,)

    def __post_init__(self):
        if self.token_vocab.count(FIELD_END) != 1:
            raise GrammarError(f"token_vocab must contain {FIELD_END!r} exactly once")

    @cached_property
    def composite_types(self):
        """Map from type name to the ids of its constructors, declaration order."""
        out = {}
        for c in self.constructors:
            out.setdefault(c.result_type, []).append(c.id)
        return {t: tuple(ids) for t, ids in out.items()}

    @cached_property
    def _by_name(self):
        return {c.name: c for c in self.constructors}

    def constructor(self, ctor_id):
        if not 0 <= ctor_id < len(self.constructors):
            raise GrammarError(f"unknown constructor id {ctor_id}")
        return self.constructors[ctor_id]

    def constructor_named(self, name):
        try:
            return self._by_name[name]
        except KeyError:
            raise GrammarError(f"unknown constructor {name!r}") from None

    def constructors_of(self, type_name):
        """All constructors producing ``type_name``, in declaration order."""
        if type_name in self.primitive_types:
            raise GrammarError(f"{type_name!r} is a primitive type, not a composite type")
        ids = self.composite_types.get(type_name)
        if ids is None:
            raise GrammarError(f"unknown type {type_name!r}")
        return tuple(self.constructors[i] for i in ids)

    def with_token_vocab(self, tokens):
        """A copy of this grammar with ``token_vocab`` replaced."""
        return replace(self, token_vocab=tuple(tokens))


def parse_grammar(text):
    """Parse grammar text into a :class:`GrammarSpec`.

    Raises :class:`GrammarError` with a line number on syntax errors,
    undeclared field types, duplicate constructor names, or a missing
    root declaration.
    """
    root_type = None
    # (line_no, type_name, ctor_name, [(ftype, suffix, fname), ...])
    raw_ctors = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if root_type is None:
            m = re.fullmatch(r"root\s+([A-Za-z_][A-Za-z0-9_.]*)", line)
            if m is None:
                raise GrammarError("expected 'root <TypeName>' as the first rule", line=line_no)
            root_type = m.group(1)
            continue
        if line.startswith("root"):
            raise GrammarError("duplicate root declaration", line=line_no)
        if "=" not in line:
            raise GrammarError("expected '<TypeName> = <Constructor>(...)'", line=line_no)
        lhs, rhs = line.split("=", 1)
        lhs = lhs.strip()
        if not _NAME_RE.fullmatch(lhs):
            raise GrammarError(f"bad type name {lhs!r}", line=line_no, col=raw.index(lhs) + 1 if lhs else 1)
        for alt in rhs.split("|"):
            raw_ctors.append((line_no, lhs) + _parse_ctor(alt.strip(), line_no))
    if root_type is None:
        raise GrammarError("missing root declaration")

    declared = {t for _, t, _, _ in raw_ctors}
    seen_names = {}
    ctors = []
    for line_no, type_name, ctor_name, fields in raw_ctors:
        if ctor_name in seen_names:
            raise GrammarError(
                f"duplicate constructor name {ctor_name!r} (first declared on line {seen_names[ctor_name]})",
                line=line_no,
            )
        seen_names[ctor_name] = line_no
        decls = []
        fnames = set()
        for ftype, suffix, fname in fields:
            if ftype != TOKEN_TYPE and ftype not in declared:
                raise GrammarError(f"undeclared field type {ftype!r}", line=line_no)
            if fname in fnames:
                raise GrammarError(f"duplicate field name {fname!r} in {ctor_name}", line=line_no)
            fnames.add(fname)
            decls.append(FieldDecl(fname, ftype, _SUFFIX_CARD[suffix]))
        ctors.append(Constructor(len(ctors), ctor_name, type_name, tuple(decls)))
    if root_type not in declared:
        raise GrammarError(f"root type {root_type!r} has no constructors")
    return GrammarSpec(root_type=root_type, constructors=tuple(ctors))


def _parse_ctor(alt, line_no):
    m = re.fullmatch(r"([A-Za-z_][A-Za-z0-9_.]*)\s*\((.*)\)", alt)
    if m is None:
        raise GrammarError(f"bad constructor declaration {alt!r}", line=line_no)
    name, body = m.group(1), m.group(2).strip()
    if not body:
        return name, []
    fields = []
    for part in body.split(","):
        fm = _FIELD_RE.fullmatch(part)
        if fm is None:
            raise GrammarError(f"bad field declaration {part.strip()!r} in {name}", line=line_no)
        fields.append((fm.group(1), fm.group(2), fm.group(3)))
    return name, fields


def render_grammar(spec):
    """Serialize the structural part of a grammar back to its text format.

    One constructor per line, declaration order.  ``token_vocab`` is not
    serialized; ``parse_grammar(render_grammar(s))`` reproduces ``s`` for
    any grammar whose vocabulary is the default.
    """
    lines = [f"root {spec.root_type}"]
    for c in spec.constructors:
        args = ", ".join(f"{f.type}{_CARD_SUFFIX[f.cardinality]} {f.name}" for f in c.fields)
        lines.append(f"{c.result_type} = {c.name}({args})")
    return "\n".join(lines) + "\n"
