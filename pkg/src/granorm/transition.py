"""Transition system mapping grammar derivations to action sequences.

A program AST is built by a pre-order, depth-first, left-to-right walk of
its derivation.  Three action kinds drive the walk:

* ``ApplyConstr(c)`` expands the frontier slot with constructor ``c`` and
  pushes that constructor's own fields onto the frontier.
* ``GenToken(t)`` appends a surface token to the current primitive field;
  the reserved marker token closes the field.
* ``Reduce`` closes an unfilled optional field (leaving it empty) or a
  repeated field (freezing the children gathered so far).

Optional fields are consumed by a single ``ApplyConstr`` with no trailing
``Reduce``; repeated fields stay open until an explicit ``Reduce``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .grammar import (FIELD_END, MULTIPLE, OPTIONAL, SINGLE, FieldDecl,
                      GrammarError, GrammarSpec)


class TransitionError(Exception):
    """Raised for actions that violate the grammar or malformed ASTs."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class ApplyConstr:
    ctor_id: int


@dataclass(frozen=True)
class GenToken:
    token: str


@dataclass(frozen=True)
class Reduce:
    pass


REDUCE = Reduce()


def action_sort_key(action):
    """Total order on actions, used for deterministic tie-breaking."""
    if isinstance(action, ApplyConstr):
        return (0, action.ctor_id, "")
    if isinstance(action, GenToken):
        return (1, 0, action.token)
    return (2, 0, "")


def sequence_sort_key(actions):
    return tuple(action_sort_key(a) for a in actions)


@dataclass(frozen=True)
class AstNode:
    """A completed constructor application.

    ``children`` has one entry per declared field: an :class:`AstNode` for
    single fields, ``AstNode | None`` for optional fields, a tuple of
    nodes for repeated fields, and a tuple of token strings (without the
    field-end marker) for primitive fields.
    """

    ctor_id: int
    children: tuple


@dataclass(frozen=True)
class _Frame:
    """One partially applied constructor on the derivation stack.

    ``ctor_id`` is ``None`` only for the synthetic root frame, which owns a
    single field of the grammar's root type.  ``done`` holds the values of
    completed fields; ``partial`` accumulates the tokens or children of the
    field currently being filled (index ``field_idx``).
    """

    ctor_id: int | None
    field_idx: int
    done: tuple
    partial: tuple


@dataclass(frozen=True)
class DerivationState:
    """Immutable derivation prefix: a frame stack plus a step counter."""

    grammar: GrammarSpec = field(compare=False, repr=False)
    frames: tuple = ()
    step: int = 0
    result: AstNode | None = None

    @property
    def complete(self):
        return not self.frames

    def _fields_of(self, frame):
        if frame.ctor_id is None:
            return (FieldDecl("root", self.grammar.root_type, SINGLE),)
        return self.grammar.constructor(frame.ctor_id).fields

    def current_field(self):
        """The frontier slot's field declaration; None when complete."""
        if self.complete:
            return None
        top = self.frames[-1]
        return self._fields_of(top)[top.field_idx]

    def frontier(self):
        """Pending (constructor-id, field-index) slots, outermost first."""
        out = []
        for frame in self.frames:
            n = len(self._fields_of(frame))
            out.extend((frame.ctor_id, i) for i in range(frame.field_idx, n))
        return tuple(out)

    def candidates(self, source_tokens):
        """Legal next actions, in canonical order.

        Composite slots offer each constructor of the slot's type in
        declaration order, plus ``Reduce`` for optional and repeated slots.
        Primitive slots offer one ``GenToken`` per vocabulary token (in
        vocabulary order, including the field-end marker) followed by one
        per source token absent from the vocabulary, in order of first
        occurrence.
        """
        fd = self.current_field()
        if fd is None:
            raise TransitionError("derivation is complete", step=self.step)
        if fd.is_primitive:
            vocab = self.grammar.token_vocab
            seen = set(vocab)
            actions = [GenToken(t) for t in vocab]
            for tok in source_tokens:
                if tok not in seen:
                    seen.add(tok)
                    actions.append(GenToken(tok))
            return tuple(actions)
        actions = [ApplyConstr(c.id) for c in self.grammar.constructors_of(fd.type)]
        if fd.cardinality != SINGLE:
            actions.append(REDUCE)
        return tuple(actions)

    def apply(self, action):
        """Apply one action, returning the successor state.

        Enforces structural legality: the action kind must match the
        frontier slot, ``ApplyConstr`` must produce the slot's type, and
        tokens must be non-empty.
        """
        fd = self.current_field()
        if fd is None:
            raise TransitionError("derivation is complete", step=self.step)
        frames = self.frames
        if isinstance(action, ApplyConstr):
            if fd.is_primitive:
                raise TransitionError("ApplyConstr at a primitive slot", step=self.step)
            ctor = self.grammar.constructor(action.ctor_id)
            if ctor.result_type != fd.type:
                raise TransitionError(
                    f"{ctor.name} produces {ctor.result_type}, slot expects {fd.type}", step=self.step
                )
            frames = frames + (_Frame(ctor.id, 0, (), ()),)
            return self._settle(frames)
        if isinstance(action, GenToken):
            if not fd.is_primitive:
                raise TransitionError("GenToken at a composite slot", step=self.step)
            if not action.token:
                raise TransitionError("empty token", step=self.step)
            top = frames[-1]
            if action.token == FIELD_END:
                top = _Frame(top.ctor_id, top.field_idx + 1, top.done + (top.partial,), ())
            else:
                top = _Frame(top.ctor_id, top.field_idx, top.done, top.partial + (action.token,))
            return self._settle(frames[:-1] + (top,))
        if isinstance(action, Reduce):
            if fd.is_primitive or fd.cardinality == SINGLE:
                raise TransitionError("Reduce is only legal at optional or repeated composite slots", step=self.step)
            top = frames[-1]
            value = None if fd.cardinality == OPTIONAL else top.partial
            top = _Frame(top.ctor_id, top.field_idx + 1, top.done + (value,), ())
            return self._settle(frames[:-1] + (top,))
        raise TransitionError(f"unknown action {action!r}", step=self.step)

    def _settle(self, frames):
        """Pop every frame whose fields are all filled, delivering each
        finished node into its parent slot."""
        result = None
        while frames:
            top = frames[-1]
            if top.field_idx < len(self._fields_of(top)):
                break
            frames = frames[:-1]
            if top.ctor_id is None:
                result = top.done[0]
                break
            node = AstNode(top.ctor_id, top.done)
            parent = frames[-1]
            fd = self._fields_of(parent)[parent.field_idx]
            if fd.cardinality == MULTIPLE:
                parent = _Frame(parent.ctor_id, parent.field_idx, parent.done, parent.partial + (node,))
            else:
                parent = _Frame(parent.ctor_id, parent.field_idx + 1, parent.done + (node,), ())
            frames = frames[:-1] + (parent,)
        return DerivationState(self.grammar, frames, self.step + 1, result)


def initial_state(spec):
    """The empty derivation: one pending slot of the root type."""
    return DerivationState(spec, (_Frame(None, 0, (), ()),), 0, None)


def candidate_actions(state, source_tokens):
    return state.candidates(source_tokens)


def apply_action(state, action):
    return state.apply(action)


def ast_to_actions(ast, spec):
    """Linearize an AST into its unique action sequence, validating it
    against the grammar along the way."""
    out = []
    _emit(ast, spec.root_type, spec, out)
    return tuple(out)


def _emit(node, expected_type, spec, out):
    if not isinstance(node, AstNode):
        raise TransitionError(f"expected an AstNode of type {expected_type}, got {node!r}")
    ctor = spec.constructor(node.ctor_id)
    if ctor.result_type != expected_type:
        raise TransitionError(f"{ctor.name} produces {ctor.result_type} where {expected_type} is required")
    if len(node.children) != len(ctor.fields):
        raise TransitionError(f"{ctor.name} requires {len(ctor.fields)} fields, got {len(node.children)}")
    out.append(ApplyConstr(ctor.id))
    for fd, value in zip(ctor.fields, node.children):
        if fd.is_primitive:
            if not isinstance(value, tuple):
                raise TransitionError(f"primitive field {ctor.name}.{fd.name} must hold a token tuple")
            for tok in value:
                if not isinstance(tok, str) or not tok:
                    raise TransitionError(f"bad token {tok!r} in {ctor.name}.{fd.name}")
                if tok == FIELD_END:
                    raise TransitionError(f"reserved marker {FIELD_END!r} inside {ctor.name}.{fd.name}")
                out.append(GenToken(tok))
            out.append(GenToken(FIELD_END))
        elif fd.cardinality == SINGLE:
            _emit(value, fd.type, spec, out)
        elif fd.cardinality == OPTIONAL:
            if value is None:
                out.append(REDUCE)
            else:
                _emit(value, fd.type, spec, out)
        else:
            if not isinstance(value, tuple):
                raise TransitionError(f"repeated field {ctor.name}.{fd.name} must hold a tuple")
            for child in value:
                _emit(child, fd.type, spec, out)
            out.append(REDUCE)


def actions_to_ast(actions, spec):
    """Replay an action sequence, returning the finished AST.

    Raises :class:`TransitionError` on the first illegal action (with its
    step index) or if the sequence ends with the derivation incomplete.
    """
    state = initial_state(spec)
    for action in actions:
        state = state.apply(action)
    if not state.complete:
        raise TransitionError(f"incomplete derivation after {state.step} actions")
    return state.result


# --- S-expression serialization ------------------------------------------

_SEXPR_ATOM = {"(", ")", "[", "]"}


def render_sexpr(ast, spec):
    """Render an AST as an S-expression.

    ``(CtorName f1 f2 ...)`` with one form per field: nested expressions
    for composite children, ``none`` for an empty optional field,
    ``[e1 e2 ...]`` for repeated fields, and ``(tok "a" "b")`` for
    primitive token lists.  Tokens are double-quoted; ``"`` and ``\\`` are
    backslash-escaped.
    """
    ctor = spec.constructor(ast.ctor_id)
    parts = [ctor.name]
    for fd, value in zip(ctor.fields, ast.children):
        if fd.is_primitive:
            parts.append("(tok" + "".join(" " + _quote(t) for t in value) + ")")
        elif fd.cardinality == SINGLE:
            parts.append(render_sexpr(value, spec))
        elif fd.cardinality == OPTIONAL:
            parts.append("none" if value is None else render_sexpr(value, spec))
        else:
            parts.append("[" + " ".join(render_sexpr(v, spec) for v in value) + "]")
    return "(" + " ".join(parts) + ")"


def _quote(token):
    return '"' + token.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _tokenize_sexpr(text):
    toks = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in _SEXPR_ATOM:
            toks.append((ch, i))
            i += 1
        elif ch == '"':
            j = i + 1
            buf = []
            while j < n and text[j] != '"':
                if text[j] == "\\":
                    j += 1
                    if j >= n or text[j] not in ('"', "\\"):
                        raise TransitionError(f"bad escape at offset {j} in S-expression")
                buf.append(text[j])
                j += 1
            if j >= n:
                raise TransitionError(f"unterminated string at offset {i}")
            toks.append(("str", "".join(buf), i))
            i = j + 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in _SEXPR_ATOM and text[j] != '"':
                j += 1
            toks.append(("sym", text[i:j], i))
            i = j
    return toks


class _SexprParser:
    def __init__(self, tokens, spec):
        self.tokens = tokens
        self.spec = spec
        self.pos = 0

    def _next(self):
        if self.pos >= len(self.tokens):
            raise TransitionError("unexpected end of S-expression")
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def _expect(self, kind):
        tok = self._next()
        if tok[0] != kind:
            raise TransitionError(f"expected {kind!r} at offset {tok[-1]}, got {tok[0]!r}")
        return tok

    def node(self, expected_type):
        self._expect("(")
        head = self._expect("sym")
        name = head[1]
        try:
            ctor = self.spec.constructor_named(name)
        except GrammarError:
            raise TransitionError(f"unknown constructor {name!r} at offset {head[-1]}") from None
        if ctor.result_type != expected_type:
            raise TransitionError(f"{name} produces {ctor.result_type} where {expected_type} is required")
        children = []
        for fd in ctor.fields:
            children.append(self.field_value(fd))
        self._expect(")")
        return AstNode(ctor.id, tuple(children))

    def field_value(self, fd):
        if fd.is_primitive:
            self._expect("(")
            head = self._expect("sym")
            if head[1] != "tok":
                raise TransitionError(f"expected token list at offset {head[-1]}")
            toks = []
            while self.tokens[self.pos : self.pos + 1] and self.tokens[self.pos][0] == "str":
                toks.append(self._next()[1])
            self._expect(")")
            for t in toks:
                if t == FIELD_END:
                    raise TransitionError(f"reserved marker {FIELD_END!r} in token list")
                if not t:
                    raise TransitionError("empty token in token list")
            return tuple(toks)
        if fd.cardinality == OPTIONAL:
            if self.tokens[self.pos : self.pos + 1] and self.tokens[self.pos][:2] == ("sym", "none"):
                self.pos += 1
                return None
            return self.node(fd.type)
        if fd.cardinality == MULTIPLE:
            self._expect("[")
            items = []
            while self.tokens[self.pos : self.pos + 1] and self.tokens[self.pos][0] == "(":
                items.append(self.node(fd.type))
            self._expect("]")
            return tuple(items)
        return self.node(fd.type)


def parse_sexpr(text, spec):
    """Parse an S-expression into an AST rooted at the grammar's root type."""
    parser = _SexprParser(_tokenize_sexpr(text), spec)
    node = parser.node(spec.root_type)
    if parser.pos != len(parser.tokens):
        tok = parser.tokens[parser.pos]
        raise TransitionError(f"trailing content at offset {tok[-1]}")
    return node
