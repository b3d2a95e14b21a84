"""Shared helpers for the test suite: random grammars, random ASTs, and
random derivation prefixes, all driven by a numpy Generator so every test
run is reproducible from its seed."""

import numpy as np

from granorm.grammar import FIELD_END, SINGLE, OPTIONAL, MULTIPLE, parse_grammar
from granorm import transition

TOKEN_POOL = ("a", "b", "c", "dd", "ee")
SOURCE_POOL = ("a", "b", "zz", "ww", "c")


def random_grammar(rng, n_types=3, n_extra_ctors=4):
    """A random grammar in which every type is finitely completable.

    Each type gets one base constructor with at most one primitive field,
    then ``n_extra_ctors`` constructors with random field types and
    cardinalities are sprinkled across the types.
    """
    types = [f"T{i}" for i in range(n_types)]
    lines = ["root T0"]
    for t in types:
        if rng.integers(2):
            lines.append(f"{t} = {t}Base(token v)")
        else:
            lines.append(f"{t} = {t}Base()")
    for k in range(n_extra_ctors):
        t = types[int(rng.integers(n_types))]
        n_fields = int(rng.integers(1, 4))
        fields = []
        for j in range(n_fields):
            kind = int(rng.integers(4))
            if kind == 0:
                fields.append(f"token f{j}")
            else:
                ft = types[int(rng.integers(n_types))]
                card = ("", "?", "*")[int(rng.integers(3))]
                fields.append(f"{ft}{card} f{j}")
        lines.append(f"{t} = C{k}{t}({', '.join(fields)})")
    spec = parse_grammar("\n".join(lines))
    return spec.with_token_vocab((FIELD_END,) + TOKEN_POOL)


def min_depths(spec):
    """Fixpoint of the minimum completion depth of each composite type.

    A constructor's depth is 1 plus the worst depth among its required
    (single-cardinality) composite fields; optional and repeated fields
    can always be left empty.
    """
    INF = 10**9
    depth = {t: INF for t in spec.composite_types}
    changed = True
    while changed:
        changed = False
        for c in spec.constructors:
            d = 1
            feasible = True
            for fd in c.fields:
                if fd.is_primitive or fd.cardinality != SINGLE:
                    continue
                if depth[fd.type] >= INF:
                    feasible = False
                    break
                d = max(d, depth[fd.type] + 1)
            if feasible and d < depth[c.result_type]:
                depth[c.result_type] = d
                changed = True
    return depth


def random_ast(spec, rng, type_name=None, depth=4, token_pool=TOKEN_POOL):
    """Sample a random AST of the given type, shrinking to the cheapest
    constructors once the depth budget runs out."""
    if type_name is None:
        type_name = spec.root_type
    depths = min_depths(spec)
    return _random_node(spec, rng, type_name, depth, depths, token_pool)


def _random_node(spec, rng, type_name, depth, depths, token_pool):
    ctors = spec.constructors_of(type_name)

    def ctor_depth(c):
        need = [depths[fd.type] for fd in c.fields
                if not fd.is_primitive and fd.cardinality == SINGLE]
        return 1 + max(need, default=0)

    affordable = [c for c in ctors if ctor_depth(c) <= depth]
    if not affordable:
        cheapest = min(ctor_depth(c) for c in ctors)
        affordable = [c for c in ctors if ctor_depth(c) == cheapest]
    ctor = affordable[int(rng.integers(len(affordable)))]
    children = []
    for fd in ctor.fields:
        if fd.is_primitive:
            k = int(rng.integers(0, 3))
            children.append(tuple(token_pool[int(rng.integers(len(token_pool)))]
                                  for _ in range(k)))
        elif fd.cardinality == SINGLE:
            children.append(_random_node(spec, rng, fd.type, depth - 1, depths, token_pool))
        elif fd.cardinality == OPTIONAL:
            if depth > 1 and rng.integers(2):
                children.append(_random_node(spec, rng, fd.type, depth - 1, depths, token_pool))
            else:
                children.append(None)
        else:
            n = int(rng.integers(0, 3)) if depth > 1 else 0
            children.append(tuple(_random_node(spec, rng, fd.type, depth - 1, depths, token_pool)
                                  for _ in range(n)))
    return transition.AstNode(ctor.id, tuple(children))


def random_actions(spec, rng, depth=4, token_pool=TOKEN_POOL):
    return transition.ast_to_actions(random_ast(spec, rng, depth=depth, token_pool=token_pool), spec)


def random_state(spec, rng, depth=4, token_pool=TOKEN_POOL):
    """A random non-final derivation state: a strict prefix of a random
    complete derivation, replayed step by step."""
    actions = random_actions(spec, rng, depth=depth, token_pool=token_pool)
    cut = int(rng.integers(0, len(actions)))
    state = transition.initial_state(spec)
    for action in actions[:cut]:
        state = state.apply(action)
    return state


def random_utterance(rng, min_len=1, max_len=5, pool=SOURCE_POOL):
    n = int(rng.integers(min_len, max_len + 1))
    return tuple(pool[int(rng.integers(len(pool)))] for _ in range(n))
