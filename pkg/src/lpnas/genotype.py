"""Architecture code: grammar, deterministic parser, sampler, GA operators.

A genotype is a token sequence that always parses into a valid single-path
network. The string form is the stable interface used by logs, CSV exports
and the CLI:

    code  := block (";" token)* ";H"
    token := block | pool | drop
    block := "B:" kind fields
    kind  := CA | CBA | CSE | MB | MBN | CSPC | CSPM | DN | RN
    pool  := "P:" ("avg" | "max")
    drop  := "D:" ("0.1" | "0.2")

Block fields, comma-separated and in this order: "k"<1|3|5> for kinds with a
searchable kernel (CA, CBA, CSE, RN), "e"<2|3|4> for the MBConv families
(MB, MBN, CSPM), "c"<width> for every kind, "a"<R|G> for every kind.
Example: "B:CA,k3,c8,aR;P:max;B:MB,e4,c8,aG;H".
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

__all__ = [
    "KINDS",
    "KERNELS",
    "EXPANSIONS",
    "ACTIVATIONS",
    "DROP_RATES",
    "WIDTHS",
    "BlockSpec",
    "PoolToken",
    "DropToken",
    "Token",
    "Genotype",
    "SearchSpaceConfig",
    "GenotypeError",
    "GenotypeSyntaxError",
    "GenotypeValidationError",
    "parse",
    "serialize",
    "validate",
    "sample_random",
    "mutate",
    "crossover",
]

KINDS = ("CA", "CBA", "CSE", "MB", "MBN", "CSPC", "CSPM", "DN", "RN")
KERNEL_KINDS = ("CA", "CBA", "CSE", "RN")
EXPANSION_KINDS = ("MB", "MBN", "CSPM")
KERNELS = (1, 3, 5)
EXPANSIONS = (2, 3, 4)
ACTIVATIONS = ("relu", "gelu")
DROP_RATES = (0.1, 0.2)

WIDTHS = {
    "CA": (4, 8, 12, 16, 20, 24),
    "CBA": (4, 8, 12, 16, 20, 24),
    "CSE": (4, 8, 12, 16, 20, 24),
    "RN": (4, 8, 12, 16, 20, 24),
    "MB": (4, 8, 12, 16),
    "MBN": (4, 8, 12, 16),
    "CSPM": (4, 8, 12, 16),
    "CSPC": (4, 8, 12, 16, 20, 24),
    "DN": (4, 8, 12),
}

_ACT_CODE = {"relu": "R", "gelu": "G"}
_ACT_FROM_CODE = {"R": "relu", "G": "gelu"}


class GenotypeError(ValueError):
    pass


class GenotypeSyntaxError(GenotypeError):
    """Malformed code string; `position` is the character offset."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at position {position})")


class GenotypeValidationError(GenotypeError):
    """Structurally well-formed but semantically invalid genotype."""

    def __init__(self, violations: Sequence[str]):
        self.violations = tuple(violations)
        super().__init__("invalid genotype: " + ", ".join(self.violations))


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    width: int
    activation: str
    kernel: Optional[int] = None
    expansion: Optional[int] = None


@dataclass(frozen=True)
class PoolToken:
    kind: str  # "avg" | "max"


@dataclass(frozen=True)
class DropToken:
    rate: float  # 0.1 | 0.2


Token = Union[BlockSpec, PoolToken, DropToken]


@dataclass(frozen=True)
class Genotype:
    tokens: tuple

    def blocks(self) -> list[BlockSpec]:
        return [t for t in self.tokens if isinstance(t, BlockSpec)]

    def pool_count(self) -> int:
        return sum(1 for t in self.tokens if isinstance(t, PoolToken))

    def __str__(self) -> str:
        return serialize(self)


@dataclass(frozen=True)
class SearchSpaceConfig:
    m_n: int = 6
    kinds: tuple = KINDS
    max_pools: int = 3
    widths: dict = field(default_factory=lambda: dict(WIDTHS))
    kernels: tuple = KERNELS
    expansions: tuple = EXPANSIONS
    drop_rates: tuple = DROP_RATES
    pool_prob: float = 0.3
    drop_prob: float = 0.2
    c_max: Optional[int] = None

    def __post_init__(self):
        if self.m_n < 1:
            raise ValueError("m_n must be >= 1")
        if not self.kinds:
            raise ValueError("kinds must be non-empty")
        for kind in self.kinds:
            if not self.widths.get(kind):
                raise ValueError(f"empty width range for kind {kind!r}")


DEFAULT_SPACE = SearchSpaceConfig()


# ---------------------------------------------------------------------------
# serialization


def _serialize_token(token: Token) -> str:
    if isinstance(token, BlockSpec):
        parts = [f"B:{token.kind}"]
        if token.kind in KERNEL_KINDS:
            parts.append(f"k{token.kernel}")
        if token.kind in EXPANSION_KINDS:
            parts.append(f"e{token.expansion}")
        parts.append(f"c{token.width}")
        parts.append(f"a{_ACT_CODE[token.activation]}")
        return ",".join(parts)
    if isinstance(token, PoolToken):
        return f"P:{token.kind}"
    if isinstance(token, DropToken):
        return f"D:{token.rate}"
    raise TypeError(f"unknown token {token!r}")


def serialize(g: Genotype) -> str:
    return ";".join([_serialize_token(t) for t in g.tokens] + ["H"])


def _parse_int_field(text: str, prefix: str, allowed: Optional[tuple], pos: int, label: str) -> int:
    body = text[len(prefix):]
    if not body.isdigit():
        raise GenotypeSyntaxError(f"expected integer after {prefix!r} in {label}", pos)
    value = int(body)
    if allowed is not None and value not in allowed:
        raise GenotypeSyntaxError(f"{label} value {value} not in {allowed}", pos)
    return value


def _parse_block(text: str, pos: int) -> BlockSpec:
    fields = text.split(",")
    kind = fields[0][2:]
    if kind not in KINDS:
        raise GenotypeSyntaxError(f"unknown block kind {kind!r}", pos)
    expected = ["k"] if kind in KERNEL_KINDS else []
    if kind in EXPANSION_KINDS:
        expected.append("e")
    expected += ["c", "a"]
    got = fields[1:]
    if len(got) != len(expected):
        raise GenotypeSyntaxError(
            f"kind {kind} takes fields {expected}, got {len(got)} fields", pos)
    kernel = expansion = None
    width = None
    act = None
    offset = pos + len(fields[0]) + 1
    for key, item in zip(expected, got):
        if not item.startswith(key):
            raise GenotypeSyntaxError(f"expected {key!r}-field, got {item!r}", offset)
        if key == "k":
            kernel = _parse_int_field(item, "k", KERNELS, offset, "k-field")
        elif key == "e":
            expansion = _parse_int_field(item, "e", EXPANSIONS, offset, "e-field")
        elif key == "c":
            width = _parse_int_field(item, "c", WIDTHS[kind], offset, "c-field")
        else:
            code = item[1:]
            if code not in _ACT_FROM_CODE:
                raise GenotypeSyntaxError(f"a-field value {code!r} not in ('R', 'G')", offset)
            act = _ACT_FROM_CODE[code]
        offset += len(item) + 1
    return BlockSpec(kind=kind, width=width, activation=act, kernel=kernel, expansion=expansion)


def parse(code: str, config: SearchSpaceConfig = DEFAULT_SPACE) -> Genotype:
    """Parse a code string; syntax errors carry the character position,
    semantic violations raise a distinct validation error."""
    if not code:
        raise GenotypeSyntaxError("empty code", 0)
    parts = code.split(";")
    if parts[-1] != "H":
        raise GenotypeSyntaxError("code must end with the 'H' head marker",
                                  len(code) - len(parts[-1]))
    tokens: list[Token] = []
    pos = 0
    for part in parts[:-1]:
        if part.startswith("B:"):
            tokens.append(_parse_block(part, pos))
        elif part.startswith("P:"):
            kind = part[2:]
            if kind not in ("avg", "max"):
                raise GenotypeSyntaxError(f"pool kind {kind!r} not in ('avg', 'max')", pos)
            tokens.append(PoolToken(kind))
        elif part.startswith("D:"):
            body = part[2:]
            if body not in ("0.1", "0.2"):
                raise GenotypeSyntaxError(f"dropout rate {body!r} not in ('0.1', '0.2')", pos)
            tokens.append(DropToken(float(body)))
        else:
            raise GenotypeSyntaxError(f"unknown token {part!r}", pos)
        pos += len(part) + 1
    g = Genotype(tuple(tokens))
    violations = validate(g, config)
    if violations:
        raise GenotypeValidationError(violations)
    return g


# ---------------------------------------------------------------------------
# validation


def validate(g: Genotype, config: SearchSpaceConfig = DEFAULT_SPACE) -> list[str]:
    """Return the list of violations; empty means valid."""
    violations = []
    blocks = g.blocks()
    if not blocks:
        violations.append("block_count: no learnable blocks")
    elif len(blocks) > config.m_n:
        violations.append(f"block_count: {len(blocks)} > {config.m_n}")
    if g.tokens and not isinstance(g.tokens[0], BlockSpec):
        violations.append("leading_structural: code must start with a block")
    pools = g.pool_count()
    if pools > config.max_pools:
        violations.append(f"pool_count: {pools} > {config.max_pools}")
    # at most one pool token between consecutive learnable blocks
    gap_pools = 0
    for tok in g.tokens:
        if isinstance(tok, BlockSpec):
            gap_pools = 0
        elif isinstance(tok, PoolToken):
            gap_pools += 1
            if gap_pools > 1:
                violations.append("pool_spacing: more than one pool between blocks")
                break
    for b in blocks:
        if b.width not in config.widths.get(b.kind, ()):
            violations.append(f"width_range: {b.kind} width {b.width}")
        if b.kind in KERNEL_KINDS and b.kernel not in config.kernels:
            violations.append(f"kernel_range: {b.kind} kernel {b.kernel}")
        if b.kind in EXPANSION_KINDS and b.expansion not in config.expansions:
            violations.append(f"expansion_range: {b.kind} expansion {b.expansion}")
    if config.c_max is not None and not violations:
        from .blocks import build_network, param_count

        if param_count(build_network(g)) > config.c_max:
            violations.append(f"param_cap: exceeds C_max={config.c_max}")
    return violations


# ---------------------------------------------------------------------------
# sampling


def _sample_block(config: SearchSpaceConfig, rng: np.random.Generator) -> BlockSpec:
    kind = config.kinds[rng.integers(0, len(config.kinds))]
    widths = config.widths[kind]
    return BlockSpec(
        kind=kind,
        width=int(widths[rng.integers(0, len(widths))]),
        activation=ACTIVATIONS[rng.integers(0, len(ACTIVATIONS))],
        kernel=int(config.kernels[rng.integers(0, len(config.kernels))]) if kind in KERNEL_KINDS else None,
        expansion=int(config.expansions[rng.integers(0, len(config.expansions))]) if kind in EXPANSION_KINDS else None,
    )


def sample_random(config: SearchSpaceConfig, rng: np.random.Generator) -> Genotype:
    """Uniform draw: U{1..m_n} blocks, per-kind uniform hyperparameters, then
    a pool with probability pool_prob (while under the cap) and a dropout
    token with probability drop_prob after each block."""
    n_blocks = int(rng.integers(1, config.m_n + 1))
    tokens: list[Token] = []
    pools = 0
    for _ in range(n_blocks):
        tokens.append(_sample_block(config, rng))
        if pools < config.max_pools and rng.random() < config.pool_prob:
            tokens.append(PoolToken("avg" if rng.random() < 0.5 else "max"))
            pools += 1
        if rng.random() < config.drop_prob:
            rate = config.drop_rates[rng.integers(0, len(config.drop_rates))]
            tokens.append(DropToken(float(rate)))
    return Genotype(tuple(tokens))


# ---------------------------------------------------------------------------
# genetic operators


def _repair(tokens: list[Token], config: SearchSpaceConfig) -> list[Token]:
    """Deterministic tail-truncation repair: drop leading structural tokens,
    excess blocks (with their trailing tokens), per-gap duplicate pools, and
    excess pools from the tail."""
    while tokens and not isinstance(tokens[0], BlockSpec):
        tokens.pop(0)
    if not tokens:
        raise GenotypeError("repair produced an empty genotype")
    # truncate blocks beyond the cap (each block owns its trailing tokens)
    kept: list[Token] = []
    blocks = 0
    for tok in tokens:
        if isinstance(tok, BlockSpec):
            blocks += 1
            if blocks > config.m_n:
                break
        kept.append(tok)
    # one pool per gap
    out: list[Token] = []
    gap_has_pool = False
    for tok in kept:
        if isinstance(tok, BlockSpec):
            gap_has_pool = False
        elif isinstance(tok, PoolToken):
            if gap_has_pool:
                continue
            gap_has_pool = True
        out.append(tok)
    # total pool cap, dropping from the tail
    excess = sum(1 for t in out if isinstance(t, PoolToken)) - config.max_pools
    if excess > 0:
        for i in range(len(out) - 1, -1, -1):
            if excess == 0:
                break
            if isinstance(out[i], PoolToken):
                del out[i]
                excess -= 1
    return out


def _resample_field(block: BlockSpec, config: SearchSpaceConfig, rng: np.random.Generator) -> BlockSpec:
    fields = ["width", "activation"]
    if block.kind in KERNEL_KINDS:
        fields.append("kernel")
    if block.kind in EXPANSION_KINDS:
        fields.append("expansion")
    pick = fields[rng.integers(0, len(fields))]
    if pick == "width":
        widths = config.widths[block.kind]
        return replace(block, width=int(widths[rng.integers(0, len(widths))]))
    if pick == "activation":
        return replace(block, activation=ACTIVATIONS[rng.integers(0, len(ACTIVATIONS))])
    if pick == "kernel":
        return replace(block, kernel=int(config.kernels[rng.integers(0, len(config.kernels))]))
    return replace(block, expansion=int(config.expansions[rng.integers(0, len(config.expansions))]))


def _swap_kind(block: BlockSpec, config: SearchSpaceConfig, rng: np.random.Generator) -> BlockSpec:
    others = [k for k in config.kinds if k != block.kind] or list(config.kinds)
    kind = others[rng.integers(0, len(others))]
    widths = config.widths[kind]
    return BlockSpec(
        kind=kind,
        width=int(widths[rng.integers(0, len(widths))]),
        activation=block.activation,
        kernel=int(config.kernels[rng.integers(0, len(config.kernels))]) if kind in KERNEL_KINDS else None,
        expansion=int(config.expansions[rng.integers(0, len(config.expansions))]) if kind in EXPANSION_KINDS else None,
    )


def _structural(config: SearchSpaceConfig) -> SearchSpaceConfig:
    """Config without the parameter cap; closure of the genetic operators is
    structural (the cap is enforced at candidate-admission time instead)."""
    return config if config.c_max is None else replace(config, c_max=None)


def mutate(g: Genotype, p_mut: float, rng: np.random.Generator,
           config: SearchSpaceConfig = DEFAULT_SPACE, edit_log: Optional[list] = None) -> Genotype:
    """Independently edit each token with probability p_mut.

    Block edits: resample one hyperparameter, swap the kind (resampling
    kind-specific fields), insert a freshly sampled block after (under the
    block cap), or delete the block (keeping at least one). Structural tokens
    toggle their parameter, accept a block insertion, or are deleted.
    """
    tokens = list(g.tokens)
    out: list[Token] = []

    def live_blocks(idx: int, include_current: bool) -> int:
        done = sum(1 for t in out if isinstance(t, BlockSpec))
        todo = sum(1 for t in tokens[idx + 1:] if isinstance(t, BlockSpec))
        return done + todo + (1 if include_current else 0)

    for idx, tok in enumerate(tokens):
        if rng.random() >= p_mut:
            out.append(tok)
            continue
        is_block = isinstance(tok, BlockSpec)
        total = live_blocks(idx, include_current=is_block)
        if is_block:
            edits = ["resample", "swap"]
            if total < config.m_n:
                edits.append("insert")
            if total > 1:
                edits.append("delete")
        else:
            edits = ["toggle", "delete"]
            if total < config.m_n:
                edits.append("insert")
        edit = edits[rng.integers(0, len(edits))]
        if edit == "resample":
            out.append(_resample_field(tok, config, rng))
        elif edit == "swap":
            out.append(_swap_kind(tok, config, rng))
        elif edit == "insert":
            out.append(tok)
            out.append(_sample_block(config, rng))
        elif edit == "toggle":
            if isinstance(tok, PoolToken):
                out.append(PoolToken("avg" if tok.kind == "max" else "max"))
            else:
                out.append(DropToken(0.2 if tok.rate == 0.1 else 0.1))
        # "delete" appends nothing
        if edit_log is not None:
            edit_log.append((idx, edit))
    repaired = Genotype(tuple(_repair(out, config)))
    assert not validate(repaired, _structural(config)), "mutation repair failed"
    return repaired


def _block_groups(g: Genotype) -> list[list[Token]]:
    """Blocks with their trailing structural tokens."""
    groups: list[list[Token]] = []
    for tok in g.tokens:
        if isinstance(tok, BlockSpec):
            groups.append([tok])
        else:
            groups[-1].append(tok)
    return groups


def crossover(a: Genotype, b: Genotype, rng: np.random.Generator,
              config: SearchSpaceConfig = DEFAULT_SPACE) -> tuple[Genotype, Genotype]:
    """Single-point crossover at a learnable-block boundary.

    One cut index is drawn in 0..min(block counts) and applied to both
    parents, so children always keep between one and m_n blocks; only the
    total pool budget can overflow and is repaired from the tail.
    """
    ga, gb = _block_groups(a), _block_groups(b)
    cut = int(rng.integers(0, min(len(ga), len(gb)) + 1))
    child1 = [t for grp in ga[:cut] + gb[cut:] for t in grp]
    child2 = [t for grp in gb[:cut] + ga[cut:] for t in grp]
    out1 = Genotype(tuple(_repair(child1, config)))
    out2 = Genotype(tuple(_repair(child2, config)))
    structural = _structural(config)
    assert not validate(out1, structural) and not validate(out2, structural), "crossover repair failed"
    return out1, out2
