"""Joint data/architecture search space.

A candidate is a pair (BgmSpec, ArchitectureEncoding): per-group batch
composition ratios plus a linear array of convolutional blocks. Candidates
are addressed by flat integer token sequences; this module owns the token
schema and the bijection between token sequences and candidates (up to the
normalization of ignored hyperparameter slots).
"""

from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence

from .errors import ConfigError, ConstraintError, PresetNotFoundError, SchemaError, SizeError

SENTINEL = 0  # normalized value for ignored ch2/ch3/kernel slots

RATIO_TOL = 1e-9


class BlockType(str, Enum):
    MB = "MB"  # inverted-residual: 1x1 expand, depthwise, 1x1 project
    DB = "DB"  # depthwise-separable: depthwise, 1x1 project
    RB = "RB"  # two convs with a shortcut
    CB = "CB"  # two plain convs
    SKIP = "SKIP"


ALL_BLOCK_TYPES = (BlockType.MB, BlockType.DB, BlockType.RB, BlockType.CB, BlockType.SKIP)


@dataclass(frozen=True)
class BlockChoice:
    block_type: BlockType
    ch2: int = SENTINEL
    ch3: int = SENTINEL
    kernel: int = SENTINEL

    def __post_init__(self):
        if self.block_type is BlockType.SKIP:
            if (self.ch2, self.ch3, self.kernel) != (SENTINEL, SENTINEL, SENTINEL):
                raise ConfigError("SKIP blocks carry no hyperparameters")
            return
        if self.ch3 <= 0:
            raise ConfigError(f"{self.block_type.value} block needs ch3 > 0")
        if self.kernel <= 0 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be a positive odd size, got {self.kernel}")
        if self.block_type is BlockType.DB:
            if self.ch2 != SENTINEL:
                raise ConfigError("DB blocks have no ch2 hyperparameter")
        elif self.ch2 <= 0:
            raise ConfigError(f"{self.block_type.value} block needs ch2 > 0")

    @property
    def is_skip(self) -> bool:
        return self.block_type is BlockType.SKIP


def make_block(block_type: BlockType, ch2: int, ch3: int, kernel: int) -> BlockChoice:
    """Build a BlockChoice, normalizing ignored slots to sentinels."""
    if block_type is BlockType.SKIP:
        return BlockChoice(BlockType.SKIP)
    if block_type is BlockType.DB:
        return BlockChoice(BlockType.DB, SENTINEL, ch3, kernel)
    return BlockChoice(block_type, ch2, ch3, kernel)


@dataclass(frozen=True)
class ArchitectureEncoding:
    blocks: tuple[BlockChoice, ...]
    stem_channels: int
    num_classes: int

    def __post_init__(self):
        if self.stem_channels <= 0:
            raise ConfigError("stem_channels must be positive")
        if self.num_classes <= 0:
            raise ConfigError("num_classes must be positive")
        if all(b.is_skip for b in self.blocks):
            raise ConstraintError("at least one block must be non-SKIP")

    def input_channels(self) -> tuple[int, ...]:
        """Effective CH1 of each block: the nearest preceding non-SKIP CH3,
        or stem_channels for the first non-SKIP block."""
        ch1 = []
        current = self.stem_channels
        for b in self.blocks:
            ch1.append(current)
            if not b.is_skip:
                current = b.ch3
        return tuple(ch1)

    @property
    def out_channels(self) -> int:
        return self.input_channels()[-1] if self.blocks[-1].is_skip else self.blocks[-1].ch3


@dataclass(frozen=True)
class BgmSpec:
    """Per-group batch composition ratios, summing to one."""

    ratios: tuple[float, ...]

    def __post_init__(self):
        if not self.ratios:
            raise ConfigError("BgmSpec needs at least one group ratio")
        if any(r <= 0 or r > 1 for r in self.ratios):
            raise ConfigError(f"ratios must lie in (0, 1]: {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > RATIO_TOL:
            raise ConfigError(f"ratios must sum to 1, got {sum(self.ratios)!r}")

    @classmethod
    def normalized(cls, raw: Sequence[float]) -> "BgmSpec":
        total = sum(raw)
        if total <= 0:
            raise ConfigError("ratios must have a positive sum")
        return cls(tuple(r / total for r in raw))


def validate_ratio_ordering(ratios: Sequence[float], group_sizes: Sequence[int]) -> None:
    """Enforce: smaller groups never get a larger batch share than bigger ones."""
    if len(ratios) != len(group_sizes):
        raise ConstraintError(
            f"{len(ratios)} ratios for {len(group_sizes)} groups"
        )
    for i, j in itertools.combinations(range(len(ratios)), 2):
        small, big = (i, j) if group_sizes[i] <= group_sizes[j] else (j, i)
        if group_sizes[small] == group_sizes[big]:
            continue  # equal sizes permit any ordering
        if ratios[small] > ratios[big] + RATIO_TOL:
            raise ConstraintError(
                f"group {small} (|D|={group_sizes[small]}) has ratio "
                f"{ratios[small]} > {ratios[big]} of larger group {big} "
                f"(|D|={group_sizes[big]})"
            )


DEFAULT_MINORITY_FRACTIONS = (0.125, 0.25, 0.375, 0.5)


def default_ratio_candidates(
    group_sizes: Sequence[int],
    minority_fractions: Sequence[float] = DEFAULT_MINORITY_FRACTIONS,
) -> tuple[tuple[float, ...], ...]:
    """Default two-group ratio grid: the size-proportional point plus a few
    fixed minority shares up to the balanced 0.5."""
    if len(group_sizes) != 2:
        raise ConfigError("default ratio grid is defined for two groups")
    total = sum(group_sizes)
    minority = 0 if group_sizes[0] <= group_sizes[1] else 1
    fractions = [group_sizes[minority] / total]
    fractions.extend(minority_fractions)
    candidates = []
    for f in fractions:
        ratios = [0.0, 0.0]
        ratios[minority] = f
        ratios[1 - minority] = 1.0 - f
        candidate = tuple(ratios)
        if candidate not in candidates:
            candidates.append(candidate)
    return tuple(candidates)


@dataclass(frozen=True)
class SearchSpaceConfig:
    depth: int = 6
    channel_choices: tuple[int, ...] = (8, 16)
    kernel_choices: tuple[int, ...] = (3, 5)
    ratio_candidates: tuple[tuple[float, ...], ...] = ((0.5, 0.5),)
    num_groups: int = 2
    num_classes: int = 2
    input_size: int = 8
    input_channels: int = 1
    stem_channels: int = 8
    block_types: tuple[BlockType, ...] = ALL_BLOCK_TYPES

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        for name in ("channel_choices", "kernel_choices", "ratio_candidates", "block_types"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be non-empty")
        if any(c <= 0 for c in self.channel_choices):
            raise ConfigError("channel choices must be positive")
        if any(k <= 0 or k % 2 == 0 for k in self.kernel_choices):
            raise ConfigError("kernel choices must be positive and odd")
        for ratios in self.ratio_candidates:
            if len(ratios) != self.num_groups:
                raise ConfigError(
                    f"ratio candidate {ratios} has {len(ratios)} entries for "
                    f"{self.num_groups} groups"
                )
            BgmSpec(tuple(ratios))  # sum/positivity check

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpaceConfig":
        kwargs = dict(d)
        if "block_types" in kwargs:
            kwargs["block_types"] = tuple(BlockType(t) for t in kwargs["block_types"])
        for key in ("channel_choices", "kernel_choices"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if "ratio_candidates" in kwargs:
            kwargs["ratio_candidates"] = tuple(tuple(r) for r in kwargs["ratio_candidates"])
        unknown = set(kwargs) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown search-space keys: {sorted(unknown)}")
        return cls(**kwargs)


@dataclass(frozen=True)
class TokenSchema:
    """Flat token layout: [ratio, (type, ch2, ch3, kernel) x depth].

    With `group_sizes` given, ratio candidates violating the size-ordering
    constraint are dropped up front so a controller never samples them.
    """

    slot_names: tuple[str, ...]
    slot_sizes: tuple[int, ...]
    ratio_candidates: tuple[tuple[float, ...], ...]
    cfg: SearchSpaceConfig = field(repr=False)

    @classmethod
    def build(cls, cfg: SearchSpaceConfig, group_sizes: Sequence[int] | None = None) -> "TokenSchema":
        ratios = cfg.ratio_candidates
        if group_sizes is not None:
            kept = []
            for cand in ratios:
                try:
                    validate_ratio_ordering(cand, group_sizes)
                except ConstraintError:
                    continue
                kept.append(cand)
            if not kept:
                raise ConfigError(
                    "no ratio candidate satisfies the size-ordering constraint "
                    f"for group sizes {tuple(group_sizes)}"
                )
            ratios = tuple(kept)
        names = ["ratio"]
        sizes = [len(ratios)]
        for b in range(cfg.depth):
            names += [f"b{b}.type", f"b{b}.ch2", f"b{b}.ch3", f"b{b}.kernel"]
            sizes += [
                len(cfg.block_types),
                len(cfg.channel_choices),
                len(cfg.channel_choices),
                len(cfg.kernel_choices),
            ]
        return cls(tuple(names), tuple(sizes), ratios, cfg)

    def __len__(self) -> int:
        return len(self.slot_sizes)


def decode_tokens(
    tokens: Sequence[int],
    cfg: SearchSpaceConfig,
    group_sizes: Sequence[int],
    schema: TokenSchema | None = None,
) -> tuple[BgmSpec, ArchitectureEncoding]:
    """Map a token sequence to a validated (BgmSpec, ArchitectureEncoding)."""
    if schema is None:
        schema = TokenSchema.build(cfg)
    if len(tokens) != len(schema):
        raise SchemaError(f"expected {len(schema)} tokens, got {len(tokens)}")
    for t, (name, size) in zip(tokens, zip(schema.slot_names, schema.slot_sizes)):
        if not 0 <= t < size:
            raise SchemaError(f"token {t} out of range [0, {size}) for slot {name}")

    raw = schema.ratio_candidates[tokens[0]]
    bgm = BgmSpec.normalized(raw)
    validate_ratio_ordering(bgm.ratios, group_sizes)

    blocks = []
    for b in range(cfg.depth):
        t_type, t_ch2, t_ch3, t_k = tokens[1 + 4 * b : 5 + 4 * b]
        btype = cfg.block_types[t_type]
        blocks.append(
            make_block(
                btype,
                cfg.channel_choices[t_ch2],
                cfg.channel_choices[t_ch3],
                cfg.kernel_choices[t_k],
            )
        )
    enc = ArchitectureEncoding(tuple(blocks), cfg.stem_channels, cfg.num_classes)
    return bgm, enc


def encode_tokens(
    bgm: BgmSpec,
    enc: ArchitectureEncoding,
    cfg: SearchSpaceConfig,
    schema: TokenSchema | None = None,
) -> tuple[int, ...]:
    """Inverse of decode_tokens; ignored hyperparameter slots encode as 0."""
    if schema is None:
        schema = TokenSchema.build(cfg)
    ratio_idx = None
    for i, cand in enumerate(schema.ratio_candidates):
        if all(abs(a - b) <= RATIO_TOL for a, b in zip(BgmSpec.normalized(cand).ratios, bgm.ratios)):
            ratio_idx = i
            break
    if ratio_idx is None:
        raise SchemaError(f"ratios {bgm.ratios} not in the candidate grid")
    tokens = [ratio_idx]
    for b in enc.blocks:
        tokens.append(cfg.block_types.index(b.block_type))
        tokens.append(0 if b.ch2 == SENTINEL else cfg.channel_choices.index(b.ch2))
        tokens.append(0 if b.ch3 == SENTINEL else cfg.channel_choices.index(b.ch3))
        tokens.append(0 if b.kernel == SENTINEL else cfg.kernel_choices.index(b.kernel))
    return tuple(tokens)


def _block_combos(cfg: SearchSpaceConfig) -> list[BlockChoice]:
    combos = []
    for btype in cfg.block_types:
        if btype is BlockType.SKIP:
            combos.append(BlockChoice(BlockType.SKIP))
        elif btype is BlockType.DB:
            combos.extend(
                make_block(btype, SENTINEL, ch3, k)
                for ch3 in cfg.channel_choices
                for k in cfg.kernel_choices
            )
        else:
            combos.extend(
                make_block(btype, ch2, ch3, k)
                for ch2 in cfg.channel_choices
                for ch3 in cfg.channel_choices
                for k in cfg.kernel_choices
            )
    return combos


MAX_SPACE = 2**63 - 1


def enumerate_space(cfg: SearchSpaceConfig, group_sizes: Sequence[int]) -> int:
    """Exact count of distinct valid (BgmSpec, ArchitectureEncoding) pairs."""
    schema = TokenSchema.build(cfg, group_sizes)
    per_block = len(_block_combos(cfg))
    archs = per_block**cfg.depth
    if BlockType.SKIP in cfg.block_types:
        archs -= 1  # the all-SKIP point is invalid
    count = len(schema.ratio_candidates) * archs
    if count > MAX_SPACE:
        raise SizeError(f"search space size {count} exceeds {MAX_SPACE}")
    return count


def iter_space(
    cfg: SearchSpaceConfig, group_sizes: Sequence[int]
) -> Iterator[tuple[BgmSpec, ArchitectureEncoding]]:
    """Yield every valid pair; intended for small spaces and oracles."""
    schema = TokenSchema.build(cfg, group_sizes)
    combos = _block_combos(cfg)
    for raw in schema.ratio_candidates:
        bgm = BgmSpec.normalized(raw)
        for blocks in itertools.product(combos, repeat=cfg.depth):
            if all(b.is_skip for b in blocks):
                continue
            yield bgm, ArchitectureEncoding(tuple(blocks), cfg.stem_channels, cfg.num_classes)


def _median_channel(cfg: SearchSpaceConfig) -> int:
    choices = sorted(cfg.channel_choices)
    return choices[(len(choices) - 1) // 2]


def fixed_point(name: str, cfg: SearchSpaceConfig) -> ArchitectureEncoding:
    """Named preset encodings used as fixed search-space points in ablations.

    Presets take the median channel candidate and the largest kernel; a
    1x1-only network cannot pick up spatial structure, so the smallest
    kernel would make these baselines meaningless in spaces that allow it.
    """
    ch = _median_channel(cfg)
    k = max(cfg.kernel_choices)
    presets = {
        "all-CB": [BlockType.CB] * cfg.depth,
        "all-MB": [BlockType.MB] * cfg.depth,
        "all-DB": [BlockType.DB] * cfg.depth,
        "alt-RB-CB": [(BlockType.RB if i % 2 == 0 else BlockType.CB) for i in range(cfg.depth)],
    }
    if name not in presets:
        raise PresetNotFoundError(f"unknown fixed point {name!r}; known: {sorted(presets)}")
    blocks = tuple(make_block(t, ch, ch, k) for t in presets[name])
    return ArchitectureEncoding(blocks, cfg.stem_channels, cfg.num_classes)


def encoding_text(enc: ArchitectureEncoding) -> str:
    parts = []
    for b in enc.blocks:
        if b.is_skip:
            parts.append("SKIP")
        elif b.block_type is BlockType.DB:
            parts.append(f"DB(ch3={b.ch3},k={b.kernel})")
        else:
            parts.append(f"{b.block_type.value}(ch2={b.ch2},ch3={b.ch3},k={b.kernel})")
    return f"blocks=[{','.join(parts)}]"


def canonical_text(bgm: BgmSpec, enc: ArchitectureEncoding) -> str:
    """Canonical text form for trace files and surrogate-table keys."""
    ratios = ",".join(repr(r) for r in bgm.ratios)
    return f"{encoding_text(enc)};ratios=[{ratios}]"


_BLOCK_RE = re.compile(r"(MB|DB|RB|CB)\((?:ch2=(\d+),)?ch3=(\d+),k=(\d+)\)|SKIP")


def parse_canonical(text: str, stem_channels: int, num_classes: int) -> tuple[BgmSpec, ArchitectureEncoding]:
    """Inverse of canonical_text."""
    m = re.fullmatch(r"blocks=\[(.*)\];ratios=\[(.*)\]", text)
    if m is None:
        raise SchemaError(f"unparseable canonical form: {text!r}")
    blocks = []
    pos = 0
    body = m.group(1)
    while pos < len(body):
        bm = _BLOCK_RE.match(body, pos)
        if bm is None:
            raise SchemaError(f"bad block at offset {pos} in {body!r}")
        if bm.group(0) == "SKIP":
            blocks.append(BlockChoice(BlockType.SKIP))
        else:
            btype = BlockType(bm.group(1))
            ch2 = int(bm.group(2)) if bm.group(2) else SENTINEL
            blocks.append(make_block(btype, ch2, int(bm.group(3)), int(bm.group(4))))
        pos = bm.end()
        if pos < len(body):
            if body[pos] != ",":
                raise SchemaError(f"expected ',' at offset {pos} in {body!r}")
            pos += 1
    ratios = tuple(float(r) for r in m.group(2).split(","))
    enc = ArchitectureEncoding(tuple(blocks), stem_channels, num_classes)
    return BgmSpec(ratios), enc
