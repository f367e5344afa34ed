"""
Generator search space
----------------------

A cell s is described by the tuple (skip_1 .. skip_s, C, N, U, SC):
  - skip_i: take the output of cell i-1 as an extra input
  - C: convolution block style (pre- or post-activation)
  - N: normalization (batch, instance, none)
  - U: upsampling (bilinear, nearest, stride-2 deconvolution)
  - SC: in-cell shortcut

The controller sees a cell as s + 4 integer tokens in the slot order
(skips..., C, N, U, SC). Enum values below are frozen: changing them changes
every stored token sequence.
"""

import itertools
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator

import torch

from utils.errors import DecodeError, GenotypeError


class ConvType(IntEnum):
    PRE = 0
    POST = 1


class NormType(IntEnum):
    BATCH = 0
    INSTANCE = 1
    NONE = 2


class UpsampleType(IntEnum):
    BILINEAR = 0
    NEAREST = 1
    DECONV = 2


CATEGORICAL_SLOTS = (
    ("conv_type", ConvType),
    ("norm_type", NormType),
    ("upsample_type", UpsampleType),
    ("shortcut", None),
)

NORM_MODE_NAMES = {NormType.BATCH: "batch", NormType.INSTANCE: "instance", NormType.NONE: "none"}
CONV_STYLE_NAMES = {ConvType.PRE: "pre", ConvType.POST: "post"}


@dataclass(frozen=True)
class CellGene:
    cell_index: int
    skips: tuple[int, ...]
    conv_type: ConvType
    norm_type: NormType
    upsample_type: UpsampleType
    shortcut: int

    def skip_sources(self) -> list[int]:
        """Indices of the predecessor cells feeding this cell through skip-ins."""
        return [i for i, bit in enumerate(self.skips) if bit]


@dataclass(frozen=True)
class TokenSpec:
    cell_index: int

    @property
    def vocab_sizes(self) -> tuple[int, ...]:
        return (2,) * self.cell_index + (len(ConvType), len(NormType), len(UpsampleType), 2)

    @property
    def slot_names(self) -> tuple[str, ...]:
        skips = tuple(f"skip_{i + 1}" for i in range(self.cell_index))
        return skips + tuple(name for name, _ in CATEGORICAL_SLOTS)

    @property
    def num_slots(self) -> int:
        return self.cell_index + 4


@dataclass(frozen=True)
class Genotype:
    cells: tuple[CellGene, ...]
    base_resolution: int = 4
    base_channels: int = 64
    z_dim: int = 64

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @property
    def output_resolution(self) -> int:
        return self.base_resolution * 2 ** len(self.cells)

    def tokens(self) -> list[list[int]]:
        return [encode(cell) for cell in self.cells]

    def with_cells(self, cells) -> "Genotype":
        return Genotype(tuple(cells), self.base_resolution, self.base_channels, self.z_dim)

    def __str__(self) -> str:
        return " | ".join(" ".join(str(t) for t in encode(c)) for c in self.cells)


def encode(gene: CellGene) -> list[int]:
    return [int(b) for b in gene.skips] + [
        int(gene.conv_type),
        int(gene.norm_type),
        int(gene.upsample_type),
        int(gene.shortcut),
    ]


def decode(tokens, cell_index: int) -> CellGene:
    spec = TokenSpec(cell_index)
    tokens = [int(t) for t in tokens]
    if len(tokens) != spec.num_slots:
        raise DecodeError(
            f"cell {cell_index} needs {spec.num_slots} tokens, got {len(tokens)}", slot=None, value=len(tokens)
        )
    for slot, (token, size) in enumerate(zip(tokens, spec.vocab_sizes)):
        if not 0 <= token < size:
            name = spec.slot_names[slot]
            raise DecodeError(f"token {token} out of range for slot '{name}' (vocabulary {size})", slot=name, value=token)
    skips = tuple(tokens[:cell_index])
    conv, norm, up, shortcut = tokens[cell_index:]
    return CellGene(cell_index, skips, ConvType(conv), NormType(norm), UpsampleType(up), shortcut)


def validate(genotype: Genotype) -> list[str]:
    """Every structural violation found; an empty list means the genotype is valid."""
    violations = []
    if not genotype.cells:
        violations.append("at least one cell is required")
    if genotype.base_resolution < 1:
        violations.append(f"base resolution must be >= 1, got {genotype.base_resolution}")
    for position, cell in enumerate(genotype.cells):
        if cell.cell_index != position:
            violations.append(f"cell index: position {position} holds cell_index {cell.cell_index}")
        if len(cell.skips) != position:
            violations.append(f"skip length: cell {position} has {len(cell.skips)} skip bits, expected {position}")
        if any(bit not in (0, 1) for bit in cell.skips):
            violations.append(f"skip bits of cell {position} must be 0 or 1")
        for name, enum in CATEGORICAL_SLOTS:
            value = getattr(cell, name)
            domain = range(2) if enum is None else [int(e) for e in enum]
            if value not in domain:
                violations.append(f"{name} of cell {position} out of domain: {value}")
    return violations


def ensure_valid(genotype: Genotype) -> Genotype:
    violations = validate(genotype)
    if violations:
        raise GenotypeError(violations)
    return genotype


def search_space_size(num_cells: int) -> int:
    if num_cells < 1:
        raise ValueError("num_cells must be >= 1")
    per_cell = len(ConvType) * len(NormType) * len(UpsampleType) * 2
    return math.prod(2 ** s * per_cell for s in range(num_cells))


def enumerate_cell_genes(cell_index: int) -> Iterator[CellGene]:
    sizes = TokenSpec(cell_index).vocab_sizes
    for tokens in itertools.product(*(range(v) for v in sizes)):
        yield decode(tokens, cell_index)


def enumerate_genotypes(num_cells: int, **geometry) -> Iterator[Genotype]:
    per_cell = [list(enumerate_cell_genes(s)) for s in range(num_cells)]
    for cells in itertools.product(*per_cell):
        yield Genotype(tuple(cells), **geometry)


def random_cell_gene(cell_index: int, rng: torch.Generator) -> CellGene:
    tokens = [int(torch.randint(0, v, (1,), generator=rng).item()) for v in TokenSpec(cell_index).vocab_sizes]
    return decode(tokens, cell_index)


def random_genotype(num_cells: int, rng: torch.Generator, **geometry) -> Genotype:
    """Uniform over the whole space: each slot is drawn independently and uniformly."""
    if num_cells < 1:
        raise ValueError("num_cells must be >= 1")
    return Genotype(tuple(random_cell_gene(s, rng) for s in range(num_cells)), **geometry)


# ---------------------------------------------------------------------------
# Layer plan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanNode:
    kind: str  # latent_linear | upsample | skip_merge | conv_block | shortcut | to_image
    cell: int | None
    resolution: int
    attrs: tuple[tuple[str, object], ...] = field(default=())

    def attr(self, key: str):
        return dict(self.attrs)[key]


@dataclass(frozen=True)
class LayerPlan:
    nodes: tuple[PlanNode, ...]
    output_resolution: int
    channels: int
    image_channels: int

    def nodes_for_cell(self, cell: int) -> list[PlanNode]:
        return [n for n in self.nodes if n.cell == cell]


def to_layer_plan(genotype: Genotype, image_channels: int = 3) -> LayerPlan:
    ensure_valid(genotype)
    res = genotype.base_resolution
    channels = genotype.base_channels
    nodes = [
        PlanNode("latent_linear", None, res, (("in_features", genotype.z_dim), ("out_features", res * res * channels))),
    ]
    for cell in genotype.cells:
        s = cell.cell_index
        res *= 2
        up = cell.upsample_type.name.lower()
        nodes.append(PlanNode("upsample", s, res, (("mode", up),)))
        for source in cell.skip_sources():
            nodes.append(
                PlanNode("skip_merge", s, res, (("source", source), ("mode", up), ("factor", 2 ** (s - source)), ("op", "add")))
            )
        nodes.append(
            PlanNode(
                "conv_block",
                s,
                res,
                (("style", CONV_STYLE_NAMES[cell.conv_type]), ("norm", NORM_MODE_NAMES[cell.norm_type]), ("convs", 2)),
            )
        )
        if cell.shortcut:
            nodes.append(PlanNode("shortcut", s, res, (("op", "add"),)))
    nodes.append(PlanNode("to_image", None, res, (("activation", "relu"), ("kernel", 1), ("output", "tanh"))))
    return LayerPlan(tuple(nodes), res, channels, image_channels)


# ---------------------------------------------------------------------------
# Text interchange: one line per cell, "<cell_index> <tokens...>"
# ---------------------------------------------------------------------------

def format_genotype(genotype: Genotype) -> str:
    header = (
        f"# base_resolution={genotype.base_resolution} base_channels={genotype.base_channels} z_dim={genotype.z_dim}"
    )
    lines = [header] + [" ".join(str(t) for t in [cell.cell_index] + encode(cell)) for cell in genotype.cells]
    return "\n".join(lines) + "\n"


def parse_genotype(text: str, **geometry) -> Genotype:
    cells = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            for item in line.lstrip("#").split():
                if "=" in item:
                    key, value = item.split("=", 1)
                    if key in ("base_resolution", "base_channels", "z_dim"):
                        geometry.setdefault(key, int(value))
            continue
        try:
            numbers = [int(x) for x in line.split()]
        except ValueError as e:
            raise DecodeError(f"non-integer token in genotype line '{line}'") from e
        cell_index, tokens = numbers[0], numbers[1:]
        if cell_index != len(cells):
            raise DecodeError(f"genotype lines out of order: expected cell {len(cells)}, got {cell_index}")
        cells.append(decode(tokens, cell_index))
    return ensure_valid(Genotype(tuple(cells), **geometry))


def genotype_from_tokens(token_lists, **geometry) -> Genotype:
    return Genotype(tuple(decode(tokens, s) for s, tokens in enumerate(token_lists)), **geometry)
