"""Procedural sprite scenes, an exact edit oracle, and edit/drift scoring.

Scenes are a coarse grid of cells; each occupied cell holds one sprite with
a shape, a palette color and a persistent identity id. Instructions are
three vocabulary tokens ``[verb, arg1, arg2]`` and reference sprites by
cell, e.g. ``["recolor", "cell_5", "blue"]``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .latentseq import ChannelStats, encode, read_dataset, write_dataset

# index bits are (r, g, b), so 7 - i is the RGB complement of color i
COLOR_NAMES = ("black", "blue", "green", "cyan", "red", "magenta", "yellow", "white")
PALETTE = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)], dtype=np.float32)
BACKGROUND = np.array([0.4, 0.4, 0.4], dtype=np.float32)

BASIC_SHAPES = ("circle", "square", "triangle")
GLYPH_SHAPES = ("glyph_t", "glyph_h")
SHAPES = BASIC_SHAPES + GLYPH_SHAPES
DIRECTIONS = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}
VERBS = ("noop", "recolor", "remove", "move", "invert", "cref", "retype")
NONE_TOKEN = "<none>"

CATEGORY_OF_VERB = {
    "noop": "local",
    "recolor": "local",
    "remove": "local",
    "move": "local",
    "invert": "global",
    "cref": "character-ref",
    "retype": "text-like",
}
CATEGORIES = ("local", "global", "character-ref", "text-like")
# local / global / character-ref / text-like, proportional to the real benchmark's task counts
DEFAULT_TASK_WEIGHTS = {"recolor": 208, "remove": 104, "move": 104, "invert": 262, "cref": 193, "retype": 92}


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    rows: int = 4
    cols: int = 4
    cell: int = 4
    min_sprites: int = 2
    max_sprites: int = 5

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.cell < 2:
            raise ValueError(f"invalid grid {self}")
        if not 1 <= self.min_sprites <= self.max_sprites <= self.rows * self.cols:
            raise ValueError(f"invalid sprite count range in {self}")

    @property
    def canvas(self) -> tuple[int, int]:
        return (self.rows * self.cell, self.cols * self.cell)

    @property
    def num_cells(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class Sprite:
    identity: int
    shape: str
    color: int
    row: int
    col: int


@dataclass(frozen=True)
class SceneSpec:
    grid: GridConfig
    sprites: tuple[Sprite, ...]

    def __post_init__(self):
        cells = [(s.row, s.col) for s in self.sprites]
        if len(set(cells)) != len(cells):
            raise ValueError("sprites must occupy distinct cells")
        for s in self.sprites:
            if not (0 <= s.row < self.grid.rows and 0 <= s.col < self.grid.cols):
                raise ValueError(f"sprite {s} outside the grid")
            if s.shape not in SHAPES or not 0 <= s.color < len(PALETTE):
                raise ValueError(f"invalid sprite attributes {s}")

    def at(self, row: int, col: int) -> Optional[Sprite]:
        for s in self.sprites:
            if (s.row, s.col) == (row, col):
                return s
        return None

    def cell_map(self) -> dict[tuple[int, int], tuple[str, int]]:
        """Identity-free view used for comparing parsed and expected scenes."""
        return {(s.row, s.col): (s.shape, s.color) for s in self.sprites}

    def to_dict(self) -> dict:
        return {"sprites": [asdict(s) for s in sorted(self.sprites, key=lambda s: (s.row, s.col))]}

    @classmethod
    def from_dict(cls, d: dict, grid: GridConfig) -> "SceneSpec":
        return cls(grid, tuple(Sprite(**s) for s in d["sprites"]))


def build_vocab(grid: GridConfig) -> list[str]:
    return [NONE_TOKEN, *VERBS, *COLOR_NAMES, *SHAPES, *DIRECTIONS, *(f"cell_{i}" for i in range(grid.num_cells))]


def cell_token(grid: GridConfig, row: int, col: int) -> str:
    return f"cell_{row * grid.cols + col}"


def _parse_cell(grid: GridConfig, tok: str) -> tuple[int, int]:
    if not tok.startswith("cell_"):
        raise OracleError(f"expected a cell token, got {tok!r}")
    idx = int(tok[5:])
    if not 0 <= idx < grid.num_cells:
        raise OracleError(f"cell {idx} outside a {grid.rows}x{grid.cols} grid")
    return divmod(idx, grid.cols)


def oracle(spec: SceneSpec, instruction: Sequence[str], strict: bool = False) -> SceneSpec:
    """Ground-truth result of applying ``instruction`` to ``spec``.

    Moves off the grid edge leave the sprite in place, or raise
    OracleError when ``strict`` is set. Moving onto an occupied cell and
    referencing an empty cell always raise OracleError.
    """
    verb, a1, a2 = instruction
    grid = spec.grid
    if verb == "noop":
        return spec
    if verb == "invert":
        return replace(spec, sprites=tuple(replace(s, color=7 - s.color) for s in spec.sprites))

    row, col = _parse_cell(grid, a1)
    target = spec.at(row, col)
    if target is None:
        raise OracleError(f"no sprite at {a1}")
    others = tuple(s for s in spec.sprites if s is not target)

    if verb == "recolor":
        if a2 not in COLOR_NAMES:
            raise OracleError(f"unknown color {a2!r}")
        new = replace(target, color=COLOR_NAMES.index(a2))
    elif verb == "retype":
        if a2 not in SHAPES:
            raise OracleError(f"unknown shape {a2!r}")
        new = replace(target, shape=a2)
    elif verb == "remove":
        return replace(spec, sprites=others)
    elif verb == "move":
        if a2 not in DIRECTIONS:
            raise OracleError(f"unknown direction {a2!r}")
        dr, dc = DIRECTIONS[a2]
        r, c = row + dr, col + dc
        if not (0 <= r < grid.rows and 0 <= c < grid.cols):
            if strict:
                raise OracleError(f"move {a2} from {a1} leaves the grid")
            r, c = row, col
        if (r, c) != (row, col) and spec.at(r, c) is not None:
            raise OracleError(f"move {a2} from {a1} hits an occupied cell")
        new = replace(target, row=r, col=c)
    elif verb == "cref":
        r, c = _parse_cell(grid, a2)
        return replace(spec, sprites=(replace(target, row=r, col=c),))
    else:
        raise OracleError(f"unknown verb {verb!r}")
    return replace(spec, sprites=tuple(sorted(others + (new,), key=lambda s: s.identity)))


# rendering and parsing ---------------------------------------------------

def shape_mask(shape: str, cell: int) -> np.ndarray:
    """Boolean (cell, cell) mask sampled at pixel centers of the unit square."""
    v, u = np.meshgrid((np.arange(cell) + 0.5) / cell, (np.arange(cell) + 0.5) / cell, indexing="ij")
    if shape == "square":
        m = np.ones_like(u, dtype=bool)
    elif shape == "circle":
        m = (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif shape == "triangle":
        m = v >= u
    elif shape == "glyph_t":
        m = (v < 0.25) | (np.abs(u - 0.5) < 0.25)
    elif shape == "glyph_h":
        m = (u < 0.25) | (u > 0.75) | (np.abs(v - 0.5) < 0.25)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def _cell_templates(cell: int) -> tuple[np.ndarray, list[Optional[tuple[str, int]]]]:
    """Rendered (3, cell, cell) patches for the empty cell and every (shape, color)."""
    labels: list[Optional[tuple[str, int]]] = [None]
    patches = [np.broadcast_to(BACKGROUND[:, None, None], (3, cell, cell))]
    for shape in SHAPES:
        m = shape_mask(shape, cell)
        for color in range(len(PALETTE)):
            p = np.where(m[None], PALETTE[color][:, None, None], BACKGROUND[:, None, None])
            patches.append(p)
            labels.append((shape, color))
    return np.stack(patches).astype(np.float32), labels


def render(spec: SceneSpec) -> np.ndarray:
    """(3, H, W) float32 image in [0, 1]."""
    g = spec.grid
    h, w = g.canvas
    img = np.broadcast_to(BACKGROUND[:, None, None], (3, h, w)).copy()
    for s in spec.sprites:
        m = shape_mask(s.shape, g.cell)
        r0, c0 = s.row * g.cell, s.col * g.cell
        patch = img[:, r0 : r0 + g.cell, c0 : c0 + g.cell]
        patch[:, m] = PALETTE[s.color][:, None]
    return img


def parse_cells(image: np.ndarray, grid: GridConfig) -> dict[tuple[int, int], tuple[str, int]]:
    """Nearest-template classification of every cell; returns the occupied cells."""
    if image.shape != (3, *grid.canvas):
        raise ValueError(f"image shape {image.shape} does not match canvas {(3, *grid.canvas)}")
    templates, labels = _cell_templates(grid.cell)
    k = grid.cell
    cells = image.reshape(3, grid.rows, k, grid.cols, k).transpose(1, 3, 0, 2, 4).reshape(grid.num_cells, -1)
    flat_t = templates.reshape(len(templates), -1)
    d = ((cells[:, None, :].astype(np.float64) - flat_t[None].astype(np.float64)) ** 2).sum(-1)
    best = np.argmin(d, axis=1)
    out = {}
    for idx, b in enumerate(best):
        if labels[b] is not None:
            out[divmod(idx, grid.cols)] = labels[b]
    return out


def parse(image: np.ndarray, grid: GridConfig) -> SceneSpec:
    """Parsed scene; identity ids are assigned in row-major order."""
    cells = parse_cells(image, grid)
    sprites = tuple(
        Sprite(i + 1, shape, color, r, c) for i, ((r, c), (shape, color)) in enumerate(sorted(cells.items()))
    )
    return SceneSpec(grid, sprites)


def preserved_sprites(expected: SceneSpec, source: Optional[SceneSpec]) -> list[Sprite]:
    """Sprites of ``expected`` whose (shape, color) equal their identity's attributes in ``source``."""
    if source is None:
        return list(expected.sprites)
    before = {s.identity: (s.shape, s.color) for s in source.sprites}
    return [s for s in expected.sprites if before.get(s.identity) == (s.shape, s.color)]


def score_edit(output: np.ndarray, expected: SceneSpec, source: Optional[SceneSpec] = None) -> tuple[int, float]:
    """(accuracy, identity).

    accuracy is 1 iff the parsed output equals ``expected`` cell for cell.
    identity is the fraction of preserved sprites (see preserved_sprites)
    found with the same shape and color at their expected cell; 1.0 when
    nothing is preserved.
    """
    parsed = parse_cells(output, expected.grid)
    acc = int(parsed == expected.cell_map())
    keep = preserved_sprites(expected, source)
    if not keep:
        return acc, 1.0
    hits = sum(parsed.get((s.row, s.col)) == (s.shape, s.color) for s in keep)
    return acc, hits / len(keep)


# generation --------------------------------------------------------------

@dataclass
class EditExample:
    context_spec: SceneSpec
    instruction: tuple[str, str, str]
    target_spec: SceneSpec
    category: str

    @property
    def context(self) -> np.ndarray:
        return render(self.context_spec)

    @property
    def target(self) -> np.ndarray:
        return render(self.target_spec)

    def to_record(self) -> dict:
        return {
            "context_spec": self.context_spec.to_dict(),
            "target_spec": self.target_spec.to_dict(),
            "instruction": list(self.instruction),
            "category": self.category,
        }

    @classmethod
    def from_record(cls, rec: dict, grid: GridConfig) -> "EditExample":
        return cls(
            SceneSpec.from_dict(rec["context_spec"], grid),
            tuple(rec["instruction"]),
            SceneSpec.from_dict(rec["target_spec"], grid),
            rec["category"],
        )


def random_scene(rng: np.random.Generator, grid: GridConfig, shapes: Sequence[str] = BASIC_SHAPES,
                 n_sprites: Optional[int] = None) -> SceneSpec:
    n = n_sprites if n_sprites is not None else int(rng.integers(grid.min_sprites, grid.max_sprites + 1))
    cells = rng.choice(grid.num_cells, size=n, replace=False)
    sprites = tuple(
        Sprite(i + 1, str(shapes[rng.integers(len(shapes))]), int(rng.integers(len(PALETTE))), *divmod(int(c), grid.cols))
        for i, c in enumerate(cells)
    )
    return SceneSpec(grid, sprites)


def random_instruction(rng: np.random.Generator, spec: SceneSpec, verb: str) -> tuple[str, str, str]:
    grid = spec.grid
    if verb in ("noop", "invert"):
        return (verb, NONE_TOKEN, NONE_TOKEN)
    s = spec.sprites[rng.integers(len(spec.sprites))]
    cell = cell_token(grid, s.row, s.col)
    if verb == "recolor":
        choices = [c for c in range(len(PALETTE)) if c != s.color]
        return (verb, cell, COLOR_NAMES[choices[rng.integers(len(choices))]])
    if verb == "remove":
        return (verb, cell, NONE_TOKEN)
    if verb == "retype":
        choices = [x for x in GLYPH_SHAPES if x != s.shape]
        return (verb, cell, choices[rng.integers(len(choices))])
    if verb == "move":
        ok = []
        for name, (dr, dc) in DIRECTIONS.items():
            r, c = s.row + dr, s.col + dc
            if 0 <= r < grid.rows and 0 <= c < grid.cols and spec.at(r, c) is None:
                ok.append(name)
        if not ok:
            return random_instruction(rng, spec, "recolor")
        return (verb, cell, ok[rng.integers(len(ok))])
    if verb == "cref":
        dest = int(rng.integers(grid.num_cells))
        return (verb, cell, f"cell_{dest}")
    raise ValueError(f"unknown verb {verb!r}")


def allocate_counts(n: int, weights: dict[str, float]) -> dict[str, int]:
    """Largest-remainder rounding of n * w / sum(w)."""
    names = list(weights)
    total = float(sum(weights.values()))
    exact = np.array([n * weights[k] / total for k in names])
    counts = np.floor(exact).astype(int)
    rem = n - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:rem]] += 1
    return {k: int(c) for k, c in zip(names, counts)}


def generate(rng: np.random.Generator, n: int, grid: GridConfig = GridConfig(),
             task_weights: Optional[dict[str, float]] = None) -> list[EditExample]:
    """Deterministic (given ``rng``) list of edit examples.

    ``task_weights`` maps instruction verbs to relative frequencies; counts
    are allocated exactly by largest remainder, then shuffled.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    weights = dict(task_weights or DEFAULT_TASK_WEIGHTS)
    for verb in weights:
        if verb not in VERBS:
            raise ValueError(f"unknown task {verb!r}")
    verbs = [v for v, c in allocate_counts(n, weights).items() for _ in range(c)]
    verbs = [verbs[i] for i in rng.permutation(len(verbs))]
    out = []
    for verb in verbs:
        shapes = GLYPH_SHAPES if verb == "retype" else BASIC_SHAPES
        spec = random_scene(rng, grid, shapes)
        instr = random_instruction(rng, spec, verb)
        out.append(EditExample(spec, instr, oracle(spec, instr), CATEGORY_OF_VERB[instr[0]]))
    return out


def random_script(rng: np.random.Generator, spec: SceneSpec, turns: int) -> list[tuple[str, str, str]]:
    """Recolor-only script that edits one sprite per turn and never touches one reserved sprite."""
    if len(spec.sprites) < 2:
        raise ValueError("scripts need scenes with at least two sprites")
    reserved = spec.sprites[rng.integers(len(spec.sprites))].identity
    script = []
    cur = spec
    for _ in range(turns):
        cands = [s for s in cur.sprites if s.identity != reserved]
        s = cands[rng.integers(len(cands))]
        choices = [c for c in range(len(PALETTE)) if c != s.color]
        instr = ("recolor", cell_token(cur.grid, s.row, s.col), COLOR_NAMES[choices[rng.integers(len(choices))]])
        script.append(instr)
        cur = oracle(cur, instr)
    return script


# dataset file ------------------------------------------------------------

@dataclass
class EditDataset:
    grid: GridConfig
    patch: int
    vocab: list[str]
    examples: list[EditExample]
    stats: ChannelStats = field(default=None)

    def __post_init__(self):
        if self.stats is None:
            self.stats = ChannelStats.fit(np.concatenate([self.tokens("context"), self.tokens("target")]))

    def images(self, which: str) -> np.ndarray:
        attr = "context_spec" if which == "context" else "target_spec"
        return np.stack([render(getattr(e, attr)) for e in self.examples])

    def tokens(self, which: str) -> np.ndarray:
        return np.stack([encode(im, self.patch).tokens for im in self.images(which)])

    def instruction_ids(self) -> np.ndarray:
        index = {tok: i for i, tok in enumerate(self.vocab)}
        return np.array([[index[t] for t in e.instruction] for e in self.examples], dtype=np.int64)

    def header(self) -> dict:
        return {"patch": self.patch, "grid": asdict(self.grid), "vocab": self.vocab, "channels": 3}

    def save(self, path, image_format: str = "raw"):
        return write_dataset(
            path,
            self.header(),
            {"context": self.images("context"), "target": self.images("target")},
            [e.to_record() for e in self.examples],
            self.stats,
            image_format,
        )

    @classmethod
    def load(cls, path) -> "EditDataset":
        meta, images, records, stats = read_dataset(path)
        grid = GridConfig(**meta["grid"])
        examples = [EditExample.from_record(r, grid) for r in records]
        # stored images must agree with the records they were rendered from
        for i, e in enumerate(examples[:8]):
            if meta["image_format"] == "raw" and not np.array_equal(images["target"][i], render(e.target_spec)):
                raise ValueError(f"{path}: stored target {i} disagrees with its scene record")
        return cls(grid, int(meta["patch"]), list(meta["vocab"]), examples, stats)

    @classmethod
    def generate(cls, seed: int, n: int, grid: GridConfig = GridConfig(), patch: int = 4,
                 task_weights: Optional[dict] = None) -> "EditDataset":
        rng = np.random.default_rng(seed)
        return cls(grid, patch, build_vocab(grid), generate(rng, n, grid, task_weights))


def summary_json(rows: Iterable[dict]) -> str:
    return json.dumps(list(rows), indent=2, sort_keys=True)


# evaluation --------------------------------------------------------------

@dataclass
class DriftRow:
    turn: int
    identity: float  # mean per-turn identity vs turn-0 attributes
    retained: float  # fraction of preserved sprites intact at every turn so far
    accuracy: float


@dataclass
class EvalReport:
    categories: dict[str, dict[str, float]]
    identity: float
    drift: list[DriftRow] = field(default_factory=list)

    def category_rows(self) -> list[dict]:
        return [{"category": k, **v} for k, v in sorted(self.categories.items())]

    def summary(self) -> str:
        lines = ["category        n    accuracy  identity"]
        for row in self.category_rows():
            lines.append(f"{row['category']:<14} {int(row['n']):>4}    {row['accuracy']:.3f}     {row['identity']:.3f}")
        lines.append(f"overall identity {self.identity:.3f}")
        for d in self.drift:
            lines.append(f"turn {d.turn}: identity {d.identity:.3f} retained {d.retained:.3f} accuracy {d.accuracy:.3f}")
        return "\n".join(lines)


def ids_for(instructions, vocab: Sequence[str]) -> np.ndarray:
    index = {tok: i for i, tok in enumerate(vocab)}
    return np.array([[index[t] for t in instr] for instr in instructions], dtype=np.int64)


def score_examples(outputs: np.ndarray, examples: Sequence[EditExample]) -> EvalReport:
    per: dict[str, list[tuple[int, float]]] = {}
    for out, e in zip(outputs, examples):
        per.setdefault(e.category, []).append(score_edit(out, e.target_spec, e.context_spec))
    cats = {
        k: {"n": float(len(v)), "accuracy": float(np.mean([a for a, _ in v])), "identity": float(np.mean([i for _, i in v]))}
        for k, v in per.items()
    }
    all_ident = [i for v in per.values() for _, i in v]
    return EvalReport(cats, float(np.mean(all_ident)) if all_ident else 1.0)


def evaluate_edits(model, codec, examples: Sequence[EditExample], vocab: Sequence[str], cfg,
                   use_context: bool = True, batch_size: int = 256) -> tuple[EvalReport, np.ndarray]:
    """Sample every example once (optionally with its context removed) and score it."""
    from .sampler import sample_images

    grid = examples[0].context_spec.grid
    tgt_grid = (grid.canvas[0] // codec.patch, grid.canvas[1] // codec.patch)
    outs = []
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo : lo + batch_size]
        ctx = np.stack([e.context for e in chunk]) if use_context else None
        outs.append(sample_images(model, codec, ctx, ids_for([e.instruction for e in chunk], vocab), tgt_grid, cfg))
    outputs = np.concatenate(outs)
    return score_examples(outputs, examples), outputs


def expected_chain(scene: SceneSpec, script: Sequence[Sequence[str]]) -> list[SceneSpec]:
    out = []
    cur = scene
    for instr in script:
        cur = oracle(cur, instr)
        out.append(cur)
    return out


def drift_curve(outputs: Sequence[np.ndarray], scenes: Sequence[SceneSpec], scripts) -> list[DriftRow]:
    """Score turn-k outputs (``outputs[k]`` is a (B, 3, H, W) stack) against the turn-0 scenes."""
    chains = [expected_chain(s, sc) for s, sc in zip(scenes, scripts)]
    # sprites the script never changes; one edited and later restored does not count
    untouched = [set.intersection(*({s.identity for s in preserved_sprites(e, scene)} for e in chain))
                 for scene, chain in zip(scenes, chains)]
    alive = [None] * len(scenes)
    rows = []
    for k, stack in enumerate(outputs):
        idents, accs, retained = [], [], []
        for b, (scene, chain) in enumerate(zip(scenes, chains)):
            expected = chain[k]
            acc, ident = score_edit(stack[b], expected, scene)
            keep = {s.identity for s in preserved_sprites(expected, scene)}
            parsed = parse_cells(stack[b], scene.grid)
            ok = {s.identity for s in expected.sprites if s.identity in keep and parsed.get((s.row, s.col)) == (s.shape, s.color)}
            alive[b] = (keep & ok) if alive[b] is None else (alive[b] & keep & ok)
            base = untouched[b]
            retained.append(len(alive[b] & base) / len(base) if base else 1.0)
            idents.append(ident)
            accs.append(acc)
        rows.append(DriftRow(k + 1, float(np.mean(idents)), float(np.mean(retained)), float(np.mean(accs))))
    return rows


def drift_eval(model, codec, scenes: Sequence[SceneSpec], scripts, vocab: Sequence[str], cfg,
               use_context: bool = True) -> EvalReport:
    """Run multi-turn edit loops from rendered scenes and report the drift curve."""
    from .sampler import edit_loop

    if min(len(s) for s in scripts) < 2:
        raise ValueError("drift scripts need at least two turns")
    initial = np.stack([render(s) for s in scenes])
    script_ids = np.stack([ids_for(sc, vocab) for sc in scripts])
    outputs = edit_loop(model, codec, initial, script_ids, cfg, use_context=use_context)
    rows = drift_curve(outputs, scenes, scripts)
    return EvalReport({}, rows[-1].identity, rows)


def drift_benchmark(seed: int, n_scenes: int, turns: int, grid: GridConfig = GridConfig()):
    """Scenes with at least two sprites plus recolor-only scripts."""
    rng = np.random.default_rng(seed)
    scenes, scripts = [], []
    for _ in range(n_scenes):
        s = random_scene(rng, grid, n_sprites=int(rng.integers(max(2, grid.min_sprites), max(2, grid.max_sprites) + 1)))
        scenes.append(s)
        scripts.append(random_script(rng, s, turns))
    return scenes, scripts
