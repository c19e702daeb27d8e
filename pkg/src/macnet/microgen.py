"""Deterministic micro-CoGenT generator: scenes, questions, ground truth.

Scenes live on a small grid, one object per cell, each object carrying
size/shape/material/color attributes.  Condition A restricts cube and
cylinder colors to complementary palettes, condition B swaps them, and
spheres are unconstrained.  Questions are realized from a fixed template
grammar (five categories, optional one-hop spatial relation) and answered
by an exact set-filter oracle.  Everything is a pure function of its seed.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import ContractError

SIZES = ("large", "small")
SHAPES = ("cube", "cylinder", "sphere")
MATERIALS = ("rubber", "metal")
COLORS = ("gray", "blue", "brown", "yellow", "red", "green", "purple", "cyan")

_PALETTE_1 = ("gray", "blue", "brown", "yellow")
_PALETTE_2 = ("red", "green", "purple", "cyan")

CATEGORIES = ("exist", "count", "compare_integer", "query_attribute", "compare_attribute")
ATTR_TYPES = ("size", "shape", "material", "color")

FEATURE_WIDTH = 2 + 3 + 2 + 8 + 1  # one-hots plus occupancy bit

MAX_COUNT = 9  # counts are answered with single digit tokens

ANSWER_TOKENS = (list(COLORS) + list(SHAPES) + list(SIZES) + list(MATERIALS)
                 + [str(i) for i in range(MAX_COUNT + 1)] + ["yes", "no"])

SCENES_FORMAT = "microgen-scenes v1"
QUESTIONS_FORMAT = "microgen-questions v1"


class GenerationError(Exception):
    """No valid sample could be produced under the given constraints."""


@dataclass(frozen=True)
class ConditionSpec:
    """Allowed color set per shape."""

    name: str
    allowed: dict

    def permits(self, shape: str, color: str) -> bool:
        return color in self.allowed[shape]


CONDITIONS = {
    "clevr": ConditionSpec("clevr", {s: COLORS for s in SHAPES}),
    "cogent-a": ConditionSpec("cogent-a", {"cube": _PALETTE_1, "cylinder": _PALETTE_2,
                                           "sphere": COLORS}),
    "cogent-b": ConditionSpec("cogent-b", {"cube": _PALETTE_2, "cylinder": _PALETTE_1,
                                           "sphere": COLORS}),
}


def get_condition(name: str) -> ConditionSpec:
    try:
        return CONDITIONS[name]
    except KeyError:
        raise ContractError(f"unknown condition {name!r}, expected one of {sorted(CONDITIONS)}")


@dataclass(frozen=True)
class GenConfig:
    H: int = 6
    W: int = 6
    min_objects: int = 2
    max_objects: int = 6

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ContractError("need 1 <= min_objects <= max_objects")
        if self.max_objects > self.H * self.W:
            raise ContractError("max_objects exceeds grid capacity")
        if self.max_objects > MAX_COUNT:
            raise ContractError(f"max_objects > {MAX_COUNT} breaks the closed answer set")


@dataclass(frozen=True)
class ObjectSpec:
    size: str
    shape: str
    material: str
    color: str
    row: int
    col: int


@dataclass
class Scene:
    scene_id: str
    seed: int
    H: int
    W: int
    condition: str
    objects: list


@dataclass(frozen=True)
class Filter:
    """Conjunction of attribute constraints; None means unconstrained."""

    size: str = None
    shape: str = None
    material: str = None
    color: str = None

    def matches(self, obj: ObjectSpec) -> bool:
        return all(value is None or getattr(obj, attr) == value
                   for attr, value in self.items())

    def items(self):
        return (("size", self.size), ("shape", self.shape),
                ("material", self.material), ("color", self.color))

    def is_empty(self) -> bool:
        return all(v is None for _, v in self.items())

    def tokens(self, plural: bool = False) -> list:
        words = [v for v in (self.size, self.color, self.material) if v is not None]
        if self.shape is not None:
            words.append(self.shape + "s" if plural else self.shape)
        else:
            words.append("objects" if plural else "object")
        return words


RELATIONS = ("left", "right", "front", "behind")
_REL_PHRASE = {"left": ("left", "of", "the"),
               "right": ("right", "of", "the"),
               "front": ("in", "front", "of", "the"),
               "behind": ("behind", "the")}


def relation_holds(rel: str, obj: ObjectSpec, ref: ObjectSpec) -> bool:
    """Grid semantics: columns run left to right, rows back to front."""
    if rel == "left":
        return obj.col < ref.col
    if rel == "right":
        return obj.col > ref.col
    if rel == "behind":
        return obj.row < ref.row
    if rel == "front":
        return obj.row > ref.row
    raise ContractError(f"unknown relation {rel!r}")


@dataclass(frozen=True)
class Question:
    """Parsed form of one question; the oracle evaluates this directly."""

    category: str
    filter: Filter
    filter2: Filter = None
    relation: str = None
    attr_type: str = None
    compare_op: str = None  # "more" / "fewer"


@dataclass
class QASample:
    question_id: str
    scene_id: str
    category: str
    tokens: list
    answer: str
    program: Question = None


# -- scene generation --------------------------------------------------


def generate_scene(cond: ConditionSpec, config: GenConfig, seed: int,
                   scene_id: str = "") -> Scene:
    """Uniformly sample a condition-respecting scene, deterministic in `seed`."""
    rng = random.Random(seed)
    n = rng.randint(config.min_objects, config.max_objects)
    cells = rng.sample(range(config.H * config.W), n)
    objects = []
    for pos in cells:
        shape = rng.choice(SHAPES)
        palette = cond.allowed[shape]
        if not palette:
            raise GenerationError(f"condition {cond.name} permits no colors for {shape}")
        objects.append(ObjectSpec(size=rng.choice(SIZES), shape=shape,
                                  material=rng.choice(MATERIALS),
                                  color=rng.choice(list(palette)),
                                  row=pos // config.W, col=pos % config.W))
    return Scene(scene_id or f"scene-{seed}", seed, config.H, config.W, cond.name, objects)


def scene_violations(scene: Scene, cond: ConditionSpec) -> list:
    """Objects whose color/shape pair the condition forbids."""
    return [o for o in scene.objects if not cond.permits(o.shape, o.color)]


def render_feature_grid(scene: Scene) -> np.ndarray:
    """Symbolic [H x W x 16] grid: per-cell one-hots plus an occupancy bit."""
    grid = np.zeros((scene.H, scene.W, FEATURE_WIDTH))
    for o in scene.objects:
        vec = grid[o.row, o.col]
        vec[SIZES.index(o.size)] = 1.0
        vec[2 + SHAPES.index(o.shape)] = 1.0
        vec[5 + MATERIALS.index(o.material)] = 1.0
        vec[7 + COLORS.index(o.color)] = 1.0
        vec[15] = 1.0
    return grid


def parse_feature_grid(grid: np.ndarray) -> list:
    """Invert render_feature_grid back to an ObjectSpec list."""
    objects = []
    H, W, width = grid.shape
    if width != FEATURE_WIDTH:
        raise ContractError(f"feature width {width} != {FEATURE_WIDTH}")
    for row in range(H):
        for col in range(W):
            vec = grid[row, col]
            if vec[15] == 0.0:
                continue
            objects.append(ObjectSpec(
                size=SIZES[int(np.argmax(vec[0:2]))],
                shape=SHAPES[int(np.argmax(vec[2:5]))],
                material=MATERIALS[int(np.argmax(vec[5:7]))],
                color=COLORS[int(np.argmax(vec[7:15]))],
                row=row, col=col))
    return objects


# -- answer oracle -----------------------------------------------------


def _unique_referent(scene: Scene, flt: Filter) -> ObjectSpec:
    matches = [o for o in scene.objects if flt.matches(o)]
    if len(matches) != 1:
        raise ContractError(f"referent filter matched {len(matches)} objects, need exactly 1")
    return matches[0]


def answer_oracle(scene: Scene, q: Question) -> str:
    """Exact set-filter semantics over the scene's object list."""
    if q.category == "compare_integer":
        n1 = sum(q.filter.matches(o) for o in scene.objects)
        n2 = sum(q.filter2.matches(o) for o in scene.objects)
        if q.compare_op == "more":
            return "yes" if n1 > n2 else "no"
        if q.compare_op == "fewer":
            return "yes" if n1 < n2 else "no"
        raise ContractError(f"unknown comparison {q.compare_op!r}")

    if q.category == "compare_attribute":
        a = _unique_referent(scene, q.filter)
        b = _unique_referent(scene, q.filter2)
        return "yes" if getattr(a, q.attr_type) == getattr(b, q.attr_type) else "no"

    candidates = [o for o in scene.objects if q.filter.matches(o)]
    if q.relation is not None:
        ref = _unique_referent(scene, q.filter2)
        candidates = [o for o in candidates if o is not ref and relation_holds(q.relation, o, ref)]

    if q.category == "exist":
        return "yes" if candidates else "no"
    if q.category == "count":
        return str(len(candidates))
    if q.category == "query_attribute":
        if len(candidates) != 1:
            raise ContractError(f"query referent matched {len(candidates)} objects")
        return getattr(candidates[0], q.attr_type)
    raise ContractError(f"unknown category {q.category!r}")


# -- question realization and parsing ---------------------------------


def realize_tokens(q: Question) -> list:
    if q.category == "exist":
        tokens = ["is", "there", "a"] + q.filter.tokens()
        if q.relation is not None:
            tokens += list(_REL_PHRASE[q.relation]) + q.filter2.tokens()
        return tokens
    if q.category == "count":
        tokens = ["how", "many"] + q.filter.tokens(plural=True) + ["are"]
        if q.relation is None:
            return tokens + ["there"]
        return tokens + list(_REL_PHRASE[q.relation]) + q.filter2.tokens()
    if q.category == "compare_integer":
        return (["are", "there", q.compare_op] + q.filter.tokens(plural=True)
                + ["than"] + q.filter2.tokens(plural=True))
    if q.category == "query_attribute":
        tokens = ["what", q.attr_type, "is", "the"] + q.filter.tokens()
        if q.relation is not None:
            tokens += list(_REL_PHRASE[q.relation]) + q.filter2.tokens()
        return tokens
    if q.category == "compare_attribute":
        return (["does", "the"] + q.filter.tokens() + ["have", "the", "same", q.attr_type,
                "as", "the"] + q.filter2.tokens())
    raise ContractError(f"unknown category {q.category!r}")


def _parse_filter(words) -> Filter:
    kwargs = {}
    for w in words:
        singular = w[:-1] if w.endswith("s") and w[:-1] in SHAPES else w
        if singular in SIZES:
            kwargs["size"] = singular
        elif singular in SHAPES:
            kwargs["shape"] = singular
        elif singular in MATERIALS:
            kwargs["material"] = singular
        elif singular in COLORS:
            kwargs["color"] = singular
        elif w in ("object", "objects", "thing", "things"):
            pass
        else:
            raise ContractError(f"unparseable filter word {w!r}")
    return Filter(**kwargs)


def _split_relation(words):
    """Split `words` at the first relation phrase, if any."""
    for rel, phrase in _REL_PHRASE.items():
        n = len(phrase)
        for i in range(len(words) - n + 1):
            if tuple(words[i:i + n]) == phrase:
                return words[:i], rel, words[i + n:]
    return words, None, None


def parse_question_tokens(tokens) -> Question:
    """Recover the parsed question from its token realization."""
    t = list(tokens)
    if t[:3] == ["is", "there", "a"]:
        head, rel, tail = _split_relation(t[3:])
        return Question("exist", _parse_filter(head), relation=rel,
                        filter2=_parse_filter(tail) if rel else None)
    if t[:2] == ["how", "many"]:
        body = t[2:]
        split = body.index("are")
        head = body[:split]
        rest = body[split + 1:]
        if rest == ["there"]:
            return Question("count", _parse_filter(head))
        _, rel, tail = _split_relation(rest)
        if rel is None:
            raise ContractError(f"unparseable count question: {tokens}")
        return Question("count", _parse_filter(head), relation=rel, filter2=_parse_filter(tail))
    if t[:2] == ["are", "there"] and len(t) > 2 and t[2] in ("more", "fewer"):
        split = t.index("than")
        return Question("compare_integer", _parse_filter(t[3:split]),
                        filter2=_parse_filter(t[split + 1:]), compare_op=t[2])
    if t[0] == "what" and t[2:4] == ["is", "the"]:
        head, rel, tail = _split_relation(t[4:])
        return Question("query_attribute", _parse_filter(head), attr_type=t[1], relation=rel,
                        filter2=_parse_filter(tail) if rel else None)
    if t[:2] == ["does", "the"]:
        body = t[2:]
        for i in range(len(body) - 3):
            if body[i:i + 3] == ["have", "the", "same"]:
                attr = body[i + 3]
                assert body[i + 4:i + 6] == ["as", "the"]
                return Question("compare_attribute", _parse_filter(body[:i]),
                                filter2=_parse_filter(body[i + 6:]), attr_type=attr)
    raise ContractError(f"unparseable question: {tokens}")


# -- question generation -----------------------------------------------


def _filter_from(obj: ObjectSpec, attrs) -> Filter:
    return Filter(**{a: getattr(obj, a) for a in attrs})


def _count_matches(scene: Scene, flt: Filter) -> int:
    return sum(flt.matches(o) for o in scene.objects)


def _referring_filter(scene: Scene, obj: ObjectSpec, rng: random.Random,
                      exclude_attr: str = None, tries: int = 20) -> Filter:
    """A filter matching exactly `obj`, or None if the object is not uniquely describable."""
    usable = [a for a in ATTR_TYPES if a != exclude_attr]
    for _ in range(tries):
        chosen = [a for a in usable if rng.random() < 0.6]
        if not chosen:
            chosen = [rng.choice(usable)]
        flt = _filter_from(obj, chosen)
        if _count_matches(scene, flt) == 1:
            return flt
    flt = _filter_from(obj, usable)
    if _count_matches(scene, flt) == 1:
        return flt
    return None


def _random_filter(rng: random.Random, n_attrs: int, exclude_attr: str = None) -> Filter:
    pool = [a for a in ATTR_TYPES if a != exclude_attr]
    chosen = rng.sample(pool, n_attrs)
    values = {"size": SIZES, "shape": SHAPES, "material": MATERIALS, "color": COLORS}
    return Filter(**{a: rng.choice(values[a]) for a in chosen})


def _make_exist(scene: Scene, rng: random.Random) -> Question:
    want_yes = rng.random() < 0.5
    if want_yes:
        obj = rng.choice(scene.objects)
        attrs = [a for a in ATTR_TYPES if rng.random() < 0.5] or [rng.choice(ATTR_TYPES)]
        return Question("exist", _filter_from(obj, attrs))
    for _ in range(50):
        flt = _random_filter(rng, rng.randint(1, 3))
        if _count_matches(scene, flt) == 0:
            return Question("exist", flt)
    raise GenerationError("no absent attribute combination found for exist/no")


def _make_count(scene: Scene, rng: random.Random) -> Question:
    if rng.random() < 0.35 and len(scene.objects) >= 2:
        # relational hop: count objects on one side of a unique referent
        for _ in range(20):
            ref = rng.choice(scene.objects)
            ref_filter = _referring_filter(scene, ref, rng)
            if ref_filter is None:
                continue
            rel = rng.choice(RELATIONS)
            head = _random_filter(rng, 1) if rng.random() < 0.5 else Filter()
            return Question("count", head, relation=rel, filter2=ref_filter)
    if rng.random() < 0.7:
        obj = rng.choice(scene.objects)
        attrs = rng.sample(ATTR_TYPES, rng.randint(1, 2))
        return Question("count", _filter_from(obj, attrs))
    return Question("count", _random_filter(rng, rng.randint(1, 2)))


def _make_compare_integer(scene: Scene, rng: random.Random) -> Question:
    attr = rng.choice(ATTR_TYPES)
    values = {"size": SIZES, "shape": SHAPES, "material": MATERIALS, "color": COLORS}[attr]
    v1, v2 = rng.sample(list(values), 2)
    return Question("compare_integer", Filter(**{attr: v1}), filter2=Filter(**{attr: v2}),
                    compare_op=rng.choice(("more", "fewer")))


def _make_query_attribute(scene: Scene, rng: random.Random) -> Question:
    for _ in range(30):
        obj = rng.choice(scene.objects)
        attr = rng.choice(ATTR_TYPES)
        if rng.random() < 0.3 and len(scene.objects) >= 2:
            others = [o for o in scene.objects if o is not obj]
            ref = rng.choice(others)
            ref_filter = _referring_filter(scene, ref, rng)
            if ref_filter is None:
                continue
            rel = rng.choice(RELATIONS)
            head_attrs = [a for a in ATTR_TYPES
                          if a != attr and rng.random() < 0.5]
            head = _filter_from(obj, head_attrs) if head_attrs else Filter()
            q = Question("query_attribute", head, attr_type=attr, relation=rel,
                         filter2=ref_filter)
            matches = [o for o in scene.objects
                       if head.matches(o) and o is not ref and relation_holds(rel, o, ref)]
            if len(matches) == 1:
                return q
            continue
        flt = _referring_filter(scene, obj, rng, exclude_attr=attr)
        if flt is not None and not flt.is_empty():
            return Question("query_attribute", flt, attr_type=attr)
    raise GenerationError("no unambiguous query_attribute referent found")


def _make_compare_attribute(scene: Scene, rng: random.Random) -> Question:
    if len(scene.objects) < 2:
        raise GenerationError("compare_attribute needs two objects")
    for _ in range(30):
        a, b = rng.sample(scene.objects, 2)
        attr = rng.choice(ATTR_TYPES)
        fa = _referring_filter(scene, a, rng, exclude_attr=attr)
        fb = _referring_filter(scene, b, rng, exclude_attr=attr)
        if fa is not None and fb is not None and not fa.is_empty() and not fb.is_empty():
            return Question("compare_attribute", fa, filter2=fb, attr_type=attr)
    raise GenerationError("no unambiguous compare_attribute pair found")


_MAKERS = {"exist": _make_exist, "count": _make_count,
           "compare_integer": _make_compare_integer,
           "query_attribute": _make_query_attribute,
           "compare_attribute": _make_compare_attribute}


def generate_question(scene: Scene, category: str, seed: int,
                      question_id: str = "") -> QASample:
    """Realize one question of `category` about `scene`, with its oracle answer."""
    if category not in _MAKERS:
        raise ContractError(f"unknown category {category!r}")
    if not scene.objects:
        raise GenerationError("scene has no objects")
    rng = random.Random(seed)
    program = _MAKERS[category](scene, rng)
    answer = answer_oracle(scene, program)
    tokens = realize_tokens(program)
    return QASample(question_id or f"q-{seed}", scene.scene_id, category, tokens,
                    answer, program)


# -- corpus files ------------------------------------------------------


def _category_counts(n: int, mix: dict) -> dict:
    """Largest-remainder apportionment of n samples over the category mix."""
    total = sum(mix.values())
    shares = {c: n * w / total for c, w in mix.items()}
    counts = {c: int(s) for c, s in shares.items()}
    leftovers = sorted(mix, key=lambda c: shares[c] - counts[c], reverse=True)
    for c in leftovers[:n - sum(counts.values())]:
        counts[c] += 1
    return counts


def build_dataset(condition: str, n_samples: int, out_dir, seed: int,
                  config: GenConfig = GenConfig(), mix: dict = None,
                  questions_per_scene: int = 1):
    """Write scene and question files; byte-identical for identical arguments.

    Returns (scenes_path, questions_path).
    """
    if n_samples < 1:
        raise ContractError("n_samples must be >= 1")
    cond = get_condition(condition)
    mix = dict(mix) if mix else {c: 1.0 for c in CATEGORIES}
    counts = _category_counts(n_samples, mix)
    order = [c for c in CATEGORIES for _ in range(counts.get(c, 0))]
    random.Random(seed).shuffle(order)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenes_path = out_dir / "scenes.txt"
    questions_path = out_dir / "questions.txt"
    mix_text = ",".join(f"{c}:{mix.get(c, 0):g}" for c in CATEGORIES)

    scene_lines, question_lines = [], []
    n_scenes = 0
    for i, category in enumerate(order):
        for attempt in range(200):
            scene_seed = seed * 1_000_003 + i * 211 + attempt
            scene = generate_scene(cond, config, scene_seed,
                                   scene_id=f"{condition}-s{seed}-{i:06d}")
            try:
                sample = generate_question(scene, category, scene_seed + 1,
                                           question_id=f"{condition}-q{seed}-{i:06d}")
                break
            except GenerationError:
                continue
        else:
            raise GenerationError(f"could not realize a {category} question after 200 scenes")
        n_scenes += 1
        objs = ";".join(f"{o.size},{o.shape},{o.material},{o.color},{o.row},{o.col}"
                        for o in scene.objects)
        scene_lines.append(f"{scene.scene_id}\t{scene.seed}\t{scene.H}x{scene.W}"
                           f"\t{scene.condition}\t{objs}")
        question_lines.append(f"{sample.question_id}\t{sample.scene_id}\t{sample.category}"
                              f"\t{' '.join(sample.tokens)}\t{sample.answer}")

    header_meta = (f"# condition={condition} seed={seed} grid={config.H}x{config.W} "
                   f"objects={config.min_objects}..{config.max_objects} mix={mix_text}")
    scenes_path.write_text("\n".join([SCENES_FORMAT, header_meta + f" count={n_scenes}"]
                                     + scene_lines) + "\n")
    questions_path.write_text("\n".join([QUESTIONS_FORMAT, header_meta + f" count={len(order)}"]
                                        + question_lines) + "\n")
    return scenes_path, questions_path


def write_corpus(corpus: "Corpus", out_dir):
    """Serialize an in-memory corpus (e.g. a shard) back to the file format."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene_lines = []
    for scene_id in sorted(corpus.scenes):
        s = corpus.scenes[scene_id]
        objs = ";".join(f"{o.size},{o.shape},{o.material},{o.color},{o.row},{o.col}"
                        for o in s.objects)
        scene_lines.append(f"{s.scene_id}\t{s.seed}\t{s.H}x{s.W}\t{s.condition}\t{objs}")
    question_lines = [f"{q.question_id}\t{q.scene_id}\t{q.category}"
                      f"\t{' '.join(q.tokens)}\t{q.answer}" for q in corpus.samples]
    meta = corpus.meta or "# derived corpus"
    (out_dir / "scenes.txt").write_text(
        "\n".join([SCENES_FORMAT, meta] + scene_lines) + "\n")
    (out_dir / "questions.txt").write_text(
        "\n".join([QUESTIONS_FORMAT, meta] + question_lines) + "\n")
    return out_dir / "scenes.txt", out_dir / "questions.txt"


@dataclass
class Corpus:
    """An in-memory dataset: scenes by id plus question samples."""

    scenes: dict
    samples: list
    meta: str = ""

    def __len__(self):
        return len(self.samples)


def load_corpus(directory) -> Corpus:
    """Read a built dataset back; question programs are re-parsed from tokens."""
    directory = Path(directory)
    scenes_path = directory / "scenes.txt"
    questions_path = directory / "questions.txt"
    for path, magic in ((scenes_path, SCENES_FORMAT), (questions_path, QUESTIONS_FORMAT)):
        if not path.exists():
            raise FileNotFoundError(f"missing corpus file: {path}")
        first = path.open().readline().strip()
        if first != magic:
            raise ContractError(f"{path}: unrecognized format header {first!r}")

    scenes = {}
    lines = scenes_path.read_text().splitlines()
    for line in lines[2:]:
        scene_id, seed, dims, condition, objs = line.split("\t")
        H, W = (int(x) for x in dims.split("x"))
        objects = []
        for spec in objs.split(";"):
            size, shape, material, color, row, col = spec.split(",")
            objects.append(ObjectSpec(size, shape, material, color, int(row), int(col)))
        scenes[scene_id] = Scene(scene_id, int(seed), H, W, condition, objects)

    samples = []
    qlines = questions_path.read_text().splitlines()
    for line in qlines[2:]:
        qid, scene_id, category, text, answer = line.split("\t")
        tokens = text.split(" ")
        samples.append(QASample(qid, scene_id, category, tokens, answer,
                                program=parse_question_tokens(tokens)))
    return Corpus(scenes, samples, meta=qlines[1])
