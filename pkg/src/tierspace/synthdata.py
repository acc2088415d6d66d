"""Deterministic tiered caption chains over synthetic scenes.

Captions follow a closed grammar: ``[no|not] [attribute] noun [relation]``
where the relation is an accessory phrase ("with dark hair" / "without dark
hair") or a spatial phrase ("beside a cat" / "not beside a cat"). Tier 1 is
the bare category noun, tier 2 prefixes one true attribute, tier 3 appends
one true relation. Each tier gets a hard or easy negative that is verified
false for the target object against scene ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

__all__ = [
    "VOCAB", "DatasetConfig", "SceneObject", "Scene", "CaptionChain",
    "UnsatisfiableSceneError", "NoValidNegativeError", "AttributeExhaustedError",
    "CorpusFormatError",
    "generate_scene", "positive_chain", "negative_chain", "make_chain",
    "parse_caption", "caption_true", "matching_objects",
    "emit_dataset", "load_corpus", "load_scenes", "corpus_stats",
    "build_token_list", "generate_corpus",
]


class UnsatisfiableSceneError(RuntimeError):
    """Scene constraints cannot yield a unique tier-3 caption."""


class NoValidNegativeError(RuntimeError):
    """Every candidate negative stays true for the target object."""


class AttributeExhaustedError(RuntimeError):
    """Object carries no attribute to build a tier-2 caption from."""


class CorpusFormatError(ValueError):
    """Corpus or scene file violates the schema."""


# ---------------------------------------------------------------------------
# embedded vocabulary tables
# ---------------------------------------------------------------------------

_GROUPS = {
    "person": ["man", "woman", "boy", "girl", "child", "worker", "runner",
               "dancer", "farmer", "teacher", "doctor", "painter"],
    "animal": ["dog", "cat", "bird", "horse", "cow", "sheep", "rabbit",
               "duck", "goat", "pig"],
    "vehicle": ["car", "truck", "bus", "bike", "train", "boat", "scooter",
                "van", "tractor", "taxi"],
    "furniture": ["table", "chair", "bench", "sofa", "shelf", "desk",
                  "stool", "cabinet"],
    "plant": ["tree", "bush", "flower", "fern", "cactus"],
    "thing": ["ball", "box", "cup", "bottle", "lamp", "sign", "kite", "drum",
              "clock", "mirror", "basket", "ladder", "bucket", "stone", "book"],
}

_ANTONYMS = {
    "man": "woman", "woman": "man", "boy": "girl", "girl": "boy",
    "dog": "cat", "cat": "dog", "car": "truck", "truck": "car",
    "table": "chair", "chair": "table", "tree": "bush", "bush": "tree",
    "cup": "bottle", "bottle": "cup", "teacher": "doctor", "doctor": "teacher",
}

_ACCESSORIES = {
    "person": ["dark hair", "red shirt", "a hat", "a backpack", "a camera",
               "a scarf", "blue jeans", "a badge"],
    "animal": ["a collar", "a bell", "white paws", "a spotted coat", "a ribbon"],
    "vehicle": ["a flag", "red wheels", "an open roof", "a trailer", "round lights"],
    "furniture": ["metal legs", "a cushion", "a drawer", "carved edges"],
    "plant": ["white blossoms", "broad leaves", "a nest"],
    "thing": ["a handle", "a label", "painted stripes", "a lid"],
}

_COLORS = ["red", "blue", "green", "yellow", "black", "white", "purple",
           "orange", "pink", "brown", "gray", "golden", "silver", "beige",
           "teal", "maroon", "crimson", "navy", "olive", "violet"]
_NUMBERS = ["one", "two", "three", "four", "five", "six"]
_SIZES = ["tiny", "small", "medium", "large", "huge", "giant"]
_SPATIAL = ["left", "middle", "right"]

# size bucket upper bounds on box area (last bucket is open-ended)
_SIZE_EDGES = [0.004, 0.012, 0.03, 0.06, 0.1]

_SPATIAL_TEMPLATES = ["beside", "above", "below", "near"]

# geometric margins keeping the pairwise predicates crisp
_ABOVE_MARGIN = 0.15
_BESIDE_DY = 0.12
_BESIDE_DX = 0.4
_NEAR_DIST = 0.3


def _build_vocab():
    nouns = {}
    group_of = {}
    for group, names in _GROUPS.items():
        for n in names:
            group_of[n] = group
    for group, names in _GROUPS.items():
        for n in names:
            contrast = []
            if n in _ANTONYMS:
                contrast.append(_ANTONYMS[n])
            contrast += [m for m in names if m != n and m not in contrast][:2]
            nouns[n] = {"group": group, "contrast": contrast}
    attributes = {
        "spatial": list(_SPATIAL),
        "color": list(_COLORS),
        "number": list(_NUMBERS),
        "size": list(_SIZES),
    }
    return {
        "nouns": nouns,
        "groups": _GROUPS,
        "attributes": attributes,
        "accessories": _ACCESSORIES,
        "spatial_templates": list(_SPATIAL_TEMPLATES),
        "determiners": ["no"],
    }


VOCAB = _build_vocab()

_ALL_NOUNS = sorted(VOCAB["nouns"])
# every third noun is reserved for zero-shot evaluation targets
_HELDOUT_NOUNS = tuple(_ALL_NOUNS[2::3])
_ATTR_WORDS = {w for words in VOCAB["attributes"].values() for w in words}
_ATTR_CLASS = {w: cls for cls, words in VOCAB["attributes"].items() for w in words}


def build_token_list():
    """Every token the grammar can emit, for the encoder vocabulary."""
    tokens = set(_ALL_NOUNS) | _ATTR_WORDS | {"no", "not", "with", "without", "a"}
    tokens.update(_SPATIAL_TEMPLATES)
    for group_accs in _ACCESSORIES.values():
        for phrase in group_accs:
            tokens.update(phrase.split())
    return sorted(tokens)


# ---------------------------------------------------------------------------
# scene model
# ---------------------------------------------------------------------------

@dataclass
class SceneObject:
    id: int
    box: tuple  # (x_min, y_min, x_max, y_max) in [0, 1] units
    category: str
    attributes: dict = field(default_factory=dict)  # class -> word
    accessories: list = field(default_factory=list)

    @property
    def center(self):
        x0, y0, x1, y1 = self.box
        return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)

    @property
    def area(self):
        x0, y0, x1, y1 = self.box
        return (x1 - x0) * (y1 - y0)


@dataclass
class Scene:
    id: int
    objects: list
    width: float = 1.0
    height: float = 1.0

    def object_by_id(self, oid):
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(f"no object {oid} in scene {self.id}")

    def spatial_edges(self, obj):
        """True pairwise spatial relations for ``obj`` as (template, noun)."""
        edges = []
        for other in self.objects:
            if other.id == obj.id:
                continue
            for template in _SPATIAL_TEMPLATES:
                if _spatial_true(template, obj, other):
                    edges.append((template, other.category))
        return sorted(set(edges))


def _spatial_word(cx):
    if cx < 1.0 / 3.0:
        return "left"
    if cx < 2.0 / 3.0:
        return "middle"
    return "right"


def _size_word(area):
    for word, edge in zip(_SIZES, _SIZE_EDGES):
        if area < edge:
            return word
    return _SIZES[-1]


def _spatial_true(template, obj, other):
    cx, cy = obj.center
    ox, oy = other.center
    if template == "above":
        return cy <= oy - _ABOVE_MARGIN
    if template == "below":
        return cy >= oy + _ABOVE_MARGIN
    if template == "beside":
        return abs(cy - oy) < _BESIDE_DY and 0.0 < abs(cx - ox) <= _BESIDE_DX
    if template == "near":
        return 0.0 < ((cx - ox) ** 2 + (cy - oy) ** 2) ** 0.5 <= _NEAR_DIST
    raise ValueError(f"unknown spatial template {template!r}")


# ---------------------------------------------------------------------------
# caption grammar: parse and evaluate
# ---------------------------------------------------------------------------

def parse_caption(text):
    """Parse a grammar caption into its structured components.

    Returns a dict with keys: determiner_negated, attr (word or None),
    attr_negated, noun, relation (dict or None).
    """
    tokens = text.lower().split()
    if not tokens:
        raise CorpusFormatError("empty caption")
    out = {"determiner_negated": False, "attr": None, "attr_negated": False,
           "noun": None, "relation": None}
    i = 0
    if tokens[i] == "no":
        out["determiner_negated"] = True
        i += 1
    if i < len(tokens) and tokens[i] == "not" and i + 1 < len(tokens) \
            and tokens[i + 1] in _ATTR_WORDS:
        out["attr_negated"] = True
        i += 1
    if i < len(tokens) and tokens[i] in _ATTR_WORDS:
        out["attr"] = tokens[i]
        i += 1
    if i >= len(tokens) or tokens[i] not in VOCAB["nouns"]:
        raise CorpusFormatError(f"caption {text!r}: expected a known noun")
    out["noun"] = tokens[i]
    i += 1
    if i < len(tokens):
        out["relation"] = _parse_relation(tokens[i:], text)
    return out


def _parse_relation(tokens, text):
    rel = {"kind": None, "negated": False, "accessory": None,
           "template": None, "ref_noun": None}
    if tokens[0] == "with":
        rel.update(kind="accessory", accessory=" ".join(tokens[1:]))
    elif tokens[0] == "without":
        rel.update(kind="accessory", negated=True, accessory=" ".join(tokens[1:]))
    else:
        if tokens[0] == "not":
            rel["negated"] = True
            tokens = tokens[1:]
        if len(tokens) != 3 or tokens[0] not in _SPATIAL_TEMPLATES or tokens[1] != "a" \
                or tokens[2] not in VOCAB["nouns"]:
            raise CorpusFormatError(f"caption {text!r}: malformed relation")
        rel.update(kind="spatial", template=tokens[0], ref_noun=tokens[2])
    if rel["kind"] == "accessory" and not rel["accessory"]:
        raise CorpusFormatError(f"caption {text!r}: empty accessory")
    return rel


def _attr_true(word, obj):
    cls = _ATTR_CLASS[word]
    if cls == "spatial":
        return _spatial_word(obj.center[0]) == word
    if cls == "size":
        return _size_word(obj.area) == word
    return obj.attributes.get(cls) == word


def _relation_true(rel, obj, scene):
    if rel["kind"] == "accessory":
        truth = rel["accessory"] in obj.accessories
    else:
        truth = any(_spatial_true(rel["template"], obj, other)
                    for other in scene.objects
                    if other.id != obj.id and other.category == rel["ref_noun"])
    return (not truth) if rel["negated"] else truth


def caption_true(parsed, obj, scene):
    """Ground-truth evaluation of a parsed caption for one object."""
    if isinstance(parsed, str):
        parsed = parse_caption(parsed)
    if parsed["determiner_negated"]:
        return False  # denies the object's presence
    if parsed["noun"] != obj.category:
        return False
    if parsed["attr"] is not None:
        attr_holds = _attr_true(parsed["attr"], obj)
        if parsed["attr_negated"]:
            attr_holds = not attr_holds
        if not attr_holds:
            return False
    if parsed["relation"] is not None and not _relation_true(parsed["relation"], obj, scene):
        return False
    return True


def matching_objects(caption, scene):
    parsed = parse_caption(caption) if isinstance(caption, str) else caption
    return [o.id for o in scene.objects if caption_true(parsed, o, scene)]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class DatasetConfig:
    n_objects_min: int = 3
    n_objects_max: int = 6
    distractor_mode: str = "differ"  # "differ" | "identical" (stress knob)
    min_words: int = 5
    max_retries: int = 40
    attr_keep_default_prob: float = 0.5
    noun_split: str = "all"  # "all" | "train" | "heldout": zero-shot category pools

    def __post_init__(self):
        if not (2 <= self.n_objects_min <= self.n_objects_max <= 10):
            raise ValueError("object count must satisfy 2 <= min <= max <= 10")
        if self.distractor_mode not in ("differ", "identical"):
            raise ValueError(f"unknown distractor_mode {self.distractor_mode!r}")
        if self.noun_split not in ("all", "train", "heldout"):
            raise ValueError(f"unknown noun_split {self.noun_split!r}")

    def target_nouns(self):
        if self.noun_split == "all":
            return list(_ALL_NOUNS)
        held = set(_HELDOUT_NOUNS)
        if self.noun_split == "heldout":
            return sorted(held)
        return sorted(n for n in _ALL_NOUNS if n not in held)


def _round_box(x0, y0, x1, y1):
    return (round(x0, 4), round(y0, 4), round(x1, 4), round(y1, 4))


def _sample_box(rng):
    w = rng.uniform(0.05, 0.38)
    h = rng.uniform(0.05, 0.38)
    x0 = rng.uniform(0.0, 1.0 - w)
    y0 = rng.uniform(0.0, 1.0 - h)
    return _round_box(x0, y0, x0 + w, y0 + h)


def _assign_attributes(obj, rng):
    obj.attributes = {
        "spatial": _spatial_word(obj.center[0]),
        "size": _size_word(obj.area),
        "color": str(rng.choice(_COLORS)),
        "number": str(rng.choice(_NUMBERS)),
    }


def _sample_object(oid, category, rng):
    obj = SceneObject(id=oid, box=_sample_box(rng), category=category)
    _assign_attributes(obj, rng)
    accs = VOCAB["accessories"][VOCAB["nouns"][category]["group"]]
    k = int(rng.integers(1, min(3, len(accs)) + 1))
    picks = rng.choice(len(accs), size=k, replace=False)
    obj.accessories = sorted(accs[i] for i in picks)
    return obj


def _true_relations(obj, scene):
    """Every relation phrase true for the object, as parsed dicts."""
    rels = [{"kind": "accessory", "negated": False, "accessory": acc,
             "template": None, "ref_noun": None} for acc in obj.accessories]
    for template, noun in scene.spatial_edges(obj):
        rels.append({"kind": "spatial", "negated": False, "accessory": None,
                     "template": template, "ref_noun": noun})
    return rels


def _relation_text(rel):
    if rel["kind"] == "accessory":
        head = "without" if rel["negated"] else "with"
        return f"{head} {rel['accessory']}"
    prefix = "not " if rel["negated"] else ""
    return f"{prefix}{rel['template']} a {rel['ref_noun']}"


def generate_scene(config, seed):
    """Deterministic scene with >= 1 same-category distractor.

    Raises UnsatisfiableSceneError when bounded retries cannot produce a
    target with a unique tier-3 caption (e.g. identical-distractor mode).
    """
    pool = config.target_nouns()
    for attempt in range(config.max_retries):
        rng = np.random.default_rng([seed, attempt])
        n = int(rng.integers(config.n_objects_min, config.n_objects_max + 1))
        target_cat = str(rng.choice(pool))
        target = _sample_object(0, target_cat, rng)
        distractor = _sample_object(1, target_cat, rng)
        if config.distractor_mode == "identical":
            distractor.box = target.box
            distractor.attributes = dict(target.attributes)
            distractor.accessories = list(target.accessories)
        else:
            # make sure the distractor genuinely differs somewhere
            if distractor.attributes == target.attributes \
                    and distractor.accessories == target.accessories:
                others = [c for c in _COLORS if c != target.attributes["color"]]
                distractor.attributes["color"] = str(rng.choice(others))
        objs = [target, distractor]
        for oid in range(2, n):
            cat = str(rng.choice(_ALL_NOUNS))
            objs.append(_sample_object(oid, cat, rng))
        scene = Scene(id=seed, objects=objs)
        if _unique_combo_exists(scene, target):
            return scene
    raise UnsatisfiableSceneError(
        f"seed {seed}: no unique tier-3 caption for the target after "
        f"{config.max_retries} retries")


def _unique_combo_exists(scene, obj):
    for attr_cls, word in obj.attributes.items():
        for rel in _true_relations(obj, scene):
            caption = f"{word} {obj.category} {_relation_text(rel)}"
            if matching_objects(caption, scene) == [obj.id]:
                return True
    return False


@dataclass
class CaptionChain:
    scene_id: int
    target_object_id: int
    tiers: list  # three dicts: {"pos", "neg", "neg_kind"}

    def positives(self):
        return [t["pos"] for t in self.tiers]

    def negatives(self):
        return [t["neg"] for t in self.tiers]


def positive_chain(scene, object_id, seed, config=None):
    """Tier captions for one object: noun, +attribute, +relation.

    The attribute class stays at the spatial default with probability 0.5
    and is otherwise resampled uniformly from the object's other classes.
    The tier-3 caption is retried until it is unique in the scene.
    """
    config = config or DatasetConfig()
    obj = scene.object_by_id(object_id)
    rng = np.random.default_rng([seed, scene.id, object_id])
    if not obj.attributes:
        raise AttributeExhaustedError(f"object {object_id} has no attributes")
    classes = sorted(obj.attributes)
    rels = _true_relations(obj, scene)
    if not rels:
        raise UnsatisfiableSceneError(f"object {object_id} has no true relation")
    for _ in range(config.max_retries):
        if "spatial" in classes and (len(classes) == 1
                                     or rng.random() < config.attr_keep_default_prob):
            attr_cls = "spatial"
        else:
            attr_cls = str(rng.choice([c for c in classes if c != "spatial"]))
        word = obj.attributes[attr_cls]
        rel = rels[int(rng.integers(len(rels)))]
        tier1 = obj.category
        tier2 = f"{word} {obj.category}"
        tier3 = f"{tier2} {_relation_text(rel)}"
        if matching_objects(tier3, scene) == [obj.id]:
            return [tier1, tier2, tier3]
    raise UnsatisfiableSceneError(
        f"object {object_id}: no unique tier-3 caption in {config.max_retries} tries")


# negative-kind sampling: hard kinds get twice the mass of easy kinds
_NEG_KINDS = {
    1: [("antonym", 4.0), ("random-noun", 1.0), ("determiner", 1.0)],
    2: [("attribute-swap", 2.0), ("attribute-negation", 1.0)],
    3: [("relation-swap", 2.0), ("relation-negation", 1.0)],
}


def _pick_kind(tier, rng):
    kinds, weights = zip(*_NEG_KINDS[tier])
    w = np.array(weights) / sum(weights)
    return str(rng.choice(kinds, p=w))


def negative_chain(scene, positives, target_id, seed):
    """One verified-false negative per tier, locality-preserving."""
    obj = scene.object_by_id(target_id)
    rng = np.random.default_rng([seed, scene.id, target_id, 1])
    parsed3 = parse_caption(positives[2])
    attr_word = parsed3["attr"]
    rel = parsed3["relation"]
    tiers = []
    for tier in (1, 2, 3):
        for _ in range(60):
            kind = _pick_kind(tier, rng)
            neg = _build_negative(tier, kind, obj, scene, positives, attr_word, rel, rng)
            if neg is not None and not caption_true(neg, obj, scene):
                tiers.append({"pos": positives[tier - 1], "neg": neg, "neg_kind": kind})
                break
        else:
            raise NoValidNegativeError(
                f"tier {tier}: all candidate negatives stay true for object {target_id}")
    return tiers


def _build_negative(tier, kind, obj, scene, positives, attr_word, rel, rng):
    if tier == 1:
        if kind == "antonym":
            return str(rng.choice(VOCAB["nouns"][obj.category]["contrast"]))
        if kind == "random-noun":
            others = [n for n in _ALL_NOUNS if n != obj.category]
            return str(rng.choice(others))
        return f"no {positives[0]}"
    if tier == 2:
        cls = _ATTR_CLASS[attr_word]
        if kind == "attribute-swap":
            others = [w for w in VOCAB["attributes"][cls] if w != attr_word]
            if not others:
                return None
            return f"{rng.choice(others)} {obj.category}"
        return f"not {attr_word} {obj.category}"
    # tier 3: swap or negate the relation, keeping attr + noun fixed
    stem = positives[1]
    if kind == "relation-negation":
        flipped = dict(rel, negated=not rel["negated"])
        return f"{stem} {_relation_text(flipped)}"
    candidates = []
    group = VOCAB["nouns"][obj.category]["group"]
    for acc in VOCAB["accessories"][group]:
        candidates.append({"kind": "accessory", "negated": False,
                           "accessory": acc, "template": None, "ref_noun": None})
    for template in _SPATIAL_TEMPLATES:
        for noun in (rel["ref_noun"], obj.category):
            if noun:
                candidates.append({"kind": "spatial", "negated": False, "accessory": None,
                                   "template": template, "ref_noun": noun})
    # keep only swaps already false for the target so the sampled hard/easy
    # mix survives verification
    candidates = [c for c in candidates if not _relation_true(c, obj, scene)]
    if not candidates:
        return None
    pick = candidates[int(rng.integers(len(candidates)))]
    return f"{stem} {_relation_text(pick)}"


def make_chain(scene, target_id, seed, config=None):
    positives = positive_chain(scene, target_id, seed, config)
    tiers = negative_chain(scene, positives, target_id, seed)
    return CaptionChain(scene_id=scene.id, target_object_id=target_id, tiers=tiers)


# ---------------------------------------------------------------------------
# validation + serialization
# ---------------------------------------------------------------------------

def _check_containment(positives):
    t1, t2, t3 = (p.split() for p in positives)
    if not (len(t1) < len(t2) < len(t3)):
        return False
    if t2[-len(t1):] != t1:  # tier 1 noun ends tier 2
        return False
    return t3[: len(t2)] == t2  # tier 2 prefixes tier 3


def _check_locality(chain):
    p1, p2, p3 = (parse_caption(p) for p in chain.positives())
    n1, n2, n3 = (parse_caption(n) for n in chain.negatives())
    if n1["attr"] is not None or n1["relation"] is not None:
        return False
    tier1_changed = n1["noun"] != p1["noun"] or n1["determiner_negated"]
    if not tier1_changed:
        return False
    if n2["noun"] != p2["noun"] or n2["relation"] is not None:
        return False
    if (n2["attr"], n2["attr_negated"]) == (p2["attr"], False):
        return False
    if n3["noun"] != p3["noun"] or (n3["attr"], n3["attr_negated"]) != (p3["attr"], False):
        return False
    return n3["relation"] != p3["relation"]


def validate_chain(chain, scene, min_words=0):
    """Invariant bundle for one chain; raises CorpusFormatError on violation."""
    positives = chain.positives()
    if not _check_containment(positives):
        raise CorpusFormatError(f"chain {chain.scene_id}: tier containment broken")
    if not _check_locality(chain):
        raise CorpusFormatError(f"chain {chain.scene_id}: negative locality broken")
    if matching_objects(positives[2], scene) != [chain.target_object_id]:
        raise CorpusFormatError(f"chain {chain.scene_id}: tier-3 caption not unique")
    target = scene.object_by_id(chain.target_object_id)
    for tier in chain.tiers:
        if caption_true(tier["neg"], target, scene):
            raise CorpusFormatError(
                f"chain {chain.scene_id}: negative {tier['neg']!r} true for target")
    if min_words and len(positives[2].split()) < min_words:
        return False  # rejected, not an error
    return True


CORPUS_SCHEMA = "tierspace-corpus-v1"
SCENES_SCHEMA = "tierspace-scenes-v1"


def emit_dataset(scenes, chains, corpus_path, scenes_path, min_words=5):
    """Validate and write chains + scenes as line-delimited JSON.

    Tier-3 captions shorter than ``min_words`` drop their chain (length
    filter applies at tier 3 only). Returns (written, skipped).
    """
    by_id = {s.id: s for s in scenes}
    written = skipped = 0
    lines = [json.dumps({"schema": CORPUS_SCHEMA}, sort_keys=True)]
    for chain in chains:
        ok = validate_chain(chain, by_id[chain.scene_id], min_words=min_words)
        if not ok:
            skipped += 1
            continue
        rec = {"scene_id": chain.scene_id, "target_id": chain.target_object_id,
               "tiers": chain.tiers}
        lines.append(json.dumps(rec, sort_keys=True))
        written += 1
    with open(corpus_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    scene_lines = [json.dumps({"schema": SCENES_SCHEMA}, sort_keys=True)]
    for s in scenes:
        rec = {
            "id": s.id, "width": s.width, "height": s.height,
            "objects": [dict(asdict(o), spatial_edges=s.spatial_edges(o))
                        for o in s.objects],
        }
        scene_lines.append(json.dumps(rec, sort_keys=True))
    with open(scenes_path, "w") as fh:
        fh.write("\n".join(scene_lines) + "\n")
    return written, skipped


def _read_jsonl(path, schema):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorpusFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path}:1: bad header ({exc})") from exc
    if header.get("schema") != schema:
        raise CorpusFormatError(f"{path}:1: expected schema {schema!r}")
    records = []
    for ln, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            records.append(json.loads(raw))
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"{path}:{ln}: invalid record ({exc})") from exc
    return records


def load_corpus(path):
    records = _read_jsonl(path, CORPUS_SCHEMA)
    chains = []
    for ln, rec in enumerate(records, start=2):
        try:
            tiers = rec["tiers"]
            if len(tiers) != 3 or any(k not in t for t in tiers
                                      for k in ("pos", "neg", "neg_kind")):
                raise KeyError("tiers")
            chains.append(CaptionChain(scene_id=rec["scene_id"],
                                       target_object_id=rec["target_id"],
                                       tiers=tiers))
        except KeyError as exc:
            raise CorpusFormatError(f"{path}:{ln}: missing field {exc}") from exc
    return chains


def load_scenes(path):
    records = _read_jsonl(path, SCENES_SCHEMA)
    scenes = []
    for ln, rec in enumerate(records, start=2):
        try:
            objs = [SceneObject(id=o["id"], box=tuple(o["box"]), category=o["category"],
                                attributes=o["attributes"], accessories=o["accessories"])
                    for o in rec["objects"]]
            scenes.append(Scene(id=rec["id"], objects=objs,
                                width=rec["width"], height=rec["height"]))
        except KeyError as exc:
            raise CorpusFormatError(f"{path}:{ln}: missing field {exc}") from exc
    return scenes


def corpus_stats(chains):
    """Word-count histograms per tier (positive captions)."""
    stats = {}
    for t in range(3):
        lengths = [len(c.tiers[t]["pos"].split()) for c in chains]
        stats[f"tier{t + 1}"] = {
            "mean": float(np.mean(lengths)),
            "histogram": {str(k): int(v) for k, v in
                          zip(*np.unique(lengths, return_counts=True))},
        }
    stats["records"] = len(chains)
    return stats


def generate_corpus(config, seed, n_scenes):
    """Scenes plus one chain per scene, all derived from one master seed."""
    scenes, chains = [], []
    for i in range(n_scenes):
        scene = generate_scene(config, seed * 100003 + i)
        chain = make_chain(scene, target_id=0, seed=seed)
        scenes.append(scene)
        chains.append(chain)
    return scenes, chains
