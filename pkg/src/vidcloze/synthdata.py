"""Synthetic grounded world: text corpus, video-caption pairs, QA sets.

Scenes are tuples (color, object, action, location, count). Video
features are linear-additive: a fixed random embedding per attribute
value plus count times a unit vector, noised per frame, so a linear
projection can in principle read every attribute back out.

The text corpus is built from a handful of templated families chosen so
that a small model can memorize it: within each family, scene tuples
differ pairwise in at least two slots, which makes every single masked
slot recoverable from the rest of the sentence. Question sentences use
exactly the question strings the QA datasets use, and answer slots sit
in the same "answer : <value> ." frame the downstream cloze prompt has.
Captions never mention counts, so count questions stay at the blind
floor until supervision arrives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fusion import VideoFeatures
from .rng import RngStream
from .vocab import BLANK

OBJECTS = ["ball", "car", "dog", "cat", "bird", "box",
           "cup", "book", "chair", "lamp", "phone", "robot"]
COLORS = ["red", "blue", "green", "yellow", "purple", "orange", "black", "white"]
ACTIONS = ["rolling", "sleeping", "jumping", "spinning", "shaking", "resting"]
LOCATIONS = ["kitchen", "garden", "office", "garage", "living room", "dining room"]
COUNT_WORDS = ["one", "two", "three", "four", "five"]

ATTRIBUTES = {"color": COLORS, "object": OBJECTS, "action": ACTIONS,
              "location": LOCATIONS, "count": COUNT_WORDS}
QUESTION_TYPES = ("color", "object", "action", "location", "count")

_FILLER_VERB_PAIRS = [("sees", "likes"), ("finds", "keeps"), ("wants", "holds")]

FILLER_WORDS = """
apple bread cheese butter honey sugar salt pepper rice pasta
soup bean corn grape lemon melon peach pear plum cherry
mango banana carrot onion potato tomato radish garlic celery spinach
wolf fox bear deer moose otter beaver rabbit mouse squirrel
horse sheep goat cow pig duck goose swan
""".split()


@dataclass(frozen=True)
class SceneSpec:
    color: str
    object: str
    action: str
    location: str
    count: int
    scene_id: int

    def attribute(self, qtype: str) -> str:
        if qtype == "count":
            return COUNT_WORDS[self.count - 1]
        return getattr(self, qtype)


@dataclass
class WorldConfig:
    seed: int = 0
    n_text_sentences: int = 552
    n_pairs: int = 5000
    n_qa_train: int = 1500
    n_qa_test: int = 500
    feature_dim: int = 32
    frames: int = 8
    noise_sigma: float = 0.1
    heldout_fraction: float = 0.15
    subtitle_prob: float = 0.3

    def __post_init__(self):
        for name in ("n_text_sentences", "n_pairs", "n_qa_train", "n_qa_test",
                     "feature_dim", "frames"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.heldout_fraction <= 0.5:
            raise ValueError("heldout_fraction must be in [0, 0.5]")
        if not 0.0 <= self.subtitle_prob <= 1.0:
            raise ValueError("subtitle_prob must be in [0, 1]")


# -- visual features ------------------------------------------------------


_EMBED_CACHE: dict = {}


def attribute_embeddings(config: WorldConfig) -> dict:
    """Fixed per-value embedding table, a pure function of config.seed.

    Cached per (seed, feature_dim); treat the arrays as read-only.
    """
    key = (config.seed, config.feature_dim)
    if key in _EMBED_CACHE:
        return _EMBED_CACHE[key]
    stream = RngStream(config.seed, "world/embeddings")
    table = {}
    for kind in ("color", "object", "action", "location"):
        for value in ATTRIBUTES[kind]:
            table[(kind, value)] = stream.child(f"{kind}/{value}").normal(
                (config.feature_dim,), std=1.0 / np.sqrt(config.feature_dim))
    table[("count", "unit")] = stream.child("count/unit").normal(
        (config.feature_dim,), std=1.0 / np.sqrt(config.feature_dim))
    _EMBED_CACHE[key] = table
    return table


def visual_features(scene: SceneSpec, config: WorldConfig,
                    stream: RngStream) -> VideoFeatures:
    """T noisy copies of the scene's additive attribute vector."""
    table = attribute_embeddings(config)
    base = (table[("color", scene.color)] + table[("object", scene.object)]
            + table[("action", scene.action)] + table[("location", scene.location)]
            + scene.count * table[("count", "unit")])
    noise = stream.normal((config.frames, config.feature_dim), std=config.noise_sigma) \
        if config.noise_sigma > 0 else np.zeros((config.frames, config.feature_dim),
                                                dtype=np.float32)
    feats = base[None, :].astype(np.float32) + noise
    return VideoFeatures(features=feats,
                         valid=np.ones(config.frames, dtype=bool),
                         source_id=f"scene{scene.scene_id:08d}")


# -- question / caption templates ----------------------------------------


def question_text(qtype: str, scene: SceneSpec) -> str:
    if qtype == "color":
        return f"what color is the {scene.object}"
    if qtype == "object":
        return f"what object is in the {scene.location}"
    if qtype == "action":
        return f"what is the {scene.object} doing"
    if qtype == "location":
        return f"where is the {scene.object}"
    if qtype == "count":
        return "how many objects are there"
    raise ValueError(f"unknown question type {qtype!r}")


def caption_text(scene: SceneSpec) -> str:
    return (f"a {scene.color} {scene.object} is {scene.action} "
            f"in the {scene.location}")


def parse_caption(caption: str) -> dict:
    """Inverse of caption_text (captions are unambiguous by construction)."""
    words = caption.split()
    if len(words) < 8 or words[0] != "a" or words[3] != "is":
        raise ValueError(f"not a caption: {caption!r}")
    return {"color": words[1], "object": words[2], "action": words[4],
            "location": " ".join(words[7:])}


def hint_text(qtype: str, value: str) -> str:
    return f"the narrator says the {qtype} is {value}"


# -- corpus ---------------------------------------------------------------


@dataclass(frozen=True)
class ClozeProbe:
    """One maskable slot: token list, position, and the set of fillers
    that count as correct there."""
    tokens: tuple
    mask_index: int
    valid: frozenset


def _first_words(values) -> frozenset:
    return frozenset(v.split()[0] for v in values)


def _spaced_tuple_pool(stream: RngStream, need: int) -> list:
    """Scene tuples with pairwise Hamming distance >= 2 over the four
    slots, so a sentence remains identifiable with any one slot masked."""
    pool = [(c, o, a, l) for c in COLORS for o in OBJECTS
            for a in ACTIONS for l in LOCATIONS]
    kept = []
    for idx in stream.permutation(len(pool)):
        cand = pool[int(idx)]
        ok = True
        for prev in kept:
            if sum(x != y for x, y in zip(cand, prev)) < 2:
                ok = False
                break
        if ok:
            kept.append(cand)
            if len(kept) >= need:
                return kept
    raise RuntimeError(f"tuple pool exhausted at {len(kept)} of {need}")


@dataclass
class _SentenceSpec:
    tokens: list
    probes: list = field(default_factory=list)

    def add(self, *words):
        self.tokens.extend(words)

    def slot(self, value: str, valid) -> None:
        """Append a value (possibly multi-word) and register probes.

        The first word probes against the first words of the candidate
        set; later words of a multi-word value are forced by the first
        and probe as singletons.
        """
        words = value.split()
        self.probes.append((len(self.tokens), _first_words(valid)))
        self.add(words[0])
        for w in words[1:]:
            self.probes.append((len(self.tokens), frozenset([w])))
            self.add(w)


_BASE_COUNTS = {"declarative": 96, "decl_qa": 72, "qa_decl": 72,
                "count_decl_qa": 24, "count_qa_decl": 24, "count_qa": 24,
                "narrator": 96, "mc_bridge": 72}
_FILLER_FRAMES = 3


def _family_sizes(config: WorldConfig) -> dict:
    filler_base = _FILLER_FRAMES * (len(FILLER_WORDS) // 2)
    base_total = sum(_BASE_COUNTS.values()) + filler_base
    scale = config.n_text_sentences / base_total
    sizes = {k: max(1, round(v * scale)) for k, v in _BASE_COUNTS.items()}
    sizes["filler"] = max(1, round(filler_base * scale))
    return sizes


def _add_declarative(spec: _SentenceSpec, c, o, a, l, article="the"):
    spec.add(article)
    spec.slot(c, COLORS)
    spec.slot(o, OBJECTS)
    spec.add("is")
    spec.slot(a, ACTIONS)
    spec.add("in", "the")
    spec.slot(l, _first_words(LOCATIONS))
    spec.add(".")


def _add_question(spec: _SentenceSpec, qtype: str, scene_words: dict):
    spec.add("question", ":")
    spec.add(*question_text(qtype, scene_words).split())
    spec.add("?")


class _SceneWords:
    """Duck-typed stand-in for SceneSpec inside question_text."""

    def __init__(self, object="", location=""):
        self.object = object
        self.location = location


def _corpus_specs(config: WorldConfig) -> list:
    stream = RngStream(config.seed, "world/corpus")
    sizes = _family_sizes(config)
    specs = []

    # Slot spacing only needs to hold among sentences with the same
    # template shape; sentences from different families (or different
    # question types) are told apart by their surrounding words.
    qa_types = ["color", "object", "action", "location"]

    def typed_pools(family: str, n: int) -> dict:
        per_type = {q: sum(1 for i in range(n) if qa_types[i % 4] == q)
                    for q in qa_types}
        return {q: iter(_spaced_tuple_pool(
            stream.child(f"tuples/{family}/{q}"), k))
            for q, k in per_type.items()}

    # Plain declaratives, alternating article.
    decl_tuples = _spaced_tuple_pool(stream.child("tuples/decl"),
                                     sizes["declarative"])
    for i in range(sizes["declarative"]):
        c, o, a, l = decl_tuples[i]
        spec = _SentenceSpec([])
        _add_declarative(spec, c, o, a, l, article="the" if i % 2 == 0 else "a")
        specs.append(spec)

    # Declarative followed by a QA about it: the transfer template. The
    # answer is forced by the declarative, so its probe is a singleton.
    declqa_pools = typed_pools("declqa", sizes["decl_qa"])
    for i in range(sizes["decl_qa"]):
        qtype = qa_types[i % 4]
        c, o, a, l = next(declqa_pools[qtype])
        value = {"color": c, "object": o, "action": a, "location": l}[qtype]
        spec = _SentenceSpec([])
        _add_declarative(spec, c, o, a, l)
        _add_question(spec, qtype, _SceneWords(object=o, location=l))
        spec.add("answer", ":")
        spec.slot(value, [value])
        spec.add(".")
        specs.append(spec)

    # The same pairing reversed: the answer comes before the declarative
    # that forces it, so recovering a masked answer means looking ahead.
    qadecl_pools = typed_pools("qadecl", sizes["qa_decl"])
    for i in range(sizes["qa_decl"]):
        qtype = qa_types[i % 4]
        c, o, a, l = next(qadecl_pools[qtype])
        value = {"color": c, "object": o, "action": a, "location": l}[qtype]
        spec = _SentenceSpec([])
        _add_question(spec, qtype, _SceneWords(object=o, location=l))
        spec.add("answer", ":")
        spec.slot(value, [value])
        spec.add(".")
        _add_declarative(spec, c, o, a, l)
        specs.append(spec)

    # Count statement plus its QA (the only grounded source of counts).
    for i in range(sizes["count_decl_qa"]):
        n = COUNT_WORDS[i % 5]
        spec = _SentenceSpec([])
        spec.add("there", "are")
        spec.slot(n, COUNT_WORDS)
        spec.add("objects", ".")
        _add_question(spec, "count", _SceneWords())
        spec.add("answer", ":")
        spec.slot(n, [n])
        spec.add(".")
        specs.append(spec)

    # Count QA answered before its statement; both mentions force each
    # other, so both probe as singletons.
    for i in range(sizes["count_qa_decl"]):
        n = COUNT_WORDS[i % 5]
        spec = _SentenceSpec([])
        _add_question(spec, "count", _SceneWords())
        spec.add("answer", ":")
        spec.slot(n, [n])
        spec.add(".")
        spec.add("there", "are")
        spec.slot(n, [n])
        spec.add("objects", ".")
        specs.append(spec)

    # Bare count QA: teaches the format, answer intentionally ungrounded.
    for i in range(sizes["count_qa"]):
        n = COUNT_WORDS[i % 5]
        spec = _SentenceSpec([])
        _add_question(spec, "count", _SceneWords())
        spec.add("answer", ":")
        spec.slot(n, COUNT_WORDS)
        spec.add(".")
        specs.append(spec)

    # Narrator hints: answer and hint value confirm each other, in the
    # same order the downstream prompt uses (answer before subtitles).
    # The few question contexts repeat with different values, so the
    # only reliable way to fill either slot is to echo the other one.
    narrator_types = list(QUESTION_TYPES)
    nvalue_stream = stream.child("narrator_values")
    for i in range(sizes["narrator"]):
        qtype = narrator_types[i % 5]
        values = ATTRIBUTES[qtype]
        value = values[int(nvalue_stream.integers(0, len(values)))]
        o = OBJECTS[(i // 5) % 4]
        l = LOCATIONS[(i // 5) % 4]
        spec = _SentenceSpec([])
        _add_question(spec, qtype, _SceneWords(object=o, location=l))
        spec.add("answer", ":")
        spec.slot(value, [value])
        spec.add(".")
        spec.add("subtitles", ":", "the", "narrator", "says", "the", qtype, "is")
        spec.slot(value, [value])
        spec.add(".")
        specs.append(spec)

    # Yes/no verification against a declarative context.
    mc_stream = stream.child("mc")
    mc_pools = typed_pools("mc", sizes["mc_bridge"])
    for i in range(sizes["mc_bridge"]):
        qtype = qa_types[i % 4]
        c, o, a, l = next(mc_pools[qtype])
        truth = {"color": c, "object": o, "action": a, "location": l}[qtype]
        say_yes = i % 2 == 0
        if say_yes:
            cand = truth
        else:
            others = [v for v in ATTRIBUTES[qtype] if v != truth]
            cand = others[int(mc_stream.integers(0, len(others)))]
        spec = _SentenceSpec([])
        _add_declarative(spec, c, o, a, l)
        _add_question(spec, qtype, _SceneWords(object=o, location=l))
        spec.add("is", "it", "'")
        spec.slot(cand, [truth] if say_yes else
                  [v for v in ATTRIBUTES[qtype] if v != truth])
        spec.add("'", "?")
        spec.slot("yes" if say_yes else "no", ["yes" if say_yes else "no"])
        spec.add(".")
        specs.append(spec)

    # Filler: fixed word pairs stated twice per sentence, in three verb
    # frames per pair (roles swap in the last frame). A masked word is
    # always recoverable from its other mention or its partner, and each
    # word recurs across frames often enough to be learnable.
    n_filler = min(sizes["filler"], _FILLER_FRAMES * (len(FILLER_WORDS) // 2))
    for s in range(n_filler):
        pair_i, frame = divmod(s, _FILLER_FRAMES)
        a_word = FILLER_WORDS[2 * pair_i]
        b_word = FILLER_WORDS[2 * pair_i + 1]
        v1, v2 = _FILLER_VERB_PAIRS[frame % 3]
        first, second = (a_word, b_word) if frame < 2 else (b_word, a_word)
        spec = _SentenceSpec([])
        spec.add("the")
        spec.slot(first, [first])
        spec.add(v1, "the")
        spec.slot(second, [second])
        spec.add("and", "the")
        spec.slot(first, [first])
        spec.add(v2, "the")
        spec.slot(second, [second])
        spec.add(".")
        specs.append(spec)

    return specs


def gen_text_corpus(config: WorldConfig) -> list:
    """The pretraining corpus, one sentence per string."""
    return [" ".join(spec.tokens) for spec in _corpus_specs(config)]


def gen_cloze_probes(config: WorldConfig, n_probes: int = 300) -> list:
    """Sample maskable slots of the corpus with their valid-filler sets."""
    stream = RngStream(config.seed, "world/probes")
    all_probes = []
    for spec in _corpus_specs(config):
        tokens = tuple(spec.tokens)
        for idx, valid in spec.probes:
            all_probes.append(ClozeProbe(tokens, idx, valid))
    if not all_probes:
        raise RuntimeError("corpus has no probe slots")
    picks = stream.integers(0, len(all_probes), size=min(n_probes, len(all_probes)))
    return [all_probes[int(i)] for i in picks]


# -- scenes, pairs, QA ----------------------------------------------------


def heldout_combinations(config: WorldConfig) -> set:
    """(object, color) pairs reserved for test QA."""
    stream = RngStream(config.seed, "world/heldout")
    combos = [(o, c) for o in OBJECTS for c in COLORS]
    n_held = round(config.heldout_fraction * len(combos))
    order = stream.permutation(len(combos))
    return {combos[int(i)] for i in order[:n_held]}


def _sample_scene(stream: RngStream, scene_id: int, allowed_combos: list) -> SceneSpec:
    o, c = allowed_combos[int(stream.integers(0, len(allowed_combos)))]
    return SceneSpec(
        color=c, object=o,
        action=ACTIONS[int(stream.integers(0, len(ACTIONS)))],
        location=LOCATIONS[int(stream.integers(0, len(LOCATIONS)))],
        count=int(stream.integers(1, 6)),
        scene_id=scene_id)


def gen_pairs(config: WorldConfig) -> list:
    """Video-caption pairs for cross-modal training.

    Held-out (object, color) combinations never appear here.
    """
    held = heldout_combinations(config)
    allowed = [(o, c) for o in OBJECTS for c in COLORS if (o, c) not in held]
    stream = RngStream(config.seed, "world/pairs")
    feat_stream = stream.child("features")
    pairs = []
    for i in range(config.n_pairs):
        scene = _sample_scene(stream.child(f"scene/{i}"), i, allowed)
        video = visual_features(scene, config, feat_stream.child(str(i)))
        pairs.append((video, caption_text(scene)))
    return pairs


_SPLIT_BASES = {"train": 1_000_000, "test": 2_000_000}


def gen_qa(config: WorldConfig, kind: str, split: str = "train") -> list:
    """TaskInstances for one task kind and split.

    Train scenes avoid held-out combinations; test scenes draw from the
    full product, so held-out pairs show up only in test. Scene ids are
    offset per split and never overlap the pair ids.
    """
    from .tasks import TaskInstance

    if kind not in ("open_ended", "multi_choice", "fill_blank"):
        raise ValueError(f"unknown task kind {kind!r}")
    if split not in _SPLIT_BASES:
        raise ValueError(f"unknown split {split!r}")
    held = heldout_combinations(config)
    all_combos = [(o, c) for o in OBJECTS for c in COLORS]
    combos = all_combos if split == "test" \
        else [x for x in all_combos if x not in held]
    n = config.n_qa_train if split == "train" else config.n_qa_test
    qtypes = [q for q in QUESTION_TYPES if kind != "fill_blank" or q != "count"]

    stream = RngStream(config.seed, f"world/qa/{kind}/{split}")
    out = []
    for i in range(n):
        scene = _sample_scene(stream.child(f"scene/{i}"), _SPLIT_BASES[split] + i, combos)
        video = visual_features(scene, config, stream.child(f"feat/{i}"))
        qtype = qtypes[i % len(qtypes)]
        gold_value = scene.attribute(qtype)
        subtitles = None
        if float(stream.child(f"subs/{i}").uniform(())) < config.subtitle_prob:
            subtitles = hint_text(qtype, gold_value)

        if kind == "open_ended":
            out.append(TaskInstance(
                kind=kind, qtype=qtype, video=video, subtitles=subtitles,
                question=question_text(qtype, scene), gold=gold_value,
                scene_id=scene.scene_id))
        elif kind == "multi_choice":
            pool = [v for v in ATTRIBUTES[qtype] if v != gold_value]
            pick = stream.child(f"mc/{i}")
            order = pick.permutation(len(pool))
            distractors = [pool[int(j)] for j in order[:3]]
            gold_index = int(pick.integers(0, 4))
            candidates = list(distractors)
            candidates.insert(gold_index, gold_value)
            out.append(TaskInstance(
                kind=kind, qtype=qtype, video=video, subtitles=subtitles,
                question=question_text(qtype, scene), candidates=candidates,
                gold=gold_index, scene_id=scene.scene_id))
        else:
            words = caption_text(scene).split()
            value_words = gold_value.split()
            start = {"color": 1, "object": 2, "action": 4, "location": 7}[qtype]
            blanked = words[:start] + [BLANK] + words[start + len(value_words):]
            out.append(TaskInstance(
                kind=kind, qtype=qtype, video=video, subtitles=subtitles,
                sentence_with_blank=" ".join(blanked), gold=gold_value,
                scene_id=scene.scene_id))
    return out


def modal_floor(instances: list) -> float:
    """Accuracy of the blind per-question-type modal-answer predictor."""
    from collections import Counter, defaultdict
    by_type = defaultdict(Counter)
    for inst in instances:
        gold = inst.gold if isinstance(inst.gold, str) else inst.candidates[inst.gold]
        by_type[inst.qtype][gold] += 1
    hits = sum(counter.most_common(1)[0][1] for counter in by_type.values())
    return hits / len(instances) if instances else 0.0
