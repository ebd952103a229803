"""Synthetic biography corpus, QA example construction and answer metrics.

Everything here is a pure function of its inputs and an explicit seed. The
vocabulary is closed: every surface form the generator can emit is known up
front, so a word-level tokenizer covers it exactly and answer spans are exact
token spans.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GENERATOR_VERSION = "bio-synth/1"

BOS, EOS, CTX, Q, A = "[BOS]", "[EOS]", "[CTX]", "[Q:]", "[A:]"
SPECIALS = (BOS, EOS, CTX, Q, A)

ATTRIBUTES = ("birth_date", "birth_place", "institution", "occupation")
MODES = ("closed", "oracle", "counterfactual", "niah", "bare")

FIRST_NAMES = (
    "adam", "alice", "boris", "carla", "daniel", "diana", "edgar", "elena",
    "felix", "fiona", "george", "greta", "hugo", "helen", "ivan", "irene",
    "jonas", "julia", "karl", "klara", "leon", "lucia", "marco", "maria",
    "niko", "nora", "oscar", "olga", "pavel", "paula", "rafael", "rosa",
    "simon", "sofia", "tomas", "tina", "viktor", "vera", "walter", "wanda",
)
LAST_NAMES = (
    "abbott", "baker", "carter", "dalton", "ellis", "foster", "garner",
    "hayes", "ingram", "jensen", "keller", "larsen", "morgan", "novak",
    "olsen", "porter", "quinn", "reyes", "sutton", "turner", "underwood",
    "vance", "weber", "young", "zeller", "brandt", "costa", "duval", "esposito",
    "fischer", "gallo", "horvat", "iversen", "kowalski", "lindqvist", "moreau",
    "nielsen", "okafor", "petrov", "romano",
)
MONTHS = (
    "january", "february", "march", "april", "may", "june", "july", "august",
    "september", "october", "november", "december",
)
DAYS = tuple(str(d) for d in range(1, 29))
YEARS = tuple(str(y) for y in range(1900, 1980))
CITIES = (
    "paris", "berlin", "vienna", "madrid", "lisbon", "rome", "prague", "warsaw",
    "oslo", "dublin", "athens", "cairo", "lagos", "nairobi", "tokyo", "seoul",
    "lima", "bogota", "quito", "toronto", "chicago", "boston", "denver",
    "seattle", "munich", "hamburg", "milan", "naples", "zurich", "geneva",
    "new york city", "buenos aires", "los angeles", "san francisco",
    "rio de janeiro", "mexico city", "cape town", "hong kong",
)
INSTITUTIONS = (
    "harvard university", "yale university", "stanford university",
    "princeton university", "columbia university", "cornell university",
    "oxford university", "cambridge university", "trinity college",
    "imperial college", "kings college", "eton college",
    "university of tokyo", "university of vienna", "university of chicago",
    "university of toronto", "university of madrid", "university of lisbon",
    "university of geneva", "university of warsaw", "sorbonne university",
    "heidelberg university", "leiden university", "uppsala university",
    "bologna university", "padua university", "mcgill university",
    "duke university", "rice university", "brown university",
)
OCCUPATIONS = (
    "firefighter", "boxer", "architect", "chemist", "physicist", "painter",
    "sculptor", "novelist", "poet", "journalist", "surgeon", "dentist",
    "pharmacist", "lawyer", "judge", "diplomat", "banker", "economist",
    "historian", "linguist", "botanist", "geologist", "astronomer",
    "mathematician", "engineer", "pilot", "sailor", "chef", "composer",
    "violinist", "pianist", "photographer", "actor", "dancer", "teacher",
    "librarian", "computer scientist", "civil servant", "film director",
    "television producer",
)

# Poem titles used as haystack needles, plus multi-token strings that never
# occur in any biography.
POEM_NEEDLES = (
    "auguries of innocence", "al-burda", "der zauberlehrling",
    "ode to a nightingale", "she walks in beauty", "the raven",
    "the road not taken", "the second coming", "the waste land",
    "über die berge",
)
FILLER_WORDS = (
    "zorvex", "quiltan", "mavrel", "tessik", "brunol", "yarrin", "okume",
    "pelloc", "sidrun", "vantor", "glimbo", "hestra", "jukari", "lorpen",
    "nimbet", "ufrald", "wistog", "crenna", "drovik", "fazzle",
)
SYNTHETIC_NEEDLES = (
    "zorvex quiltan mavrel", "tessik brunol", "yarrin okume pelloc",
    "sidrun vantor", "glimbo hestra jukari", "lorpen nimbet",
    "ufrald wistog crenna", "drovik fazzle",
)

# One phrasing per attribute for each of eight surface templates. ``{s}`` is
# the subject reference, ``{v}`` the attribute value.
_PHRASES = {
    "birth_date": (
        "{s} was born on {v} .",
        "{s} came into the world on {v} .",
        "the birthday of {s} was {v} .",
        "{s} was born on {v} , a cold day .",
    ),
    "birth_place": (
        "{s} was born in {v} .",
        "the birthplace of {s} was {v} .",
        "{s} was born in the city of {v} .",
        "{s} spent early years in {v} , the place of birth .",
    ),
    "institution": (
        "{s} studied at {v} .",
        "{s} was educated at {v} .",
        "{s} graduated from {v} .",
        "{s} attended {v} as a student .",
    ),
    "occupation": (
        "{s} worked as a {v} .",
        "{s} had a long career as a {v} .",
        "by profession , {s} was a {v} .",
        "{s} became a respected {v} .",
    ),
}
_FILLERS = (
    "", "{s} was known for hard work .", "{s} loved long walks .",
    "friends remember {s} fondly .",
)
N_TEMPLATES = 8

QUESTIONS = {
    "birth_date": ("when was {s} born ?", "at which date was {s} born ?"),
    "birth_place": ("where was {s} born ?", "in which place was {s} born ?"),
    "institution": ("where was {s} educated ?", "at which institution was {s} educated ?"),
    "occupation": ("what was the occupation of {s} ?", "what was the profession of {s} ?"),
}
CLOZES = {
    "birth_date": "{s} was born on",
    "birth_place": "{s} was born in",
    "institution": "{s} was educated at",
    "occupation": "{s} worked as a",
}

ARTICLES = frozenset({"a", "an", "the"})
PUNCT = frozenset({".", ",", "?", "!", ";", ":", "'s"})


def words(text: str) -> list[str]:
    return text.split()


def _template_words() -> set[str]:
    out: set[str] = set()
    for group in (*_PHRASES.values(), _FILLERS, *QUESTIONS.values(), CLOZES.values()):
        for phrase in group:
            out.update(w for w in words(phrase) if w not in ("{s}", "{v}"))
    return out


def build_vocab() -> list[str]:
    """Full closed vocabulary: specials first, then every word sorted."""
    pool: set[str] = _template_words()
    for group in (FIRST_NAMES, LAST_NAMES, MONTHS, DAYS, YEARS, CITIES,
                  INSTITUTIONS, OCCUPATIONS, POEM_NEEDLES, FILLER_WORDS,
                  SYNTHETIC_NEEDLES):
        for item in group:
            pool.update(words(item))
    return list(SPECIALS) + sorted(pool)


class Tokenizer:
    """Word-level tokenizer over the closed synthetic vocabulary."""

    def __init__(self, vocab: Sequence[str] | None = None):
        self.vocab = list(vocab) if vocab is not None else build_vocab()
        self.index = {w: i for i, w in enumerate(self.vocab)}
        if len(self.index) != len(self.vocab):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str | Sequence[str]) -> list[int]:
        toks = words(text) if isinstance(text, str) else list(text)
        try:
            return [self.index[w] for w in toks]
        except KeyError as exc:
            raise ValueError(f"word {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.vocab[int(i)] for i in ids]

    def id(self, word: str) -> int:
        return self.index[word]

    @property
    def bos(self) -> int:
        return self.index[BOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]


@dataclass(frozen=True)
class BioRecord:
    entity_id: int
    name: str
    birth_date: str
    birth_place: str
    institution: str
    occupation: str
    template_id: int
    attribute_order: tuple[str, ...]

    def value(self, attribute: str) -> str:
        if attribute not in ATTRIBUTES:
            raise ValueError(f"unknown attribute {attribute!r}")
        return getattr(self, attribute)

    def with_value(self, attribute: str, value: str) -> "BioRecord":
        data = asdict(self)
        data[attribute] = value
        data["attribute_order"] = tuple(self.attribute_order)
        return BioRecord(**data)


def render_segments(record: BioRecord) -> list[tuple[str, str | None]]:
    """Render a biography as (text, attribute-or-None) segments.

    Attribute values appear verbatim and exactly once; the segment list lets
    callers recover value spans without searching.
    """
    t = record.template_id
    last = record.name.split()[-1]
    out: list[tuple[str, str | None]] = []
    for k, attr in enumerate(record.attribute_order):
        subject = record.name if (k == 0 or t % 2 == 0) else last
        phrase = _PHRASES[attr][(t // 2 + k) % 4]
        head, tail = phrase.split("{v}")
        out.append((head.replace("{s}", subject).strip(), None))
        out.append((record.value(attr), attr))
        out.append((tail.strip(), None))
    filler = _FILLERS[t % len(_FILLERS)]
    if filler:
        out.append((filler.replace("{s}", last), None))
    return [(text, attr) for text, attr in out if text]


def render_bio(record: BioRecord) -> str:
    return " ".join(text for text, _ in render_segments(record))


def generate_corpus(n_entities: int, seed: int) -> list[BioRecord]:
    """Draw ``n_entities`` biographies with unique names, deterministically."""
    if n_entities < 1:
        raise ValueError("n_entities must be >= 1")
    capacity = len(FIRST_NAMES) * len(LAST_NAMES)
    if n_entities > capacity:
        raise ValueError(f"n_entities={n_entities} exceeds name-pool capacity {capacity}")
    rng = np.random.default_rng(seed)
    name_ids = rng.choice(capacity, size=n_entities, replace=False)
    records = []
    for eid, nid in enumerate(name_ids):
        first = FIRST_NAMES[nid // len(LAST_NAMES)]
        last = LAST_NAMES[nid % len(LAST_NAMES)]
        date = (f"{DAYS[rng.integers(len(DAYS))]} {MONTHS[rng.integers(len(MONTHS))]} "
                f"{YEARS[rng.integers(len(YEARS))]}")
        records.append(BioRecord(
            entity_id=eid,
            name=f"{first} {last}",
            birth_date=date,
            birth_place=CITIES[rng.integers(len(CITIES))],
            institution=INSTITUTIONS[rng.integers(len(INSTITUTIONS))],
            occupation=OCCUPATIONS[rng.integers(len(OCCUPATIONS))],
            template_id=int(rng.integers(N_TEMPLATES)),
            attribute_order=tuple(ATTRIBUTES[i] for i in rng.permutation(len(ATTRIBUTES))),
        ))
    return records


def validate_record(record: BioRecord) -> None:
    text = f" {render_bio(record)} "
    for attr in ATTRIBUTES:
        value = record.value(attr)
        if not value or f" {value} " not in text:
            raise ValueError(f"entity {record.entity_id}: {attr} {value!r} missing from biography")


def split_entities(records: Sequence[BioRecord], eval_fraction: float, seed: int
                   ) -> tuple[list[int], list[int]]:
    """Disjoint (train, eval) entity-id partition."""
    ids = np.array([r.entity_id for r in records])
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_eval = int(round(eval_fraction * len(ids)))
    eval_ids = sorted(int(i) for i in ids[perm[:n_eval]])
    train_ids = sorted(int(i) for i in ids[perm[n_eval:]])
    return train_ids, eval_ids


@dataclass
class QAExample:
    """A tokenized prompt with exact half-open span annotations."""

    mode: str
    entity_id: int
    attribute: str | None
    prompt: list[str]
    task_span: tuple[int, int]
    ret_span: tuple[int, int] | None
    needle_span: tuple[int, int] | None
    gold: str
    counterfactual: str | None = None
    context_span: tuple[int, int] | None = None
    example_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for span in (self.task_span, self.ret_span, self.needle_span, self.context_span):
            if span is not None:
                lo, hi = span
                if not 0 <= lo <= hi <= len(self.prompt):
                    raise ValueError(f"span {span} outside prompt of length {len(self.prompt)}")

    @property
    def target(self) -> str:
        """The answer the model is expected to give for this prompt."""
        if self.mode == "counterfactual":
            return self.counterfactual
        return self.gold

    def context_words(self) -> list[str]:
        if self.context_span is None:
            return []
        lo, hi = self.context_span
        return self.prompt[lo:hi]

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("task_span", "ret_span", "needle_span", "context_span"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "QAExample":
        d = dict(d)
        for k in ("task_span", "ret_span", "needle_span", "context_span"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def _context_tokens(record: BioRecord) -> tuple[list[str], dict[str, tuple[int, int]]]:
    toks: list[str] = []
    spans: dict[str, tuple[int, int]] = {}
    for text, attr in render_segments(record):
        w = words(text)
        if attr is not None:
            spans[attr] = (len(toks), len(toks) + len(w))
        toks.extend(w)
    return toks, spans


def question_text(record: BioRecord, attribute: str, variant: int = 0) -> str:
    forms = QUESTIONS[attribute]
    return forms[variant % len(forms)].replace("{s}", record.name)


def build_qa_example(record: BioRecord, mode: str, attribute: str | None,
                     swap_source: BioRecord | str | None = None,
                     question_variant: int = 0) -> QAExample:
    """Assemble ``[BOS] [CTX] context [Q:] question [A:]`` with spans.

    ``closed`` drops the context; ``bare`` keeps the context but has no
    question (the answer cue follows the biography directly). In
    ``counterfactual`` mode ``swap_source`` supplies the replacement value,
    either as a record of another entity or as a literal string.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    gold = record.value(attribute) if attribute else ""
    cf = None
    shown = record
    if mode == "counterfactual":
        if swap_source is None:
            raise ValueError("counterfactual mode needs a swap_source")
        cf = swap_source if isinstance(swap_source, str) else swap_source.value(attribute)
        if cf == gold:
            raise ValueError("swap value equals the gold answer")
        shown = record.with_value(attribute, cf)

    prompt = [BOS]
    ret_span = ctx_span = None
    if mode != "closed":
        prompt.append(CTX)
        ctx, spans = _context_tokens(shown)
        off = len(prompt)
        ctx_span = (off, off + len(ctx))
        if attribute is not None and mode in ("oracle", "counterfactual"):
            lo, hi = spans[attribute]
            ret_span = (off + lo, off + hi)
        prompt.extend(ctx)
    if mode in ("niah", "bare"):
        task_span = (len(prompt), len(prompt))
    else:
        prompt.append(Q)
        q = words(question_text(record, attribute, question_variant))
        task_span = (len(prompt), len(prompt) + len(q))
        prompt.extend(q)
    prompt.append(A)
    ex = QAExample(
        mode=mode, entity_id=record.entity_id, attribute=attribute, prompt=prompt,
        task_span=task_span, ret_span=ret_span, needle_span=None, gold=gold,
        counterfactual=cf, context_span=ctx_span,
        example_id=f"{mode}:{record.entity_id}:{attribute}:{question_variant}",
    )
    return ex


def insert_needle(example: QAExample, needle: str, seed: int,
                  max_len: int | None = None) -> QAExample:
    """Insert ``needle`` at a seeded word boundary inside the context.

    The returned example is in ``niah`` mode with ``gold`` set to the needle
    and every span after the insertion point shifted.
    """
    if example.context_span is None:
        raise ValueError("needle insertion needs a context")
    nw = words(needle)
    if not nw:
        raise ValueError("empty needle")
    if max_len is not None and len(example.prompt) + len(nw) > max_len:
        raise ValueError("needle longer than the remaining context budget")
    lo, hi = example.context_span
    # boundaries strictly inside the context, never splitting an answer span
    banned = set()
    if example.ret_span is not None:
        banned.update(range(example.ret_span[0] + 1, example.ret_span[1]))
    candidates = [p for p in range(lo, hi + 1) if p not in banned]
    pos = candidates[int(np.random.default_rng(seed).integers(len(candidates)))]

    def shift(span):
        if span is None:
            return None
        a, b = span
        # a span ending exactly at the insertion point does not grow
        grow_end = b > pos or (a == b and a >= pos)
        return (a + len(nw) if a >= pos else a, b + len(nw) if grow_end else b)

    prompt = example.prompt[:pos] + nw + example.prompt[pos:]
    return QAExample(
        mode="niah", entity_id=example.entity_id, attribute=example.attribute,
        prompt=prompt, task_span=shift(example.task_span), ret_span=shift(example.ret_span),
        needle_span=(pos, pos + len(nw)), gold=needle, counterfactual=None,
        context_span=(lo, hi + len(nw)),
        example_id=f"{example.example_id}|needle={needle}|{seed}",
        meta={**example.meta, "source_mode": example.mode},
    )


def remove_span(tokens: Sequence[str], span: tuple[int, int]) -> list[str]:
    lo, hi = span
    return list(tokens[:lo]) + list(tokens[hi:])


def cloze_prompt(record: BioRecord, attribute: str) -> list[str]:
    return [BOS, CTX] + words(CLOZES[attribute].replace("{s}", record.name))


def normalize(tokens: Iterable[str]) -> list[str]:
    """Lowercase, drop specials, punctuation tokens and articles."""
    out = []
    for tok in tokens:
        if tok in SPECIALS:
            continue
        t = tok.lower()
        if t in PUNCT or t in ARTICLES:
            continue
        out.append(t)
    return out


def score_answer(prediction: Sequence[str] | str, example: QAExample | None = None,
                 gold: str | None = None) -> dict:
    """Recall, exact match and K-precision of a predicted answer.

    ``recall`` is the fraction of normalized gold tokens present in the
    prediction; ``k_precision`` the fraction of predicted content tokens found
    in the context, or ``None`` when there is no context.
    """
    pred_words = words(prediction) if isinstance(prediction, str) else list(prediction)
    if gold is None:
        if example is None:
            raise ValueError("need an example or an explicit gold answer")
        gold = example.target
    g = normalize(words(gold))
    p = normalize(pred_words)
    pset = set(p)
    recall = sum(1 for t in g if t in pset) / len(g) if g else 0.0
    em = float(bool(g) and p == g)
    kp = None
    if example is not None and example.context_span is not None:
        ctx = set(normalize(example.context_words()))
        kp = sum(1 for t in p if t in ctx) / len(p) if p else 0.0
    return {"recall": recall, "em": em, "k_precision": kp}


# ---------------------------------------------------------------- file I/O

def _header(kind: str, seed: int, **extra) -> dict:
    return {"kind": kind, "generator_version": GENERATOR_VERSION, "seed": seed, **extra}


def write_corpus(path: str | Path, records: Sequence[BioRecord], seed: int, **extra) -> None:
    lines = [json.dumps(_header("corpus", seed, **extra), sort_keys=True)]
    for r in records:
        d = asdict(r)
        d["attribute_order"] = list(r.attribute_order)
        d["text"] = render_bio(r)
        lines.append(json.dumps(d, sort_keys=True, ensure_ascii=False))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path: str | Path) -> tuple[dict, list[BioRecord]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    if header.get("generator_version") != GENERATOR_VERSION:
        raise ValueError(f"corpus generator version {header.get('generator_version')!r} "
                         f"!= {GENERATOR_VERSION!r}")
    records = []
    for line in lines[1:]:
        d = json.loads(line)
        d.pop("text")
        d["attribute_order"] = tuple(d["attribute_order"])
        records.append(BioRecord(**d))
    return header, records


def write_examples(path: str | Path, examples: Sequence[QAExample], seed: int, **extra) -> None:
    lines = [json.dumps(_header("qa", seed, **extra), sort_keys=True)]
    lines += [json.dumps(ex.to_json(), sort_keys=True, ensure_ascii=False) for ex in examples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_examples(path: str | Path) -> tuple[dict, list[QAExample]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return json.loads(lines[0]), [QAExample.from_json(json.loads(l)) for l in lines[1:]]
