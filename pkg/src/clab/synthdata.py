"""Synthetic languages: character codebooks rendered as noisy feature frames.

Every language maps each text symbol to a Gaussian prototype vector. A child
language inherits its parent's prototypes except for a mutated subset, whose
prototypes are reassigned among themselves. Reassignment (rather than fresh
draws) keeps related languages in the same acoustic space, so the same frame
can mean different characters under different language codes.

Mutation is driven by per-symbol uniforms drawn from the child's
``codebook_seed``. Two children sharing that seed mutate nested symbol sets:
the one with the higher rate drifts further along the same lineage.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .vocab import LANG_CODES, TEXT_SYMBOLS

SPLITS = ("train", "dev", "test")
# Irish train/dev/test file counts scaled by 0.1
DEFAULT_SPLIT_SIZES = {"train": 285, "dev": 37, "test": 84}
_SPLIT_OFFSET = {"train": 0, "dev": 1_000_000, "test": 2_000_000}

LEXICON_SIZE = 400
MAX_TEXT_CHARS = 61  # max_tgt_len 64 minus <sot>, code and <eot>
WORDS_PER_UTT = (3, 12)
WORD_LEN = (1, 8)

_LETTERS = TEXT_SYMBOLS.replace(" ", "")
_SYMBOL_INDEX = {s: i for i, s in enumerate(TEXT_SYMBOLS)}


@dataclass(frozen=True)
class ParentRef:
    id: str
    mutation_rate: float


@dataclass(frozen=True)
class LanguageSpec:
    """Generative definition of one synthetic language.

    ``alphabet`` lists word symbols; the space separator is always allowed.
    """

    id: str
    code_token: str
    alphabet: str
    codebook_seed: int
    noise_sigma: float = 0.1
    frames_per_char: int = 1
    parent: ParentRef | None = None
    feature_dim: int = 16

    def to_json(self) -> dict:
        d = asdict(self)
        d["parent"] = asdict(self.parent) if self.parent else None
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "LanguageSpec":
        d = dict(d)
        parent = d.pop("parent", None)
        try:
            spec = cls(parent=ParentRef(**parent) if parent else None, **d)
        except TypeError as exc:
            raise ValueError(f"malformed language spec: {exc}") from None
        _validate(spec)
        return spec


def _validate(spec: LanguageSpec) -> None:
    letters = spec.alphabet.replace(" ", "")
    if not letters:
        raise ValueError(f"language {spec.id!r}: alphabet is empty")
    bad = sorted(set(letters) - set(_LETTERS))
    if bad:
        raise ValueError(f"language {spec.id!r}: alphabet has unknown symbols {bad}")
    if spec.code_token not in LANG_CODES:
        raise ValueError(f"language {spec.id!r}: {spec.code_token!r} is not a language-code token")
    if spec.noise_sigma < 0 or spec.frames_per_char < 1 or spec.feature_dim < 1:
        raise ValueError(f"language {spec.id!r}: invalid noise/frame/feature settings")
    if spec.parent is not None and not 0.0 <= spec.parent.mutation_rate <= 1.0:
        raise ValueError(f"language {spec.id!r}: mutation_rate must lie in [0, 1]")


def make_language(
    id: str,
    seed: int,
    *,
    code_token: str,
    alphabet: str,
    noise_sigma: float = 0.1,
    frames_per_char: int = 1,
    parent: str | None = None,
    mutation_rate: float = 0.0,
    feature_dim: int = 16,
) -> LanguageSpec:
    spec = LanguageSpec(
        id=id,
        code_token=code_token,
        alphabet="".join(sorted(set(alphabet.replace(" ", "")))),
        codebook_seed=int(seed),
        noise_sigma=float(noise_sigma),
        frames_per_char=int(frames_per_char),
        parent=ParentRef(parent, float(mutation_rate)) if parent is not None else None,
        feature_dim=int(feature_dim),
    )
    _validate(spec)
    return spec


@dataclass
class Language:
    """A resolved language: spec plus its prototypes and lexicon."""

    spec: LanguageSpec
    prototypes: np.ndarray  # (len(TEXT_SYMBOLS), feature_dim)
    lexicon: list[str]
    mutated: frozenset[str] = frozenset()

    @property
    def id(self) -> str:
        return self.spec.id

    @property
    def code(self) -> str:
        return self.spec.code_token

    @property
    def symbols(self) -> frozenset[str]:
        return frozenset(self.spec.alphabet) | {" "}


def _random_word(rng: np.random.Generator, letters: str) -> str:
    n = int(rng.integers(WORD_LEN[0], WORD_LEN[1] + 1))
    return "".join(letters[i] for i in rng.integers(0, len(letters), size=n))


def shift_pairs(parent_alphabet: str, child_alphabet: str) -> list[tuple[str, str]]:
    """Letters the child dropped paired, in sorted order, with letters it gained."""
    child = set(child_alphabet)
    dropped = sorted(set(parent_alphabet) - child)
    gained = sorted(child - set(parent_alphabet))
    return list(zip(dropped, gained))


def letter_map(parent_alphabet: str, child_alphabet: str) -> dict[str, str]:
    """Sound shift taking any letter into the child alphabet.

    Paired letters follow :func:`shift_pairs`; any other foreign letter goes
    to the nearest child letter.
    """
    child = sorted(set(child_alphabet))
    mapping = dict(shift_pairs(parent_alphabet, child_alphabet))
    for c in _LETTERS:
        if c in child:
            mapping[c] = c
        elif c not in mapping:
            mapping[c] = min(child, key=lambda x: (abs(ord(x) - ord(c)), x))
    return mapping


def resolve(spec: LanguageSpec, parent: Language | None = None) -> Language:
    """Build prototypes and lexicon for ``spec``.

    A child first inherits its parent's prototypes, with each gained letter
    taking over the prototype of the letter it replaced (spelling moves, the
    sound does not). Then the letters whose lineage uniform falls below the
    mutation rate swap prototypes cyclically among themselves. The space
    separator never mutates.
    """
    _validate(spec)
    if spec.parent is None:
        rng = np.random.default_rng([spec.codebook_seed, 0])
        protos = rng.normal(0.0, 1.0, size=(len(TEXT_SYMBOLS), spec.feature_dim))
        lex_rng = np.random.default_rng([spec.codebook_seed, 2])
        lexicon = [_random_word(lex_rng, spec.alphabet) for _ in range(LEXICON_SIZE)]
        return Language(spec, protos, lexicon)

    if parent is None or parent.id != spec.parent.id:
        raise ValueError(f"language {spec.id!r} needs its parent {spec.parent.id!r} resolved first")
    if parent.spec.feature_dim != spec.feature_dim:
        raise ValueError(f"language {spec.id!r}: feature_dim differs from parent")
    rate = spec.parent.mutation_rate
    inherited = parent.prototypes.copy()
    for old, new in shift_pairs(parent.spec.alphabet, spec.alphabet):
        inherited[_SYMBOL_INDEX[new]] = parent.prototypes[_SYMBOL_INDEX[old]]
    rng = np.random.default_rng([spec.codebook_seed, 1])
    u = rng.random(len(TEXT_SYMBOLS))
    fresh = rng.normal(0.0, 1.0, size=spec.feature_dim)
    order = [i for i in np.argsort(u, kind="stable") if u[i] < rate and TEXT_SYMBOLS[i] in spec.alphabet]
    protos = inherited.copy()
    if len(order) == 1:
        protos[order[0]] = fresh
    elif order:
        # cyclic reassignment along the mutation order: no fixed points
        for pos, sym in enumerate(order):
            protos[sym] = inherited[order[(pos + 1) % len(order)]]

    lex_rng = np.random.default_rng([spec.codebook_seed, 3])
    u_words = lex_rng.random(LEXICON_SIZE)
    mutants = [_random_word(lex_rng, _LETTERS) for _ in range(LEXICON_SIZE)]
    shift = letter_map(parent.spec.alphabet, spec.alphabet)
    lexicon = []
    for word, uw, mutant in zip(parent.lexicon, u_words, mutants):
        src = mutant if uw < rate else word
        lexicon.append("".join(shift[c] for c in src))
    mutated = frozenset(TEXT_SYMBOLS[i] for i in order)
    return Language(spec, protos, lexicon, mutated)


def resolve_roster(specs: Iterable[LanguageSpec]) -> dict[str, Language]:
    """Resolve a set of specs, parents before children."""
    pending = {s.id: s for s in specs}
    done: dict[str, Language] = {}
    while pending:
        progressed = False
        for lid, spec in list(pending.items()):
            if spec.parent is None or spec.parent.id in done:
                done[lid] = resolve(spec, done.get(spec.parent.id) if spec.parent else None)
                del pending[lid]
                progressed = True
        if not progressed:
            raise ValueError(f"unresolvable parents for languages {sorted(pending)}")
    return done


def prototype_overlap(a: Language, b: Language) -> float:
    """Fraction of ``b``'s letters that sound exactly as in ``a``.

    A letter of ``b`` missing from ``a`` is compared with the ``a`` letter
    that shifts onto it.
    """
    back = {new: old for old, new in shift_pairs(a.spec.alphabet, b.spec.alphabet)}
    same = 0
    for c in b.spec.alphabet:
        src = c if c in a.spec.alphabet else back.get(c)
        if src is not None and np.array_equal(a.prototypes[_SYMBOL_INDEX[src]], b.prototypes[_SYMBOL_INDEX[c]]):
            same += 1
    return same / len(b.spec.alphabet)


def synthesize(lang: Language, text: str, utt_seed: int) -> np.ndarray:
    """Render ``text`` as a (frames, feature_dim) array of noisy prototypes."""
    allowed = lang.symbols
    for c in text:
        if c not in allowed:
            raise ValueError(f"character {c!r} not in the alphabet of language {lang.id!r}")
    spec = lang.spec
    idx = np.repeat([_SYMBOL_INDEX[c] for c in text], spec.frames_per_char).astype(np.int64)
    frames = lang.prototypes[idx]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([int(utt_seed), 11])
        frames = frames + rng.normal(0.0, spec.noise_sigma, size=frames.shape)
    return frames


def nearest_prototype_decode(lang: Language, frames: np.ndarray) -> str:
    """Oracle transcription by nearest prototype per character slot."""
    fpc = lang.spec.frames_per_char
    slots = frames.reshape(-1, fpc, frames.shape[1]).mean(axis=1)
    d = ((slots[:, None, :] - lang.prototypes[None, :, :]) ** 2).sum(-1)
    allowed = np.array([s in lang.symbols for s in TEXT_SYMBOLS])
    d[:, ~allowed] = np.inf
    return "".join(TEXT_SYMBOLS[i] for i in d.argmin(axis=1))


@dataclass(frozen=True)
class Utterance:
    text: str
    utt_seed: int


@dataclass
class Corpus:
    language: str
    split: str
    utterances: list[Utterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def records(self) -> list[dict]:
        return [{"lang": self.language, "split": self.split, "text": u.text, "utt_seed": u.utt_seed}
                for u in self.utterances]

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"corpus file {path} is empty")
        recs = [json.loads(ln) for ln in lines]
        langs = {r["lang"] for r in recs}
        splits = {r["split"] for r in recs}
        if len(langs) != 1 or len(splits) != 1:
            raise ValueError(f"corpus file {path} mixes languages or splits")
        return cls(recs[0]["lang"], recs[0]["split"],
                   [Utterance(r["text"], int(r["utt_seed"])) for r in recs])


def make_text(lang: Language, utt_seed: int, max_chars: int = MAX_TEXT_CHARS) -> str:
    rng = np.random.default_rng([int(utt_seed), 7])
    n = int(rng.integers(WORDS_PER_UTT[0], WORDS_PER_UTT[1] + 1))
    words = [lang.lexicon[i] for i in rng.integers(0, len(lang.lexicon), size=n)]
    while len(words) > WORDS_PER_UTT[0] and len(" ".join(words)) > max_chars:
        words.pop()
    return " ".join(words)


def generate_corpus(lang: Language, split: str, n: int | None = None, base_seed: int = 0) -> Corpus:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    n = DEFAULT_SPLIT_SIZES[split] if n is None else n
    if n < 1:
        raise ValueError("corpus size must be at least 1")
    if n > _SPLIT_OFFSET["dev"]:
        raise ValueError("corpus too large for disjoint split seed ranges")
    start = int(base_seed) + _SPLIT_OFFSET[split]
    utts = [Utterance(make_text(lang, start + i), start + i) for i in range(n)]
    return Corpus(lang.id, split, utts)
