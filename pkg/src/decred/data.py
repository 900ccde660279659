"""Synthetic multi-domain corpora, features, augmentation and text handling.

Each utterance is a string of words drawn from a domain lexicon. Features are
rendered per character: a fixed channel template (shared by every domain)
shaped by the domain's channel gain profile, held for a random number of
frames, with a softer first frame so that repeated characters stay
separable, plus Gaussian noise.
"""

from __future__ import annotations

import logging
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError

log = logging.getLogger(__name__)

BLANK, PAD, BOS, EOS, MASK, UNK = 0, 1, 2, 3, 4, 5
SPECIAL_SYMBOLS = ("<blank>", "<pad>", "<s>", "</s>", "[MASK]", "<unk>")
ALPHABET = " abcdefghijklmnopqrstuvwxyz'012345"
MASK_TEXT = "[MASK]"
NUM_CHANNELS = 16
ONSET_SCALE = 0.5
SPEED_FACTORS = (0.9, 1.0, 1.1)
COMMON_POOL_SIZE = 60
COMMON_POOL_SEED = 7
COMMON_POOL_SYMBOLS = "abcdeghiklmnoprstu"


# -- text ------------------------------------------------------------------------

_BRACKETED = re.compile(r"\[[^\]]*\]")
_UNFINISHED = re.compile(r"(?<!\S)[^\s\[\]]+-(?!\S)")
_PUNCT = re.compile(r"[^\w\s']")


def _normalize_segment(text: str) -> str:
    text = _BRACKETED.sub(" ", text)
    text = text.replace("(", " ").replace(")", " ")
    text = text.lower()
    text = _PUNCT.sub(" ", text).replace("_", " ")
    return " ".join(text.split())


def normalize_text(raw: str, keep_mask: bool = False) -> str:
    """Lowercase, drop bracketed noise tokens and punctuation, keep text in parentheses.

    With ``keep_mask`` the literal ``[MASK]`` placeholder survives.
    """
    if not keep_mask:
        return _normalize_segment(raw)
    parts = [_normalize_segment(p) for p in raw.split(MASK_TEXT)]
    return " ".join(w for w in f" {MASK_TEXT} ".join(parts).split())


def mask_transcript(raw: str) -> str:
    """Replace bracketed special tokens and unfinished words (``re-``) with ``[MASK]``."""
    text = _BRACKETED.sub(f" {MASK_TEXT} ", raw)
    text = _UNFINISHED.sub(MASK_TEXT, text)
    return " ".join(text.split())


@dataclass(frozen=True)
class TrainingText:
    """Targets derived from one raw transcript."""

    attention_text: str  # may contain [MASK]
    ctc_text: str  # MASK words deleted
    has_content: bool  # False when every word was a special token


def prepare_transcript(raw: str, normalize: bool = True) -> TrainingText:
    masked = mask_transcript(raw)
    if normalize:
        masked = normalize_text(masked, keep_mask=True)
    ctc_text = " ".join(w for w in masked.split() if w != MASK_TEXT)
    return TrainingText(masked, ctc_text, bool(ctc_text))


def reference_text(raw: str, normalize: bool = True) -> str:
    """Scoring reference: normalised transcript, or whitespace-collapsed raw text."""
    return normalize_text(raw) if normalize else " ".join(raw.split())


# -- tokenizer ---------------------------------------------------------------------


class CharTokenizer:
    """Character tokenizer with a fixed special-token block at ids 0..5."""

    def __init__(self, alphabet: str = ALPHABET):
        if len(set(alphabet)) != len(alphabet):
            raise ConfigurationError("alphabet has duplicate characters")
        self.alphabet = alphabet
        self.symbols = list(SPECIAL_SYMBOLS) + list(alphabet)
        self._ids = {c: i + len(SPECIAL_SYMBOLS) for i, c in enumerate(alphabet)}

    @property
    def vocab_size(self) -> int:
        return len(self.symbols)

    def tokenize(self, text: str) -> list[int]:
        out: list[int] = []
        i = 0
        while i < len(text):
            if text.startswith(MASK_TEXT, i):
                out.append(MASK)
                i += len(MASK_TEXT)
                continue
            out.append(self._ids.get(text[i], UNK))
            i += 1
        return out

    def detokenize(self, tokens: Iterable[int]) -> str:
        chars = []
        for t in tokens:
            t = int(t)
            if t in (BLANK, PAD, BOS, EOS):
                continue
            chars.append(self.symbols[t] if 0 <= t < len(self.symbols) else SPECIAL_SYMBOLS[UNK])
        return "".join(chars)

    def table(self) -> str:
        return "\n".join(repr(s) for s in self.symbols)

    @classmethod
    def from_table(cls, table: str) -> "CharTokenizer":
        import ast

        symbols = [ast.literal_eval(line) for line in table.splitlines() if line]
        if tuple(symbols[: len(SPECIAL_SYMBOLS)]) != SPECIAL_SYMBOLS:
            raise ConfigurationError("tokenizer table has an unexpected special-token block")
        return cls("".join(symbols[len(SPECIAL_SYMBOLS):]))


def build_loss_mask(reference_tokens: Sequence[int], raw_transcript: str) -> np.ndarray:
    """True where a target position contributes to the attention losses.

    MASK positions never contribute; an utterance made only of special
    tokens contributes nothing at all.
    """
    mask = np.array([t != MASK for t in reference_tokens], dtype=bool)
    if not prepare_transcript(raw_transcript, normalize=False).has_content:
        mask[:] = False
    return mask


# -- synthetic domains -----------------------------------------------------------------


@dataclass(frozen=True)
class DomainSpec:
    name: str
    symbol_set: str
    duration_mean: float = 8.0
    duration_std: float = 1.0
    noise_std: float = 0.3
    channel_gain: tuple[float, ...] = tuple([1.0] * NUM_CHANNELS)
    utterance_length_range: tuple[int, int] = (2, 4)  # words per utterance
    word_length_range: tuple[int, int] = (2, 4)
    lexicon_size: int = 40
    lexicon_seed: int = 0
    shared_words: int = 0  # lexicon entries taken from the cross-domain pool
    breath_prob: float = 0.0
    truncation_prob: float = 0.0

    def __post_init__(self):
        lo, hi = self.utterance_length_range
        wlo, whi = self.word_length_range
        problems = []
        if not 1 <= lo <= hi:
            problems.append("utterance_length_range needs 1 <= min <= max")
        if not 1 <= wlo <= whi:
            problems.append("word_length_range needs 1 <= min <= max")
        if not 0 <= self.shared_words <= min(self.lexicon_size, COMMON_POOL_SIZE):
            problems.append(f"shared_words must lie in [0, min(lexicon_size, {COMMON_POOL_SIZE})]")
        if self.noise_std < 0:
            problems.append("noise_std must be >= 0")
        if self.duration_mean < 2:
            problems.append("symbol durations must be >= 2 frames")
        if len(self.channel_gain) != NUM_CHANNELS:
            problems.append(f"channel_gain needs {NUM_CHANNELS} entries")
        if not self.symbol_set or any(c not in ALPHABET or c == " " for c in self.symbol_set):
            problems.append("symbol_set must be non-empty letters from the alphabet")
        if problems:
            raise ConfigurationError(f"domain {self.name!r}: " + "; ".join(problems))

    @property
    def num_channels(self) -> int:
        return len(self.channel_gain)


def _ramp(start: float, stop: float) -> tuple[float, ...]:
    return tuple(float(v) for v in np.round(np.linspace(start, stop, NUM_CHANNELS), 4))


DOMAINS: dict[str, DomainSpec] = {
    "read": DomainSpec(
        "read", "abcdefghijklmnoprstuw", noise_std=0.3, channel_gain=_ramp(1.0, 1.0),
        lexicon_size=40, lexicon_seed=11, shared_words=30,
    ),
    "talk": DomainSpec(
        "talk", "abcdeghiklmnoprstuvy", noise_std=0.4, channel_gain=_ramp(1.1, 0.9),
        duration_mean=8.5, lexicon_size=40, lexicon_seed=12, shared_words=30,
        breath_prob=0.1, truncation_prob=0.05,
    ),
    "meeting": DomainSpec(
        "meeting", "abcdefghiklmnoprstuwy", noise_std=0.4, channel_gain=_ramp(0.9, 1.1),
        duration_mean=7.5, lexicon_size=40, lexicon_seed=13, shared_words=30,
    ),
}
IN_DOMAIN = ("read", "talk")
OUT_OF_DOMAIN = ("meeting",)


def get_domain(name: str) -> DomainSpec:
    try:
        return DOMAINS[name]
    except KeyError:
        raise ConfigurationError(f"unknown domain {name!r}; known: {sorted(DOMAINS)}") from None


def _stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def symbol_templates(num_channels: int = NUM_CHANNELS) -> dict[str, np.ndarray]:
    """Fixed per-character channel templates (plus one for breath noise)."""
    rng = np.random.default_rng([20240501, num_channels])
    keys = list(ALPHABET) + ["[breath]"]
    raw = rng.normal(size=(len(keys), num_channels))
    raw[0] *= 0.2  # word gap is quiet
    return {k: raw[i] for i, k in enumerate(keys)}


def _draw_words(rng: np.random.Generator, symbols: str, count: int, length_range: tuple[int, int],
                seen: set[str], label: str) -> list[str]:
    words: list[str] = []
    wlo, whi = length_range
    attempts = 0
    while len(words) < count:
        attempts += 1
        if attempts > 100 * max(count, 1):
            raise ConfigurationError(f"{label}: cannot draw {count} distinct words")
        n = int(rng.integers(wlo, whi + 1))
        chars = [str(rng.choice(list(symbols)))]
        while len(chars) < n:
            c = str(rng.choice(list(symbols)))
            if c != chars[-1]:  # doubled letters have no acoustic boundary
                chars.append(c)
        w = "".join(chars)
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def common_pool() -> list[str]:
    """Word pool shared across domains, so domains differ in vocabulary mix, not language."""
    rng = np.random.default_rng(COMMON_POOL_SEED)
    return _draw_words(rng, COMMON_POOL_SYMBOLS, COMMON_POOL_SIZE, (2, 4), set(), "common pool")


def domain_lexicon(domain: DomainSpec) -> list[str]:
    """``shared_words`` entries from :func:`common_pool` plus domain-specific words."""
    rng = np.random.default_rng([domain.lexicon_seed, _stable_hash(domain.name)])
    pool = common_pool()
    shared = [pool[int(i)] for i in np.sort(rng.choice(len(pool), size=domain.shared_words, replace=False))]
    own = _draw_words(rng, domain.symbol_set, domain.lexicon_size - domain.shared_words, domain.word_length_range,
                      set(pool), f"domain {domain.name!r}")
    return shared + own


def render_features(segments: Sequence[tuple[str, int]], domain: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    """Render ``(symbol, frames)`` segments into a ``(T, F)`` float32 array."""
    templates = symbol_templates(domain.num_channels)
    gain = np.asarray(domain.channel_gain)
    frames = []
    for sym, dur in segments:
        block = np.repeat((templates[sym] * gain)[None, :], dur, axis=0)
        block[0] *= ONSET_SCALE
        frames.append(block)
    feats = np.concatenate(frames, axis=0)
    if domain.noise_std > 0:
        feats = feats + rng.normal(scale=domain.noise_std, size=feats.shape)
    return feats.astype(np.float32)


def generate_utterance(domain: DomainSpec, seed: int, utt_id: str) -> tuple[str, np.ndarray]:
    """Draw one transcript and its features; fully determined by (domain, seed, utt_id)."""
    rng = np.random.default_rng([seed, _stable_hash(domain.name), _stable_hash(utt_id)])
    lexicon = domain_lexicon(domain)
    lo, hi = domain.utterance_length_range
    n_words = int(rng.integers(lo, hi + 1))
    words = [lexicon[int(i)] for i in rng.integers(0, len(lexicon), size=n_words)]

    spoken: list[list[str]] = []  # audio units per transcript word
    transcript: list[str] = []
    for w in words:
        if domain.breath_prob and rng.random() < domain.breath_prob:
            spoken.append(["[breath]"])
            transcript.append("[breath]")
        if domain.truncation_prob and len(w) > 1 and rng.random() < domain.truncation_prob:
            cut = int(rng.integers(1, len(w)))
            spoken.append(list(w[:cut]))
            transcript.append(w[:cut] + "-")
        spoken.append(list(w))
        transcript.append(w)

    segments: list[tuple[str, int]] = []
    for k, unit in enumerate(spoken):
        if k:
            segments.append((" ", _duration(domain, rng)))
        for sym in unit:
            segments.append((sym, _duration(domain, rng)))
    return " ".join(transcript), render_features(segments, domain, rng)


def _duration(domain: DomainSpec, rng: np.random.Generator) -> int:
    return max(2, int(round(rng.normal(domain.duration_mean, domain.duration_std))))


def template_match(features: np.ndarray, domain: DomainSpec) -> str:
    """Nearest-template transcription of noise-free features (test oracle)."""
    templates = symbol_templates(domain.num_channels)
    gain = np.asarray(domain.channel_gain)
    keys = list(templates)
    bank = np.stack([templates[k] * gain for k in keys])
    cands = np.concatenate([bank * ONSET_SCALE, bank])  # onset rows first
    dist = ((features[:, None, :] - cands[None]) ** 2).sum(-1)
    best = dist.argmin(axis=1)
    out = []
    for j in best:
        if j < len(keys):
            out.append(keys[j])
    return "".join(out)


# -- corpus I/O ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    utterance_id: str
    source: str
    raw_transcript: str


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None  # directory that relative sources resolve against

    def __post_init__(self):
        ids = [e.utterance_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ContractError("manifest utterance ids are not unique")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def ids(self) -> list[str]:
        return [e.utterance_id for e in self.entries]

    def subset(self, ids: Iterable[str]) -> "Manifest":
        keep = set(ids)
        return Manifest([e for e in self.entries if e.utterance_id in keep], self.root)


MANIFEST_HEADER = "utterance_id\tsource\traw_transcript"


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    lines = [MANIFEST_HEADER]
    for e in manifest.entries:
        for part in (e.utterance_id, e.source, e.raw_transcript):
            if "\t" in part or "\n" in part:
                raise ContractError(f"manifest field for {e.utterance_id!r} contains a tab or newline")
        lines.append(f"{e.utterance_id}\t{e.source}\t{e.raw_transcript}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    entries = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line or (n == 0 and line == MANIFEST_HEADER):
            continue
        parts = line.split("\t", 2)
        if len(parts) != 3:
            raise ContractError(f"{path}:{n + 1}: expected 3 tab-separated columns")
        entries.append(ManifestEntry(*parts))
    return Manifest(entries, root=path.parent)


def write_features(path: str | Path, features: np.ndarray) -> None:
    feats = np.asarray(features, dtype="<f4")
    t, f = feats.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", t, f))
        fh.write(feats.tobytes(order="C"))


def read_features(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    t, f = struct.unpack_from("<II", blob, 0)
    feats = np.frombuffer(blob, dtype="<f4", offset=8)
    if feats.size != t * f:
        raise ContractError(f"{path}: header says {t}x{f} but holds {feats.size} floats")
    return feats.reshape(t, f).astype(np.float32)


def load_features(entry: ManifestEntry, root: Path | None = None) -> np.ndarray:
    if entry.source.startswith("synth:"):
        _, seed, name = entry.source.split(":", 2)
        return generate_utterance(get_domain(name), int(seed), entry.utterance_id)[1]
    path = Path(entry.source)
    if not path.is_absolute() and root is not None:
        path = root / path
    return read_features(path)


class FeatureStore(dict):
    """Utterance id -> ``(T, F)`` features, loaded lazily from a manifest."""

    def __init__(self, manifest: Manifest | None = None):
        super().__init__()
        self._manifest = {e.utterance_id: e for e in manifest} if manifest else {}
        self._root = manifest.root if manifest else None

    def __missing__(self, key):
        entry = self._manifest.get(key)
        if entry is None:
            raise KeyError(key)
        feats = load_features(entry, self._root)
        self[key] = feats
        return feats


def generate_corpus(
    domains: Sequence[DomainSpec], counts: Sequence[int] | Mapping[str, int], seed: int, prefix: str = ""
) -> tuple[Manifest, FeatureStore]:
    """Draw ``counts[i]`` utterances from each domain; reproducible from ``seed``."""
    if not domains:
        raise ContractError("generate_corpus needs at least one domain")
    if isinstance(counts, Mapping):
        counts = [counts[d.name] for d in domains]
    entries, store = [], FeatureStore()
    for domain, count in zip(domains, counts):
        for i in range(count):
            utt_id = f"{prefix}{domain.name}-{seed}-{i:05d}"
            text, feats = generate_utterance(domain, seed, utt_id)
            entries.append(ManifestEntry(utt_id, f"synth:{seed}:{domain.name}", text))
            store[utt_id] = feats
    return Manifest(entries), store


def save_corpus(manifest: Manifest, store: Mapping[str, np.ndarray], out_dir: str | Path, name: str) -> Path:
    """Write feature files and a manifest whose sources point at them."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "feats"
    feat_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for e in manifest:
        rel = Path("feats") / f"{e.utterance_id}.feat"
        write_features(out_dir / rel, store[e.utterance_id])
        entries.append(ManifestEntry(e.utterance_id, rel.as_posix(), e.raw_transcript))
    path = out_dir / f"{name}.tsv"
    write_manifest(Manifest(entries), path)
    return path


def length_filter(manifest: Manifest, store: Mapping[str, np.ndarray], max_frames: int, training: bool = True) -> Manifest:
    """Drop training utterances longer than ``max_frames``; evaluation sets pass through."""
    if not training:
        return manifest
    kept = [e for e in manifest if store[e.utterance_id].shape[0] <= max_frames]
    if len(kept) < len(manifest):
        log.info("length filter dropped %d of %d utterances", len(manifest) - len(kept), len(manifest))
    return Manifest(kept, manifest.root)


# -- augmentation --------------------------------------------------------------------------


def freq_mask_width(num_channels: int) -> int:
    """Maximum frequency-mask width, scaled from 27 bins out of 80."""
    return int(round(27 * num_channels / 80))


def spec_augment(
    features: np.ndarray,
    rng: np.random.Generator,
    n_freq_masks: int = 2,
    max_freq_width: int | None = None,
    n_time_masks: int = 5,
    max_time_coverage: float = 0.05,
) -> np.ndarray:
    """Zero out random channel bands and time spans; returns a new array.

    Time-mask widths are drawn one after another from the budget left by the
    previous masks, so the masked frames never exceed ``max_time_coverage``.
    """
    out = np.array(features, copy=True)
    t, f = out.shape
    width = freq_mask_width(f) if max_freq_width is None else max_freq_width
    for _ in range(n_freq_masks):
        w = int(rng.integers(0, width + 1))
        if w:
            start = int(rng.integers(0, f - w + 1))
            out[:, start:start + w] = 0.0
    budget = int(np.floor(max_time_coverage * t))
    for _ in range(n_time_masks):
        w = int(rng.integers(0, budget + 1))
        if w:
            start = int(rng.integers(0, t - w + 1))
            out[start:start + w] = 0.0
        budget -= w
    return out


def speed_perturb(
    features: np.ndarray,
    rng: np.random.Generator | None = None,
    factor: float | None = None,
    factors: Sequence[float] = SPEED_FACTORS,
) -> np.ndarray:
    """Resample the time axis linearly to ``round(T / factor)`` frames."""
    if factor is None:
        if rng is None:
            raise ContractError("speed_perturb needs a factor or an rng")
        factor = float(factors[int(rng.integers(0, len(factors)))])
    t = features.shape[0]
    new_t = max(1, int(round(t / factor)))
    if new_t == t:
        return np.array(features, copy=True)
    pos = np.linspace(0.0, t - 1, new_t)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, t - 1)
    frac = (pos - lo)[:, None].astype(features.dtype)
    return (features[lo] + frac * (features[hi] - features[lo])).astype(features.dtype)
