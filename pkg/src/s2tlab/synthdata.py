"""Synthetic speech-like tasks: copy (ASR analog), bilingual and multilingual reordering (ST analogs)."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from .tensor import ContractError

log = logging.getLogger(__name__)

PAD, BOS, EOS, BLANK = 0, 1, 2, 3
TASKS = ("asr", "st_bilingual", "st_multilingual")
SPLIT_OFFSETS = {"train": 0, "valid": 1_000_000, "test": 2_000_000}
MANIFEST_HEADER = "s2tlab-manifest v1"


@dataclass(frozen=True)
class Vocab:
    n_langs: int = 4
    n_content: int = 32

    @property
    def size(self) -> int:
        return 4 + self.n_langs + self.n_content

    @property
    def first_content(self) -> int:
        return 4 + self.n_langs

    def lang_tag(self, lang: int) -> int:
        return 4 + lang

    @property
    def lang_tags(self) -> list[int]:
        return list(range(4, 4 + self.n_langs))

    @property
    def specials(self) -> tuple[int, ...]:
        return (PAD, BOS, EOS, BLANK)


@dataclass(frozen=True)
class SynthParams:
    src_len: tuple[int, int] = (4, 12)
    duration: tuple[int, int] = (6, 10)
    noise: float = 0.3
    n_features: int = 16
    n_langs: int = 4
    n_content: int = 32
    world_seed: int = 0
    # probability that a training target uses the alternative (odd-offset) pair swaps
    target_variant_prob: float = 0.0

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.n_langs, self.n_content)

    def errors(self) -> list[str]:
        e = []
        lo, hi = self.src_len
        if lo < 1 or hi < lo:
            e.append(f"data.src_len range ({lo}, {hi}) invalid: need 1 <= min <= max")
        dlo, dhi = self.duration
        if dlo < 1 or dhi < dlo:
            e.append(f"data.duration range ({dlo}, {dhi}) invalid")
        if self.noise < 0:
            e.append("data.noise must be >= 0")
        if self.n_langs < 1 or self.n_content < 2 or self.n_features < 1:
            e.append("data.n_langs, data.n_content and data.n_features must be positive")
        if not 0 <= self.target_variant_prob <= 1:
            e.append("data.target_variant_prob must be in [0, 1]")
        return e

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthParams":
        names = {f.name for f in fields(cls)}
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names}
        return cls(**kw)


@dataclass
class SynthExample:
    seed: int
    task: str
    features: np.ndarray      # [T, F] float32
    transcript: list[int]
    target: list[int]
    language: int             # language index (0 for single-target tasks)
    kd: bool = False          # target produced by a teacher model

    @property
    def feature_len(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class World:
    codebook: np.ndarray      # [n_content, F], unit-norm rows
    perms: np.ndarray         # [n_langs, n_content] bijections over content indices


@lru_cache(maxsize=16)
def make_world(world_seed: int, n_content: int, n_features: int, n_langs: int) -> World:
    rng = np.random.default_rng([world_seed, 0x5EED])
    cb = rng.normal(size=(n_content, n_features))
    cb /= np.linalg.norm(cb, axis=1, keepdims=True)
    perms = np.stack([rng.permutation(n_content) for _ in range(n_langs)])
    cb.flags.writeable = False
    perms.flags.writeable = False
    return World(cb, perms)


def swap_pairs(seq: list[int], start: int = 0) -> list[int]:
    """Swap (i, i+1) for i = start, start+2, ...; a trailing singleton stays put."""
    out = list(seq)
    for i in range(start, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def translate(source: list[int], lang: int, params: SynthParams, variant: bool = False) -> list[int]:
    """Per-language token bijection followed by local reordering."""
    w = make_world(params.world_seed, params.n_content, params.n_features, params.n_langs)
    base = params.vocab.first_content
    mapped = [base + int(w.perms[lang, t - base]) for t in source]
    return swap_pairs(mapped, 1 if variant else 0)


def untranslate(target: list[int], lang: int, params: SynthParams) -> list[int]:
    w = make_world(params.world_seed, params.n_content, params.n_features, params.n_langs)
    base = params.vocab.first_content
    inv = np.argsort(w.perms[lang])
    return [base + int(inv[t - base]) for t in swap_pairs(target, 0)]


def gen_example(seed: int, task: str, params: SynthParams = SynthParams(),
                variant_ok: bool = False) -> SynthExample:
    """One example, a pure function of (seed, task, params).

    ``variant_ok`` lets the target use the alternative reordering with
    probability ``params.target_variant_prob`` (used for training splits).
    """
    if task not in TASKS:
        raise ContractError(f"unknown task {task!r}; expected one of {TASKS}")
    errs = params.errors()
    if errs:
        raise ContractError("; ".join(errs))
    w = make_world(params.world_seed, params.n_content, params.n_features, params.n_langs)
    rng = np.random.default_rng([params.world_seed, seed, TASKS.index(task)])
    lo, hi = params.src_len
    n = int(rng.integers(lo, hi + 1))
    idx = rng.integers(0, params.n_content, size=n)
    dur = rng.integers(params.duration[0], params.duration[1] + 1, size=n)
    frames = np.repeat(w.codebook[idx], dur, axis=0)
    noise = rng.normal(size=frames.shape) * params.noise
    feats = (frames + noise).astype(np.float32)
    lang = int(rng.integers(0, params.n_langs)) if task == "st_multilingual" else 0
    variant = variant_ok and bool(rng.random() < params.target_variant_prob)
    source = (idx + params.vocab.first_content).tolist()
    if task == "asr":
        target = list(source)
    elif task == "st_bilingual":
        target = translate(source, 0, params, variant)
    else:
        target = [params.vocab.lang_tag(lang)] + translate(source, lang, params, variant)
    return SynthExample(seed, task, feats, source, target, lang)


@dataclass
class Dataset:
    examples: list[SynthExample]
    params: SynthParams = field(default_factory=SynthParams)

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]


def gen_split(seed: int, n: int, task: str, params: SynthParams = SynthParams(),
              normalize: bool = True, variant_ok: bool = False) -> Dataset:
    """Examples for seeds seed .. seed+n-1, CMVN-normalized unless ``normalize`` is False."""
    if n < 1:
        raise ContractError(f"split size must be >= 1, got {n}")
    from .train import cmvn

    exs = []
    for s in range(seed, seed + n):
        ex = gen_example(s, task, params, variant_ok)
        if normalize:
            ex.features = cmvn(ex.features)[0]
        exs.append(ex)
    return Dataset(exs, params)


def standard_split(name: str, base_seed: int, n: int, task: str, params: SynthParams) -> Dataset:
    return gen_split(base_seed + SPLIT_OFFSETS[name], n, task, params, variant_ok=(name == "train"))


# ------------------------------------------------------------ manifests


def write_manifest(path: Path, ds: Dataset) -> None:
    lines = [MANIFEST_HEADER] + [f"{ex.seed}\t{ex.task}{'+kd' if ex.kd else ''}\t{ex.language}\t{len(ex.transcript)}"
                                 for ex in ds]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class ManifestRow:
    seed: int
    task: str
    lang: int
    src_len: int


def read_manifest(path: Path) -> list[ManifestRow]:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != MANIFEST_HEADER:
        raise ContractError(f"{path}: missing '{MANIFEST_HEADER}' header")
    rows = []
    for i, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ContractError(f"{path}:{i}: expected 4 tab-separated fields")
        rows.append(ManifestRow(int(parts[0]), parts[1], int(parts[2]), int(parts[3])))
    return rows


def load_manifest(path: Path, params: SynthParams, variant_ok: bool = False,
                  distilled: dict[int, list[int]] | None = None) -> Dataset:
    """Regenerate a split from its manifest.

    Rows whose task carries a ``+kd`` suffix take their target from
    ``distilled`` (keyed by seed).
    """
    from .train import cmvn

    exs = []
    for r in read_manifest(path):
        kd = r.task.endswith("+kd")
        task = r.task[:-3] if kd else r.task
        ex = gen_example(r.seed, task, params, variant_ok and not kd)
        if len(ex.transcript) != r.src_len or ex.language != r.lang:
            raise ContractError(f"{path}: seed {r.seed} does not regenerate (data config mismatch?)")
        if kd:
            if distilled is None or r.seed not in distilled:
                raise ContractError(f"{path}: no distilled target for seed {r.seed}")
            ex.target = list(distilled[r.seed])
            ex.kd = True
        ex.features = cmvn(ex.features)[0]
        exs.append(ex)
    return Dataset(exs, params)


# ------------------------------------------------------------ batching


@dataclass
class Batch:
    features: np.ndarray      # [B, T, F]
    feat_lens: np.ndarray
    dec_in: np.ndarray        # [B, U]  BOS + target, PAD-padded
    labels: np.ndarray        # [B, U]  target + EOS, -100 on padding
    transcripts: list[list[int]]
    targets: list[list[int]]
    seeds: list[int]

    @property
    def size(self) -> int:
        return len(self.seeds)


IGNORE = -100


def collate(examples: list[SynthExample]) -> Batch:
    B = len(examples)
    T = max(ex.feature_len for ex in examples)
    F = examples[0].features.shape[1]
    feats = np.zeros((B, T, F), dtype=np.float32)
    for i, ex in enumerate(examples):
        feats[i, :ex.feature_len] = ex.features
    U = max(len(ex.target) for ex in examples) + 1
    dec_in = np.full((B, U), PAD, dtype=np.int64)
    labels = np.full((B, U), IGNORE, dtype=np.int64)
    for i, ex in enumerate(examples):
        t = ex.target
        dec_in[i, :len(t) + 1] = [BOS] + t
        labels[i, :len(t) + 1] = t + [EOS]
    return Batch(feats, np.array([ex.feature_len for ex in examples], dtype=np.int64), dec_in, labels,
                 [ex.transcript for ex in examples], [ex.target for ex in examples],
                 [ex.seed for ex in examples])


def make_batches(dataset, batch_frames: int) -> list[list[int]]:
    """Length-bucketed index groups with real-frame sums within ``batch_frames``."""
    lens = np.array([ex.feature_len for ex in dataset])
    order = np.argsort(lens, kind="stable")
    groups, cur, tot = [], [], 0
    for i in order:
        n = int(lens[i])
        if n > batch_frames:
            log.warning("example of %d frames exceeds batch budget %d; batching alone", n, batch_frames)
            if cur:
                groups.append(cur)
            groups.append([int(i)])
            cur, tot = [], 0
            continue
        if tot + n > batch_frames:
            groups.append(cur)
            cur, tot = [], 0
        cur.append(int(i))
        tot += n
    if cur:
        groups.append(cur)
    return groups


def batcher(dataset, batch_frames: int, rng: np.random.Generator | None = None):
    """Yield padded batches; group order is shuffled by ``rng`` when given."""
    groups = make_batches(dataset, batch_frames)
    order = rng.permutation(len(groups)) if rng is not None else range(len(groups))
    for g in order:
        yield collate([dataset[i] for i in groups[g]])
