"""Acoustic feature maps, a synthetic multi-speaker corpus and the feature file format."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"SSVC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBHII")
MAX_ELEMENTS = 1 << 28
AR_COEF = 0.9


class FeatureFileError(ValueError):
    """Base class for feature file problems."""


class BadMagicError(FeatureFileError):
    pass


class TruncatedFileError(FeatureFileError):
    pass


class ShapeOverflowError(FeatureFileError):
    pass


@dataclass(frozen=True)
class DomainPair:
    """Ordered (source, target) speaker codes, both 1-based."""

    source: int
    target: int

    def validate(self, n_domains: int) -> "DomainPair":
        for code in (self.source, self.target):
            if not 1 <= int(code) <= n_domains:
                raise ValueError(f"domain code {code} outside 1..{n_domains}")
        return self


@dataclass
class FeatureMap:
    """2-D feature array of shape (n_mcep, n_frames) tagged with its 1-based domain."""

    data: np.ndarray
    domain: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise ValueError(f"feature map must be 2-D and non-empty, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")
        if int(self.domain) < 1:
            raise ValueError(f"domain code must be >= 1, got {self.domain}")
        self.domain = int(self.domain)

    @property
    def n_mcep(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    def digest(self) -> str:
        return hashlib.sha256(self.data.tobytes()).hexdigest()


@dataclass
class Dataset:
    """Stacked utterances: ``X`` is (n, n_mcep, n_frames) float32, ``domains`` 1-based."""

    X: np.ndarray
    domains: np.ndarray
    n_domains: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float32)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        if self.X.ndim != 3 or len(self.X) != len(self.domains):
            raise ValueError("dataset needs X of shape (n, n_mcep, n_frames) and one domain per row")
        if len(self.domains) and (self.domains.min() < 1 or self.domains.max() > self.n_domains):
            raise ValueError(f"domain codes must lie in 1..{self.n_domains}")

    def __len__(self) -> int:
        return len(self.X)

    def __getitem__(self, i: int) -> FeatureMap:
        return FeatureMap(self.X[i], int(self.domains[i]))

    def __iter__(self) -> Iterator[FeatureMap]:
        return (self[i] for i in range(len(self)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.X.shape[1], self.X.shape[2]

    @classmethod
    def from_maps(cls, maps: Sequence[FeatureMap], n_domains: int | None = None) -> "Dataset":
        if not maps:
            raise ValueError("cannot build a dataset from zero feature maps")
        shapes = {m.data.shape for m in maps}
        if len(shapes) != 1:
            raise ValueError(f"feature maps have mixed shapes: {sorted(shapes)}")
        domains = np.array([m.domain for m in maps])
        return cls(np.stack([m.data for m in maps]), domains, n_domains or int(domains.max()))

    def of_domain(self, d: int) -> np.ndarray:
        return self.X[self.domains == d]


@dataclass
class SynthConfig:
    n_domains: int = 4
    n_mcep: int = 16
    n_frames: int = 64
    train_per_domain: int = 80
    eval_per_domain: int = 30
    seed: int = 7
    prototype_smoothness: float = 1.5
    noise_scale: float = 0.1
    gain_spread: float = 0.2

    def validate(self) -> "SynthConfig":
        for name in ("n_domains", "n_mcep", "n_frames", "train_per_domain", "eval_per_domain"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.prototype_smoothness <= 0:
            raise ValueError("prototype_smoothness must be positive")
        if self.noise_scale < 0 or self.gain_spread < 0:
            raise ValueError("noise_scale and gain_spread must be non-negative")
        if self.gain_spread >= 1:
            raise ValueError("gain_spread must be < 1 so gains stay positive")
        return self


@dataclass
class SynthCorpus:
    train: Dataset
    eval: Dataset
    prototypes: np.ndarray  # (n_domains, n_mcep, n_frames)
    config: SynthConfig = field(default_factory=SynthConfig)

    def prototype(self, d: int) -> FeatureMap:
        return FeatureMap(self.prototypes[d - 1], d)


def _prototype(rng: np.random.Generator, n_mcep: int, n_frames: int, smoothness: float) -> np.ndarray:
    # low-pass the cepstral axis with a Gaussian kernel, then scale to unit RMS
    raw = rng.standard_normal(n_mcep + 8 * int(np.ceil(smoothness)))
    half = 4 * int(np.ceil(smoothness))
    taps = np.arange(-half, half + 1)
    kernel = np.exp(-0.5 * (taps / smoothness) ** 2)
    env = np.convolve(raw, kernel / kernel.sum(), mode="valid")[:n_mcep]
    env = env / np.sqrt(np.mean(env**2))
    return np.repeat(env[:, None], n_frames, axis=1)


def _ar1_noise(rng: np.random.Generator, n_mcep: int, n_frames: int, scale: float) -> np.ndarray:
    eps = rng.standard_normal((n_mcep, n_frames)) * scale
    out = np.empty_like(eps)
    out[:, 0] = eps[:, 0] / np.sqrt(1.0 - AR_COEF**2)
    for t in range(1, n_frames):
        out[:, t] = AR_COEF * out[:, t - 1] + eps[:, t]
    return out


def _draw(rng, protos, per_domain, cfg: SynthConfig) -> Dataset:
    xs, ds = [], []
    for d in range(cfg.n_domains):
        for _ in range(per_domain):
            gain = 1.0 + rng.uniform(-cfg.gain_spread, cfg.gain_spread)
            noise = _ar1_noise(rng, cfg.n_mcep, cfg.n_frames, cfg.noise_scale)
            xs.append(gain * protos[d] + noise)
            ds.append(d + 1)
    return Dataset(np.stack(xs).astype(np.float32), np.array(ds), cfg.n_domains)


def synth_dataset(cfg: SynthConfig | None = None) -> SynthCorpus:
    """Deterministic stand-in corpus: one smooth prototype envelope per speaker.

    Each utterance is ``gain * prototype + AR(1) noise`` (coefficient 0.9).
    Train and eval sets come from separate child streams of the seed.
    """
    cfg = (cfg or SynthConfig()).validate()
    root = np.random.SeedSequence(int(cfg.seed))
    proto_ss, train_ss, eval_ss = root.spawn(3)
    proto_rng = np.random.default_rng(proto_ss)
    protos = np.stack(
        [_prototype(proto_rng, cfg.n_mcep, cfg.n_frames, cfg.prototype_smoothness) for _ in range(cfg.n_domains)]
    ).astype(np.float32)
    train = _draw(np.random.default_rng(train_ss), protos, cfg.train_per_domain, cfg)
    held = _draw(np.random.default_rng(eval_ss), protos, cfg.eval_per_domain, cfg)
    return SynthCorpus(train, held, protos, cfg)


class Batch:
    """A mini-batch of real utterances with their source codes and sampled target codes."""

    def __init__(self, x: np.ndarray, source: np.ndarray, target: np.ndarray):
        self.x = np.asarray(x, dtype=np.float32)
        self.source = np.asarray(source, dtype=np.int64)
        self.target = np.asarray(target, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.x)

    def __iter__(self):
        for x, c, ct in zip(self.x, self.source, self.target):
            yield FeatureMap(x, int(c)), int(c), int(ct)


def sample_batch(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Draw utterances uniformly with replacement; targets uniform over all domains."""
    if len(dataset) == 0:
        raise ValueError("cannot sample from an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = rng.integers(0, len(dataset), size=batch_size)
    target = rng.integers(1, dataset.n_domains + 1, size=batch_size)
    return Batch(dataset.X[idx], dataset.domains[idx], target)


# -- file format ------------------------------------------------------------------


def dumps_features(fm: FeatureMap) -> bytes:
    n_mcep, n_frames = fm.data.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, fm.domain, n_mcep, n_frames)
    return header + np.ascontiguousarray(fm.data, dtype="<f4").tobytes()


def loads_features(buf: bytes) -> FeatureMap:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("header is truncated")
    _, version, domain, n_mcep, n_frames = _HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise BadMagicError(f"unsupported feature file version {version}")
    n = n_mcep * n_frames
    if n_mcep == 0 or n_frames == 0 or n > MAX_ELEMENTS:
        raise ShapeOverflowError(f"declared shape {n_mcep}x{n_frames} is not loadable")
    need = _HEADER.size + 4 * n
    if len(buf) < need:
        raise TruncatedFileError(f"payload has {len(buf) - _HEADER.size} bytes, header declares {4 * n}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size).reshape(n_mcep, n_frames)
    return FeatureMap(data.astype(np.float32), domain)


def save_features(path, fm: FeatureMap) -> None:
    Path(path).write_bytes(dumps_features(fm))


def load_features(path) -> FeatureMap:
    return loads_features(Path(path).read_bytes())


def write_manifest(path, files: Sequence) -> None:
    path = Path(path)
    lines = [str(Path(f).relative_to(path.parent)) if Path(f).is_absolute() else str(f) for f in files]
    path.write_text("".join(line + "\n" for line in lines))


def read_manifest(path) -> list[Path]:
    path = Path(path)
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line:
            p = Path(line)
            out.append(p if p.is_absolute() else path.parent / p)
    return out


def load_dataset(manifest, n_domains: int | None = None) -> Dataset:
    return Dataset.from_maps([load_features(p) for p in read_manifest(manifest)], n_domains)


def save_corpus(corpus: SynthCorpus, out_dir) -> dict[str, Path]:
    """Write train/eval/prototype feature files plus one manifest per split."""
    out_dir = Path(out_dir)
    manifests = {}
    splits = {
        "train": list(corpus.train),
        "eval": list(corpus.eval),
        "prototypes": [corpus.prototype(d) for d in range(1, corpus.config.n_domains + 1)],
    }
    for split, maps in splits.items():
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        files = []
        counts: dict[int, int] = {}
        for fm in maps:
            k = counts.get(fm.domain, 0)
            counts[fm.domain] = k + 1
            rel = Path(split) / f"d{fm.domain}_{k:03d}.ssvc"
            save_features(out_dir / rel, fm)
            files.append(rel)
        manifests[split] = out_dir / f"{split}.txt"
        write_manifest(manifests[split], files)
    return manifests


def load_corpus(data_dir) -> SynthCorpus:
    data_dir = Path(data_dir)
    protos = load_dataset(data_dir / "prototypes.txt")
    n = protos.n_domains
    order = np.argsort(protos.domains, kind="stable")
    train = load_dataset(data_dir / "train.txt", n)
    held = load_dataset(data_dir / "eval.txt", n)
    cfg = SynthConfig(
        n_domains=n,
        n_mcep=train.shape[0],
        n_frames=train.shape[1],
        train_per_domain=max(1, len(train) // n),
        eval_per_domain=max(1, len(held) // n),
    )
    return SynthCorpus(train, held, protos.X[order], cfg)
