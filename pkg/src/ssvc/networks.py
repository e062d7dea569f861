"""Desk-scale generator and discriminator conditioned on ordered domain pairs.

Generator: gated input conv, two strided down-sampling convs, residual blocks
(conv, conditional instance normalization (CIN) keyed on the (source, target)
pair, gated activation), two transposed-conv up-sampling blocks and
an output conv.  Discriminator: a strided-conv encoder pooled to a
``d_e``-vector ``z``, a projection MLP ``p = h(z)`` and a real/fake head
conditioned on a learned pair embedding.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .tensor import (
    Tensor,
    as_tensor,
    conv2d,
    conv_transpose2d,
    glu,
    matmul,
    relu,
    sigmoid,
    stop_gradient,
)

CIN_EPS = 1e-5


@dataclass
class NetConfig:
    n_domains: int = 4
    n_mcep: int = 16
    n_frames: int = 64
    channels: tuple[int, int, int] = (16, 32, 64)
    n_res_blocks: int = 3
    d_e: int = 64
    d_p: int = 64
    embed_dim: int = 8
    head_activation: str = "relu"
    init_seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 3:
            raise ValueError("channels needs exactly three widths")
        if self.n_mcep % 4 or self.n_frames % 8:
            raise ValueError("n_mcep must be divisible by 4 and n_frames by 8")
        if self.d_p != self.d_e:
            # the SimSiam term compares p with the encoder output z directly
            raise ValueError(f"d_p ({self.d_p}) must equal d_e ({self.d_e})")
        if self.head_activation not in ("relu", "identity"):
            raise ValueError("head_activation must be 'relu' or 'identity'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


class Module:
    """Named parameter container."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.ascontiguousarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _get(self, name: str, frozen: bool) -> Tensor:
        t = self.params[name]
        return stop_gradient(t) if frozen else t

    def parameters(self) -> Iterable[Tensor]:
        return self.params.values()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"parameter {k}: shape {arr.shape} != {t.shape}")
            t.data = np.array(arr, dtype=self.dtype, order="C", copy=True)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, t in self.params.items():
            h.update(k.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    def _input(self, x) -> Tensor:
        x = x.data if isinstance(x, Tensor) else np.asarray(x)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (self.config.n_mcep, self.config.n_frames):
            raise ValueError(
                f"expected feature maps of shape ({self.config.n_mcep}, {self.config.n_frames}), got {x.shape}"
            )
        return Tensor(np.ascontiguousarray(x, dtype=self.dtype))

    def _as_batch(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            return self._input(x)
        if x.ndim == 3:
            x = x.reshape(x.shape[0], 1, *x.shape[1:])
        if x.ndim != 4 or x.shape[1:] != (1, self.config.n_mcep, self.config.n_frames):
            raise ValueError(f"expected feature maps of shape ({self.config.n_mcep}, {self.config.n_frames}), got {x.shape}")
        return x

    def _codes(self, codes, batch: int) -> np.ndarray:
        idx = np.broadcast_to(np.asarray(codes, dtype=np.int64), (batch,)) - 1
        if idx.min() < 0 or idx.max() >= self.config.n_domains:
            raise ValueError(f"domain codes must lie in 1..{self.config.n_domains}")
        return idx


def _conv_init(rng, out_c, in_c, k):
    return rng.standard_normal((out_c, in_c, k, k)) / np.sqrt(in_c * k * k)


def cin(f: Tensor, gamma: Tensor, beta: Tensor, eps: float = CIN_EPS) -> Tensor:
    """Conditional instance normalization with per-sample scale and bias.

    ``f`` is (B, C, H, W); ``gamma`` and ``beta`` are (B, C), already selected
    for each sample's (source, target) pair.
    """
    if gamma.shape != f.shape[:2] or beta.shape != f.shape[:2]:
        raise ValueError(f"CIN parameters {gamma.shape}/{beta.shape} do not match features {f.shape[:2]}")
    mu = f.mean(axis=(2, 3), keepdims=True)
    sd = f.std(axis=(2, 3), keepdims=True)
    b, c = f.shape[:2]
    return gamma.reshape(b, c, 1, 1) * ((f - mu) / (sd + eps)) + beta.reshape(b, c, 1, 1)


def cin_pair(f: Tensor, source, target, gamma_table: Tensor, beta_table: Tensor) -> Tensor:
    """CIN with ``gamma_table``/``beta_table`` of shape (N, N, C), indexed by 1-based codes."""
    n = f.shape[0]
    src = np.broadcast_to(np.asarray(source, dtype=np.int64), (n,)) - 1
    trg = np.broadcast_to(np.asarray(target, dtype=np.int64), (n,)) - 1
    if gamma_table.shape[-1] != f.shape[1]:
        raise ValueError(f"CIN table has {gamma_table.shape[-1]} channels, features have {f.shape[1]}")
    return cin(f, gamma_table[(src, trg)], beta_table[(src, trg)])


class Generator(Module):
    def __init__(self, config: NetConfig | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        self.config = config = config or NetConfig()
        self.dtype = np.dtype(config.dtype)
        rng = rng if rng is not None else np.random.default_rng(config.init_seed)
        c1, c2, c3 = config.channels
        n = config.n_domains
        self._add("in.w", _conv_init(rng, 2 * c1, 1, 3))
        self._add("in.b", np.zeros(2 * c1))
        self._add("down1.w", _conv_init(rng, 2 * c2, c1, 4))
        self._add("down1.b", np.zeros(2 * c2))
        self._add("down2.w", _conv_init(rng, 2 * c3, c2, 4))
        self._add("down2.b", np.zeros(2 * c3))
        for r in range(config.n_res_blocks):
            self._add(f"res{r}.w1", _conv_init(rng, 2 * c3, c3, 3))
            self._add(f"res{r}.b1", np.zeros(2 * c3))
            self._add(f"res{r}.gamma", 1.0 + 0.02 * rng.standard_normal((n, n, 2 * c3)))
            self._add(f"res{r}.beta", 0.02 * rng.standard_normal((n, n, 2 * c3)))
        # transposed-conv kernels are (C_in, C_out, k, k)
        self._add("up1.w", rng.standard_normal((c3, 2 * c2, 4, 4)) / np.sqrt(4 * c3))
        self._add("up1.b", np.zeros(2 * c2))
        self._add("up2.w", rng.standard_normal((c2, 2 * c1, 4, 4)) / np.sqrt(4 * c2))
        self._add("up2.b", np.zeros(2 * c1))
        self._add("out.w", _conv_init(rng, 1, c1, 3))
        self._add("out.b", np.zeros(1))

    def forward(self, x, source, target, frozen: bool = False) -> Tensor:
        """Convert a batch ``x`` (B, n_mcep, n_frames) from ``source`` to ``target`` codes.

        Returns a (B, n_mcep, n_frames) tensor.
        """
        p = lambda name: self._get(name, frozen)  # noqa: E731
        h = self._as_batch(x)
        b = h.shape[0]
        src = self._codes(source, b) + 1
        trg = self._codes(target, b) + 1
        h = glu(conv2d(h, p("in.w"), p("in.b"), 1, 1))
        h = glu(conv2d(h, p("down1.w"), p("down1.b"), 2, 1))
        h = glu(conv2d(h, p("down2.w"), p("down2.b"), 2, 1))
        for r in range(self.config.n_res_blocks):
            a = conv2d(h, p(f"res{r}.w1"), p(f"res{r}.b1"), 1, 1)
            h = h + glu(cin_pair(a, src, trg, p(f"res{r}.gamma"), p(f"res{r}.beta")))
        h = glu(conv_transpose2d(h, p("up1.w"), p("up1.b"), 2, 1))
        h = glu(conv_transpose2d(h, p("up2.w"), p("up2.b"), 2, 1))
        out = conv2d(h, p("out.w"), p("out.b"), 1, 1)
        return out.reshape(b, self.config.n_mcep, self.config.n_frames)

    __call__ = forward


class Discriminator(Module):
    def __init__(self, config: NetConfig | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        self.config = config = config or NetConfig()
        self.dtype = np.dtype(config.dtype)
        rng = rng if rng is not None else np.random.default_rng(config.init_seed + 1)
        c1, c2, c3 = config.channels
        n, de, dp, k = config.n_domains, config.d_e, config.d_p, config.embed_dim
        self._add("enc1.w", _conv_init(rng, 2 * c1, 1, 4))
        self._add("enc1.b", np.zeros(2 * c1))
        self._add("enc2.w", _conv_init(rng, 2 * c2, c1, 4))
        self._add("enc2.b", np.zeros(2 * c2))
        self._add("enc3.w", _conv_init(rng, 2 * de, c2, 4))
        self._add("enc3.b", np.zeros(2 * de))
        self._add("proj1.w", rng.standard_normal((de, de)) / np.sqrt(de))
        self._add("proj1.b", np.zeros(de))
        self._add("proj2.w", rng.standard_normal((de, dp)) / np.sqrt(de))
        self._add("proj2.b", np.zeros(dp))
        self._add("embed", rng.standard_normal((n, n, k)))
        self._add("cls.wz", rng.standard_normal(de) * 0.01)
        self._add("cls.we", np.zeros(k))
        self._add("cls.v", rng.standard_normal((k, de)) * 0.01)
        self._add("cls.b", np.zeros(1))

    # Table of names belonging to each part, used for partial freezing in tests
    ENCODER = ("enc1.w", "enc1.b", "enc2.w", "enc2.b", "enc3.w", "enc3.b")
    HEAD = ("proj1.w", "proj1.b", "proj2.w", "proj2.b")
    CLASSIFIER = ("embed", "cls.wz", "cls.we", "cls.v", "cls.b")

    def encode(self, x, frozen: bool = False) -> Tensor:
        """Encoder features ``z`` of shape (B, d_e)."""
        p = lambda name: self._get(name, frozen)  # noqa: E731
        h = self._as_batch(x)
        h = glu(conv2d(h, p("enc1.w"), p("enc1.b"), 2, 1))
        h = glu(conv2d(h, p("enc2.w"), p("enc2.b"), 2, 1))
        h = glu(conv2d(h, p("enc3.w"), p("enc3.b"), 2, 1))
        return h.mean(axis=(2, 3))

    def project(self, z: Tensor, frozen: bool = False) -> Tensor:
        """Projection head ``p = W2 act(W1 z + b1) + b2``; accepts (d_e,) or (B, d_e)."""
        z = as_tensor(z)
        if z.shape[-1] != self.config.d_e:
            raise ValueError(f"projection head expects length {self.config.d_e}, got {z.shape[-1]}")
        single = z.ndim == 1
        if single:
            z = z.reshape(1, -1)
        p = lambda name: self._get(name, frozen)  # noqa: E731
        h = matmul(z, p("proj1.w")) + p("proj1.b")
        if self.config.head_activation == "relu":
            h = relu(h)
        out = matmul(h, p("proj2.w")) + p("proj2.b")
        return out.reshape(-1) if single else out

    def logits(self, z: Tensor, source, target, frozen: bool = False) -> Tensor:
        """Real/fake logit on ``[z ; e(c, c')]`` plus a bilinear ``e^T V z`` interaction."""
        p = lambda name: self._get(name, frozen)  # noqa: E731
        b = z.shape[0]
        src = self._codes(source, b)
        trg = self._codes(target, b)
        e = p("embed")[(src, trg)]
        wz = p("cls.wz").reshape(-1, 1)
        we = p("cls.we").reshape(-1, 1)
        inter = (e * matmul(z, p("cls.v").transpose())).sum(axis=1)
        return matmul(z, wz).reshape(b) + matmul(e, we).reshape(b) + inter + p("cls.b")

    def classify(self, z: Tensor, source, target, frozen: bool = False) -> Tensor:
        return sigmoid(self.logits(z, source, target, frozen))

    def forward(self, x, source, target, frozen: bool = False) -> Tensor:
        """Probability (B,) that ``x`` is a real sample of ``target`` given ``source``."""
        return self.classify(self.encode(x, frozen), source, target, frozen)

    __call__ = forward

    def zero_head(self) -> None:
        """Zero the real/fake head so every output is exactly 0.5."""
        for name in self.CLASSIFIER:
            if name != "embed":
                self.params[name].data[...] = 0.0

    def identity_head(self) -> None:
        """Make the projection head the identity map (needs ``head_activation='identity'``)."""
        if self.config.head_activation != "identity":
            raise ValueError("identity head needs head_activation='identity'")
        eye = np.eye(self.config.d_e, dtype=self.dtype)
        self.params["proj1.w"].data[...] = eye
        self.params["proj2.w"].data[...] = eye
        self.params["proj1.b"].data[...] = 0.0
        self.params["proj2.b"].data[...] = 0.0


def build_networks(config: NetConfig | None = None) -> tuple[Generator, Discriminator]:
    config = config or NetConfig()
    rng = np.random.default_rng(config.init_seed)
    return Generator(config, rng), Discriminator(config, rng)
