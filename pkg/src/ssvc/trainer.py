"""Alternating adversarial optimisation, evaluation, checkpoints and the ablation harness."""

from __future__ import annotations

import csv
import io
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import FREQ_MASK, TIME_MASK, MaskSpec
from .features import Dataset, DomainPair, FeatureMap, SynthCorpus, sample_batch
from .losses import DEFAULT_TAU, LossWeights, discriminator_loss, generator_loss
from .metrics import loss_stability, mcd_batch, msd
from .networks import Discriminator, Generator, NetConfig, build_networks
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SSVC-CKPT1"

# λ grid of the published ablation table, in its column order
DEFAULT_GRID: tuple[tuple[float, float], ...] = (
    (0.0, 0.01),
    (0.01, 0.0),
    (0.01, 0.01),
    (0.02, 0.05),
    (0.05, 0.02),
    (0.1, 0.1),
)


class DivergenceError(FloatingPointError):
    """A loss term became non-finite during training."""


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    steps_per_epoch: int = 4
    lr_g: float = 1e-3
    lr_d: float = 5e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float = DEFAULT_TAU
    early_stop_patience: int = 50
    seed: int = 7
    d_steps_per_g_step: int = 1
    t1: MaskSpec = TIME_MASK
    t2: MaskSpec = FREQ_MASK
    eval_per_domain: int = 2
    net: NetConfig = field(default_factory=lambda: NetConfig(dtype="float32"))

    def validate(self) -> "TrainConfig":
        for name in ("epochs", "batch_size", "steps_per_epoch", "early_stop_patience", "d_steps_per_g_step", "eval_per_domain"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.early_stop_patience > self.epochs:
            raise ValueError("early_stop_patience must not exceed epochs")
        if self.lr_g <= 0 or self.lr_d <= 0 or self.tau <= 0:
            raise ValueError("learning rates and tau must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        return self

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["weights"] = asdict(self.weights)
        d["t1"] = asdict(self.t1)
        d["t2"] = asdict(self.t2)
        d["net"] = self.net.as_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["t1"] = MaskSpec(**d.get("t1", asdict(TIME_MASK)))
        d["t2"] = MaskSpec(**d.get("t2", asdict(FREQ_MASK)))
        d["net"] = NetConfig(**d.get("net", {}))
        return cls(**d)


class Adam:
    """Adam over a fixed, ordered list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


@dataclass
class TrainState:
    G: Generator
    D: Discriminator
    opt_g: Adam
    opt_d: Adam
    rng: np.random.Generator
    epoch: int = 0
    best_mcd: float = float("inf")
    best_epoch: int = 0
    since_best: int = 0

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        net = replace(cfg.net, init_seed=int(cfg.seed) % 2**32)
        G, D = build_networks(net)
        return cls(
            G,
            D,
            Adam(G.parameters(), cfg.lr_g, cfg.adam_beta1, cfg.adam_beta2),
            Adam(D.parameters(), cfg.lr_d, cfg.adam_beta1, cfg.adam_beta2),
            np.random.default_rng(np.random.SeedSequence(int(cfg.seed)).spawn(1)[0]),
        )


@dataclass
class StepRecord:
    d_loss: float
    adv: float
    sim_term: float
    con_term: float
    g_loss: float


@dataclass
class EpochLog:
    epoch: int
    d_loss: float
    g_loss: float
    sim_term: float
    con_term: float
    eval_mcd: float
    wall_ms: float
    pair_mcd: dict[tuple[int, int], float] = field(default_factory=dict)


def _finite(name: str, value: float) -> float:
    if not np.isfinite(value):
        raise DivergenceError(f"{name} diverged to {value}")
    return value


def train_step(state: TrainState, batch, cfg: TrainConfig) -> StepRecord:
    """``d_steps_per_g_step`` discriminator updates, then one generator update."""
    G, D = state.G, state.D
    x, src, trg = batch.x, batch.source, batch.target
    for _ in range(cfg.d_steps_per_g_step):
        state.opt_d.zero_grad()
        dl = discriminator_loss(x, src, trg, G, D, cfg.weights, cfg.t1, cfg.t2, state.rng, cfg.tau)
        vals = dl.values()
        for name in ("adv", "sim", "con", "total"):
            _finite(f"discriminator {name} term", vals[name])
        dl.total.backward()
        state.opt_d.step()
    state.opt_g.zero_grad()
    gl = generator_loss(x, src, trg, G, D)
    g_val = _finite("generator adversarial loss", float(gl.data))
    gl.backward()
    state.opt_g.step()
    return StepRecord(vals["total"], vals["adv"], vals["sim"], vals["con"], g_val)


def conversion_pairs(n_domains: int, include_identity: bool = False) -> list[tuple[int, int]]:
    return [(s, t) for s in range(1, n_domains + 1) for t in range(1, n_domains + 1) if include_identity or s != t]


def convert_array(G: Generator, x: np.ndarray, source, target, chunk: int = 64) -> np.ndarray:
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    out = []
    with no_grad():
        for i in range(0, len(x), chunk):
            sl = slice(i, i + chunk)
            s = np.broadcast_to(np.asarray(source), (len(x),))[sl]
            t = np.broadcast_to(np.asarray(target), (len(x),))[sl]
            out.append(G(x[sl], s, t).data)
    y = np.concatenate(out).astype(np.float64)
    return y[0] if single else y


def evaluate_pairs(
    G: Generator,
    data: Dataset,
    prototypes: np.ndarray,
    per_domain: int | None = None,
    include_identity: bool = False,
    with_msd: bool = False,
) -> dict[tuple[int, int], tuple[float, float]]:
    """Mean MCD (and optionally MSD) of converted eval utterances against the target prototype."""
    out = {}
    for s, t in conversion_pairs(data.n_domains, include_identity):
        xs = data.of_domain(s)
        if per_domain is not None:
            xs = xs[:per_domain]
        if len(xs) == 0:
            continue
        y = convert_array(G, xs, s, t)
        proto = prototypes[t - 1]
        m = float(np.mean(mcd_batch(y, proto)))
        d = float(np.mean([msd(yy, proto) for yy in y])) if with_msd else float("nan")
        out[(s, t)] = (m, d)
    return out


def mean_mcd(pairs: dict) -> float:
    return float(np.mean([v[0] for v in pairs.values()]))


@dataclass
class TrainResult:
    state: TrainState
    config: TrainConfig
    logs: list[EpochLog]
    stability: float
    window: int
    initial_mcd: float
    final_mcd: float
    stopped_early: bool


def align_config(cfg: TrainConfig, corpus: SynthCorpus) -> TrainConfig:
    """Validate ``cfg`` and copy the corpus geometry into its network config."""
    cfg.validate()
    n_mcep, n_frames = corpus.train.shape
    net = replace(cfg.net, n_domains=corpus.train.n_domains, n_mcep=n_mcep, n_frames=n_frames)
    return replace(cfg, net=net)


def stability_window(n_epochs: int) -> int:
    return max(1, min(100, n_epochs // 3))


def train(
    corpus: SynthCorpus,
    cfg: TrainConfig,
    on_epoch: Callable[[EpochLog], None] | None = None,
    state: TrainState | None = None,
) -> TrainResult:
    """Train until ``cfg.epochs`` or until eval MCD stalls for ``early_stop_patience`` epochs."""
    cfg = align_config(cfg, corpus)
    if len(corpus.train) == 0:
        raise ValueError("training set is empty")
    state = state or TrainState.fresh(cfg)
    protos = corpus.prototypes
    initial = mean_mcd(evaluate_pairs(state.G, corpus.eval, protos))
    logs: list[EpochLog] = []
    stopped = False
    while state.epoch < cfg.epochs:
        t0 = time.perf_counter()
        recs = [train_step(state, sample_batch(corpus.train, cfg.batch_size, state.rng), cfg) for _ in range(cfg.steps_per_epoch)]
        pairs = evaluate_pairs(state.G, corpus.eval, protos, cfg.eval_per_domain)
        state.epoch += 1
        entry = EpochLog(
            epoch=state.epoch,
            d_loss=float(np.mean([r.d_loss for r in recs])),
            g_loss=float(np.mean([r.g_loss for r in recs])),
            sim_term=float(np.mean([r.sim_term for r in recs])),
            con_term=float(np.mean([r.con_term for r in recs])),
            eval_mcd=mean_mcd(pairs),
            wall_ms=1000.0 * (time.perf_counter() - t0),
            pair_mcd={k: v[0] for k, v in pairs.items()},
        )
        logs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        log.debug("epoch %d d=%.4f g=%.4f mcd=%.3f", entry.epoch, entry.d_loss, entry.g_loss, entry.eval_mcd)
        if entry.eval_mcd < state.best_mcd:
            state.best_mcd, state.best_epoch, state.since_best = entry.eval_mcd, entry.epoch, 0
        else:
            state.since_best += 1
            if state.since_best >= cfg.early_stop_patience:
                stopped = state.epoch < cfg.epochs
                break
    window = stability_window(len(logs))
    stability = loss_stability([e.d_loss for e in logs], window)
    final = mean_mcd(evaluate_pairs(state.G, corpus.eval, protos))
    return TrainResult(state, cfg, logs, stability, window, initial, final, stopped)


def convert(G: Generator, x: FeatureMap, pair: DomainPair) -> FeatureMap:
    """Pure generator inference for one feature map."""
    pair.validate(G.config.n_domains)
    if x.data.shape != (G.config.n_mcep, G.config.n_frames):
        raise ValueError(f"feature map shape {x.data.shape} does not match the checkpoint")
    return FeatureMap(convert_array(G, x.data, pair.source, pair.target), pair.target)


# -- CSV ---------------------------------------------------------------------------

EPOCH_HEADER = ("epoch", "d_loss", "g_loss", "sim_term", "con_term", "eval_mcd")


def epochs_csv_header(n_domains: int) -> list[str]:
    return list(EPOCH_HEADER) + [f"mcd_{s}to{t}" for s, t in conversion_pairs(n_domains)]


def epoch_row(e: EpochLog, n_domains: int) -> list[str]:
    vals = [str(e.epoch)] + [repr(float(getattr(e, k))) for k in EPOCH_HEADER[1:]]
    return vals + [repr(float(e.pair_mcd.get(p, float("nan")))) for p in conversion_pairs(n_domains)]


STABILITY_HEADER = ("epochs_run", "window", "d_loss_std", "initial_mcd", "final_mcd", "stopped_early")


def stability_row(r: TrainResult) -> list[str]:
    return [str(len(r.logs)), str(r.window), repr(r.stability), repr(r.initial_mcd), repr(r.final_mcd), str(int(r.stopped_early))]


ABLATION_HEADER = ("lambda1", "lambda2", "final_mcd", "stability", "status")


def ablate(
    corpus: SynthCorpus,
    cfg: TrainConfig,
    grid: Sequence[tuple[float, float]] = DEFAULT_GRID,
) -> list[dict]:
    """One training run per (λ1, λ2) point, same seed; failures are recorded, not raised."""
    if not grid:
        raise ValueError("ablation grid is empty")
    rows = []
    for l1, l2 in grid:
        run_cfg = replace(cfg, weights=LossWeights(float(l1), float(l2)))
        try:
            res = train(corpus, run_cfg)
            rows.append(dict(lambda1=float(l1), lambda2=float(l2), final_mcd=res.final_mcd, stability=res.stability, status="ok"))
        except Exception as exc:  # a failed grid point must not abort the sweep
            log.warning("ablation point (%s, %s) failed: %s", l1, l2, exc)
            rows.append(
                dict(lambda1=float(l1), lambda2=float(l2), final_mcd=float("nan"), stability=float("nan"), status=f"error: {exc}")
            )
    return rows


def ablation_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for r in rows:
        w.writerow([repr(r["lambda1"]), repr(r["lambda2"]), repr(r["final_mcd"]), repr(r["stability"]), r["status"]])
    return buf.getvalue()


# -- checkpoints -----------------------------------------------------------------


def _rng_state_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> None:
    """Binary checkpoint: magic, u32 header length, JSON header, float64 payloads (little-endian)."""
    arrays: list[tuple[str, np.ndarray]] = []
    for prefix, mod in (("G", state.G), ("D", state.D)):
        arrays += [(f"{prefix}/{k}", v) for k, v in mod.state_dict().items()]
    for prefix, opt, mod in (("optG", state.opt_g, state.G), ("optD", state.opt_d, state.D)):
        for k, m, v in zip(mod.params, opt.m, opt.v):
            arrays += [(f"{prefix}.m/{k}", m), (f"{prefix}.v/{k}", v)]
    header = {
        "config": cfg.to_dict(),
        "arrays": [[name, list(a.shape)] for name, a in arrays],
        "rng": _rng_state_json(state.rng),
        "epoch": state.epoch,
        "best_mcd": state.best_mcd if np.isfinite(state.best_mcd) else None,
        "best_epoch": state.best_epoch,
        "since_best": state.since_best,
        "opt_t": [state.opt_g.t, state.opt_d.t],
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(hdr)))
        fh.write(hdr)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    buf = Path(path).read_bytes()
    if not buf.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not an SSVC checkpoint")
    off = len(CKPT_MAGIC)
    if len(buf) < off + 4:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    try:
        header = json.loads(buf[off : off + n])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    off += n
    cfg = TrainConfig.from_dict(header["config"])
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        if len(buf) < off + 8 * count:
            raise CheckpointError(f"{path}: truncated payload at {name}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
    state = TrainState.fresh(cfg)
    state.G.load_state_dict({k[2:]: v for k, v in arrays.items() if k.startswith("G/")})
    state.D.load_state_dict({k[2:]: v for k, v in arrays.items() if k.startswith("D/")})
    for prefix, opt, mod in (("optG", state.opt_g, state.G), ("optD", state.opt_d, state.D)):
        dt = mod.dtype
        opt.m = [np.array(arrays[f"{prefix}.m/{k}"], dtype=dt) for k in mod.params]
        opt.v = [np.array(arrays[f"{prefix}.v/{k}"], dtype=dt) for k in mod.params]
    state.opt_g.t, state.opt_d.t = header["opt_t"]
    state.rng.bit_generator.state = header["rng"]
    state.epoch = header["epoch"]
    state.best_mcd = float("inf") if header["best_mcd"] is None else header["best_mcd"]
    state.best_epoch = header["best_epoch"]
    state.since_best = header["since_best"]
    return state, cfg
