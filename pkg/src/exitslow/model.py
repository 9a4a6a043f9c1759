"""Multi-exit transformer encoder classifier.

N post-LN encoder layers; after every layer the hidden states are mean-pooled
over real (non-pad) positions and fed to that layer's classifier head.
"""
from __future__ import annotations

import json
import logging
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor, DomainError, GradientTape
from .exit_policy import ExitPolicy, decide_batch
from .metrics import speedup
from .text import Sentence, Vocabulary

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
EMBED_INIT_STD = 0.1
POS_INIT = "sinusoid"  # or "normal"


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_classes: int
    n_layers: int = 6
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_hash_buckets: int = 1024
    max_len: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_layers < 2:
            raise ValueError("need at least two layers")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")


@dataclass
class LayerLogits:
    per_layer: list  # N arrays (or DiffTensors) of length K
    truncated: bool = False

    def numpy(self) -> np.ndarray:
        return np.stack([l.data if isinstance(l, DiffTensor) else np.asarray(l) for l in self.per_layer])


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, k = cfg.d_model, cfg.d_ff, cfg.n_classes
    shapes = {
        "embed": (cfg.vocab_size + cfg.n_hash_buckets, d),
        "pos": (cfg.max_len, d),
        "emb_ln.g": (d,),
        "emb_ln.b": (d,),
    }
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        for w in ("q", "k", "v", "o"):
            shapes[p + f"W{w}"] = (d, d)
            shapes[p + f"b{w}"] = (d,)
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "W1": (d, f), p + "b1": (f,),
            p + "W2": (f, d), p + "b2": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "head.W": (d, k), p + "head.b": (k,),
        })
    return shapes


class MultiExitModel:
    def __init__(self, config: ModelConfig, vocab: Vocabulary, params: dict[str, np.ndarray] | None = None,
                 zero_init: bool = False, dtype=np.float32):
        if len(vocab) != config.vocab_size:
            raise ValueError(f"vocabulary has {len(vocab)} words, config says {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        shapes = _param_shapes(config)
        if params is None:
            params = _init_params(shapes, config.seed, zero_init)
        self.params = {name: DiffTensor(np.asarray(params[name], dtype=dtype), name=name) for name in shapes}

    @classmethod
    def create(cls, vocab: Vocabulary, n_classes: int, **kw) -> "MultiExitModel":
        return cls(ModelConfig(vocab_size=len(vocab), n_classes=n_classes, **kw), vocab)

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def astype(self, dtype) -> "MultiExitModel":
        return MultiExitModel(self.config, self.vocab, {k: v.data for k, v in self.params.items()}, dtype=dtype)

    def copy(self) -> "MultiExitModel":
        return self.astype(self.dtype)

    def weights(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    # ------------------------------------------------------------- forward

    def batch_ids(self, sentences: Sequence[Sentence | Sequence[int]]) -> tuple[np.ndarray, np.ndarray, bool]:
        """Pad token id lists into (B, T) ids and a 0/1 mask; truncates at max_len."""
        seqs = [list(s.token_ids) if isinstance(s, Sentence) else list(s) for s in sentences]
        if any(len(s) == 0 for s in seqs):
            raise DomainError("empty input")
        truncated = any(len(s) > self.config.max_len for s in seqs)
        seqs = [s[: self.config.max_len] for s in seqs]
        t = max(len(s) for s in seqs)
        ids = np.full((len(seqs), t), self.vocab.pad_id, dtype=np.int64)
        mask = np.zeros((len(seqs), t), dtype=self.dtype)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            mask[i, : len(s)] = 1.0
        return ids, mask, truncated

    def embed(self, ids: np.ndarray) -> DiffTensor:
        return ad.embedding_lookup(self.params["embed"], ids)

    def layer_logits(self, ids: np.ndarray, mask: np.ndarray, tok_emb: DiffTensor | None = None,
                     dropout: float = 0.0, rng: np.random.Generator | None = None) -> list[DiffTensor]:
        """Per-layer logits, each (B, K).  ``tok_emb`` overrides the token embedding lookup.

        ``dropout`` > 0 (training only) zeroes residual-branch activations
        with masks drawn from ``rng``.
        """
        P = self.params

        def drop(z):
            if not dropout:
                return z
            keep = (rng.random(z.shape) >= dropout).astype(z.dtype) / (1.0 - dropout)
            return ad.mul(z, keep)

        cfg = self.config
        b, t = ids.shape
        h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        if tok_emb is None:
            tok_emb = self.embed(ids)
        pos = DiffTensor(P["pos"].data[:t]) if not P["pos"].requires_grad else _slice_rows(P["pos"], t)
        x = drop(ad.layer_norm(ad.add(tok_emb, pos), P["emb_ln.g"], P["emb_ln.b"]))
        attn_bias = ((1.0 - mask) * -1e9).astype(self.dtype)[:, None, None, :]
        pool_w = (mask / mask.sum(axis=1, keepdims=True))[:, :, None].astype(self.dtype)
        scale = 1.0 / math.sqrt(dh)
        outs = []
        for i in range(cfg.n_layers):
            p = f"layer{i}."

            def heads(z):
                return ad.transpose(ad.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

            q = heads(ad.add(ad.matmul(x, P[p + "Wq"]), P[p + "bq"]))
            k = heads(ad.add(ad.matmul(x, P[p + "Wk"]), P[p + "bk"]))
            v = heads(ad.add(ad.matmul(x, P[p + "Wv"]), P[p + "bv"]))
            scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale)
            att = ad.softmax(scores, axis=-1, bias=attn_bias)
            ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, cfg.d_model))
            a = ad.add(ad.matmul(ctx, P[p + "Wo"]), P[p + "bo"])
            x = ad.layer_norm(ad.add(x, drop(a)), P[p + "ln1.g"], P[p + "ln1.b"])
            ff = ad.gelu(ad.add(ad.matmul(x, P[p + "W1"]), P[p + "b1"]))
            ff = ad.add(ad.matmul(ff, P[p + "W2"]), P[p + "b2"])
            x = ad.layer_norm(ad.add(x, drop(ff)), P[p + "ln2.g"], P[p + "ln2.b"])
            pooled = ad.reduce_sum(ad.mul(x, pool_w), axis=1)
            outs.append(ad.add(ad.matmul(pooled, P[p + "head.W"]), P[p + "head.b"]))
        return outs

    def forward_all(self, token_ids: Sequence[int] | Sentence) -> LayerLogits:
        """All N internal-classifier logits for one input (gradient-capable on a tape)."""
        ids, mask, truncated = self.batch_ids([token_ids])
        if truncated:
            log.warning("input longer than max_len=%d truncated", self.config.max_len)
        outs = self.layer_logits(ids, mask)
        tape = ad.active_tape()
        if tape is None:
            return LayerLogits([o.data[0] for o in outs], truncated)
        return LayerLogits([_row(o, 0) for o in outs], truncated)

    def logits_numpy(self, sentences: Sequence, batch_size: int = 256) -> np.ndarray:
        """(N, B, K) logits without recording a tape."""
        chunks = []
        for s in range(0, len(sentences), batch_size):
            ids, mask, _ = self.batch_ids(sentences[s:s + batch_size])
            chunks.append(np.stack([o.data for o in self.layer_logits(ids, mask)]))
        return np.concatenate(chunks, axis=1)

    def predict_exits(self, policy: ExitPolicy, sentences: Sequence) -> tuple[np.ndarray, np.ndarray]:
        return decide_batch(policy, self.logits_numpy(sentences))


def _slice_rows(t: DiffTensor, n: int) -> DiffTensor:
    full = t.shape

    def fn(g):
        buf = np.zeros(full, dtype=g.dtype)
        buf[:n] = g
        return (buf,)

    return ad._record(t.data[:n], (t,), fn)


def _row(t: DiffTensor, i: int) -> DiffTensor:
    full = t.shape

    def fn(g):
        buf = np.zeros(full, dtype=g.dtype)
        buf[i] = g
        return (buf,)

    return ad._record(t.data[i], (t,), fn)


def sinusoid_positions(n_pos: int, d: int) -> np.ndarray:
    """Fixed-frequency sin/cos table; makes relative offsets linear in the embedding."""
    pos = np.arange(n_pos)[:, None]
    freq = 1.0 / 10000.0 ** (np.arange(0, d, 2) / d)
    out = np.zeros((n_pos, d))
    out[:, 0::2] = np.sin(pos * freq)
    out[:, 1::2] = np.cos(pos * freq[: d // 2])
    return out


def _init_params(shapes: dict[str, tuple[int, ...]], seed: int, zero: bool) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in shapes.items():
        if zero:
            out[name] = np.zeros(shape, dtype=np.float32)
            continue
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name == "pos" and POS_INIT == "sinusoid":
            arr = sinusoid_positions(*shape)
        elif name in ("embed", "pos"):
            arr = rng.normal(0.0, EMBED_INIT_STD, size=shape)
        elif len(shape) == 2:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
        else:
            arr = np.zeros(shape)
        out[name] = arr.astype(np.float32)
    return out


# ----------------------------------------------------------------- training


@dataclass
class TrainHP:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    clip_norm: float = 1.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    dropout: float = 0.1
    warmup_frac: float = 0.0  # share of steps with linear warmup
    decay: str = "none"  # "none" | "linear" (to zero at the last step)

    def lr_at(self, step: int, total: int) -> float:
        """Learning rate for 0-based ``step`` out of ``total`` steps."""
        scale = 1.0
        warm = int(round(self.warmup_frac * total))
        if warm and step < warm:
            scale = (step + 1) / warm
        elif self.decay == "linear":
            scale = max(0.0, (total - step) / max(total - warm, 1))
        return self.lr * scale


@dataclass
class TrainingReport:
    epoch_loss: list[float] = field(default_factory=list)
    dev_accuracy: list[list[float]] = field(default_factory=list)  # per epoch, per layer
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def joint_loss(model: MultiExitModel, ids, mask, labels, dropout: float = 0.0,
               rng: np.random.Generator | None = None) -> tuple[DiffTensor, list[DiffTensor]]:
    """Equal-weight sum over layers of the batch-mean cross entropy."""
    outs = model.layer_logits(ids, mask, dropout=dropout, rng=rng)
    per_layer = [ad.cross_entropy(lg, labels, reduction="mean") for lg in outs]
    total = per_layer[0]
    for l in per_layer[1:]:
        total = ad.add(total, l)
    return total, per_layer


class Adam:
    """Adam with optional decoupled weight decay on matrices."""

    def __init__(self, params: dict[str, DiffTensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p = self.params[k]
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.data.ndim == 2:
                upd = upd + self.weight_decay * p.data
            p.data = (p.data - self.lr * upd).astype(p.data.dtype)


def layer_accuracy(model: MultiExitModel, sentences: Sequence[Sentence]) -> list[float]:
    logits = model.logits_numpy(sentences)
    labels = np.array([s.label for s in sentences])
    return [float(np.mean(l.argmax(-1) == labels)) for l in logits]


def train(model: MultiExitModel, dataset: Sequence[Sentence], hp: TrainHP | None = None,
          dev: Sequence[Sentence] | None = None) -> TrainingReport:
    """Minimise the joint multi-exit loss with Adam; mutates ``model`` in place."""
    hp = hp or TrainHP()
    if not dataset:
        raise DomainError("empty training set")
    labels = np.array([s.label for s in dataset], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= model.config.n_classes:
        raise DomainError("label outside [0, n_classes)")
    rng = np.random.default_rng(hp.seed)
    opt = Adam(model.params, hp.lr, hp.betas, hp.eps, hp.weight_decay)
    drop_rng = np.random.default_rng([hp.seed, 1])
    report = TrainingReport()
    t0 = time.perf_counter()
    total_steps = hp.epochs * math.ceil(len(dataset) / hp.batch_size)
    step = 0
    for epoch in range(hp.epochs):
        order = rng.permutation(len(dataset))
        total, n_batches = 0.0, 0
        for s in range(0, len(order), hp.batch_size):
            idx = order[s:s + hp.batch_size]
            ids, mask, _ = model.batch_ids([dataset[i] for i in idx])
            with GradientTape() as tape:
                for p in model.params.values():
                    p.grad = None
                    tape.watch(p)
                try:
                    loss, _ = joint_loss(model, ids, mask, labels[idx], hp.dropout, drop_rng)
                    ad.backward(loss)
                except ad.NumericError as exc:
                    raise TrainingError(f"loss diverged (NaN/inf) in epoch {epoch + 1}") from exc
            for p in model.params.values():
                p.requires_grad = False
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"loss diverged (NaN/inf) in epoch {epoch + 1}")
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
            norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
            if hp.clip_norm and norm > hp.clip_norm:
                grads = {k: g * (hp.clip_norm / norm) for k, g in grads.items()}
            opt.lr = hp.lr_at(step, total_steps)
            opt.step(grads)
            step += 1
            for p in model.params.values():
                p.grad = None
            total += value
            n_batches += 1
        report.epoch_loss.append(total / n_batches)
        if dev:
            report.dev_accuracy.append(layer_accuracy(model, dev))
        log.info("epoch %d loss %.4f dev %s", epoch + 1, report.epoch_loss[-1],
                 report.dev_accuracy[-1] if dev else "-")
    report.seconds = time.perf_counter() - t0
    return report


# ----------------------------------------------------------------- calibration


@dataclass
class Calibration:
    policy: ExitPolicy
    dev_accuracy: float
    full_accuracy: float
    speedup: float
    warning: str | None = None


def _accuracy_and_speedup(policy, logits, labels):
    exits, preds = decide_batch(policy, logits)
    return float(np.mean(preds == labels)), speedup(exits, logits.shape[0])


def entropy_grid(logits: np.ndarray, n_quantiles: int = 101) -> np.ndarray:
    """Union over layers of per-layer dev-set entropy quantiles."""
    ents = ad.entropy_np(ad.softmax_np(np.asarray(logits, dtype=np.float64), -1))  # (N, B)
    qs = np.linspace(0.0, 1.0, n_quantiles)
    q = np.concatenate([np.quantile(e, qs) for e in ents])
    # exits need H < threshold, so each quantile is also offered one ulp higher
    return np.unique(np.concatenate([q, np.nextafter(q, np.inf), [0.0]]))


def calibrate_threshold(model: MultiExitModel, policy_kind: str, dev_set: Sequence[Sentence],
                        max_rel_drop: float = 0.02, logits: np.ndarray | None = None) -> Calibration:
    """Most aggressive grid policy whose dev accuracy stays within ``max_rel_drop`` of the full model."""
    if not 0.0 < max_rel_drop <= 1.0:
        raise ValueError("max_rel_drop must lie in (0, 1]")
    if logits is None:
        logits = model.logits_numpy(dev_set)
    labels = np.array([s.label for s in dev_set])
    n = logits.shape[0]
    full_acc = float(np.mean(logits[-1].argmax(-1) == labels))
    floor = (1.0 - max_rel_drop) * full_acc
    if policy_kind == "entropy":
        candidates = [ExitPolicy.entropy(t) for t in entropy_grid(logits)]
        conservative = ExitPolicy.entropy(0.0)
    elif policy_kind == "patience":
        candidates = [ExitPolicy.patience(t) for t in range(1, n)]
        conservative = ExitPolicy.patience(n - 1)
    else:
        raise ValueError(f"unknown policy kind {policy_kind!r}")
    best = None
    for pol in candidates:
        acc, sp = _accuracy_and_speedup(pol, logits, labels)
        if acc < floor - 1e-12:
            continue
        # more speedup wins; among equal speedups the more aggressive parameter
        aggressiveness = pol.entropy_threshold if pol.kind == "entropy" else -pol.patience_t
        key = (sp, aggressiveness)
        if best is None or key > best[0]:
            best = (key, pol, acc, sp)
    if best is None:
        acc, sp = _accuracy_and_speedup(conservative, logits, labels)
        return Calibration(conservative, acc, full_acc, sp, warning="no-policy-within-bound")
    _, pol, acc, sp = best
    return Calibration(pol, acc, full_acc, sp)


# ----------------------------------------------------------------- checkpoints


def save_checkpoint(model: MultiExitModel, path: str | Path) -> None:
    """Zip container: ``meta.json`` plus one raw little-endian array per parameter.

    Written with fixed timestamps so identical models give identical bytes.
    """
    meta = {
        "format": "exitslow-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocab_fingerprint": model.vocab.fingerprint,
        "vocab": list(model.vocab.id_to_word),
        "params": {k: {"shape": list(v.shape), "dtype": v.dtype.str} for k, v in model.params.items()},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        _write(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode("utf-8"))
        for k, v in model.params.items():
            _write(zf, f"params/{k}.bin", np.ascontiguousarray(v.data).tobytes())


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def load_checkpoint(path: str | Path, expected_fingerprint: str | None = None) -> MultiExitModel:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != "exitslow-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')!r}")
        vocab = Vocabulary(meta["vocab"][2:])
        if vocab.fingerprint != meta["vocab_fingerprint"]:
            raise CheckpointError("vocabulary fingerprint mismatch inside checkpoint")
        if expected_fingerprint is not None and expected_fingerprint != vocab.fingerprint:
            raise CheckpointError("vocabulary fingerprint does not match the expected vocabulary")
        params = {}
        for k, spec in meta["params"].items():
            arr = np.frombuffer(zf.read(f"params/{k}.bin"), dtype=np.dtype(spec["dtype"]))
            params[k] = arr.reshape(spec["shape"]).copy()
    cfg = ModelConfig(**meta["config"])
    dtype = np.dtype(next(iter(meta["params"].values()))["dtype"])
    return MultiExitModel(cfg, vocab, params, dtype=dtype)
