"""Toy-scale trainable networks: chunk-masked encoder, CTC head, AED decoder.

The encoder is deliberately small: mean-pool subsampling, then pre-norm
self-attention + feed-forward blocks with absolute sinusoidal positions.
Mean-pool subsampling keeps the frame-time bookkeeping exact (one encoder
frame = subsample * frame_shift ms), which the latency metrics rely on.

Attention is masked by a chunk mask, so a streaming encoder's output frame
depends only on input frames from its own and earlier chunks; feeding chunks
sequentially with cached keys/values reproduces the full masked forward.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import layers
from .ctc import LogProbMatrix
from .nn_core import (
    ParamStore,
    load_checkpoint,
    load_into_store,
    log_softmax,
    log_softmax_backward,
    named_rng,
)

FULL = "full"

ChunkSize = Union[int, str]


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    model_dim: int
    layers: int
    heads: int
    subsample: int
    chunk_size: ChunkSize
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if self.subsample < 1:
            raise ValueError(f"subsample must be >= 1, got {self.subsample}")
        if self.chunk_size != FULL and (not isinstance(self.chunk_size, int) or self.chunk_size < 1):
            raise ValueError(f"chunk_size must be a positive integer or {FULL!r}, got {self.chunk_size!r}")


@dataclass
class ChunkMask:
    T: int
    chunk_size: int
    allowed: np.ndarray


@dataclass(frozen=True)
class LossWeights:
    """alpha scales distillation; lam balances CTC against AED."""

    alpha: float
    lam: float

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError(f"lam must be in [0,1], got {self.lam}")


def make_chunk_mask(T: int, chunk_size: ChunkSize) -> ChunkMask:
    """allowed[i][j] iff frame j's chunk is at or before frame i's chunk."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if chunk_size == FULL:
        chunk_size = T
    if not isinstance(chunk_size, int) or chunk_size < 1:
        raise ValueError(f"chunk_size must be a positive integer or {FULL!r}, got {chunk_size!r}")
    idx = np.arange(T) // chunk_size
    allowed = idx[None, :] <= idx[:, None]
    return ChunkMask(T=T, chunk_size=chunk_size, allowed=allowed)


def joint_loss(ctc_l: float, aed_l: float, distill_l: float, w: LossWeights) -> float:
    """lam*ctc + (1-lam)*aed + alpha*distill."""
    return w.lam * ctc_l + (1.0 - w.lam) * aed_l + w.alpha * distill_l


def _init_affine(store: ParamStore, name: str, fan_in: int, fan_out: int, seed: int) -> None:
    rng = named_rng(seed, "init", name)
    bound = 1.0 / np.sqrt(fan_in)
    store.add(f"{name}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    store.add(f"{name}.b", rng.uniform(-bound, bound, size=(fan_out,)))


def _init_layer_norm(store: ParamStore, name: str, dim: int) -> None:
    store.add(f"{name}.g", np.ones(dim))
    store.add(f"{name}.b", np.zeros(dim))


def _init_attention(store: ParamStore, name: str, dim: int, seed: int) -> None:
    for part in ("q", "v", "o"):
        _init_affine(store, f"{name}.{part}", dim, dim, seed)
    rng = named_rng(seed, "init", f"{name}.k")
    bound = 1.0 / np.sqrt(dim)
    store.add(f"{name}.k.w", rng.uniform(-bound, bound, size=(dim, dim)))


ATT_PARAM_KEYS = (
    ("q", "w"),
    ("q", "b"),
    ("k", "w"),
    ("v", "w"),
    ("v", "b"),
    ("o", "w"),
    ("o", "b"),
)


class Encoder:
    """Mean-pool subsampling + pre-norm attention blocks under a chunk mask."""

    def __init__(self, cfg: EncoderConfig, store: ParamStore, prefix: str = "enc") -> None:
        self.cfg = cfg
        self.store = store
        self.prefix = prefix
        self.ffn_dim = 2 * cfg.model_dim
        seed = cfg.rng_seed
        _init_affine(store, f"{prefix}.in", cfg.input_dim, cfg.model_dim, seed)
        for l in range(cfg.layers):
            base = f"{prefix}.l{l:02d}"
            _init_layer_norm(store, f"{base}.ln1", cfg.model_dim)
            _init_attention(store, f"{base}.att", cfg.model_dim, seed)
            _init_layer_norm(store, f"{base}.ln2", cfg.model_dim)
            _init_affine(store, f"{base}.ffn1", cfg.model_dim, self.ffn_dim, seed)
            _init_affine(store, f"{base}.ffn2", self.ffn_dim, cfg.model_dim, seed)
        _init_layer_norm(store, f"{prefix}.ln_out", cfg.model_dim)

    def _p(self, name: str) -> np.ndarray:
        return self.store[f"{self.prefix}.{name}"]

    def _att_params(self, base: str) -> tuple:
        return tuple(self._p(f"{base}.att.{part}.{wb}") for part, wb in ATT_PARAM_KEYS)

    def _subsample(self, features: np.ndarray) -> np.ndarray:
        sub = self.cfg.subsample
        n = features.shape[0]
        if n < sub:
            raise ValueError(f"need at least {sub} input frames, got {n}")
        t = n // sub
        return features[: t * sub].reshape(t, sub, features.shape[1]).mean(axis=1)

    def output_frames(self, n_input_frames: int) -> int:
        return n_input_frames // self.cfg.subsample

    def forward(self, features: np.ndarray) -> tuple[np.ndarray, tuple]:
        """Full-utterance masked forward; the cache feeds :meth:`backward`."""
        cfg = self.cfg
        pooled = self._subsample(np.asarray(features, dtype=np.float64))
        T = pooled.shape[0]
        z, c_in = layers.affine(pooled, self._p("in.w"), self._p("in.b"))
        x = z + layers.sinusoidal_positions(T, cfg.model_dim)
        mask = make_chunk_mask(T, cfg.chunk_size).allowed
        layer_caches = []
        for l in range(cfg.layers):
            base = f"l{l:02d}"
            a, c_ln1 = layers.layer_norm(x, self._p(f"{base}.ln1.g"), self._p(f"{base}.ln1.b"))
            att, c_att = layers.multi_head_attention(a, a, *self._att_params(base), cfg.heads, mask)
            x1 = x + att
            f, c_ln2 = layers.layer_norm(x1, self._p(f"{base}.ln2.g"), self._p(f"{base}.ln2.b"))
            h1, c_ff1 = layers.affine(f, self._p(f"{base}.ffn1.w"), self._p(f"{base}.ffn1.b"))
            r, c_relu = layers.relu(h1)
            h2, c_ff2 = layers.affine(r, self._p(f"{base}.ffn2.w"), self._p(f"{base}.ffn2.b"))
            x = x1 + h2
            layer_caches.append((c_ln1, c_att, c_ln2, c_ff1, c_relu, c_ff2))
        out, c_out = layers.layer_norm(x, self._p("ln_out.g"), self._p("ln_out.b"))
        return out, (c_in, layer_caches, c_out)

    def backward(self, cache: tuple, dout: np.ndarray) -> None:
        """Accumulate parameter gradients; input features need no gradient."""
        c_in, layer_caches, c_out = cache
        acc = self.store.accumulate
        dx, dg, db = layers.layer_norm_backward(dout, c_out)
        acc(f"{self.prefix}.ln_out.g", dg)
        acc(f"{self.prefix}.ln_out.b", db)
        for l in range(self.cfg.layers - 1, -1, -1):
            base = f"{self.prefix}.l{l:02d}"
            c_ln1, c_att, c_ln2, c_ff1, c_relu, c_ff2 = layer_caches[l]
            dr, dw2, db2 = layers.affine_backward(dx, c_ff2)
            acc(f"{base}.ffn2.w", dw2)
            acc(f"{base}.ffn2.b", db2)
            dh1 = layers.relu_backward(dr, c_relu)
            df, dw1, db1 = layers.affine_backward(dh1, c_ff1)
            acc(f"{base}.ffn1.w", dw1)
            acc(f"{base}.ffn1.b", db1)
            dx1, dg2, db2n = layers.layer_norm_backward(df, c_ln2)
            acc(f"{base}.ln2.g", dg2)
            acc(f"{base}.ln2.b", db2n)
            dx1 += dx
            da_q, da_kv, att_grads = layers.multi_head_attention_backward(dx1, c_att)
            for (part, wb), g in zip(ATT_PARAM_KEYS, att_grads):
                acc(f"{base}.att.{part}.{wb}", g)
            da = da_q + da_kv
            dx0, dg1, db1n = layers.layer_norm_backward(da, c_ln1)
            acc(f"{base}.ln1.g", dg1)
            acc(f"{base}.ln1.b", db1n)
            dx = dx0 + dx1
        _, dw_in, db_in = layers.affine_backward(dx, c_in)
        acc(f"{self.prefix}.in.w", dw_in)
        acc(f"{self.prefix}.in.b", db_in)

    def stream_chunks(self, features: np.ndarray):
        """Yield encoder output one chunk at a time with cached keys/values.

        Frames inside a chunk attend to each other and to everything cached,
        which is exactly what the chunk mask allows, so the concatenation of
        the yielded blocks matches :meth:`forward` to ~1e-9 per element.
        """
        cfg = self.cfg
        pooled = self._subsample(np.asarray(features, dtype=np.float64))
        T = pooled.shape[0]
        c = T if cfg.chunk_size == FULL else cfg.chunk_size
        pos = layers.sinusoidal_positions(T, cfg.model_dim)
        heads = cfg.heads
        dh = cfg.model_dim // heads
        cached_kv: list[tuple[np.ndarray, np.ndarray] | None] = [None] * cfg.layers
        for start in range(0, T, c):
            stop = min(start + c, T)
            x, _ = layers.affine(pooled[start:stop], self._p("in.w"), self._p("in.b"))
            x = x + pos[start:stop]
            for l in range(cfg.layers):
                base = f"l{l:02d}"
                a, _ = layers.layer_norm(x, self._p(f"{base}.ln1.g"), self._p(f"{base}.ln1.b"))
                wq, bq, wk, wv, bv, wo, bo = self._att_params(base)
                q = layers.split_heads(a @ wq + bq, heads)
                k_new = layers.split_heads(a @ wk, heads)
                v_new = layers.split_heads(a @ wv + bv, heads)
                if cached_kv[l] is None:
                    k_all, v_all = k_new, v_new
                else:
                    k_all = np.concatenate([cached_kv[l][0], k_new], axis=1)
                    v_all = np.concatenate([cached_kv[l][1], v_new], axis=1)
                cached_kv[l] = (k_all, v_all)
                scores = (q @ k_all.transpose(0, 2, 1)) / np.sqrt(dh)
                allowed = np.ones(scores.shape[1:], dtype=bool)
                p, _ = layers.masked_softmax(scores, allowed)
                att = layers.merge_heads(p @ v_all) @ wo + bo
                x = x + att
                f, _ = layers.layer_norm(x, self._p(f"{base}.ln2.g"), self._p(f"{base}.ln2.b"))
                h1, _ = layers.affine(f, self._p(f"{base}.ffn1.w"), self._p(f"{base}.ffn1.b"))
                r, _ = layers.relu(h1)
                h2, _ = layers.affine(r, self._p(f"{base}.ffn2.w"), self._p(f"{base}.ffn2.b"))
                x = x + h2
            out, _ = layers.layer_norm(x, self._p("ln_out.g"), self._p("ln_out.b"))
            yield out

    def forward_streaming(self, features: np.ndarray) -> np.ndarray:
        return np.concatenate(list(self.stream_chunks(features)), axis=0)


class AsrModel:
    """One encoder branch with a CTC projection and a one-layer AED decoder.

    CTC classes are {0: blank, 1..V: tokens}. The decoder drops the blank and
    reuses slot 0 for the start symbol on the input side and the end symbol on
    the target side, so its vocabulary is V + 1 classes.
    """

    def __init__(self, enc_cfg: EncoderConfig, vocab_size: int, dec_heads: int = 2) -> None:
        if vocab_size < 1:
            raise ValueError(f"vocab_size must be >= 1, got {vocab_size}")
        self.enc_cfg = enc_cfg
        self.vocab_size = vocab_size
        self.num_classes = vocab_size + 1
        self.dec_classes = vocab_size + 1
        self.dec_heads = dec_heads
        self.store = ParamStore()
        self.encoder = Encoder(enc_cfg, self.store)
        d = enc_cfg.model_dim
        seed = enc_cfg.rng_seed
        _init_affine(self.store, "head", d, self.num_classes, seed)
        rng = named_rng(seed, "init", "dec.emb")
        bound = 1.0 / np.sqrt(d)
        self.store.add("dec.emb", rng.uniform(-bound, bound, size=(self.dec_classes, d)))
        _init_layer_norm(self.store, "dec.ln1", d)
        _init_attention(self.store, "dec.self", d, seed)
        _init_layer_norm(self.store, "dec.ln2", d)
        _init_attention(self.store, "dec.cross", d, seed)
        _init_layer_norm(self.store, "dec.ln3", d)
        _init_affine(self.store, "dec.out", d, self.dec_classes, seed)

    # ---------------------------------------------------------------- CTC

    def ctc_head(self, encodings: np.ndarray) -> tuple[LogProbMatrix, tuple]:
        logits, c_aff = layers.affine(encodings, self.store["head.w"], self.store["head.b"])
        logp = log_softmax(logits)
        return LogProbMatrix(logp), (c_aff, logp)

    def ctc_head_backward(self, cache: tuple, dlogp: np.ndarray) -> np.ndarray:
        c_aff, logp = cache
        dlogits = log_softmax_backward(logp, dlogp)
        denc, dw, db = layers.affine_backward(dlogits, c_aff)
        self.store.accumulate("head.w", dw)
        self.store.accumulate("head.b", db)
        return denc

    def forward_ctc(self, features: np.ndarray) -> tuple[LogProbMatrix, tuple]:
        enc, e_cache = self.encoder.forward(features)
        logp, h_cache = self.ctc_head(enc)
        return logp, (e_cache, h_cache)

    def backward_ctc(self, cache: tuple, dlogp: np.ndarray) -> None:
        e_cache, h_cache = cache
        denc = self.ctc_head_backward(h_cache, dlogp)
        self.encoder.backward(e_cache, denc)

    def streaming_log_probs(self, features: np.ndarray) -> LogProbMatrix:
        enc = self.encoder.forward_streaming(features)
        logits = enc @ self.store["head.w"] + self.store["head.b"]
        return LogProbMatrix(log_softmax(logits))

    def stream_log_prob_chunks(self, features: np.ndarray):
        """Per-chunk (rows, encoder_block) pairs for incremental decoding."""
        w, b = self.store["head.w"], self.store["head.b"]
        for block in self.encoder.stream_chunks(features):
            yield log_softmax(block @ w + b), block

    # ---------------------------------------------------------------- AED

    def _check_tokens(self, tokens: Sequence[int]) -> list[int]:
        toks = list(tokens)
        for tok in toks:
            if not (1 <= tok <= self.vocab_size):
                raise ValueError(f"token {tok} out of vocabulary [1, {self.vocab_size}]")
        return toks

    def _dec_forward(self, encodings: np.ndarray, tokens: list[int]) -> tuple[np.ndarray, tuple]:
        d = self.enc_cfg.model_dim
        dec_in = np.array([0] + tokens, dtype=np.int64)
        L = dec_in.size
        emb = self.store["dec.emb"]
        x = emb[dec_in] + layers.sinusoidal_positions(L, d)
        causal = make_chunk_mask(L, 1).allowed
        a, c_ln1 = layers.layer_norm(x, self.store["dec.ln1.g"], self.store["dec.ln1.b"])
        satt, c_satt = layers.multi_head_attention(
            a, a, *self._dec_att_params("self"), self.dec_heads, causal
        )
        x1 = x + satt
        b, c_ln2 = layers.layer_norm(x1, self.store["dec.ln2.g"], self.store["dec.ln2.b"])
        full = np.ones((L, encodings.shape[0]), dtype=bool)
        catt, c_catt = layers.multi_head_attention(
            b, encodings, *self._dec_att_params("cross"), self.dec_heads, full
        )
        x2 = x1 + catt
        y, c_ln3 = layers.layer_norm(x2, self.store["dec.ln3.g"], self.store["dec.ln3.b"])
        logits, c_out = layers.affine(y, self.store["dec.out.w"], self.store["dec.out.b"])
        logp = log_softmax(logits)
        cache = (dec_in, c_ln1, c_satt, c_ln2, c_catt, c_ln3, c_out, logp)
        return logp, cache

    def _dec_att_params(self, which: str) -> tuple:
        return tuple(self.store[f"dec.{which}.{part}.{wb}"] for part, wb in ATT_PARAM_KEYS)

    def aed_loss(
        self, encodings: np.ndarray, tokens: Sequence[int], label_smoothing: float
    ) -> tuple[float, tuple]:
        """Teacher-forced cross entropy against tokens-plus-end, mean per position."""
        toks = self._check_tokens(tokens)
        if not toks:
            raise ValueError("aed_loss requires a non-empty token sequence")
        logp, cache = self._dec_forward(encodings, toks)
        targets = np.array(toks + [0], dtype=np.int64)
        L = targets.size
        q = np.full_like(logp, label_smoothing / self.dec_classes)
        q[np.arange(L), targets] += 1.0 - label_smoothing
        loss = float(-(q * logp).sum() / L)
        return loss, (cache, q, L)

    def aed_backward(self, loss_cache: tuple, scale: float = 1.0) -> np.ndarray:
        """Accumulate decoder gradients; returns d loss / d encodings * scale."""
        cache, q, L = loss_cache
        logp = cache[-1]
        dlogits = scale * (np.exp(logp) - q) / L
        return self._dec_backward(cache, dlogits)

    def _dec_backward(self, cache: tuple, dlogits: np.ndarray) -> np.ndarray:
        dec_in, c_ln1, c_satt, c_ln2, c_catt, c_ln3, c_out, _logp = cache
        acc = self.store.accumulate
        dy, dw_out, db_out = layers.affine_backward(dlogits, c_out)
        acc("dec.out.w", dw_out)
        acc("dec.out.b", db_out)
        dx2, dg3, db3 = layers.layer_norm_backward(dy, c_ln3)
        acc("dec.ln3.g", dg3)
        acc("dec.ln3.b", db3)
        db_q, denc, catt_grads = layers.multi_head_attention_backward(dx2, c_catt)
        self._acc_att("cross", catt_grads)
        dx1, dg2, db2 = layers.layer_norm_backward(db_q, c_ln2)
        acc("dec.ln2.g", dg2)
        acc("dec.ln2.b", db2)
        dx1 += dx2
        da_q, da_kv, satt_grads = layers.multi_head_attention_backward(dx1, c_satt)
        self._acc_att("self", satt_grads)
        dx, dg1, db1 = layers.layer_norm_backward(da_q + da_kv, c_ln1)
        acc("dec.ln1.g", dg1)
        acc("dec.ln1.b", db1)
        dx += dx1
        demb = np.zeros_like(self.store["dec.emb"])
        np.add.at(demb, dec_in, dx)
        acc("dec.emb", demb)
        return denc

    def _acc_att(self, which: str, grads: tuple) -> None:
        for (part, wb), g in zip(ATT_PARAM_KEYS, grads):
            self.store.accumulate(f"dec.{which}.{part}.{wb}", g)

    def aed_score(self, encodings: np.ndarray, tokens: Sequence[int]) -> float:
        """Sum of teacher-forced token log-probs including the end symbol."""
        toks = self._check_tokens(tokens)
        logp, _ = self._dec_forward(encodings, toks)
        targets = np.array(toks + [0], dtype=np.int64)
        return float(logp[np.arange(targets.size), targets].sum())


def build_student_teacher(
    cfg_t: EncoderConfig,
    cfg_s: EncoderConfig,
    vocab_size: int,
    teacher_ckpt: str,
    dec_heads: int = 2,
    student_warm_start: str | None = None,
) -> tuple[AsrModel, AsrModel]:
    """Load and freeze the full-context teacher; initialize the student fresh."""
    if cfg_t.chunk_size != FULL:
        raise ValueError(f"teacher chunk_size must be {FULL!r}, got {cfg_t.chunk_size!r}")
    tensors = load_checkpoint(teacher_ckpt)
    if "head.b" in tensors and tensors["head.b"].size != vocab_size + 1:
        raise ValueError(
            f"teacher checkpoint has {tensors['head.b'].size} CTC classes, "
            f"model expects {vocab_size + 1}"
        )
    teacher = AsrModel(cfg_t, vocab_size, dec_heads)
    load_into_store(teacher.store, teacher_ckpt)
    teacher.store.freeze_all()
    student = AsrModel(cfg_s, vocab_size, dec_heads)
    if student_warm_start is not None:
        load_into_store(student.store, student_warm_start)
    return teacher, student
