"""Bidirectional masked language model: embedder, post-norm transformer
encoder, MLM head, BERT-style corruption, and text-only pretraining.

Attention masking is additive: masked key positions get -1e9 before the
row softmax, which underflows to an exact 0.0 weight. That makes encoder
outputs at real positions bit-invariant to pad contents and lets batched
and single-sequence forwards agree exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .optim import AdamConfig, Parameter, adam_step, warmup_then_linear_decay
from .rng import RngStream
from .vocab import MASK, PAD, TokenSequence, Vocabulary, encode as encode_text

MASK_BIAS = -1e9
N_SPECIAL = 5


class SkipSample(RuntimeError):
    """Corruption produced no loss positions after the resampling cap."""


class TrainingDiverged(RuntimeError):
    """Loss went non-finite during an optimization loop."""


@dataclass
class BiLMConfig:
    vocab_size: int
    hidden_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 256
    max_positions: int = 80
    text_len: int = 64
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.vocab_size < 6:
            raise ValueError(f"vocab_size must be >= 6, got {self.vocab_size}")
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.max_positions < self.text_len:
            raise ValueError("max_positions must cover text_len")
        for name in ("hidden_dim", "n_layers", "n_heads", "ffn_dim", "max_positions", "text_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BiLMConfig":
        return cls(**d)


class EncoderLayer:
    def __init__(self, config: BiLMConfig, index: int, stream: RngStream):
        d, f = config.hidden_dim, config.ffn_dim
        pre = f"layers.{index}."

        def w(name, shape):
            return Parameter(stream.child(pre + name).normal(shape, std=0.02), pre + name)

        def zeros(name, shape):
            return Parameter(np.zeros(shape, dtype=np.float32), pre + name)

        self.wq, self.bq = w("attn.wq", (d, d)), zeros("attn.bq", (d,))
        self.wk, self.bk = w("attn.wk", (d, d)), zeros("attn.bk", (d,))
        self.wv, self.bv = w("attn.wv", (d, d)), zeros("attn.bv", (d,))
        self.wo, self.bo = w("attn.wo", (d, d)), zeros("attn.bo", (d,))
        self.attn_gamma = Parameter(np.ones(d, dtype=np.float32), pre + "attn_norm.gamma")
        self.attn_beta = zeros("attn_norm.beta", (d,))
        self.w1, self.b1 = w("ffn.w1", (d, f)), zeros("ffn.b1", (f,))
        self.w2, self.b2 = w("ffn.w2", (f, d)), zeros("ffn.b2", (d,))
        self.ffn_gamma = Parameter(np.ones(d, dtype=np.float32), pre + "ffn_norm.gamma")
        self.ffn_beta = zeros("ffn_norm.beta", (d,))

    def parameters(self) -> list:
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
                self.wo, self.bo, self.attn_gamma, self.attn_beta,
                self.w1, self.b1, self.w2, self.b2,
                self.ffn_gamma, self.ffn_beta]


class BiLM:
    """Token/position embedder, encoder stack, and untied MLM head."""

    def __init__(self, config: BiLMConfig, vocab: Vocabulary, stream: RngStream):
        if vocab.size != config.vocab_size:
            raise ValueError(
                f"config vocab_size {config.vocab_size} != vocabulary size {vocab.size}")
        self.config = config
        self.vocab = vocab
        d = config.hidden_dim

        def w(name, shape):
            return Parameter(stream.child(name).normal(shape, std=0.02), name)

        self.token_embedding = w("token_embedding", (config.vocab_size, d))
        self.position_embedding = w("position_embedding", (config.max_positions, d))
        self.embed_gamma = Parameter(np.ones(d, dtype=np.float32), "embed_norm.gamma")
        self.embed_beta = Parameter(np.zeros(d, dtype=np.float32), "embed_norm.beta")
        self.layers = [EncoderLayer(config, i, stream) for i in range(config.n_layers)]
        self.head_w = w("mlm_head.weight", (config.vocab_size, d))
        self.head_b = Parameter(np.zeros(config.vocab_size, dtype=np.float32), "mlm_head.bias")

    def parameters(self) -> list:
        params = [self.token_embedding, self.position_embedding,
                  self.embed_gamma, self.embed_beta]
        for layer in self.layers:
            params.extend(layer.parameters())
        params.extend([self.head_w, self.head_b])
        return params

    def norm_parameters(self) -> list:
        return [p for p in self.parameters() if _is_norm_param(p.name)]

    def freeze(self):
        for p in self.parameters():
            p.frozen = not _is_norm_param(p.name)


def _is_norm_param(name: str) -> bool:
    return name.endswith(".gamma") or name.endswith(".beta")


def freeze(bilm: BiLM):
    """Freeze everything except layer-norm affine pairs. Idempotent."""
    bilm.freeze()


# -- forward pieces -------------------------------------------------------


def embed_prenorm_ids(ids: np.ndarray, bilm: BiLM, offset: int = 0) -> Tensor:
    """token + position embeddings for [B, S] ids, before norm/dropout."""
    b, s = ids.shape
    if offset < 0 or offset + s > bilm.config.max_positions:
        raise ShapeError(
            f"sequence of length {s} at offset {offset} exceeds "
            f"max_positions {bilm.config.max_positions}")
    tok = ad.embedding(bilm.token_embedding.tensor, ids)
    pos = ad.embedding(bilm.position_embedding.tensor,
                       np.arange(offset, offset + s))
    return ad.add(tok, pos)


def finish_embed(x: Tensor, bilm: BiLM, mode: str = "eval", stream=None) -> Tensor:
    out = ad.layer_norm(x, bilm.embed_gamma.tensor, bilm.embed_beta.tensor)
    if mode == "train" and bilm.config.dropout_p > 0.0:
        out = ad.dropout(out, bilm.config.dropout_p, stream.child("embed_drop"))
    return out


def embed_ids(ids: np.ndarray, bilm: BiLM, offset: int = 0,
              mode: str = "eval", stream=None) -> Tensor:
    return finish_embed(embed_prenorm_ids(ids, bilm, offset), bilm, mode, stream)


def embed(tokens: TokenSequence, bilm: BiLM, offset: int = 0,
          mode: str = "eval", stream=None) -> Tensor:
    """Single-sequence embedding, [L, D]."""
    ids = np.asarray([tokens.ids], dtype=np.int64)
    out = embed_ids(ids, bilm, offset, mode, stream)
    return ad.reshape(out, (len(tokens.ids), bilm.config.hidden_dim))


def attention_bias(mask: np.ndarray, dtype=np.float32) -> np.ndarray:
    """[B, S] 0/1 mask -> additive [B, 1, 1, S] bias (0 keep, -1e9 drop)."""
    mask = np.asarray(mask)
    return ((1.0 - mask) * MASK_BIAS).astype(dtype)[:, None, None, :]


def _self_attention(x: Tensor, bias: np.ndarray, layer: EncoderLayer,
                    config: BiLMConfig, mode: str, stream, capture: list | None):
    b, s, d = x.shape
    h = config.n_heads
    dh = d // h

    def heads(t):
        return ad.transpose(ad.reshape(t, (b, s, h, dh)), (0, 2, 1, 3))

    q = heads(ad.linear(x, ad.transpose(layer.wq.tensor), layer.bq.tensor))
    k = heads(ad.linear(x, ad.transpose(layer.wk.tensor), layer.bk.tensor))
    v = heads(ad.linear(x, ad.transpose(layer.wv.tensor), layer.bv.tensor))
    scores = ad.mul(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
    probs = ad.softmax_rows(ad.add(scores, Tensor(bias)))
    if capture is not None:
        capture.append(probs.data.mean(axis=1))  # head-averaged, [B, S, S]
    if mode == "train" and config.dropout_p > 0.0:
        probs = ad.dropout(probs, config.dropout_p, stream.child("attn_probs"))
    ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (b, s, d))
    out = ad.linear(ctx, ad.transpose(layer.wo.tensor), layer.bo.tensor)
    if mode == "train" and config.dropout_p > 0.0:
        out = ad.dropout(out, config.dropout_p, stream.child("attn_out"))
    return out


def _ffn(x: Tensor, layer: EncoderLayer, config: BiLMConfig, mode: str, stream):
    hidden = ad.gelu(ad.linear(x, layer.w1.tensor, layer.b1.tensor))
    out = ad.linear(hidden, layer.w2.tensor, layer.b2.tensor)
    if mode == "train" and config.dropout_p > 0.0:
        out = ad.dropout(out, config.dropout_p, stream.child("ffn_out"))
    return out


def encode_batch(x: Tensor, mask: np.ndarray, bilm: BiLM, adapters=None,
                 mode: str = "eval", stream=None, capture_attn: list | None = None) -> Tensor:
    """Run the encoder stack over [B, S, D] embeddings.

    adapters, when given, is a list of 2*n_layers modules applied after
    the attention and feed-forward sublayers respectively, before each
    residual norm. mode="train" enables dropout and requires a stream.
    """
    from .fusion import adapter_apply  # deferred: fusion builds on this module

    b, s, _ = x.shape
    mask = np.asarray(mask)
    if mask.shape != (b, s):
        raise ShapeError(f"attention mask shape {mask.shape} does not match batch ({b}, {s})")
    if adapters is not None and len(adapters) not in (0, 2 * bilm.config.n_layers):
        raise ShapeError(
            f"expected {2 * bilm.config.n_layers} adapters, got {len(adapters)}")
    if mode == "train" and bilm.config.dropout_p > 0.0 and stream is None:
        raise ValueError("train mode with dropout needs an RNG stream")
    bias = attention_bias(mask, dtype=x.data.dtype)
    use_adapters = adapters is not None and len(adapters) > 0
    for i, layer in enumerate(bilm.layers):
        sub_stream = stream.child(f"layer{i}") if stream is not None else None
        attn = _self_attention(x, bias, layer, bilm.config, mode, sub_stream, capture_attn)
        if use_adapters:
            attn = adapter_apply(attn, adapters[2 * i], mode=mode,
                                 dropout_p=bilm.config.dropout_p, stream=sub_stream)
        x = ad.layer_norm(ad.add(x, attn), layer.attn_gamma.tensor, layer.attn_beta.tensor)
        ffn = _ffn(x, layer, bilm.config, mode, sub_stream)
        if use_adapters:
            ffn = adapter_apply(ffn, adapters[2 * i + 1], mode=mode,
                                dropout_p=bilm.config.dropout_p, stream=sub_stream)
        x = ad.layer_norm(ad.add(x, ffn), layer.ffn_gamma.tensor, layer.ffn_beta.tensor)
    return x


def encode(embeddings: Tensor, attention_mask, bilm: BiLM, adapters=None,
           mode: str = "eval", stream=None, capture_attn=None) -> Tensor:
    """Single-sequence encode, [S, D] -> [S, D]."""
    s, d = embeddings.shape
    mask = np.asarray(attention_mask).reshape(1, -1)
    if mask.shape[1] != s:
        raise ShapeError(f"attention mask length {mask.shape[1]} != sequence length {s}")
    x = ad.reshape(embeddings, (1, s, d))
    out = encode_batch(x, mask, bilm, adapters, mode, stream, capture_attn)
    return ad.reshape(out, (s, d))


def mlm_logits(hidden: Tensor, bilm: BiLM) -> Tensor:
    """Per-position logits: hidden . head_w^T + bias; [.., S, D] -> [.., S, V]."""
    return ad.linear(hidden, ad.transpose(bilm.head_w.tensor), bilm.head_b.tensor)


# -- corruption -----------------------------------------------------------


@dataclass
class MaskedBatch:
    corrupted_ids: np.ndarray
    original_ids: np.ndarray
    loss_positions: np.ndarray
    attention_mask: np.ndarray

    def __post_init__(self):
        self.corrupted_ids = np.asarray(self.corrupted_ids, dtype=np.int64)
        self.original_ids = np.asarray(self.original_ids, dtype=np.int64)
        self.loss_positions = np.asarray(self.loss_positions, dtype=bool)
        self.attention_mask = np.asarray(self.attention_mask, dtype=np.int64)


def corrupt(tokens: TokenSequence, rate: float, stream: RngStream,
            vocab_size: int, probs: tuple = (0.8, 0.1, 0.1)) -> MaskedBatch:
    """BERT-style corruption of one sequence.

    Each non-special position is independently selected with probability
    `rate`; selected positions become [MASK] / stay / get a random
    non-special token with the given sub-probabilities. All selected
    positions are loss positions, replaced or not.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"corruption rate must be in [0, 1], got {rate}")
    p_mask, p_keep, p_rand = probs
    if abs(p_mask + p_keep + p_rand - 1.0) > 1e-9 or min(probs) < 0:
        raise ValueError(f"branch probabilities must be non-negative and sum to 1, got {probs}")
    if vocab_size <= N_SPECIAL:
        raise ValueError("vocabulary has no non-special tokens to sample")
    ids = np.asarray(tokens.ids, dtype=np.int64)
    mask = np.asarray(tokens.attention_mask, dtype=np.int64)
    s = ids.shape[0]
    eligible = (mask == 1) & (ids >= N_SPECIAL)
    # Fixed-size draws keep the stream aligned no matter what gets selected.
    select_u = stream.uniform(s)
    branch_u = stream.uniform(s)
    random_ids = stream.integers(N_SPECIAL, vocab_size, size=s)
    selected = eligible & (select_u < rate)
    corrupted = ids.copy()
    to_mask = selected & (branch_u < p_mask)
    to_rand = selected & (branch_u >= p_mask + p_keep)
    corrupted[to_mask] = MASK
    corrupted[to_rand] = random_ids[to_rand]
    return MaskedBatch(corrupted, ids, selected, mask)


def corrupt_resampled(tokens: TokenSequence, rate: float, stream: RngStream,
                      vocab_size: int, probs: tuple = (0.8, 0.1, 0.1),
                      max_tries: int = 5) -> MaskedBatch:
    """corrupt(), retried until at least one loss position exists."""
    for _ in range(max_tries):
        batch = corrupt(tokens, rate, stream, vocab_size, probs)
        if batch.loss_positions.any():
            return batch
    raise SkipSample("no loss positions after resampling cap")


# -- loss -----------------------------------------------------------------


def _stack_batches(batches: list) -> MaskedBatch:
    return MaskedBatch(
        np.stack([b.corrupted_ids for b in batches]),
        np.stack([b.original_ids for b in batches]),
        np.stack([b.loss_positions for b in batches]),
        np.stack([b.attention_mask for b in batches]))


def mlm_loss(batch, bilm: BiLM, adapters=None, prompt_rows: Tensor | None = None,
             prompt_valid: np.ndarray | None = None, mode: str = "train",
             stream=None) -> Tensor:
    """Mean NLL of original tokens at loss positions.

    batch: a MaskedBatch or list of equal-length MaskedBatches. An
    optional video prompt (pre-norm rows [B, T, D] plus validity mask)
    is prefixed before the encoder; prompt positions carry no loss.
    """
    if isinstance(batch, list):
        batch = _stack_batches(batch)
    ids = batch.corrupted_ids
    if ids.ndim == 1:
        batch = _stack_batches([batch])
        ids = batch.corrupted_ids
    b, s = ids.shape
    if not batch.loss_positions.any():
        raise SkipSample("batch has no loss positions")

    # Trailing all-pad columns carry nothing; dropping them before the
    # encoder makes the loss bit-identical under [PAD] extension (larger
    # matmul extents would otherwise reassociate floating-point sums).
    s_eff = int(np.max(np.nonzero(batch.attention_mask.any(axis=0))[0])) + 1 \
        if batch.attention_mask.any() else s
    if s_eff < s:
        batch = MaskedBatch(ids[:, :s_eff], batch.original_ids[:, :s_eff],
                            batch.loss_positions[:, :s_eff],
                            batch.attention_mask[:, :s_eff])
        ids = batch.corrupted_ids
        s = s_eff

    t = 0
    if prompt_rows is not None:
        if prompt_rows.data.ndim == 2:
            prompt_rows = ad.reshape(prompt_rows, (1,) + prompt_rows.shape)
        t = prompt_rows.shape[1]
        if prompt_valid is None:
            prompt_valid = np.ones((b, t), dtype=np.int64)
        prompt_valid = np.asarray(prompt_valid).reshape(b, t)

    text_pre = embed_prenorm_ids(ids, bilm, offset=t)
    if t > 0:
        pre = ad.concat([prompt_rows, text_pre], axis=1)
        mask = np.concatenate([prompt_valid, batch.attention_mask], axis=1)
    else:
        pre = text_pre
        mask = batch.attention_mask
    x = finish_embed(pre, bilm, mode, stream)
    hidden = encode_batch(x, mask, bilm, adapters, mode, stream)
    logits = mlm_logits(hidden, bilm)

    v = bilm.config.vocab_size
    flat_logits = ad.reshape(logits, (b * (t + s), v))
    if t > 0:
        pad_targets = np.zeros((b, t), dtype=np.int64)
        targets = np.concatenate([pad_targets, batch.original_ids], axis=1).reshape(-1)
        loss_pos = np.concatenate(
            [np.zeros((b, t), dtype=bool), batch.loss_positions], axis=1).reshape(-1)
    else:
        targets = batch.original_ids.reshape(-1)
        loss_pos = batch.loss_positions.reshape(-1)
    return ad.cross_entropy(flat_logits, targets, ignore=~loss_pos)


# -- pretraining ----------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 32
    peak_lr: float = 5e-3
    warmup_frac: float = 0.1
    corruption_rate: float = 0.15
    min_count: int = 1
    seed: int = 0
    position_jitter: bool = True
    jitter_offsets: tuple = (0, 8)
    log_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if self.position_jitter:
            if not self.jitter_offsets or min(self.jitter_offsets) < 0:
                raise ValueError("jitter_offsets must be non-negative positions")


def _encode_corpus(corpus: list, vocab: Vocabulary, config: BiLMConfig) -> tuple:
    from .vocab import normalize
    seqs = []
    longest = 0
    for line in corpus:
        toks = normalize(line)
        longest = max(longest, len(toks) + 2)
        seqs.append(encode_text("[CLS] " + line + " [SEP]", vocab, config.text_len))
    return seqs, min(longest, config.text_len)


def pretrain_lm(corpus: list, model_config: BiLMConfig | None = None,
                schedule: PretrainConfig | None = None,
                vocab: Vocabulary | None = None):
    """Train a BiLM from scratch on a text corpus.

    Returns (bilm, loss_curve). Deterministic in (corpus, configs, seed):
    the same inputs reproduce a bit-identical model.
    """
    from .vocab import build_vocab

    schedule = schedule or PretrainConfig()
    if vocab is None:
        vocab = build_vocab(corpus, min_count=schedule.min_count)
    if model_config is None:
        model_config = BiLMConfig(vocab_size=vocab.size)
    root = RngStream(schedule.seed, "pretrain")
    bilm = BiLM(model_config, vocab, root.child("init"))
    losses = train_bilm_mlm(bilm, corpus, schedule, root)
    return bilm, losses


def _bucketed_order(order, lengths, batch_size: int) -> np.ndarray:
    """Locally sort a shuffled order by length so batches pad less.

    Sorting happens inside windows of 8 batches, which keeps batch
    composition random at a coarse scale while consecutive batches draw
    similar-length lines.
    """
    window = 8 * batch_size
    out = []
    for start in range(0, len(order), window):
        chunk = sorted(order[start:start + window],
                       key=lambda i: int(lengths[int(i)]))
        out.extend(int(i) for i in chunk)
    return np.asarray(out)


def train_bilm_mlm(bilm: BiLM, corpus: list, schedule: PretrainConfig,
                   root: RngStream) -> list:
    """The optimization loop behind pretrain_lm; returns the loss curve."""
    seqs, seq_len = _encode_corpus(corpus, bilm.vocab, bilm.config)
    trimmed = [TokenSequence(s.ids[:seq_len], s.attention_mask[:seq_len]) for s in seqs]
    lengths = np.array([s.n_real for s in trimmed])

    params = bilm.parameters()
    opt = AdamConfig(learning_rate=schedule.peak_lr, beta1=schedule.beta1,
                     beta2=schedule.beta2, epsilon=schedule.epsilon,
                     weight_decay=schedule.weight_decay)
    order_stream = root.child("order")
    jitter_stream = root.child("jitter")
    corrupt_stream = root.child("corrupt")
    drop_stream = root.child("dropout")

    losses = []
    order = _bucketed_order(order_stream.permutation(len(trimmed)),
                            lengths, schedule.batch_size)
    cursor = 0
    for step in range(schedule.steps):
        take = []
        while len(take) < schedule.batch_size:
            if cursor >= len(order):
                order = _bucketed_order(order_stream.permutation(len(trimmed)),
                                        lengths, schedule.batch_size)
                cursor = 0
            take.append(int(order[cursor]))
            cursor += 1
        s_batch = int(lengths[take].max())
        batches = []
        for j, idx in enumerate(take):
            seq = trimmed[idx]
            cut = TokenSequence(seq.ids[:s_batch], seq.attention_mask[:s_batch])
            try:
                batches.append(corrupt_resampled(
                    cut, schedule.corruption_rate,
                    corrupt_stream.child(f"{step}/{j}"), bilm.config.vocab_size))
            except SkipSample:
                continue
        if not batches:
            continue
        offset = 0
        if schedule.position_jitter:
            # Text only ever starts at position 0 or right after a video
            # prompt downstream, so training visits exactly those offsets.
            pick = int(jitter_stream.integers(0, len(schedule.jitter_offsets)))
            offset = min(schedule.jitter_offsets[pick],
                         bilm.config.max_positions - s_batch)
        loss = _mlm_step_loss(batches, bilm, offset, drop_stream.child(str(step)))
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"MLM loss became {value} at step {step}")
        losses.append(value)
        ad.backward(loss)
        lr = warmup_then_linear_decay(step, schedule.steps, schedule.peak_lr,
                                      schedule.warmup_frac)
        adam_step(params, opt, lr=lr)
        if schedule.log_every and (step + 1) % schedule.log_every == 0:
            recent = losses[-schedule.log_every:]
            print(f"step {step + 1}/{schedule.steps} loss {sum(recent) / len(recent):.4f}")
    return losses


def _mlm_step_loss(batches, bilm, offset, stream):
    stacked = _stack_batches(batches)
    b, s = stacked.corrupted_ids.shape
    x = embed_ids(stacked.corrupted_ids, bilm, offset=offset, mode="train", stream=stream)
    hidden = encode_batch(x, stacked.attention_mask, bilm, mode="train", stream=stream)
    logits = mlm_logits(hidden, bilm)
    flat = ad.reshape(logits, (b * s, bilm.config.vocab_size))
    return ad.cross_entropy(flat, stacked.original_ids.reshape(-1),
                            ignore=~stacked.loss_positions.reshape(-1))


def eval_mlm_loss(bilm: BiLM, corpus: list, seed: int = 0,
                  rate: float = 0.15, batch_size: int = 64) -> float:
    """Dropout-free corpus MLM loss with one corruption draw per line."""
    stream = RngStream(seed, "eval_mlm")
    seqs, seq_len = _encode_corpus(corpus, bilm.vocab, bilm.config)
    total, weight = 0.0, 0
    with ad.no_grad():
        for lo in range(0, len(seqs), batch_size):
            chunk = seqs[lo:lo + batch_size]
            batches = []
            for j, seq in enumerate(chunk):
                cut = TokenSequence(seq.ids[:seq_len], seq.attention_mask[:seq_len])
                try:
                    batches.append(corrupt_resampled(cut, rate, stream.child(f"{lo}/{j}"),
                                                     bilm.config.vocab_size))
                except SkipSample:
                    continue
            if not batches:
                continue
            loss = mlm_loss(batches, bilm, mode="eval")
            n = sum(int(b.loss_positions.sum()) for b in batches)
            total += loss.item() * n
            weight += n
    return total / max(weight, 1)


# -- cloze evaluation -----------------------------------------------------


def cloze_logits(bilm: BiLM, tokens: list, mask_index: int) -> np.ndarray:
    """Full-vocab logits at one masked position of a token list."""
    ids = [bilm.vocab.id_of(t) for t in tokens]
    if not 0 <= mask_index < len(ids):
        raise IndexError(f"mask index {mask_index} outside sequence of length {len(ids)}")
    ids[mask_index] = MASK
    arr = np.asarray([ids], dtype=np.int64)
    with ad.no_grad():
        x = embed_ids(arr, bilm)
        hidden = encode_batch(x, np.ones_like(arr), bilm)
        logits = mlm_logits(hidden, bilm)
    return logits.data[0, mask_index]


def cloze_predict(bilm: BiLM, tokens: list, mask_index: int) -> str:
    """Most likely non-special filler for one masked slot."""
    logits = cloze_logits(bilm, tokens, mask_index)
    best = N_SPECIAL + int(np.argmax(logits[N_SPECIAL:]))
    return bilm.vocab.id_to_token[best]


def cloze_accuracy(bilm: BiLM, probes: list) -> float:
    """Fraction of probes whose prediction falls in the probe's valid set.

    Each probe carries (tokens, mask_index, valid): see synthdata.
    """
    if not probes:
        raise ValueError("no cloze probes given")
    hits = 0
    for probe in probes:
        tokens = ["[CLS]"] + list(probe.tokens) + ["[SEP]"]
        pred = cloze_predict(bilm, tokens, probe.mask_index + 1)
        hits += pred in probe.valid
    return hits / len(probes)
