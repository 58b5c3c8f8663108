"""Grafting trainable visual inputs onto a frozen language model.

A per-frame affine projection turns backbone features into prompt rows
that share the position table (positions 0..T-1; text continues at T) and
the embedding norm with token rows. Bottleneck adapters, zero-initialized
to the identity, sit after each attention and feed-forward sublayer.
Training updates only {projection, adapters, layer norms}; the rest of
the language model is bit-frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import bilm as lm
from .autodiff import ShapeError, Tensor
from .optim import (AdamConfig, Parameter, ParamSnapshot, adam_step,
                    warmup_then_constant)
from .rng import RngStream
from .vocab import TokenSequence, encode as encode_text

VARIANTS = ("frozen_with_adapters", "frozen_no_adapters", "unfrozen", "random_lm")


class FrozenDriftError(RuntimeError):
    """A parameter marked frozen changed during training."""


@dataclass
class VideoFeatures:
    features: np.ndarray
    valid: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.features.ndim != 2:
            raise ShapeError(f"features must be [T, D_u], got shape {self.features.shape}")
        if self.valid.shape != (self.features.shape[0],):
            raise ShapeError("validity mask length must equal the frame count")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("video features contain non-finite values")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


def empty_video(d_visual: int) -> VideoFeatures:
    """A zero-frame prompt: the text-only path."""
    return VideoFeatures(np.zeros((0, d_visual), dtype=np.float32),
                         np.zeros((0,), dtype=bool), source_id="")


def pad_video(features: np.ndarray, valid: np.ndarray, frames: int,
              source_id: str = "") -> VideoFeatures:
    """Fit a feature matrix to the configured prompt length.

    Short clips get zero rows with valid=False; long ones are truncated.
    """
    features = np.asarray(features, dtype=np.float32)
    valid = np.asarray(valid, dtype=bool)
    t = features.shape[0]
    if t >= frames:
        return VideoFeatures(features[:frames], valid[:frames], source_id)
    pad = np.zeros((frames - t, features.shape[1]), dtype=np.float32)
    return VideoFeatures(np.concatenate([features, pad], axis=0),
                         np.concatenate([valid, np.zeros(frames - t, dtype=bool)]),
                         source_id)


class VisualProjection:
    def __init__(self, d_visual: int, d_model: int, stream: RngStream):
        self.weight = Parameter(stream.child("projection.weight").normal(
            (d_visual, d_model), std=0.02), "projection.weight")
        self.bias = Parameter(np.zeros(d_model, dtype=np.float32), "projection.bias")

    def parameters(self):
        return [self.weight, self.bias]


class Adapter:
    """Bottleneck residual block A(z) = z + ReLU(z W_down + b_down) W_up + b_up.

    W_up and b_up start at zero, so a fresh adapter is the identity and
    grafting it cannot move the frozen model's function.
    """

    def __init__(self, d_model: int, d_bottleneck: int, index: int, stream: RngStream):
        pre = f"adapters.{index}."
        self.w_down = Parameter(stream.child(pre + "w_down").normal(
            (d_model, d_bottleneck), std=0.02), pre + "w_down")
        self.b_down = Parameter(np.zeros(d_bottleneck, dtype=np.float32), pre + "b_down")
        self.w_up = Parameter(np.zeros((d_bottleneck, d_model), dtype=np.float32),
                              pre + "w_up")
        self.b_up = Parameter(np.zeros(d_model, dtype=np.float32), pre + "b_up")

    def parameters(self):
        return [self.w_down, self.b_down, self.w_up, self.b_up]


def adapter_apply(z: Tensor, adapter: Adapter, mode: str = "eval",
                  dropout_p: float = 0.0, stream=None) -> Tensor:
    hidden = ad.relu(ad.linear(z, adapter.w_down.tensor, adapter.b_down.tensor))
    if mode == "train" and dropout_p > 0.0:
        hidden = ad.dropout(hidden, dropout_p, stream.child("adapter_drop"))
    return ad.add(z, ad.linear(hidden, adapter.w_up.tensor, adapter.b_up.tensor))


class FrozenVlmModel:
    """A BiLM plus visual projection and adapters, with variant bookkeeping."""

    def __init__(self, bilm: lm.BiLM, projection: VisualProjection,
                 adapters: list, prompt_len: int, d_visual: int,
                 adapter_dim: int, variant: str = "frozen_with_adapters"):
        self.bilm = bilm
        self.projection = projection
        self.adapters = adapters
        self.prompt_len = prompt_len
        self.d_visual = d_visual
        self.adapter_dim = adapter_dim
        self.variant = variant

    @property
    def vocab(self):
        return self.bilm.vocab

    def parameters(self) -> list:
        params = list(self.bilm.parameters())
        params.extend(self.projection.parameters())
        for a in self.adapters:
            params.extend(a.parameters())
        return params

    def trainable_parameters(self) -> list:
        return [p for p in self.parameters() if not p.frozen]

    def fusion_config(self) -> dict:
        return {"prompt_len": self.prompt_len, "d_visual": self.d_visual,
                "adapter_dim": self.adapter_dim, "variant": self.variant,
                "n_adapters": len(self.adapters)}


def build_model(bilm: lm.BiLM, d_visual: int = 32, prompt_len: int = 8,
                adapter_dim: int | None = None, seed: int = 0,
                variant: str = "frozen_with_adapters") -> FrozenVlmModel:
    cfg = bilm.config
    if adapter_dim is None:
        adapter_dim = cfg.hidden_dim // 8
    if adapter_dim <= 0:
        raise ValueError(f"adapter bottleneck must be positive, got {adapter_dim}")
    if d_visual <= 0 or prompt_len < 0:
        raise ValueError("d_visual must be positive and prompt_len non-negative")
    if prompt_len + cfg.text_len > cfg.max_positions:
        raise ValueError(
            f"prompt_len {prompt_len} + text_len {cfg.text_len} exceeds "
            f"max_positions {cfg.max_positions}")
    stream = RngStream(seed, "fusion_init")
    projection = VisualProjection(d_visual, cfg.hidden_dim, stream)
    adapters = [Adapter(cfg.hidden_dim, adapter_dim, i, stream)
                for i in range(2 * cfg.n_layers)]
    model = FrozenVlmModel(bilm, projection, adapters, prompt_len, d_visual,
                           adapter_dim, variant)
    return set_variant(model, variant, seed=seed)


def set_variant(model: FrozenVlmModel, variant: str, seed: int = 0) -> FrozenVlmModel:
    """Configure one ablation arm.

    frozen_with_adapters: the default. frozen_no_adapters: drop the
    adapter list (projection + norms train, at 10x the base LR).
    unfrozen: everything trains, LR and batch halved. random_lm: the
    language model is re-initialized from scratch, then frozen as usual.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "random_lm":
        fresh = lm.BiLM(model.bilm.config, model.bilm.vocab,
                        RngStream(seed, "variant_random_lm"))
        for old, new in zip(model.bilm.parameters(), fresh.parameters()):
            old.data = new.data
            old.optimizer_state.clear()
    if variant == "frozen_no_adapters":
        model.adapters = []
    if variant == "unfrozen":
        for p in model.parameters():
            p.frozen = False
    else:
        model.bilm.freeze()
        for p in model.projection.parameters():
            p.frozen = False
        for a in model.adapters:
            for p in a.parameters():
                p.frozen = False
    model.variant = variant
    return model


# -- forward --------------------------------------------------------------


def project_visual(video: VideoFeatures, proj: VisualProjection) -> Tensor:
    """Per-frame affine map u -> P u + b, [T, D_u] -> [T, D]."""
    if video.features.shape[1] != proj.weight.data.shape[0]:
        raise ShapeError(
            f"feature dim {video.features.shape[1]} does not match projection "
            f"input dim {proj.weight.data.shape[0]}")
    return ad.linear(Tensor(video.features), proj.weight.tensor, proj.bias.tensor)


def prompt_prenorm_rows(feats: np.ndarray, model: FrozenVlmModel) -> Tensor:
    """Projected frames plus their position rows, before the shared norm.

    feats: [B, T, D_u]. Video occupies positions 0..T-1.
    """
    t = feats.shape[1]
    proj = ad.linear(Tensor(np.asarray(feats, dtype=np.float32)),
                     model.projection.weight.tensor, model.projection.bias.tensor)
    pos = ad.embedding(model.bilm.position_embedding.tensor, np.arange(t))
    return ad.add(proj, pos)


def encode_multimodal_batch(model: FrozenVlmModel, feats, fvalid,
                            ids: np.ndarray, tmask: np.ndarray,
                            mode: str = "eval", stream=None,
                            capture_attn=None) -> Tensor:
    """Hidden states for [video prompt || text], [B, T+L, D].

    feats may be None (or zero-frame) for the text-only path, in which
    case text still starts at position 0 of an empty prompt.
    """
    bilm = model.bilm
    b, lgt = ids.shape
    t = 0 if feats is None else np.asarray(feats).shape[1]
    if t > 0:
        if np.asarray(feats).shape[2] != model.d_visual:
            raise ShapeError(
                f"feature dim {np.asarray(feats).shape[2]} != configured {model.d_visual}")
        vid_pre = prompt_prenorm_rows(np.asarray(feats), model)
        text_pre = lm.embed_prenorm_ids(ids, bilm, offset=t)
        pre = ad.concat([vid_pre, text_pre], axis=1)
        mask = np.concatenate(
            [np.asarray(fvalid).reshape(b, t).astype(np.int64),
             np.asarray(tmask).reshape(b, lgt)], axis=1)
    else:
        pre = lm.embed_prenorm_ids(ids, bilm, offset=0)
        mask = np.asarray(tmask).reshape(b, lgt)
    x = lm.finish_embed(pre, bilm, mode, stream)
    return lm.encode_batch(x, mask, bilm, model.adapters, mode, stream, capture_attn)


def forward_multimodal(video: VideoFeatures | None, tokens: TokenSequence,
                       model: FrozenVlmModel, mode: str = "eval",
                       stream=None, capture_attn=None) -> Tensor:
    """Logits over [prompt || text] positions, [(T+L), V]."""
    cfg = model.bilm.config
    t = 0 if video is None else video.n_frames
    lgt = len(tokens.ids)
    if t + lgt > cfg.max_positions:
        raise ShapeError(f"prompt {t} + text {lgt} exceeds max_positions {cfg.max_positions}")
    if t > 0:
        feats = video.features[None, :, :]
        fvalid = video.valid[None, :].astype(np.int64)
    else:
        feats, fvalid = None, None
    ids = np.asarray([tokens.ids], dtype=np.int64)
    tmask = np.asarray([tokens.attention_mask], dtype=np.int64)
    hidden = encode_multimodal_batch(model, feats, fvalid, ids, tmask,
                                     mode, stream, capture_attn)
    logits = lm.mlm_logits(hidden, model.bilm)
    return ad.reshape(logits, (t + lgt, cfg.vocab_size))


# -- training -------------------------------------------------------------


def crossmodal_loss(video: VideoFeatures, tokens: TokenSequence,
                    model: FrozenVlmModel, stream: RngStream,
                    rate: float = 0.15, mode: str = "train") -> Tensor:
    """Visually-conditioned MLM loss on one (video, caption) pair.

    The caption is corrupted; video rows are conditioning only and never
    masked or scored. Raises SkipSample when corruption selects nothing.
    """
    batch = lm.corrupt_resampled(tokens, rate, stream.child("corrupt"),
                                 model.bilm.config.vocab_size)
    return _crossmodal_batch_loss(model, video.features[None],
                                  video.valid[None].astype(np.int64),
                                  [batch], mode, stream.child("dropout"))


def _crossmodal_batch_loss(model, feats, fvalid, batches, mode, stream):
    prompt = prompt_prenorm_rows(np.asarray(feats), model)
    return lm.mlm_loss(batches, model.bilm, adapters=model.adapters,
                       prompt_rows=prompt, prompt_valid=fvalid,
                       mode=mode, stream=stream)


@dataclass
class CrossmodalConfig:
    epochs: int = 4
    batch_size: int = 32
    lr: float = 1e-3
    warmup_frac: float = 0.1
    corruption_rate: float = 0.15
    seed: int = 0
    log_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size positive")


def variant_knobs(variant: str, lr: float, batch_size: int) -> tuple:
    """Per-arm learning-rate and batch adjustments."""
    if variant == "frozen_no_adapters":
        return lr * 10.0, batch_size
    if variant == "unfrozen":
        return lr / 2.0, max(1, batch_size // 2)
    return lr, batch_size


def train_crossmodal(pairs: list, model: FrozenVlmModel,
                     schedule: CrossmodalConfig | None = None):
    """Adapt the model to video with masked caption modeling.

    pairs: list of (VideoFeatures, caption string). Returns (model,
    loss_curve). Verifies at the end that every frozen parameter is
    bit-identical to its value at entry.
    """
    schedule = schedule or CrossmodalConfig()
    cfg = model.bilm.config
    vocab = model.vocab
    lr, batch_size = variant_knobs(model.variant, schedule.lr, schedule.batch_size)

    frozen_params = [p for p in model.parameters() if p.frozen]
    snapshot = ParamSnapshot.of(frozen_params)

    from .vocab import normalize
    cap_len = 0
    encoded = []
    for video, caption in pairs:
        if video.n_frames != model.prompt_len:
            raise ShapeError(
                f"pair {video.source_id!r} has {video.n_frames} frames, "
                f"model expects {model.prompt_len}")
        toks = normalize(caption)
        cap_len = max(cap_len, len(toks) + 3)
        encoded.append(None)  # filled after cap_len is known
    cap_len = min(cap_len, cfg.text_len)
    for i, (video, caption) in enumerate(pairs):
        encoded[i] = encode_text("[CLS] " + caption + " . [SEP]", vocab, cap_len)

    params = model.parameters()
    opt = AdamConfig(learning_rate=lr, beta1=schedule.beta1,
                     beta2=schedule.beta2, epsilon=schedule.epsilon,
                     weight_decay=schedule.weight_decay)
    root = RngStream(schedule.seed, "crossmodal")
    order_stream = root.child("order")
    corrupt_stream = root.child("corrupt")
    drop_stream = root.child("dropout")

    losses = []
    total_steps = max(1, schedule.epochs * math.ceil(len(pairs) / batch_size))
    step = 0
    for epoch in range(schedule.epochs):
        order = order_stream.permutation(len(pairs))
        for lo in range(0, len(order), batch_size):
            take = order[lo:lo + batch_size]
            feats, fvalid, batches = [], [], []
            for j, idx in enumerate(take):
                video, _ = pairs[int(idx)]
                try:
                    batch = lm.corrupt_resampled(
                        encoded[int(idx)], schedule.corruption_rate,
                        corrupt_stream.child(f"{step}/{j}"), cfg.vocab_size)
                except lm.SkipSample:
                    continue
                feats.append(video.features)
                fvalid.append(video.valid.astype(np.int64))
                batches.append(batch)
            if not batches:
                step += 1
                continue
            loss = _crossmodal_batch_loss(model, np.stack(feats), np.stack(fvalid),
                                          batches, "train", drop_stream.child(str(step)))
            value = loss.item()
            if not math.isfinite(value):
                raise lm.TrainingDiverged(
                    f"cross-modal loss became {value} at epoch {epoch}, step {step}")
            losses.append(value)
            ad.backward(loss)
            adam_step(params, opt,
                      lr=warmup_then_constant(step, total_steps, lr, schedule.warmup_frac))
            step += 1
            if schedule.log_every and step % schedule.log_every == 0:
                recent = losses[-schedule.log_every:]
                print(f"crossmodal step {step} loss {sum(recent) / len(recent):.4f}")

    drifted = snapshot.changed_names(frozen_params)
    if drifted:
        raise FrozenDriftError(
            f"{len(drifted)} frozen parameters changed during training, "
            f"first: {drifted[0]}")
    return model, losses


# -- parameter accounting -------------------------------------------------


@dataclass
class ParamReport:
    counts: dict
    total: int
    trainable: int
    fraction: float

    def __str__(self):
        lines = [f"  {group:<16} {n:>8}" for group, n in self.counts.items()]
        lines.append(f"  {'total':<16} {self.total:>8}")
        lines.append(f"  trainable fraction {100 * self.fraction:.2f}%")
        return "\n".join(lines)


def param_group(p: Parameter) -> str:
    if p.frozen:
        return "frozen"
    if p.name.startswith("projection."):
        return "projection"
    if p.name.startswith("adapters."):
        return "adapters"
    if lm._is_norm_param(p.name):
        return "norms"
    return "other_trainable"


def trainable_param_report(model: FrozenVlmModel) -> ParamReport:
    counts = {"projection": 0, "adapters": 0, "norms": 0,
              "other_trainable": 0, "frozen": 0}
    total = 0
    for p in model.parameters():
        n = int(p.data.size)
        total += n
        counts[param_group(p)] += n
    trainable = total - counts["frozen"]
    return ParamReport(counts=counts, total=total, trainable=trainable,
                       fraction=trainable / total if total else 0.0)
