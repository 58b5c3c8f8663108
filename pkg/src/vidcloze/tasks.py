"""Downstream video QA in cloze form.

Three task formats share one mechanism: render the instance as a masked
prompt, run the multimodal encoder, and read answer scores at the mask.
Open-ended and fill-in-blank score a fixed answer list through a head
sliced out of the frozen MLM classifier; multiple choice renders one
prompt per candidate and compares the "yes" logit across candidates.

Supervision never touches the frozen language model or the answer head:
finetuning trains the same parameter set cross-modal training does.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import bilm as lm
from . import fusion
from . import optim
from .rng import RngStream
from .vocab import BLANK, MASK, PAD, UNK, TokenSequence, Vocabulary, normalize

TASK_KINDS = ("open_ended", "multi_choice", "fill_blank")


@dataclass
class TaskInstance:
    kind: str
    gold: object
    video: fusion.VideoFeatures | None = None
    question: str | None = None
    candidates: list | None = None
    sentence_with_blank: str | None = None
    subtitles: str | None = None
    qtype: str = ""
    scene_id: int = -1

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind in ("open_ended", "multi_choice"):
            if not self.question:
                raise ValueError(f"{self.kind} instance needs a question")
        if self.kind == "multi_choice":
            if not self.candidates or not 2 <= len(self.candidates) <= 5:
                raise ValueError("multi_choice needs 2 to 5 candidates")
            if not isinstance(self.gold, (int, np.integer)) \
                    or not 0 <= self.gold < len(self.candidates):
                raise ValueError("multi_choice gold must be a candidate index")
        else:
            if not isinstance(self.gold, str):
                raise ValueError(f"{self.kind} gold must be a string")
        if self.kind == "fill_blank":
            if not self.sentence_with_blank \
                    or self.sentence_with_blank.count(BLANK) != 1:
                raise ValueError(
                    f"fill_blank sentence must contain exactly one {BLANK!r}")


def render_prompt(instance: TaskInstance, candidate_index: int | None = None,
                  include_subtitles: bool = True,
                  include_suffix: bool = True) -> str:
    """The cloze prompt for one instance (mc: for one candidate).

    With include_suffix False the prompt is cut right after the mask
    token, dropping the closing period, any subtitle segment, and [SEP].
    """
    if instance.kind == "multi_choice":
        if candidate_index is None:
            raise ValueError("multi_choice prompt needs candidate_index")
        if not 0 <= candidate_index < len(instance.candidates):
            raise ValueError(f"candidate_index {candidate_index} out of range")
        core = (f"[CLS] Question: {instance.question}? "
                f"Is it '{instance.candidates[candidate_index]}'? [MASK]")
    elif instance.kind == "open_ended":
        core = f"[CLS] Question: {instance.question}? Answer: [MASK]"
    else:
        if instance.sentence_with_blank.count(BLANK) != 1:
            raise ValueError("fill_blank sentence must contain exactly one blank")
        core = "[CLS] " + instance.sentence_with_blank.replace(BLANK, "[MASK]")
    subs = ""
    if include_subtitles and instance.subtitles:
        subs = f" Subtitles: {instance.subtitles}"
    text = f"{core}.{subs} [SEP]"
    if not include_suffix:
        text = text[:text.index("[MASK]") + len("[MASK]")]
    return text


def encode_prompt(text: str, vocab: Vocabulary, max_len: int,
                  pad_to: int | None = None) -> tuple:
    """(TokenSequence, mask_index) for a rendered prompt.

    The sequence is unpadded unless pad_to is given. Errors if the
    prompt exceeds max_len or does not contain exactly one mask.
    """
    ids = [vocab.id_of(t) for t in normalize(text)]
    if len(ids) > max_len:
        raise ValueError(f"prompt of {len(ids)} tokens exceeds limit {max_len}")
    n_masks = ids.count(MASK)
    if n_masks != 1:
        raise ValueError(f"prompt must contain exactly one mask, got {n_masks}")
    mask_index = ids.index(MASK)
    attention = [1] * len(ids)
    if pad_to is not None:
        if pad_to < len(ids):
            raise ValueError("pad_to shorter than prompt")
        attention += [0] * (pad_to - len(ids))
        ids = ids + [PAD] * (pad_to - len(ids))
    return TokenSequence(ids=ids, attention_mask=attention), mask_index


# -- answer head ----------------------------------------------------------


@dataclass
class AnswerVocabulary:
    """A task answer list with its slice of the frozen MLM classifier.

    head[i] and bias[i] are the means of the classifier rows and biases
    of answer i's tokens, so single-token answers reuse their classifier
    row bit for bit.
    """
    answers: list
    token_ids: list
    head: np.ndarray
    bias: np.ndarray
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.index:
            self.index = {a: i for i, a in enumerate(self.answers)}

    @property
    def size(self) -> int:
        return len(self.answers)

    def __contains__(self, answer: str) -> bool:
        return answer in self.index


def build_answer_head(answers: list, bilm: lm.BiLM,
                      vocab: Vocabulary) -> AnswerVocabulary:
    if len(answers) < 2:
        raise ValueError("answer list needs at least 2 entries")
    if len(set(answers)) != len(answers):
        dupes = sorted(a for a, c in Counter(answers).items() if c > 1)
        raise ValueError(f"duplicate answers: {dupes}")
    weight = bilm.head_w.data
    bias = bilm.head_b.data
    token_ids, rows, biases = [], [], []
    for answer in answers:
        ids = [vocab.id_of(t) for t in normalize(answer)]
        if not ids or UNK in ids:
            raise ValueError(f"answer {answer!r} has out-of-vocabulary tokens")
        token_ids.append(ids)
        rows.append(weight[ids].mean(axis=0))
        biases.append(bias[ids].mean(axis=0))
    return AnswerVocabulary(answers=list(answers), token_ids=token_ids,
                            head=np.stack(rows), bias=np.asarray(biases))


def collect_answers(dataset: list, top_n: int = 100) -> list:
    """Most frequent gold answers of a training split, ties alphabetical."""
    counts = Counter()
    for inst in dataset:
        if inst.kind in ("open_ended", "fill_blank"):
            counts[inst.gold] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [a for a, _ in ranked[:top_n]]


# -- inference ------------------------------------------------------------


def _instance_video(instance: TaskInstance, use_video: bool):
    if not use_video:
        return None
    return instance.video


def _mask_hidden(model, videos, sequences, mask_indices, mode="eval",
                 stream=None) -> np.ndarray:
    """Hidden rows at each prompt's mask position, [B, D] (numpy)."""
    t = 0 if videos is None else videos[0].n_frames
    pad_to = max(len(s.ids) for s in sequences)
    ids = np.asarray([s.ids + [PAD] * (pad_to - len(s.ids)) for s in sequences])
    tmask = np.asarray([s.attention_mask + [0] * (pad_to - len(s.attention_mask))
                        for s in sequences])
    if t > 0:
        feats = np.stack([v.features for v in videos])
        fvalid = np.stack([v.valid for v in videos]).astype(np.int64)
    else:
        feats, fvalid = None, None
    with ad.no_grad():
        hidden = fusion.encode_multimodal_batch(model, feats, fvalid, ids,
                                                tmask, mode, stream)
    rows = np.arange(len(sequences))
    return hidden.data[rows, t + np.asarray(mask_indices)]


def _require_single_mode_videos(videos):
    """All-or-none video presence with a shared frame count."""
    present = [v for v in videos if v is not None]
    if present and len(present) != len(videos):
        raise ValueError("cannot mix video and text-only instances in one batch")
    if present and len({v.n_frames for v in present}) != 1:
        raise ValueError("instances in one batch must share a frame count")
    return videos if present else None


def answer_openended(instance: TaskInstance, model: fusion.FrozenVlmModel,
                     answer_vocab: AnswerVocabulary, top_k: int = 5,
                     use_video: bool = True, include_subtitles: bool = True,
                     include_suffix: bool = True) -> list:
    """Ranked (answer, score) list, ties broken by lower answer index."""
    text = render_prompt(instance, include_subtitles=include_subtitles,
                         include_suffix=include_suffix)
    seq, mask_index = encode_prompt(text, model.vocab,
                                    model.bilm.config.text_len)
    video = _instance_video(instance, use_video)
    videos = None if video is None else [video]
    h = _mask_hidden(model, videos, [seq], [mask_index])[0]
    scores = answer_vocab.head @ h + answer_vocab.bias
    order = np.argsort(-scores, kind="stable")
    return [(answer_vocab.answers[int(i)], float(scores[int(i)]))
            for i in order[:top_k]]


def _yes_id(vocab: Vocabulary) -> int:
    if "yes" not in vocab:
        raise ValueError('vocabulary has no "yes" token')
    return vocab.id_of("yes")


def answer_multichoice(instance: TaskInstance, model: fusion.FrozenVlmModel,
                       use_video: bool = True, include_subtitles: bool = True,
                       include_suffix: bool = True) -> tuple:
    """(winning index, per-candidate yes-logits); ties take the lowest index."""
    if not instance.candidates:
        raise ValueError("multi_choice instance has no candidates")
    yes = _yes_id(model.vocab)
    seqs, mask_indices = [], []
    for i in range(len(instance.candidates)):
        text = render_prompt(instance, candidate_index=i,
                             include_subtitles=include_subtitles,
                             include_suffix=include_suffix)
        seq, mask_index = encode_prompt(text, model.vocab,
                                        model.bilm.config.text_len)
        seqs.append(seq)
        mask_indices.append(mask_index)
    video = _instance_video(instance, use_video)
    videos = None if video is None else [video] * len(seqs)
    h = _mask_hidden(model, videos, seqs, mask_indices)
    w = model.bilm.head_w.data
    b = model.bilm.head_b.data
    yes_logits = h @ w[yes] + b[yes]
    return int(np.argmax(yes_logits)), yes_logits


def fill_blank(instance: TaskInstance, model: fusion.FrozenVlmModel,
               answer_vocab: AnswerVocabulary, use_video: bool = True,
               include_subtitles: bool = True,
               include_suffix: bool = True) -> tuple:
    """Best (word, score) for the blank."""
    ranked = answer_openended(instance, model, answer_vocab, top_k=1,
                              use_video=use_video,
                              include_subtitles=include_subtitles,
                              include_suffix=include_suffix)
    return ranked[0]


# -- evaluation -----------------------------------------------------------


@dataclass
class EvalSummary:
    accuracy: float
    n_eval: int
    n_correct: int
    per_type: dict
    per_type_counts: dict

    def __str__(self):
        parts = [f"accuracy {self.accuracy:.4f} ({self.n_correct}/{self.n_eval})"]
        for qtype in sorted(self.per_type):
            parts.append(f"{qtype} {self.per_type[qtype]:.4f}")
        return ", ".join(parts)


def evaluate(dataset: list, model: fusion.FrozenVlmModel,
             answer_vocab: AnswerVocabulary | None = None,
             batch_size: int = 32, use_video: bool = True,
             include_subtitles: bool = True,
             include_suffix: bool = True) -> EvalSummary:
    """Top-1 accuracy with a per-question-type breakdown.

    Open-ended and fill-blank golds outside the answer list count as
    wrong no matter what the model says.
    """
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    kinds = {inst.kind for inst in dataset}
    if len(kinds) != 1:
        raise ValueError(f"mixed task kinds in one evaluation: {sorted(kinds)}")
    kind = kinds.pop()
    if kind != "multi_choice" and answer_vocab is None:
        raise ValueError(f"{kind} evaluation needs an answer vocabulary")

    correct_flags = []
    if kind == "multi_choice":
        for inst in dataset:
            pred, _ = answer_multichoice(inst, model, use_video=use_video,
                                         include_subtitles=include_subtitles,
                                         include_suffix=include_suffix)
            correct_flags.append(pred == inst.gold)
    else:
        for start in range(0, len(dataset), batch_size):
            chunk = dataset[start:start + batch_size]
            seqs, mask_indices = [], []
            for inst in chunk:
                text = render_prompt(inst, include_subtitles=include_subtitles,
                                     include_suffix=include_suffix)
                seq, mask_index = encode_prompt(text, model.vocab,
                                                model.bilm.config.text_len)
                seqs.append(seq)
                mask_indices.append(mask_index)
            videos = _require_single_mode_videos(
                [_instance_video(inst, use_video) for inst in chunk])
            h = _mask_hidden(model, videos, seqs, mask_indices)
            scores = h @ answer_vocab.head.T + answer_vocab.bias
            preds = np.argmax(scores, axis=1)
            for inst, pred in zip(chunk, preds):
                in_vocab = inst.gold in answer_vocab
                correct_flags.append(
                    in_vocab and answer_vocab.answers[int(pred)] == inst.gold)

    by_type_hits = defaultdict(int)
    by_type_totals = defaultdict(int)
    for inst, ok in zip(dataset, correct_flags):
        qtype = inst.qtype or "all"
        by_type_totals[qtype] += 1
        by_type_hits[qtype] += int(ok)
    per_type = {q: by_type_hits[q] / by_type_totals[q] for q in by_type_totals}
    n_correct = int(sum(correct_flags))
    return EvalSummary(accuracy=n_correct / len(dataset), n_eval=len(dataset),
                       n_correct=n_correct, per_type=per_type,
                       per_type_counts=dict(by_type_totals))


# -- finetuning -----------------------------------------------------------


@dataclass
class FinetuneConfig:
    epochs: int = 3
    batch_size: int = 16
    learning_rate: float = 5e-4
    warmup_frac: float = 0.1
    seed: int = 0
    log_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def select_fraction(dataset: list, fraction: float, seed: int) -> list:
    """Seeded shuffle, then the first max(1, floor(n * fraction)) items."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    stream = RngStream(seed, "finetune/select")
    shuffled = stream.shuffle_list(list(dataset))
    take = max(1, int(np.floor(len(dataset) * fraction)))
    return shuffled[:take]


def _answer_combination(answer_vocab: AnswerVocabulary,
                        vocab_size: int) -> np.ndarray:
    """[n_answers, vocab] matrix whose product with the MLM classifier
    reproduces the answer head, so training can differentiate through
    the live classifier parameters."""
    comb = np.zeros((answer_vocab.size, vocab_size), dtype=np.float32)
    for i, ids in enumerate(answer_vocab.token_ids):
        np.add.at(comb, (i, np.asarray(ids)), 1.0 / len(ids))
    return comb


def _open_batch_loss(model, chunk, answer_vocab, stream):
    seqs, mask_indices, targets = [], [], []
    for inst in chunk:
        text = render_prompt(inst)
        seq, mask_index = encode_prompt(text, model.vocab,
                                        model.bilm.config.text_len)
        seqs.append(seq)
        mask_indices.append(mask_index)
        targets.append(answer_vocab.index[inst.gold])
    videos = _require_single_mode_videos([inst.video for inst in chunk])
    t = 0 if videos is None else videos[0].n_frames
    pad_to = max(len(s.ids) for s in seqs)
    ids = np.asarray([s.ids + [PAD] * (pad_to - len(s.ids)) for s in seqs])
    tmask = np.asarray([s.attention_mask + [0] * (pad_to - len(s.attention_mask))
                        for s in seqs])
    feats = None if videos is None else np.stack([v.features for v in videos])
    fvalid = None if videos is None else \
        np.stack([v.valid for v in videos]).astype(np.int64)
    hidden = fusion.encode_multimodal_batch(model, feats, fvalid, ids, tmask,
                                            mode="train", stream=stream)
    b, s, d = hidden.shape
    flat = ad.reshape(hidden, (b * s, d))
    rows = np.arange(b) * s + t + np.asarray(mask_indices)
    h = ad.gather_rows(flat, rows)
    v = model.bilm.config.vocab_size
    comb = ad.Tensor(_answer_combination(answer_vocab, v))
    head = ad.matmul(comb, model.bilm.head_w.tensor)
    bias = ad.reshape(ad.matmul(comb, ad.reshape(model.bilm.head_b.tensor,
                                                 (v, 1))),
                      (answer_vocab.size,))
    scores = ad.linear(h, ad.transpose(head), bias)
    return ad.cross_entropy(scores, np.asarray(targets))


def _mc_batch_loss(model, chunk, yes, stream):
    seqs, mask_indices, labels, videos = [], [], [], []
    for inst in chunk:
        for i in range(len(inst.candidates)):
            text = render_prompt(inst, candidate_index=i)
            seq, mask_index = encode_prompt(text, model.vocab,
                                            model.bilm.config.text_len)
            seqs.append(seq)
            mask_indices.append(mask_index)
            labels.append(1.0 if i == inst.gold else 0.0)
            videos.append(inst.video)
    videos = _require_single_mode_videos(videos)
    t = 0 if videos is None else videos[0].n_frames
    pad_to = max(len(s.ids) for s in seqs)
    ids = np.asarray([s.ids + [PAD] * (pad_to - len(s.ids)) for s in seqs])
    tmask = np.asarray([s.attention_mask + [0] * (pad_to - len(s.attention_mask))
                        for s in seqs])
    feats = None if videos is None else np.stack([v.features for v in videos])
    fvalid = None if videos is None else \
        np.stack([v.valid for v in videos]).astype(np.int64)
    hidden = fusion.encode_multimodal_batch(model, feats, fvalid, ids, tmask,
                                            mode="train", stream=stream)
    b, s, d = hidden.shape
    flat = ad.reshape(hidden, (b * s, d))
    rows = np.arange(b) * s + t + np.asarray(mask_indices)
    h = ad.gather_rows(flat, rows)
    w_yes = ad.reshape(ad.gather_rows(model.bilm.head_w.tensor,
                                      np.asarray([yes])), (d, 1))
    logits_2d = ad.matmul(h, w_yes)
    v = model.bilm.config.vocab_size
    b_yes = ad.gather_rows(ad.reshape(model.bilm.head_b.tensor, (v, 1)),
                           np.asarray([yes]))
    logits = ad.add(ad.reshape(logits_2d, (b,)), ad.reshape(b_yes, (1,)))
    return ad.bce_with_logits(logits, np.asarray(labels, dtype=np.float32))


def finetune(dataset: list, fraction: float, model: fusion.FrozenVlmModel,
             answer_vocab: AnswerVocabulary | None = None,
             schedule: FinetuneConfig | None = None) -> tuple:
    """Supervised training of the trainable modules on a QA fraction.

    Returns (model, per-epoch mean losses). Open-ended and fill-blank
    samples whose gold is outside the answer list are dropped after the
    fraction is selected. The frozen language model and the answer head
    are bit-checked afterwards.
    """
    schedule = schedule or FinetuneConfig()
    kinds = {inst.kind for inst in dataset}
    if len(kinds) != 1:
        raise ValueError(f"mixed task kinds in one finetune: {sorted(kinds)}")
    kind = kinds.pop()
    if kind != "multi_choice" and answer_vocab is None:
        raise ValueError(f"{kind} finetuning needs an answer vocabulary")

    selected = select_fraction(dataset, fraction, schedule.seed)
    if kind != "multi_choice":
        selected = [inst for inst in selected if inst.gold in answer_vocab]
        if not selected:
            raise ValueError("no in-vocabulary samples in the selected fraction")
    yes = _yes_id(model.vocab) if kind == "multi_choice" else None

    frozen = [p for p in model.parameters() if p.frozen]
    guard = optim.ParamSnapshot.of(frozen)
    head_before = None if answer_vocab is None else answer_vocab.head.tobytes()

    trainable = model.trainable_parameters()
    n_batches = max(1, int(np.ceil(len(selected) / schedule.batch_size)))
    total_steps = schedule.epochs * n_batches
    adam = optim.AdamConfig(learning_rate=schedule.learning_rate,
                            beta1=schedule.beta1, beta2=schedule.beta2,
                            epsilon=schedule.epsilon,
                            weight_decay=schedule.weight_decay)
    root = RngStream(schedule.seed, "finetune")
    order_stream = root.child("order")
    dropout_stream = root.child("dropout")

    losses = []
    step = 0
    for epoch in range(schedule.epochs):
        order = order_stream.child(str(epoch)).permutation(len(selected))
        epoch_losses = []
        for start in range(0, len(selected), schedule.batch_size):
            chunk = [selected[int(i)] for i in order[start:start + schedule.batch_size]]
            stream = dropout_stream.child(str(step))
            if kind == "multi_choice":
                loss = _mc_batch_loss(model, chunk, yes, stream)
            else:
                loss = _open_batch_loss(model, chunk, answer_vocab, stream)
            value = float(loss.data)
            if not np.isfinite(value):
                raise lm.TrainingDiverged(
                    f"finetune loss became {value} at epoch {epoch}, step {step}")
            ad.backward(loss)
            lr = optim.warmup_then_linear_decay(
                step, total_steps, schedule.learning_rate, schedule.warmup_frac)
            optim.adam_step(trainable, adam, lr=lr)
            epoch_losses.append(value)
            step += 1
            if schedule.log_every and step % schedule.log_every == 0:
                print(f"finetune step {step}/{total_steps} loss {value:.4f}")
        if epoch_losses:
            losses.append(float(np.mean(epoch_losses)))

    drifted = guard.changed_names(frozen)
    if drifted:
        raise fusion.FrozenDriftError(
            f"frozen parameters changed during finetuning: {drifted[:3]}")
    if head_before is not None and answer_vocab.head.tobytes() != head_before:
        raise fusion.FrozenDriftError("answer head changed during finetuning")
    return model, losses
