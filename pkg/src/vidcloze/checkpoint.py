"""Binary serialization for models and precomputed video features.

Model checkpoints ("FBLM"): magic, u32 version, u32 header length, JSON
header (config, vocabulary, tensor directory), then raw float32
little-endian tensor payloads at contiguous ascending offsets. The
tensor directory records each parameter's frozen flag so a reloaded
model trains exactly like the saved one.

Feature files ("FBFT"): magic, u32 record count, then per clip a
length-prefixed id, frame count, feature dim, float32 features, and one
validity byte per frame.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import bilm as lm
from . import fusion
from .rng import RngStream
from .vocab import Vocabulary, _from_tokens

MODEL_MAGIC = b"FBLM"
FEATURE_MAGIC = b"FBFT"
MODEL_VERSION = 1


class CheckpointError(ValueError):
    """A malformed or mismatched checkpoint file."""


def _tensor_directory(params) -> tuple:
    entries = []
    offset = 0
    chunks = []
    for p in params:
        data = np.ascontiguousarray(p.data, dtype=np.float32)
        entries.append({"name": p.name, "shape": list(data.shape),
                        "frozen": bool(p.frozen), "offset": offset})
        chunk = data.tobytes()
        chunks.append(chunk)
        offset += len(chunk)
    return entries, b"".join(chunks)


def _write(path: str, header: dict, payload: bytes) -> None:
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<I", MODEL_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(payload)


def save_bilm(bilm: lm.BiLM, path: str) -> None:
    entries, payload = _tensor_directory(bilm.parameters())
    header = {"kind": "bilm", "config": bilm.config.to_dict(),
              "vocab": list(bilm.vocab.id_to_token), "tensors": entries}
    _write(path, header, payload)


def save_vlm(model: fusion.FrozenVlmModel, path: str) -> None:
    entries, payload = _tensor_directory(model.parameters())
    header = {"kind": "vlm", "config": model.bilm.config.to_dict(),
              "fusion": model.fusion_config(),
              "vocab": list(model.bilm.vocab.id_to_token), "tensors": entries}
    _write(path, header, payload)


def _read_header(path: str) -> tuple:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MODEL_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MODEL_MAGIC!r}")
    if len(raw) < 12:
        raise CheckpointError("file truncated before header")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != MODEL_VERSION:
        raise CheckpointError(f"unsupported version {version}")
    if len(raw) < 12 + header_len:
        raise CheckpointError("file truncated inside header")
    try:
        header = json.loads(raw[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable header: {e}") from None
    return header, raw[12 + header_len:]


def _check_directory(entries, payload: bytes) -> None:
    expected = 0
    for e in entries:
        if e["offset"] != expected:
            raise CheckpointError(
                f"tensor {e['name']!r} at offset {e['offset']}, expected {expected}")
        expected += int(np.prod(e["shape"], dtype=np.int64)) * 4
    if expected != len(payload):
        raise CheckpointError(
            f"payload holds {len(payload)} bytes, directory expects {expected}")


def _apply_tensors(params, entries, payload: bytes) -> None:
    by_name = {e["name"]: e for e in entries}
    param_names = [p.name for p in params]
    missing = sorted(set(param_names) - set(by_name))
    extra = sorted(set(by_name) - set(param_names))
    if missing or extra:
        raise CheckpointError(
            f"tensor set mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for p in params:
        e = by_name[p.name]
        shape = tuple(e["shape"])
        if shape != p.data.shape:
            raise CheckpointError(
                f"tensor {p.name!r} has shape {shape}, model expects {p.data.shape}")
        n = int(np.prod(shape, dtype=np.int64)) * 4
        flat = np.frombuffer(payload[e["offset"]:e["offset"] + n],
                             dtype="<f4").reshape(shape)
        p.data = flat.copy()
        p.frozen = bool(e["frozen"])
        p.optimizer_state.clear()


def _rebuild_vocab(tokens: list) -> Vocabulary:
    try:
        return _from_tokens(list(tokens))
    except ValueError as e:
        raise CheckpointError(f"bad stored vocabulary: {e}") from None


def load_model(path: str):
    """A BiLM or multimodal model, exactly as saved (bits and freezes)."""
    header, payload = _read_header(path)
    for key in ("kind", "config", "vocab", "tensors"):
        if key not in header:
            raise CheckpointError(f"header missing {key!r}")
    _check_directory(header["tensors"], payload)
    vocab = _rebuild_vocab(header["vocab"])
    config = lm.BiLMConfig.from_dict(header["config"])
    bilm = lm.BiLM(config, vocab, RngStream(0, "checkpoint/init"))
    if header["kind"] == "bilm":
        _apply_tensors(bilm.parameters(), header["tensors"], payload)
        return bilm
    if header["kind"] != "vlm":
        raise CheckpointError(f"unknown checkpoint kind {header['kind']!r}")
    fus = header.get("fusion")
    if not fus:
        raise CheckpointError("multimodal checkpoint lacks fusion settings")
    model = fusion.build_model(
        bilm, d_visual=fus["d_visual"], prompt_len=fus["prompt_len"],
        adapter_dim=fus["adapter_dim"], variant=fus["variant"])
    _apply_tensors(model.parameters(), header["tensors"], payload)
    return model


def load_bilm(path: str) -> lm.BiLM:
    model = load_model(path)
    if not isinstance(model, lm.BiLM):
        raise CheckpointError("checkpoint holds a multimodal model, not a plain LM")
    return model


def load_vlm(path: str) -> fusion.FrozenVlmModel:
    model = load_model(path)
    if not isinstance(model, fusion.FrozenVlmModel):
        raise CheckpointError("checkpoint holds a plain LM, not a multimodal model")
    return model


# -- video features -------------------------------------------------------


class FeatureTable:
    """Precomputed per-clip features addressed by source id."""

    def __init__(self, clips: dict, d_visual: int):
        self.clips = clips
        self.d_visual = d_visual

    def __len__(self):
        return len(self.clips)

    def __contains__(self, clip_id: str) -> bool:
        return clip_id in self.clips

    def ids(self) -> list:
        return list(self.clips)

    def get(self, clip_id: str) -> fusion.VideoFeatures:
        if clip_id not in self.clips:
            raise KeyError(f"no features for clip {clip_id!r}")
        return self.clips[clip_id]

    def prompt(self, clip_id: str, frames: int) -> fusion.VideoFeatures:
        """The clip padded or truncated to a fixed prompt length."""
        v = self.get(clip_id)
        if v.n_frames == frames:
            return v
        return fusion.pad_video(v.features, v.valid, frames, v.source_id)


def save_features(videos: list, path: str) -> None:
    """Write VideoFeatures records; all clips must share a feature dim."""
    dims = {v.features.shape[1] for v in videos}
    if len(dims) > 1:
        raise ValueError(f"inconsistent feature dims {sorted(dims)}")
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<I", len(videos)))
        for v in videos:
            ident = v.source_id.encode("utf-8")
            feats = np.ascontiguousarray(v.features, dtype="<f4")
            f.write(struct.pack("<I", len(ident)))
            f.write(ident)
            f.write(struct.pack("<II", v.n_frames, feats.shape[1]))
            f.write(feats.tobytes())
            f.write(np.asarray(v.valid, dtype=np.uint8).tobytes())


def load_features(path: str) -> FeatureTable:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != FEATURE_MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}")
    (count,) = struct.unpack("<I", raw[4:8])
    pos = 8
    clips = {}
    d_visual = 0
    for _ in range(count):
        try:
            (id_len,) = struct.unpack("<I", raw[pos:pos + 4])
            pos += 4
            ident = raw[pos:pos + id_len].decode("utf-8")
            pos += id_len
            frames, dim = struct.unpack("<II", raw[pos:pos + 8])
            pos += 8
            n = frames * dim * 4
            feats = np.frombuffer(raw[pos:pos + n], dtype="<f4").reshape(frames, dim)
            pos += n
            valid = np.frombuffer(raw[pos:pos + frames], dtype=np.uint8).astype(bool)
            if valid.size != frames:
                raise struct.error("validity bytes truncated")
            pos += frames
        except (struct.error, ValueError) as e:
            raise CheckpointError(f"feature file truncated or corrupt: {e}") from None
        if d_visual and dim != d_visual:
            raise CheckpointError(
                f"clip {ident!r} has dim {dim}, file started with {d_visual}")
        d_visual = dim
        if ident in clips:
            raise CheckpointError(f"duplicate clip id {ident!r}")
        clips[ident] = fusion.VideoFeatures(
            features=feats.copy(), valid=valid.copy(), source_id=ident)
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after last record")
    return FeatureTable(clips, d_visual)
