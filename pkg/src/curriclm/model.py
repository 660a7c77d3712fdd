"""A small decoder-only autoregressive language model.

Pre-normalization residual blocks, learned positional embeddings, an
untied output projection, next-token cross-entropy in nats, Adam
updates with gradient clipping, and seeded temperature sampling.
Everything is CPU-friendly and deterministic per seed.

Checkpoints serialize to a self-contained binary format: magic bytes
``CTLC``, a format version, a JSON header (architecture, vocabulary
digest, trained stage names, opaque RNG bookkeeping), then named
tensors as row-major little-endian float32 with explicit shapes.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import TokenWindow
from .errors import TrainingError, ValidationError
from .fileio import atomic_write_bytes

CHECKPOINT_MAGIC = b"CTLC"
CHECKPOINT_VERSION = 1

DEFAULT_LEARNING_RATE = 3e-4
DEFAULT_BATCH_SIZE = 16
DEFAULT_CLIP_NORM = 1.0

PRESETS = {
    "small": (2, 4, 128),
    "medium": (4, 4, 256),
    "large": (6, 8, 384),
}


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    heads: int
    model_dim: int
    ff_dim: int
    context_len: int = 256
    vocab_size: int = 0
    preset: str = "custom"

    def __post_init__(self):
        if min(self.layers, self.heads, self.model_dim, self.ff_dim, self.context_len) < 1:
            raise ValidationError("model dimensions must be positive")
        if self.model_dim % self.heads != 0:
            raise ValidationError(
                f"model_dim {self.model_dim} must be divisible by heads {self.heads}"
            )

    @staticmethod
    def from_preset(name: str, vocab_size: int, context_len: int = 256) -> "ModelConfig":
        if name not in PRESETS:
            raise ValidationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        layers, heads, dim = PRESETS[name]
        return ModelConfig(
            layers=layers,
            heads=heads,
            model_dim=dim,
            ff_dim=4 * dim,
            context_len=context_len,
            vocab_size=vocab_size,
            preset=name,
        )


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 0.7
    # Default matches the built-in vocabulary layout, where the response
    # end marker is the last of the eight reserved marker ids.
    stop_token: int = 9
    max_new_tokens: int = 128

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.max_new_tokens < 1:
            raise ValidationError("max_new_tokens must be at least 1")


class Block(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.heads = config.heads
        self.ln_attn = nn.LayerNorm(config.model_dim)
        self.qkv = nn.Linear(config.model_dim, 3 * config.model_dim)
        self.attn_out = nn.Linear(config.model_dim, config.model_dim)
        self.ln_mlp = nn.LayerNorm(config.model_dim)
        self.mlp_up = nn.Linear(config.model_dim, config.ff_dim)
        self.mlp_down = nn.Linear(config.ff_dim, config.model_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        bsz, seq, dim = x.shape
        h = self.ln_attn(x)
        q, k, v = self.qkv(h).split(dim, dim=2)
        shape = (bsz, seq, self.heads, dim // self.heads)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        attn = F.scaled_dot_product_attention(q, k, v, is_causal=True)
        attn = attn.transpose(1, 2).reshape(bsz, seq, dim)
        x = x + self.attn_out(attn)
        x = x + self.mlp_down(F.gelu(self.mlp_up(self.ln_mlp(x))))
        return x


class LanguageModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        if config.vocab_size < 2:
            raise ValidationError("vocab_size must be at least 2")
        self.config = config
        self.token_emb = nn.Embedding(config.vocab_size, config.model_dim)
        self.pos_emb = nn.Embedding(config.context_len, config.model_dim)
        self.blocks = nn.ModuleList(Block(config) for _ in range(config.layers))
        self.ln_final = nn.LayerNorm(config.model_dim)
        self.head = nn.Linear(config.model_dim, config.vocab_size)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.dim() != 2:
            raise ValidationError("expected a batch of token id rows")
        seq = ids.shape[1]
        if seq > self.config.context_len:
            raise ValidationError(
                f"sequence length {seq} exceeds context_len {self.config.context_len}"
            )
        x = self.token_emb(ids) + self.pos_emb(torch.arange(seq, device=ids.device))
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_final(x))


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab_hash: str
    parameters: dict[str, torch.Tensor]
    trained_stages: tuple[str, ...] = ()
    rng_state: dict = field(default_factory=dict)

    def with_stage(self, stage_name: str) -> "Checkpoint":
        return Checkpoint(
            config=self.config,
            vocab_hash=self.vocab_hash,
            parameters=self.parameters,
            trained_stages=self.trained_stages + (stage_name,),
            rng_state=dict(self.rng_state),
        )


def _seeded_init(model: LanguageModel, seed: int) -> None:
    # Iterating in sorted name order pins the draw sequence regardless of
    # module construction order.
    generator = torch.Generator().manual_seed(seed)
    for name, param in sorted(model.named_parameters()):
        with torch.no_grad():
            if name.endswith(".bias"):
                param.zero_()
            elif "ln_" in name and name.endswith(".weight"):
                param.fill_(1.0)
            else:
                param.normal_(0.0, 0.02, generator=generator)


def init_model(config: ModelConfig, seed: int, vocab_hash: str = "") -> Checkpoint:
    """Build a freshly initialized checkpoint; bit-identical per seed."""
    model = LanguageModel(config)
    _seeded_init(model, seed)
    return Checkpoint(
        config=config,
        vocab_hash=vocab_hash,
        parameters={k: v.detach().clone() for k, v in model.state_dict().items()},
        trained_stages=(),
        rng_state={"init_seed": seed},
    )


def build_model(checkpoint: Checkpoint) -> LanguageModel:
    model = LanguageModel(checkpoint.config)
    try:
        model.load_state_dict(checkpoint.parameters)
    except RuntimeError as exc:
        raise ValidationError(f"checkpoint parameters do not fit the config: {exc}") from exc
    return model


def snapshot_parameters(model: LanguageModel) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _batch_tensor(batch: Sequence[TokenWindow], vocab_size: int, context_len: int, pad_id: int) -> torch.Tensor:
    if not batch:
        raise ValidationError("batch must contain at least one window")
    longest = max(len(w) for w in batch)
    if longest > context_len:
        raise ValidationError(f"window of {longest} tokens exceeds context_len {context_len}")
    ids = torch.full((len(batch), longest), pad_id, dtype=torch.long)
    for row, window in enumerate(batch):
        if window.ids:
            tokens = torch.tensor(window.ids, dtype=torch.long)
            if tokens.min() < 0 or tokens.max() >= vocab_size:
                raise ValidationError(
                    f"token id outside vocabulary of size {vocab_size} in window {window.index}"
                )
            ids[row, : len(tokens)] = tokens
    return ids


def _nll_sum(model: LanguageModel, ids: torch.Tensor, pad_id: int) -> tuple[torch.Tensor, int]:
    """Summed next-token negative log likelihood and the live target count."""
    logits = model(ids[:, :-1])
    targets = ids[:, 1:]
    mask = targets != pad_id
    count = int(mask.sum().item())
    if count == 0:
        raise ValidationError("batch has no predictable positions (windows too short)")
    flat = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        targets.reshape(-1),
        reduction="none",
    )
    return (flat * mask.reshape(-1).to(flat.dtype)).sum(), count


def loss_tensor(model: LanguageModel, batch: Sequence[TokenWindow], pad_id: int = 0) -> torch.Tensor:
    """Differentiable mean next-token cross-entropy (nats per non-pad token)."""
    ids = _batch_tensor(batch, model.config.vocab_size, model.config.context_len, pad_id)
    total, count = _nll_sum(model, ids, pad_id)
    return total / count


def loss(model: LanguageModel, batch: Sequence[TokenWindow], pad_id: int = 0) -> float:
    """Mean next-token cross-entropy in nats over non-pad positions."""
    ids = _batch_tensor(batch, model.config.vocab_size, model.config.context_len, pad_id)
    with torch.no_grad():
        total, count = _nll_sum(model, ids, pad_id)
    # Accumulate the division in Python floats so single-batch validation
    # reproduces this value exactly.
    value = float(total.item()) / count
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value}")
    return value


def make_optimizer(model: LanguageModel, lr: float = DEFAULT_LEARNING_RATE) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr)


def train_step(
    model: LanguageModel,
    batch: Sequence[TokenWindow],
    optimizer: torch.optim.Optimizer,
    pad_id: int = 0,
    clip_norm: float = DEFAULT_CLIP_NORM,
) -> float:
    """One clipped Adam update; returns the pre-update mean loss."""
    mean = loss_tensor(model, batch, pad_id)
    value = float(mean.item())
    if not math.isfinite(value):
        raise TrainingError(f"non-finite training loss {value}")
    optimizer.zero_grad()
    mean.backward()
    grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    if not math.isfinite(float(grad_norm)):
        raise TrainingError("non-finite gradient norm")
    optimizer.step()
    return value


def validate(
    model: LanguageModel,
    windows: Sequence[TokenWindow],
    pad_id: int = 0,
    batch_size: int = DEFAULT_BATCH_SIZE,
) -> float:
    """Token-weighted mean loss over the whole corpus; no mutation."""
    if not windows:
        raise ValidationError("validation corpus is empty")
    total = 0.0
    count = 0
    with torch.no_grad():
        for start in range(0, len(windows), batch_size):
            batch = windows[start : start + batch_size]
            ids = _batch_tensor(batch, model.config.vocab_size, model.config.context_len, pad_id)
            part, n = _nll_sum(model, ids, pad_id)
            total += float(part.item())
            count += n
    return total / count


def sample_token(logits: torch.Tensor, temperature: float, generator: torch.Generator) -> int:
    """Draw one token from softmax(logits / temperature)."""
    if temperature <= 0:
        raise ValidationError("temperature must be positive")
    probs = F.softmax(logits.to(torch.float64) / temperature, dim=-1)
    total = float(probs.sum().item())
    if abs(total - 1.0) > 1e-6:
        raise TrainingError(f"sampling distribution sums to {total}, not 1")
    return int(torch.multinomial(probs, 1, generator=generator).item())


def sample(
    model: LanguageModel,
    prefix_ids: Sequence[int],
    sampler: SamplerConfig,
    seed: int,
) -> list[int]:
    """Generate ids until the stop token or the length budget.

    The conditioning context keeps only the most recent
    ``context_len - 1`` ids once the sequence outgrows the model.
    Returns the generated ids (stop token included when reached).
    """
    context_len = model.config.context_len
    if len(prefix_ids) >= context_len:
        raise ValidationError(
            f"prefix of {len(prefix_ids)} ids must be shorter than context_len {context_len}"
        )
    generator = torch.Generator().manual_seed(seed)
    ids = list(prefix_ids)
    out: list[int] = []
    with torch.no_grad():
        for _ in range(sampler.max_new_tokens):
            context = ids[-(context_len - 1) :] if len(ids) > context_len - 1 else ids
            logits = model(torch.tensor([context], dtype=torch.long))[0, -1]
            token = sample_token(logits, sampler.temperature, generator)
            ids.append(token)
            out.append(token)
            if token == sampler.stop_token:
                break
    return out


def _config_dict(config: ModelConfig) -> dict:
    return asdict(config)


def _config_from_dict(payload: dict) -> ModelConfig:
    return ModelConfig(**payload)


def checkpoint_bytes(checkpoint: Checkpoint) -> bytes:
    header = json.dumps(
        {
            "config": _config_dict(checkpoint.config),
            "vocab_hash": checkpoint.vocab_hash,
            "trained_stages": list(checkpoint.trained_stages),
            "rng_state": checkpoint.rng_state,
        },
        sort_keys=True,
    ).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    names = sorted(checkpoint.parameters)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        tensor = checkpoint.parameters[name].detach().to(torch.float32).contiguous()
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", tensor.dim()))
        parts.append(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
        parts.append(tensor.numpy().astype("<f4").tobytes())
    return b"".join(parts)


def checkpoint_digest(checkpoint: Checkpoint) -> str:
    return hashlib.sha256(checkpoint_bytes(checkpoint)).hexdigest()


def parameter_digest(parameters: dict[str, torch.Tensor] | Checkpoint) -> str:
    """Digest over tensor contents only; stage history and RNG state are
    excluded so best-checkpoint restoration can be verified."""
    if isinstance(parameters, Checkpoint):
        parameters = parameters.parameters
    digest = hashlib.sha256()
    for name in sorted(parameters):
        tensor = parameters[name].detach().to(torch.float32).contiguous()
        digest.update(name.encode("utf-8"))
        digest.update(tensor.numpy().astype("<f4").tobytes())
    return digest.hexdigest()


def save_checkpoint(checkpoint: Checkpoint, path: str | Path) -> Path:
    return atomic_write_bytes(path, checkpoint_bytes(checkpoint))


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file (bad magic bytes)")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    cursor = 12
    header = json.loads(blob[cursor : cursor + header_len].decode("utf-8"))
    cursor += header_len
    (n_tensors,) = struct.unpack_from("<I", blob, cursor)
    cursor += 4
    parameters: dict[str, torch.Tensor] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack_from("<I", blob, cursor)
        cursor += 4
        name = blob[cursor : cursor + name_len].decode("utf-8")
        cursor += name_len
        (ndim,) = struct.unpack_from("<I", blob, cursor)
        cursor += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, cursor)
        cursor += 4 * ndim
        numel = int(np.prod(shape)) if ndim else 1
        array = np.frombuffer(blob, dtype="<f4", count=numel, offset=cursor).copy()
        cursor += 4 * numel
        parameters[name] = torch.from_numpy(array.reshape(shape))
    return Checkpoint(
        config=_config_from_dict(header["config"]),
        vocab_hash=header["vocab_hash"],
        parameters=parameters,
        trained_stages=tuple(header["trained_stages"]),
        rng_state=dict(header["rng_state"]),
    )


def stamp_vocab(checkpoint: Checkpoint, vocab_hash: str) -> Checkpoint:
    if checkpoint.vocab_hash and checkpoint.vocab_hash != vocab_hash:
        raise ValidationError(
            "checkpoint was trained against a different vocabulary "
            f"({checkpoint.vocab_hash[:12]} != {vocab_hash[:12]})"
        )
    return replace_vocab(checkpoint, vocab_hash)


def replace_vocab(checkpoint: Checkpoint, vocab_hash: str) -> Checkpoint:
    return Checkpoint(
        config=checkpoint.config,
        vocab_hash=vocab_hash,
        parameters=checkpoint.parameters,
        trained_stages=checkpoint.trained_stages,
        rng_state=dict(checkpoint.rng_state),
    )
