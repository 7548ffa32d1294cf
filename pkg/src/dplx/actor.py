"""Actor network: 1d-ResNet backbone, peak encoders, force gating."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import metrics

CHECKPOINT_FORMAT = "dplx-actor/1"
N_FORCES = 2 * metrics.N_SUBAREAS
PEAK_KINDS = ("none", "simple", "softmax")


@dataclass(frozen=True)
class ActorConfig:
    n_screws: int
    nchan: int = 16
    blocks: tuple[int, int, int, int] = (1, 1, 1, 1)
    first_layer_stride: int = 1
    peak_encoders: tuple[str, str, str] = ("simple", "simple", "simple")
    softmax_heads: int = 4
    peak_embedding: int = 32
    use_s21_regression: bool = True
    head_hidden: tuple[int, ...] = (512, 256)
    peak_prominence: float = metrics.DEFAULT_PROMINENCE
    peak_cap: int = 64

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        object.__setattr__(self, "peak_encoders", tuple(self.peak_encoders))
        object.__setattr__(self, "head_hidden", tuple(int(h) for h in self.head_hidden))
        if len(self.blocks) != 4 or min(self.blocks) < 1:
            raise ValueError("blocks must hold 4 entries, each >= 1")
        if self.nchan < 1 or self.n_screws < 1:
            raise ValueError("nchan and n_screws must be >= 1")
        if self.first_layer_stride not in (1, 2):
            raise ValueError("first_layer_stride must be 1 or 2")
        if len(self.peak_encoders) != 3 or any(k not in PEAK_KINDS for k in self.peak_encoders):
            raise ValueError(f"peak_encoders must be 3 entries from {PEAK_KINDS}")
        if self.softmax_heads < 1 or self.peak_embedding % self.softmax_heads:
            raise ValueError("peak_embedding must be a multiple of softmax_heads")

    @property
    def backbone_width(self) -> int:
        return 32 * self.nchan

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ActorConfig":
        return cls(**d)


@dataclass
class ActorInput:
    curves: torch.Tensor  # (B, 3, n) scaled dB
    forces: torch.Tensor  # (B, 20)
    peaks: list[torch.Tensor] = field(default_factory=list)  # 3 x (B, P, 2)
    peak_mask: list[torch.Tensor] = field(default_factory=list)  # 3 x (B, P) bool
    shape: torch.Tensor | None = None  # (B, 8)

    def __len__(self) -> int:
        return self.curves.shape[0]

    def index(self, idx) -> "ActorInput":
        return ActorInput(
            self.curves[idx],
            self.forces[idx],
            [p[idx] for p in self.peaks],
            [m[idx] for m in self.peak_mask],
            None if self.shape is None else self.shape[idx],
        )

    def to(self, dtype: torch.dtype) -> "ActorInput":
        return ActorInput(
            self.curves.to(dtype),
            self.forces.to(dtype),
            [p.to(dtype) for p in self.peaks],
            list(self.peak_mask),
            None if self.shape is None else self.shape.to(dtype),
        )


def pad_peaks(peak_lists: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    width = max([len(p) for p in peak_lists] + [1])
    out = np.zeros((len(peak_lists), width, 2))
    mask = np.zeros((len(peak_lists), width), dtype=bool)
    for b, p in enumerate(peak_lists):
        out[b, : len(p)] = p
        mask[b, : len(p)] = True
    return torch.from_numpy(out), torch.from_numpy(mask)


def make_inputs(
    curves: np.ndarray,
    passbands,
    config: ActorConfig,
    dtype: torch.dtype = torch.float32,
) -> ActorInput:
    """Feature extraction for a (B, 3, n) stack of dB curves."""
    curves = np.asarray(curves, dtype=float)
    if curves.ndim == 2:
        curves = curves[None]
    n = curves.shape[-1]
    frc = metrics.forces_batch(curves[:, 0], passbands)
    peaks, masks = [], []
    for c in range(3):
        lists = [
            metrics.normalized_peaks(curves[b, c], config.peak_prominence, config.peak_cap)
            for b in range(len(curves))
        ]
        p, m = pad_peaks(lists)
        peaks.append(p)
        masks.append(m)
    shape = None
    if config.use_s21_regression:
        regions = metrics.s21_regions(n, passbands)
        shape = torch.from_numpy(np.stack([metrics.s21_shape(c[1], regions) for c in curves]))
    inp = ActorInput(
        torch.from_numpy(np.clip(curves / metrics.AMPLITUDE_SCALE, -1.5, 0.01)),
        torch.from_numpy(frc),
        peaks,
        masks,
        shape,
    )
    return inp.to(dtype)


class Bottleneck(nn.Module):
    def __init__(self, in_ch: int, mid: int, stride: int = 1, downsample: nn.Module | None = None):
        super().__init__()
        self.conv1 = nn.Conv1d(in_ch, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm1d(mid)
        self.conv2 = nn.Conv1d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm1d(mid)
        self.conv3 = nn.Conv1d(mid, mid * 4, 1, bias=False)
        self.bn3 = nn.BatchNorm1d(mid * 4)
        self.relu = nn.ReLU()
        self.downsample = downsample

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


class MaxBottleneck(Bottleneck):
    """Bottleneck whose strided 3-wide convolution is a max pooling."""

    def __init__(self, in_ch: int, mid: int, stride: int = 1, downsample: nn.Module | None = None):
        super().__init__(in_ch, mid, stride, downsample)
        self.conv2 = nn.MaxPool1d(3, stride=stride, padding=1)


def make_layer(block: type[Bottleneck], in_ch: int, mid: int, n: int, stride: int) -> nn.Sequential:
    downsample = None
    if stride != 1 or in_ch != mid * 4:
        downsample = nn.Sequential(
            nn.Conv1d(in_ch, mid * 4, 1, stride=stride, bias=False),
            nn.BatchNorm1d(mid * 4),
        )
    layers = [block(in_ch, mid, stride, downsample)]
    layers += [block(mid * 4, mid) for _ in range(1, n)]
    return nn.Sequential(*layers)


class Backbone(nn.Module):
    def __init__(self, nchan: int, blocks: Sequence[int], first_stride: int = 1):
        super().__init__()
        c = nchan
        self.stem = nn.Sequential(
            nn.Conv1d(1, c, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm1d(c),
            nn.ReLU(),
            nn.MaxPool1d(3, stride=2, padding=1),
        )
        self.layer1 = make_layer(Bottleneck, c, c, blocks[0], first_stride)
        self.layer2 = make_layer(Bottleneck, c * 4, c * 2, blocks[1], 2)
        self.layer3 = make_layer(Bottleneck, c * 8, c * 4, blocks[2], 2)
        self.layer4 = make_layer(MaxBottleneck, c * 16, c * 8, blocks[3], 2)
        self.pool = nn.AdaptiveMaxPool1d(1)

    def forward(self, x):
        x = self.stem(x)
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return self.pool(x).flatten(1)


def mlp(sizes: Sequence[int]) -> nn.Sequential:
    layers = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        layers += [nn.Linear(a, b), nn.ReLU()]
    return nn.Sequential(*layers[:-1])


def canonical_order(peaks: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Sort each peak list by (valid first, position, amplitude).

    Aggregation then sees the same summation order for any permutation of
    the input, so the encoders are permutation invariant bit for bit.
    """
    order = torch.argsort(peaks[..., 1], dim=1, stable=True)
    for key in (peaks[..., 0], (~mask).to(peaks.dtype)):
        k = torch.gather(key, 1, order)
        order = torch.gather(order, 1, torch.argsort(k, dim=1, stable=True))
    return torch.gather(peaks, 1, order.unsqueeze(-1).expand_as(peaks)), torch.gather(mask, 1, order)


class SimplePeakEncoder(nn.Module):
    """Sum of per-peak embeddings, then a second feed-forward net."""

    def __init__(self, width: int):
        super().__init__()
        self.embed = mlp([2, width, width])
        self.out = mlp([width, width, width])

    def pooled(self, peaks, mask):
        peaks, mask = canonical_order(peaks, mask)
        e = self.embed(peaks) * mask.unsqueeze(-1).to(peaks.dtype)
        return e.sum(dim=1)

    def forward(self, peaks, mask):
        return self.out(self.pooled(peaks, mask))


class SoftmaxPeakEncoder(nn.Module):
    """Per-head softmax over peaks (logits from position only) weights the
    peak embeddings before the output net."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.embed = mlp([2, width, width])
        self.logit = mlp([1, width, heads])
        self.out = mlp([width, width, width])

    def weights(self, peaks, mask, logit_shift: float = 0.0):
        logits = self.logit(peaks[..., :1]) + logit_shift
        logits = logits.masked_fill(~mask.unsqueeze(-1), -1e9)
        w = torch.softmax(logits, dim=1)
        return w * mask.unsqueeze(-1).to(w.dtype)

    def pooled(self, peaks, mask, logit_shift: float = 0.0):
        peaks, mask = canonical_order(peaks, mask)
        b, p, _ = peaks.shape
        v = self.embed(peaks).view(b, p, self.heads, -1)
        w = self.weights(peaks, mask, logit_shift)
        return (v * w.unsqueeze(-1)).sum(dim=1).reshape(b, -1)

    def forward(self, peaks, mask, logit_shift: float = 0.0):
        return self.out(self.pooled(peaks, mask, logit_shift))


class Actor(nn.Module):
    def __init__(self, config: ActorConfig):
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.nchan, config.blocks, config.first_layer_stride)
        encoders = []
        width = 3 * config.backbone_width
        for kind in config.peak_encoders:
            if kind == "simple":
                encoders.append(SimplePeakEncoder(config.peak_embedding))
            elif kind == "softmax":
                encoders.append(SoftmaxPeakEncoder(config.peak_embedding, config.softmax_heads))
            else:
                encoders.append(None)
                continue
            width += config.peak_embedding
        self.peak_encoders = nn.ModuleList([e if e is not None else nn.Identity() for e in encoders])
        if config.use_s21_regression:
            width += 8
        self.head = mlp([width, *config.head_hidden, config.n_screws])
        self.force_matrix = nn.Parameter(torch.empty(N_FORCES, config.n_screws).uniform_(-0.01, 0.01))

    def features(self, inp: ActorInput) -> torch.Tensor:
        b, c, n = inp.curves.shape
        emb = self.backbone(inp.curves.reshape(b * c, 1, n)).reshape(b, -1)
        parts = [emb]
        for kind, enc, p, m in zip(self.config.peak_encoders, self.peak_encoders, inp.peaks, inp.peak_mask):
            if kind != "none":
                parts.append(enc(p, m))
        if self.config.use_s21_regression:
            parts.append(inp.shape)
        return torch.cat(parts, dim=1)

    def raw(self, inp: ActorInput) -> torch.Tensor:
        return self.head(self.features(inp))

    def gate(self, forces: torch.Tensor) -> torch.Tensor:
        return forces @ self.force_matrix

    def forward(self, inp: ActorInput) -> torch.Tensor:
        return self.gate(inp.forces) * self.raw(inp)


def build_actor(config: ActorConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Actor:
    torch.manual_seed(seed)
    return Actor(config).to(dtype)


def save_checkpoint(actor: Actor, path, extra: dict | None = None) -> None:
    path = Path(path)
    torch.save(actor.state_dict(), path)
    meta = {"format_version": CHECKPOINT_FORMAT, "config": actor.config.to_dict()}
    meta.update(extra or {})
    sidecar(path).write_text(json.dumps(meta, indent=1) + "\n")


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path, dtype: torch.dtype = torch.float32) -> tuple[Actor, dict]:
    path = Path(path)
    meta = json.loads(sidecar(path).read_text())
    if meta.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format_version')!r}")
    actor = Actor(ActorConfig.from_dict(meta["config"]))
    state = torch.load(path, map_location="cpu", weights_only=True)
    try:
        actor.load_state_dict(state)
    except RuntimeError as exc:
        raise ValueError(f"checkpoint parameters do not match its config: {exc}") from exc
    actor.eval()
    return actor.to(dtype), meta


class ActorPolicy:
    """Callable adapter: SweepState -> action (numpy) for the solver."""

    def __init__(self, actor: Actor, passbands):
        self.actor = actor
        self.passbands = passbands
        self.dtype = next(actor.parameters()).dtype

    def batch(self, curves: np.ndarray, positions=None, chunk: int = 256) -> np.ndarray:
        self.actor.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(curves), chunk):
                inp = make_inputs(curves[start:start + chunk], self.passbands, self.actor.config, self.dtype)
                out.append(self.actor(inp).double().numpy())
        return np.concatenate(out) if out else np.empty((0, self.actor.config.n_screws))

    def __call__(self, state) -> np.ndarray:
        return self.batch(state.curves()[None])[0]
