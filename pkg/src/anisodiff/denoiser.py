"""v-predicting denoisers: an exact analytic oracle, a 3-D U-Net and its training loop.

Checkpoint layout (``.ackpt``)::

    bytes 0-5   magic b"ADCK1\\n"
    bytes 6-9   little-endian uint32 header length L
    next L      UTF-8 JSON header:
                  {"unet": {...UNetConfig...},
                   "schedule": {"T", "beta_start", "beta_end"},
                   "train": {"epoch", "adam_step", "seed", ...},
                   "tensors": [{"name", "shape", "offset"}, ...]}
    rest        tensor payload, little-endian float32, concatenated in header
                order; "offset" is in bytes from the start of the payload.

Model parameters are stored under their module names; Adam moments under
``optim.exp_avg.<name>`` and ``optim.exp_avg_sq.<name>``.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import CfgConfig, ConditioningBundle, StackedInput, assemble_input, cfg_dropout
from .schedule import NoiseSchedule, build_scaled_linear, forward_noise, v_target
from .volume import (
    ContractError,
    EnFaceImage,
    PatchRegion,
    ShapeError,
    Volume,
    decimate_slices,
    extract_patch,
    upsample_slices_linear,
)

log = logging.getLogger(__name__)


class Denoiser(Protocol):
    def predict(self, inp: StackedInput, t: int) -> np.ndarray: ...


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


# -- analytic oracle ---------------------------------------------------------


class OracleDenoiser:
    """Returns the exact v implied by a known clean reference and the observed x_t.

    Conditioning channels are ignored. If the input carries a ``region`` the
    matching crop of the reference is used.
    """

    def __init__(self, x0_ref: Volume, s: NoiseSchedule):
        self.x0 = x0_ref.data.astype(np.float64)
        self.s = s

    def predict(self, inp: StackedInput, t: int) -> np.ndarray:
        x0 = self.x0[inp.region.slices()] if inp.region is not None else self.x0
        xt = inp.x_t.astype(np.float64)
        if x0.shape != xt.shape:
            raise ShapeError(f"oracle reference crop {x0.shape} != input {xt.shape}")
        a, b = self.s.coefs(t)
        if b == 0.0:
            if not np.array_equal(xt, x0):
                raise ContractError("alpha_bar = 1 and x_t != x0: no noise to invert")
            return np.zeros_like(xt, dtype=np.float32)
        eps = (xt - a * x0) / b
        return (a * eps - b * x0).astype(np.float32)


def oracle_denoiser(x0_ref: Volume, s: NoiseSchedule) -> OracleDenoiser:
    return OracleDenoiser(x0_ref, s)


# -- 3-D U-Net ----------------------------------------------------------------


@dataclass(frozen=True)
class UNetConfig:
    channels_per_level: tuple[int, ...] = (32, 64, 128, 256)
    res_blocks_per_level: int = 2
    attention_at_deepest: bool = True
    attention_heads: int = 1
    timestep_embedding_dim: int = 128
    in_channels: int = 3
    out_channels: int = 1
    kernel: int = 3
    crop: tuple[int, int, int] = (128, 128, 16)  # (w, h, d) the network is built for

    @property
    def levels(self) -> int:
        return len(self.channels_per_level)

    def __post_init__(self):
        if self.levels < 1 or min(self.channels_per_level) < 1:
            raise ContractError("channels_per_level must be non-empty and positive")
        if min(self.res_blocks_per_level, self.attention_heads, self.timestep_embedding_dim) < 1:
            raise ContractError("block counts, heads and embedding size must be positive")
        if self.timestep_embedding_dim % 2:
            raise ContractError("timestep_embedding_dim must be even")
        if self.kernel % 2 != 1:
            raise ContractError("kernel size must be odd")

    @classmethod
    def paper(cls) -> "UNetConfig":
        return cls()

    @classmethod
    def tiny(cls) -> "UNetConfig":
        return cls(channels_per_level=(8, 16), timestep_embedding_dim=64, crop=(32, 32, 16))

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels_per_level"] = list(self.channels_per_level)
        d["crop"] = list(self.crop)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "UNetConfig":
        d = dict(d)
        d["channels_per_level"] = tuple(d["channels_per_level"])
        d["crop"] = tuple(d["crop"])
        return cls(**d)


def check_divisible(dims: Sequence[int], levels: int) -> None:
    k = 2 ** (levels - 1)
    if any(n % k for n in dims):
        raise ShapeError(f"spatial dims {tuple(dims)} must be divisible by {k} for {levels} levels")


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _norm(ch: int) -> nn.GroupNorm:
    groups = math.gcd(ch, 8)
    return nn.GroupNorm(groups, ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int, k: int):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv3d(cin, cout, k, padding=k // 2)
        self.temb = nn.Linear(temb, cout)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv3d(cout, cout, k, padding=k // 2)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(emb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Attention(nn.Module):
    def __init__(self, ch: int, heads: int):
        super().__init__()
        self.norm = _norm(ch)
        self.attn = nn.MultiheadAttention(ch, heads, batch_first=True)

    def forward(self, x, emb=None):
        b, c, *sp = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)
        h, _ = self.attn(h, h, h, need_weights=False)
        return x + h.transpose(1, 2).reshape(b, c, *sp)


class UNet3D(nn.Module):
    """Residual 3-D U-Net with sinusoidal timestep embedding injected in every block."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        chs, k = cfg.channels_per_level, cfg.kernel
        temb = 4 * chs[0]
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.timestep_embedding_dim, temb), nn.SiLU(), nn.Linear(temb, temb)
        )
        self.conv_in = nn.Conv3d(cfg.in_channels, chs[0], k, padding=k // 2)

        self.down = nn.ModuleList()
        skip_chs = [chs[0]]
        cur = chs[0]
        for i, ch in enumerate(chs):
            deepest = i == len(chs) - 1
            blocks = nn.ModuleList()
            for _ in range(cfg.res_blocks_per_level):
                blocks.append(ResBlock(cur, ch, temb, k))
                cur = ch
                if deepest and cfg.attention_at_deepest:
                    blocks.append(Attention(ch, cfg.attention_heads))
                skip_chs.append(ch)
            if not deepest:
                blocks.append(nn.Conv3d(ch, ch, 3, stride=2, padding=1))
                skip_chs.append(ch)
            self.down.append(blocks)

        mid = [ResBlock(cur, cur, temb, k)]
        if cfg.attention_at_deepest:
            mid.append(Attention(cur, cfg.attention_heads))
        mid.append(ResBlock(cur, cur, temb, k))
        self.mid = nn.ModuleList(mid)

        self.up = nn.ModuleList()
        for i, ch in reversed(list(enumerate(chs))):
            deepest = i == len(chs) - 1
            blocks = nn.ModuleList()
            for _ in range(cfg.res_blocks_per_level + 1):
                blocks.append(ResBlock(cur + skip_chs.pop(), ch, temb, k))
                cur = ch
                if deepest and cfg.attention_at_deepest:
                    blocks.append(Attention(ch, cfg.attention_heads))
            if i > 0:
                blocks.append(nn.Conv3d(ch, ch, 3, padding=1))  # after nearest upsampling
            self.up.append(blocks)

        self.norm_out = _norm(cur)
        self.conv_out = nn.Conv3d(cur, cfg.out_channels, k, padding=k // 2)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        check_divisible(x.shape[2:], self.cfg.levels)
        emb = self.time_mlp(timestep_embedding(t, self.cfg.timestep_embedding_dim))
        h = self.conv_in(x)
        skips = [h]
        for blocks in self.down:
            for m in blocks:
                if isinstance(m, ResBlock):
                    h = m(h, emb)
                    skips.append(h)
                elif isinstance(m, Attention):
                    h = m(h)
                    skips[-1] = h
                else:
                    h = m(h)
                    skips.append(h)
        for m in self.mid:
            h = m(h, emb)
        for blocks in self.up:
            for m in blocks:
                if isinstance(m, ResBlock):
                    h = m(torch.cat([h, skips.pop()], dim=1), emb)
                elif isinstance(m, Attention):
                    h = m(h)
                else:
                    h = m(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


class TorchDenoiser:
    """Adapter exposing a torch v-prediction network through ``predict``."""

    def __init__(self, net: UNet3D):
        self.net = net
        self.cfg = net.cfg

    def predict(self, inp: StackedInput, t: int) -> np.ndarray:
        self.net.eval()
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(inp.channels))[None]
            out = self.net(x, torch.tensor([t], dtype=torch.float32))
        return out[0, 0].numpy().astype(np.float32)


def build_unet(cfg: UNetConfig, seed: int = 0) -> TorchDenoiser:
    (w, h, d) = cfg.crop
    check_divisible((d, h, w), cfg.levels)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = UNet3D(cfg)
    return TorchDenoiser(net)


# -- training -------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 16
    epochs: int = 10
    steps_per_epoch: int | None = None  # None: one crop per dataset volume per epoch
    crop_size: tuple[int, int, int] = (128, 128, 16)  # (w, h, d)
    seed: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ContractError("learning_rate, batch_size must be positive and epochs >= 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ContractError("steps_per_epoch must be positive")
        if min(self.crop_size) < 1 or self.crop_size[2] % 8:
            raise ContractError(f"crop depth must be a positive multiple of 8, got {self.crop_size}")


def make_training_example(
    hr: Volume,
    enface: EnFaceImage,
    crop: PatchRegion,
    t: int,
    eps: np.ndarray,
    rng_u: float,
    cfg: CfgConfig,
    s: NoiseSchedule,
    scaffold: Volume | None = None,
) -> tuple[StackedInput, np.ndarray]:
    """Build one (input, v-target) pair from a high-resolution volume crop.

    The conditioning channel is the crop of the whole volume's linear
    upsampling from its known slices (z = 4, 12, ...), exactly what the
    sampler feeds the network. Pass `scaffold` to reuse a precomputed one.
    """
    if crop.origin[2] % 8:
        raise ContractError(f"crop z-origin {crop.origin[2]} must be a multiple of 8")
    if crop.size[2] % 8:
        raise ContractError(f"crop depth {crop.size[2]} must be a multiple of 8")
    x0 = extract_patch(hr, crop)
    if scaffold is None:
        scaffold = upsample_slices_linear(decimate_slices(hr, 8, 4), 8, 4)
    lr_up = extract_patch(scaffold, crop)
    (x, _, z), (w, _, d) = crop.origin, crop.size
    strip = EnFaceImage(enface.data[z : z + d, x : x + w], enface.spacing)
    bundle = cfg_dropout(ConditioningBundle(lr_up, strip), rng_u, cfg)
    x_t = forward_noise(x0.data, eps, t, s)
    target = v_target(x0.data, eps, t, s)
    return assemble_input(x_t, bundle, crop), target


def sample_crop(rng: np.random.Generator, dims: Sequence[int], crop: Sequence[int]) -> PatchRegion:
    (W, H, D), (w, h, d) = dims, crop
    if w > W or h > H or d > D:
        raise ContractError(f"crop {tuple(crop)} does not fit volume {tuple(dims)}")
    x = int(rng.integers(0, W - w + 1))
    y = int(rng.integers(0, H - h + 1))
    z = 8 * int(rng.integers(0, (D - d) // 8 + 1))
    return PatchRegion((x, y, z), (w, h, d))


@dataclass
class TrainState:
    epoch: int = 0
    adam_step: int = 0
    optimizer: torch.optim.Adam | None = None
    loss_history: list[float] = field(default_factory=list)


def _make_optimizer(net: nn.Module, tc: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(net.parameters(), lr=tc.learning_rate, betas=tc.betas, eps=tc.adam_eps)


def train(
    d: TorchDenoiser,
    dataset: Sequence[tuple[Volume, EnFaceImage]],
    tc: TrainConfig,
    cc: CfgConfig,
    s: NoiseSchedule,
    state: TrainState | None = None,
    on_epoch=None,
) -> tuple[TorchDenoiser, list[float]]:
    """Minimise the batch-mean squared v error with Adam.

    Sampling of volume, crop, timestep, noise and CFG dropout is driven by a
    generator seeded from (seed, epoch), so a resumed run draws the same
    batches an uninterrupted one would.
    """
    if not dataset:
        raise ContractError("empty training dataset")
    for hr, _ in dataset:
        sample_crop(np.random.default_rng(0), hr.dims, tc.crop_size)
    scaffolds = [upsample_slices_linear(decimate_slices(hr, 8, 4), 8, 4) for hr, _ in dataset]
    net = d.net
    state = state or TrainState()
    if state.optimizer is None:
        state.optimizer = _make_optimizer(net, tc)
    opt = state.optimizer
    steps = tc.steps_per_epoch or max(1, math.ceil(len(dataset) / tc.batch_size))
    net.train()
    start = state.epoch
    for epoch in range(start, start + tc.epochs):
        rng = np.random.default_rng([tc.seed, epoch])
        losses = []
        for b in range(steps):
            xs, ts, vs = [], [], []
            for _ in range(tc.batch_size):
                k = int(rng.integers(len(dataset)))
                hr, ef = dataset[k]
                crop = sample_crop(rng, hr.dims, tc.crop_size)
                t = int(rng.integers(1, s.T + 1))
                eps = rng.standard_normal(crop.size[::-1]).astype(np.float32)
                inp, target = make_training_example(hr, ef, crop, t, eps, float(rng.random()), cc, s, scaffolds[k])
                xs.append(inp.channels)
                ts.append(t)
                vs.append(target)
            x = torch.from_numpy(np.stack(xs))
            v = torch.from_numpy(np.stack(vs))[:, None]
            pred = net(x, torch.tensor(ts, dtype=torch.float32))
            loss = F.mse_loss(pred, v)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, b, loss.item())
            opt.zero_grad()
            loss.backward()
            opt.step()
            state.adam_step += 1
            losses.append(loss.item())
        state.epoch = epoch + 1
        state.loss_history.append(float(np.mean(losses)))
        log.debug("epoch %d loss %.5f", epoch, state.loss_history[-1])
        if on_epoch is not None:
            on_epoch(epoch, state.loss_history[-1])
    net.eval()
    return d, list(state.loss_history)


# -- toy denoiser for gradient verification ---------------------------------


class LinearToyDenoiser:
    """v_hat = theta[0] * x_t + theta[1] * lr_up; float64 throughout."""

    def __init__(self, theta: Sequence[float]):
        self.theta = np.asarray(theta, dtype=np.float64)

    def predict(self, inp: StackedInput, t: int) -> np.ndarray:
        c = inp.channels.astype(np.float64)
        return self.theta[0] * c[0] + self.theta[1] * c[1]

    def loss(self, inputs: Sequence[StackedInput], targets: Sequence[np.ndarray]) -> float:
        err = [self.predict(i, 0) - np.asarray(v, np.float64) for i, v in zip(inputs, targets)]
        return float(np.mean(np.concatenate([e.ravel() for e in err]) ** 2))

    def grad(self, inputs: Sequence[StackedInput], targets: Sequence[np.ndarray]) -> np.ndarray:
        n = sum(np.asarray(v).size for v in targets)
        g = np.zeros(2)
        for inp, v in zip(inputs, targets):
            c = inp.channels.astype(np.float64)
            r = self.predict(inp, 0) - np.asarray(v, np.float64)
            g[0] += 2.0 * np.sum(r * c[0])
            g[1] += 2.0 * np.sum(r * c[1])
        return g / n


# -- checkpoints ------------------------------------------------------------------

CKPT_MAGIC = b"ADCK1\n"


def save_checkpoint(
    path: str | Path,
    d: TorchDenoiser,
    s: NoiseSchedule,
    state: TrainState | None = None,
    extra: dict | None = None,
) -> None:
    tensors: list[tuple[str, np.ndarray]] = [
        (k, v.detach().cpu().numpy()) for k, v in d.net.state_dict().items()
    ]
    train_meta = dict(extra or {})
    if state is not None:
        train_meta.update(epoch=state.epoch, adam_step=state.adam_step, loss_history=state.loss_history)
        if state.optimizer is not None:
            names = {id(p): n for n, p in d.net.named_parameters()}
            for group in state.optimizer.param_groups:
                for p in group["params"]:
                    st = state.optimizer.state.get(p)
                    if st:
                        tensors.append((f"optim.exp_avg.{names[id(p)]}", st["exp_avg"].numpy()))
                        tensors.append((f"optim.exp_avg_sq.{names[id(p)]}", st["exp_avg_sq"].numpy()))
    entries, blobs, off = [], [], 0
    for name, arr in tensors:
        b = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": off})
        blobs.append(b)
        off += len(b)
    header = {
        "unet": d.cfg.to_json(),
        "schedule": {"T": s.T, "beta_start": s.beta_start, "beta_end": s.beta_end},
        "train": train_meta,
        "tensors": entries,
    }
    hb = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def load_checkpoint(
    path: str | Path, tc: TrainConfig | None = None
) -> tuple[TorchDenoiser, NoiseSchedule, TrainState, dict]:
    """Returns (denoiser, schedule, train state, raw header).

    Adam moments are restored into a fresh optimizer when ``tc`` is given.
    """
    raw = Path(path).read_bytes()
    if raw[:6] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[6:10])
    header = json.loads(raw[10 : 10 + n].decode("utf-8"))
    payload = raw[10 + n :]
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        a = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        arrays[e["name"]] = a.reshape(e["shape"]).astype(np.float32)
    cfg = UNetConfig.from_json(header["unet"])
    d = build_unet(cfg, 0)
    sd = {k: torch.from_numpy(arrays[k].copy()) for k in d.net.state_dict()}
    d.net.load_state_dict(sd)
    sch = header["schedule"]
    s = build_scaled_linear(sch["T"], sch["beta_start"], sch["beta_end"])
    tm = header.get("train", {})
    state = TrainState(
        epoch=int(tm.get("epoch", 0)),
        adam_step=int(tm.get("adam_step", 0)),
        loss_history=list(tm.get("loss_history", [])),
    )
    if tc is not None:
        opt = _make_optimizer(d.net, tc)
        for name, p in d.net.named_parameters():
            if f"optim.exp_avg.{name}" in arrays:
                opt.state[p] = {
                    "step": torch.tensor(float(state.adam_step)),
                    "exp_avg": torch.from_numpy(arrays[f"optim.exp_avg.{name}"].copy()),
                    "exp_avg_sq": torch.from_numpy(arrays[f"optim.exp_avg_sq.{name}"].copy()),
                }
        state.optimizer = opt
    d.net.eval()
    return d, s, state, header
