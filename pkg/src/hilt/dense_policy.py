"""Dense diffusion policy: DDPM over short action chunks.

Conditioning is a wrist-image embedding with proprioception appended; the
denoiser is a 1-D convolutional U-Net over the chunk time axis with FiLM
modulation from (timestep embedding, observation embedding).  Action rows
are 8-dim: 6 pose delta, gripper command, and the control mode as a plain
scalar that is rounded back to {0,1,2} after sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .train_utils import Ema, guard_finite, make_optimizer_and_schedule

ACTION_DIM = 8
SAMPLE_CLIP = 1.1


@dataclass
class DenseObservation:
    wrist_image: np.ndarray  # (H, W, 3) in [0, 1]
    proprio: np.ndarray  # (7,)

    def __post_init__(self):
        self.proprio = np.asarray(self.proprio, dtype=np.float64).reshape(7)


@dataclass
class DenseModelConfig:
    t_pred: int = 16
    exec_horizon: int = 8
    diffusion_steps: int = 50
    schedule: str = "squared_cosine"
    use_image: bool = True
    image_size: int = 64
    image_channels: tuple = (8, 16, 32, 64)
    image_embed_dim: int = 64
    unet_channels: tuple = (48, 96)
    cond_hidden: int = 128
    time_embed_dim: int = 64

    def __post_init__(self):
        if self.exec_horizon > self.t_pred:
            raise ValueError("exec_horizon cannot exceed t_pred")
        down_factor = 2 ** (len(self.unet_channels) - 1)
        if self.t_pred % down_factor != 0:
            raise ValueError("t_pred must be divisible by the U-Net downsampling")


def desk_dense_config() -> DenseModelConfig:
    return DenseModelConfig()


def paper_dense_config() -> DenseModelConfig:
    """Full-scale preset: an 18-layer-class residual encoder stand-in."""
    return DenseModelConfig(
        image_channels=(64, 128, 256, 512),
        image_embed_dim=512,
        unet_channels=(256, 512, 1024),
        cond_hidden=512,
        time_embed_dim=128,
        diffusion_steps=100,
    )


@dataclass
class DenseTrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-6
    batch_size: int = 64
    epochs: int = 60
    grad_clip_norm: float = 1.0
    ema_target: float = 0.9999


# ---------------------------------------------------------------------------
# diffusion schedule

@dataclass
class DiffusionSchedule:
    steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray  # index t-1 holds bar(alpha)_t for t = 1..steps


def make_schedule(steps: int, kind: str = "squared_cosine") -> DiffusionSchedule:
    """Squared-cosine noise schedule (offset s = 0.008)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if kind != "squared_cosine":
        raise ValueError(f"unknown schedule kind {kind!r}")
    s = 0.008
    t = np.arange(steps + 1, dtype=np.float64)
    f = np.cos((t / steps + s) / (1 + s) * math.pi / 2) ** 2
    alpha_bar = f[1:] / f[0]
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    betas = np.clip(1.0 - alpha_bar / prev, 1e-8, 0.999)
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    return DiffusionSchedule(steps=steps, betas=betas, alphas=alphas, alpha_bar=alpha_bar)


def q_sample(x0: torch.Tensor, t, noise: torch.Tensor, schedule: DiffusionSchedule):
    """Forward-process sample x_t = sqrt(ab_t) x0 + sqrt(1-ab_t) eps, t in 1..T."""
    t = torch.as_tensor(t)
    if torch.any(t < 1) or torch.any(t > schedule.steps):
        raise ValueError("t out of range")
    ab = torch.from_numpy(schedule.alpha_bar).to(x0.dtype)[t - 1]
    while ab.dim() < x0.dim():
        ab = ab.unsqueeze(-1)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


# ---------------------------------------------------------------------------
# normalization

@dataclass
class NormStats:
    action_min: np.ndarray
    action_max: np.ndarray
    proprio_min: np.ndarray
    proprio_max: np.ndarray

    @classmethod
    def from_view(cls, view) -> "NormStats":
        chunks = np.stack([chunk for _, chunk in view], axis=0)
        props = np.stack([obs.proprio for obs, _ in view], axis=0)
        return cls(
            action_min=chunks.min(axis=(0, 1)),
            action_max=chunks.max(axis=(0, 1)),
            proprio_min=props.min(axis=0),
            proprio_max=props.max(axis=0),
        )


def _affine_to_unit(x, lo, hi):
    span = hi - lo
    out = np.zeros_like(x, dtype=np.float64)
    live = span > 1e-12
    out[..., live] = 2.0 * (x[..., live] - lo[live]) / span[live] - 1.0
    return out


def _affine_from_unit(x, lo, hi):
    span = hi - lo
    out = np.broadcast_to(lo, x.shape).astype(np.float64).copy()
    live = span > 1e-12
    out[..., live] = (x[..., live] + 1.0) / 2.0 * span[live] + lo[live]
    return out


def normalize_actions(stats: NormStats, chunk: np.ndarray) -> np.ndarray:
    """Map per-dimension to [-1, 1]; constant dimensions map to 0."""
    return _affine_to_unit(np.asarray(chunk, dtype=np.float64),
                           stats.action_min, stats.action_max)


def denormalize_actions(stats: NormStats, chunk: np.ndarray) -> np.ndarray:
    return _affine_from_unit(np.asarray(chunk, dtype=np.float64),
                             stats.action_min, stats.action_max)


def normalize_proprio(stats: NormStats, proprio: np.ndarray) -> np.ndarray:
    return _affine_to_unit(np.asarray(proprio, dtype=np.float64),
                           stats.proprio_min, stats.proprio_max)


# ---------------------------------------------------------------------------
# denoiser

def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    ).to(t.device)
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _gn(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class _ResBlock1d(nn.Module):
    def __init__(self, cin: int, cout: int, cond_dim: int):
        super().__init__()
        self.conv1 = nn.Conv1d(cin, cout, 3, padding=1)
        self.gn1 = _gn(cout)
        self.conv2 = nn.Conv1d(cout, cout, 3, padding=1)
        self.gn2 = _gn(cout)
        self.film = nn.Linear(cond_dim, 2 * cout)
        self.skip = nn.Conv1d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, cond):
        h = self.gn1(self.conv1(x))
        scale, shift = self.film(cond).chunk(2, dim=-1)
        h = h * (1.0 + scale[:, :, None]) + shift[:, :, None]
        h = F.silu(h)
        h = F.silu(self.gn2(self.conv2(h)))
        return h + self.skip(x)


class DenseDenoiser(nn.Module):
    """Predicts the injected noise for a noisy normalized action chunk."""

    def __init__(self, config: DenseModelConfig):
        super().__init__()
        self.config = config
        ch = config.unet_channels

        if config.use_image:
            layers = []
            prev = 3
            for c in config.image_channels:
                layers += [nn.Conv2d(prev, c, 3, stride=2, padding=1), _gn(c), nn.SiLU()]
                prev = c
            self.image_encoder = nn.Sequential(*layers)
            spatial = config.image_size // (2 ** len(config.image_channels))
            self.image_fc = nn.Linear(prev * spatial * spatial, config.image_embed_dim)
            obs_in = config.image_embed_dim + 7
        else:
            self.image_encoder = None
            self.image_fc = None
            obs_in = 7
        self.obs_mlp = nn.Sequential(
            nn.Linear(obs_in, config.cond_hidden), nn.SiLU(),
            nn.Linear(config.cond_hidden, config.cond_hidden),
        )
        self.time_mlp = nn.Sequential(
            nn.Linear(config.time_embed_dim, config.cond_hidden), nn.SiLU(),
            nn.Linear(config.cond_hidden, config.cond_hidden),
        )
        cond_dim = 2 * config.cond_hidden

        self.in_proj = nn.Conv1d(ACTION_DIM, ch[0], 3, padding=1)
        self.down_blocks = nn.ModuleList(
            [_ResBlock1d(ch[i], ch[i], cond_dim) for i in range(len(ch))]
        )
        self.downsamples = nn.ModuleList(
            [nn.Conv1d(ch[i], ch[i + 1], 3, stride=2, padding=1)
             for i in range(len(ch) - 1)]
        )
        self.mid = _ResBlock1d(ch[-1], ch[-1], cond_dim)
        self.upsamples = nn.ModuleList(
            [nn.ConvTranspose1d(ch[i + 1], ch[i], 4, stride=2, padding=1)
             for i in reversed(range(len(ch) - 1))]
        )
        self.up_blocks = nn.ModuleList(
            [_ResBlock1d(2 * ch[i], ch[i], cond_dim)
             for i in reversed(range(len(ch) - 1))]
        )
        self.out_gn = _gn(ch[0])
        self.out_proj = nn.Conv1d(ch[0], ACTION_DIM, 3, padding=1)

    def encode_obs(self, wrist: torch.Tensor | None, proprio: torch.Tensor):
        """Observation embedding; wrist is (B, 3, H, W), proprio (B, 7)."""
        if self.config.use_image:
            if wrist is None:
                raise ValueError("config expects a wrist image")
            z = self.image_encoder(wrist)
            z = self.image_fc(z.flatten(1))
            z = torch.cat([z, proprio], dim=-1)
        else:
            z = proprio
        return self.obs_mlp(z)

    def forward(self, x: torch.Tensor, t: torch.Tensor, obs_emb: torch.Tensor):
        """x: (B, T, action); t: (B,) in 1..steps; obs_emb from encode_obs."""
        temb = self.time_mlp(
            _timestep_embedding(t, self.config.time_embed_dim).to(x.dtype)
        )
        cond = torch.cat([temb, obs_emb], dim=-1)
        h = self.in_proj(x.transpose(1, 2))
        skips = []
        for i, blk in enumerate(self.down_blocks):
            h = blk(h, cond)
            if i < len(self.downsamples):
                skips.append(h)
                h = self.downsamples[i](h)
        h = self.mid(h, cond)
        for up, blk in zip(self.upsamples, self.up_blocks):
            h = up(h)
            h = blk(torch.cat([h, skips.pop()], dim=1), cond)
        h = F.silu(self.out_gn(h))
        return self.out_proj(h).transpose(1, 2)


# ---------------------------------------------------------------------------
# training

def _obs_tensors(view, config, stats):
    props = np.stack(
        [normalize_proprio(stats, obs.proprio) for obs, _ in view], axis=0
    ).astype(np.float32)
    prop_t = torch.from_numpy(props)
    if not config.use_image:
        return None, prop_t
    imgs = np.stack([obs.wrist_image for obs, _ in view], axis=0).astype(np.float32)
    img_t = torch.from_numpy(imgs).permute(0, 3, 1, 2).contiguous()
    return img_t, prop_t


@dataclass
class TrainedDense:
    model: DenseDenoiser
    ema_model: DenseDenoiser
    stats: NormStats
    schedule: DiffusionSchedule
    model_config: DenseModelConfig
    train_config: DenseTrainConfig
    history: list


def noise_prediction_loss(model, x0, t, noise, obs_emb, schedule):
    """MSE between predicted and injected noise at timesteps t."""
    x_t = q_sample(x0, t, noise, schedule)
    return F.mse_loss(model(x_t, t, obs_emb), noise)


def train_dense(
    view,
    model_config: DenseModelConfig | None = None,
    train_config: DenseTrainConfig | None = None,
    seed: int = 0,
) -> TrainedDense:
    """DDPM training on a dense view; deterministic given the seed."""
    mc = model_config or DenseModelConfig()
    tc = train_config or DenseTrainConfig()
    if not view:
        raise ValueError("empty dense view")
    torch.manual_seed(seed)
    schedule = make_schedule(mc.diffusion_steps, mc.schedule)
    stats = NormStats.from_view(view)
    chunks = np.stack(
        [normalize_actions(stats, chunk) for _, chunk in view], axis=0
    ).astype(np.float32)
    if chunks.shape[1] != mc.t_pred:
        raise ValueError(
            f"view chunks have horizon {chunks.shape[1]}, config {mc.t_pred}"
        )
    x0_all = torch.from_numpy(chunks)
    img_all, prop_all = _obs_tensors(view, mc, stats)

    model = DenseDenoiser(mc)
    model.train()
    ema = Ema(model, tc.ema_target)
    n = x0_all.shape[0]
    steps_per_epoch = math.ceil(n / tc.batch_size)
    opt, sched = make_optimizer_and_schedule(
        model.parameters(), tc.lr, tc.epochs * steps_per_epoch,
        weight_decay=tc.weight_decay,
    )
    g = torch.Generator().manual_seed(seed * 6151 + 3)
    history = []
    for _ in range(tc.epochs):
        perm = torch.randperm(n, generator=g)
        epoch_loss = 0.0
        for i in range(0, n, tc.batch_size):
            idx = perm[i : i + tc.batch_size]
            x0 = x0_all[idx]
            obs_emb = model.encode_obs(
                img_all[idx] if img_all is not None else None, prop_all[idx]
            )
            t = torch.randint(1, schedule.steps + 1, (len(idx),), generator=g)
            noise = torch.randn(x0.shape, generator=g)
            loss = noise_prediction_loss(model, x0, t, noise, obs_emb, schedule)
            guard_finite(loss, "dense training")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip_norm)
            opt.step()
            sched.step()
            ema.update(model)
            epoch_loss += float(loss.item()) * len(idx)
        history.append(epoch_loss / n)
    model.eval()
    return TrainedDense(
        model=model,
        ema_model=ema.averaged_model(model),
        stats=stats,
        schedule=schedule,
        model_config=mc,
        train_config=tc,
        history=history,
    )


# ---------------------------------------------------------------------------
# sampling

def sample_action_chunk(
    model: DenseDenoiser,
    stats: NormStats,
    schedule: DiffusionSchedule,
    obs: DenseObservation,
    seed: int = 0,
):
    """Ancestral DDPM sampling; pure function of (model, obs, seed).

    Returns (denormalized chunk (t_pred, 8), decoded next mode).  The next
    mode is the mean of the mode dimension over the execution horizon,
    rounded half-up and clamped to {0, 1, 2}.
    """
    cfg = model.config
    was_training = model.training
    model.eval()
    g = torch.Generator().manual_seed(seed)
    try:
        with torch.no_grad():
            prop = torch.from_numpy(
                normalize_proprio(stats, obs.proprio).astype(np.float32)
            ).unsqueeze(0)
            img = None
            if cfg.use_image:
                img = (
                    torch.from_numpy(np.asarray(obs.wrist_image, dtype=np.float32))
                    .permute(2, 0, 1)
                    .unsqueeze(0)
                )
            obs_emb = model.encode_obs(img, prop)
            x = torch.randn((1, cfg.t_pred, ACTION_DIM), generator=g)
            for t in range(schedule.steps, 0, -1):
                eps = model(x, torch.tensor([t]), obs_emb)
                a_t = schedule.alphas[t - 1]
                ab_t = schedule.alpha_bar[t - 1]
                b_t = schedule.betas[t - 1]
                mean = (x - b_t / math.sqrt(1.0 - ab_t) * eps) / math.sqrt(a_t)
                if t > 1:
                    ab_prev = schedule.alpha_bar[t - 2]
                    var = b_t * (1.0 - ab_prev) / (1.0 - ab_t)
                    mean = mean + math.sqrt(var) * torch.randn(x.shape, generator=g)
                x = mean.clamp(-SAMPLE_CLIP, SAMPLE_CLIP)
    finally:
        if was_training:
            model.train()
    chunk = denormalize_actions(stats, x[0].numpy().astype(np.float64))
    mode_mean = float(chunk[: cfg.exec_horizon, 7].mean())
    next_mode = int(np.clip(math.floor(mode_mean + 0.5), 0, 2))
    return chunk, next_mode


class DensePolicy:
    """Inference bundle the executor drives: model + stats + schedule."""

    def __init__(self, model: DenseDenoiser, stats: NormStats,
                 schedule: DiffusionSchedule):
        self.model = model
        self.stats = stats
        self.schedule = schedule

    @classmethod
    def from_trained(cls, trained: TrainedDense, use_ema: bool = True):
        return cls(
            trained.ema_model if use_ema else trained.model,
            trained.stats, trained.schedule,
        )

    def sample(self, obs: DenseObservation, seed: int = 0):
        return sample_action_chunk(self.model, self.stats, self.schedule, obs, seed)
