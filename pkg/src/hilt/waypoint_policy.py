"""Salient-point waypoint policy: permutation-invariant transformer over
point tokens with per-point saliency/offset heads plus rotation, gripper,
and mode tokens.

Variants:
  salient_offset     per-point saliency + offset; waypoint position is read
                     off the argmax point at inference (the full method)
  vanilla            a translation token regresses the position directly;
                     no per-point heads
  vanilla_aux_salient translation token regression plus an auxiliary
                     per-point saliency head (no offsets)

The transformer is pre-norm, has no positional embedding and no causal
mask, so per-point outputs are equivariant to input permutation and token
heads are invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .pointcloud import SALIENT_RADIUS, PointCloud, SalientTarget
from .train_utils import Ema, guard_finite, make_optimizer_and_schedule

VARIANTS = ("salient_offset", "vanilla", "vanilla_aux_salient")
BCE_EPS = 1e-7


@dataclass
class WaypointModelConfig:
    layers: int = 6
    embed_dim: int = 512
    heads: int = 8
    dropout: float = 0.1
    variant: str = "salient_offset"
    point_count: int = 1024

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    @property
    def has_salient_head(self) -> bool:
        return self.variant in ("salient_offset", "vanilla_aux_salient")

    @property
    def has_offset_head(self) -> bool:
        return self.variant == "salient_offset"

    @property
    def has_translation_token(self) -> bool:
        return self.variant != "salient_offset"


def desk_config(variant: str = "salient_offset") -> WaypointModelConfig:
    """Small preset sized for CPU tests and the desk tasks."""
    return WaypointModelConfig(
        layers=2, embed_dim=64, heads=4, dropout=0.1, variant=variant,
        point_count=256,
    )


@dataclass
class WaypointTrainConfig:
    lr: float = 1e-4
    schedule: str = "cosine"
    grad_clip_norm: float = 1.0
    batch_size: int = 64
    epochs: int = 2000
    ema_target: float = 0.9999
    temporal_alpha: float = 0.2
    translation_aug: float = 0.05
    # max |yaw| of a per-sample rigid rotation about the vertical axis
    # through the origin; cloud, waypoint, and rotation target turn
    # together.  Valid when targets parameterize rotation as yaw only
    rotation_aug: float = 0.0
    # per-sample uniform shift applied to the salient support points and the
    # waypoint only, leaving the rest of the scene in place.  Decorrelates
    # the target object's position from every other scene cue, which joint
    # shifts cannot do; probs survive because the support moves rigidly
    salient_shift_aug: float = 0.0


@dataclass
class WaypointTarget:
    position: np.ndarray
    rotation: np.ndarray
    gripper_open: float
    next_mode: int
    salient: SalientTarget

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)


@dataclass
class WaypointHeadOutput:
    salient_logits: torch.Tensor | None
    offsets: torch.Tensor | None
    rotation: torch.Tensor
    gripper_open_prob: torch.Tensor
    mode_logprobs: torch.Tensor
    translation: torch.Tensor | None = None


class _Block(nn.Module):
    """Pre-norm transformer block, full attention, no positional bias."""

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.p = dropout
        self.ln1 = nn.LayerNorm(dim)
        self.ln2 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        b, n, c = x.shape
        q, k, v = self.qkv(self.ln1(x)).chunk(3, dim=-1)
        q = q.view(b, n, self.heads, c // self.heads).transpose(1, 2)
        k = k.view(b, n, self.heads, c // self.heads).transpose(1, 2)
        v = v.view(b, n, self.heads, c // self.heads).transpose(1, 2)
        o = F.scaled_dot_product_attention(
            q, k, v, dropout_p=self.p if self.training else 0.0
        )
        o = o.transpose(1, 2).reshape(b, n, c)
        x = x + self.drop(self.proj(o))
        return x + self.drop(self.fc2(F.gelu(self.fc1(self.ln2(x)))))


@dataclass
class WaypointInference:
    position: np.ndarray
    rotation: np.ndarray
    gripper_open: float
    next_mode: int
    salient_index: int


class WaypointPolicy(nn.Module):
    def __init__(self, config: WaypointModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.point_proj = nn.Linear(6, d)
        # learned query tokens: rotation, gripper, mode, and one more that
        # the translation head reads in the direct-regression variants; in
        # salient_offset it has no head of its own and serves as a global
        # scratch channel for the per-point heads
        n_extra = 4
        self.extra_tokens = nn.Parameter(torch.randn(n_extra, d) * 0.02)
        self.blocks = nn.ModuleList(
            [_Block(d, config.heads, config.dropout) for _ in range(config.layers)]
        )
        self.ln_f = nn.LayerNorm(d)
        # the offset head reads its own token, all four (permutation
        # invariant) task tokens, and its raw coordinates.  Global context
        # such as gripper state then reaches the offsets through one linear
        # map, and the -p_i half of an offset (waypoint minus own position)
        # is expressible exactly instead of having to survive the layer norms
        # the waypoint position is read out as a soft centroid: a learned
        # selector weights the points, their weighted mean position is
        # corrected by a context-conditioned delta, and every point's offset
        # is the vector from it to that shared estimate.  Linear dependence
        # on raw positions makes the readout track scene translation by
        # construction, and the selector generalizes as a local appearance
        # cue where a free-form regression can memorize the training scenes
        if config.variant == "salient_offset":
            self.vote_sel = nn.Linear(5 * d, 1)
            self.vote_delta = nn.Linear(4 * d + 3, 3)
            # the delta's horizontal reach is capped well below the scene
            # extent, so the selector cannot collapse to uniform and leave
            # the delta to regress the position outright; vertical headroom
            # stays large for the approach and retreat heights
            self.register_buffer(
                "delta_cap", torch.tensor([0.02, 0.02, 0.2]), persistent=False
            )
        else:
            self.vote_sel = None
            self.vote_delta = None
        self.rot_head = nn.Linear(d, 3)
        self.grip_head = nn.Linear(d, 1)
        self.mode_head = nn.Linear(d, 3)
        self.trans_head = nn.Linear(d, 3) if config.has_translation_token else None
        # the saliency branch predicts a pointer distribution over points;
        # the logits are then built by expanding the training-target shape
        # (a clipped cone of SALIENT_RADIUS) around the pointed location.
        # The cross-entropy can then actually reach its floor: once the
        # pointer finds the right point the predicted distribution matches
        # the target exactly and the gradient dies, where raw per-point
        # logits chase the target's exact zeros forever.  The branch gets
        # its own small encoder over the raw features: classification
        # gradients are noisy long after the metric regressions want quiet,
        # so they are kept off the trunk entirely (classification only has
        # to be right to within the salient radius anyway, precision rides
        # on the offsets).  Built after the shared modules so the shared
        # init draws line up across variants
        if config.has_salient_head:
            sw = 48
            self.sal_enc1 = nn.Linear(6, sw)
            self.sal_enc2 = nn.Linear(2 * sw, sw)
            self.sal_head = nn.Linear(2 * sw + 3, 1)
            # scene-conditioned quadratic: with coefficients (a, b) read off
            # the context the pointer can realize a * |p|^2 + b . p, an
            # exact peak around a scene-dependent center, instead of carving
            # the peak point by point out of the per-point features
            self.sphere_head = nn.Linear(sw, 4)
            nn.init.zeros_(self.sphere_head.weight)
            nn.init.zeros_(self.sphere_head.bias)
        else:
            self.sal_enc1 = None
            self.sal_enc2 = None
            self.sal_head = None
            self.sphere_head = None

    def forward(self, features: torch.Tensor) -> WaypointHeadOutput:
        """features: (batch, D, 6) position+color rows, D = config.point_count."""
        if features.dim() != 3 or features.shape[1] != self.config.point_count:
            raise ValueError(
                f"expected (B, {self.config.point_count}, 6) features, "
                f"got {tuple(features.shape)}"
            )
        b, d_pts, _ = features.shape
        x = torch.cat(
            [
                self.point_proj(features),
                self.extra_tokens.to(features.dtype).expand(b, -1, -1),
            ],
            dim=1,
        )
        for blk in self.blocks:
            x = blk(x)
        x = self.ln_f(x)
        pts, extras = x[:, :d_pts], x[:, d_pts:]

        flat = extras.reshape(b, -1)
        p = features[..., 0:3]
        salient_logits, offsets = None, None
        if self.sal_head is not None:
            h = F.gelu(self.sal_enc1(features))
            g = h.mean(dim=1)
            h = F.gelu(self.sal_enc2(
                torch.cat([h, g[:, None, :].expand(-1, d_pts, -1)], dim=-1)
            ))
            cb = h.mean(dim=1)
            quad = self.sphere_head(cb)
            sal_in = torch.cat(
                [h, cb[:, None, :].expand(-1, d_pts, -1), p], dim=-1
            )
            pointer = (
                self.sal_head(sal_in)[..., 0]
                + quad[:, None, 3] * (p * p).sum(-1)
                + (quad[:, None, 0:3] * p).sum(-1)
            )
            q = F.softmax(pointer, dim=-1)
            # kernel is a function of the input cloud only, so parameter
            # gradients see no clamp kink.  The floor bounds the loss on a
            # mispointed example (and with it the gradient spike)
            ker = (SALIENT_RADIUS - torch.cdist(p, p)).clamp_min(0.0)
            salient_logits = torch.log(
                torch.bmm(ker, q[..., None])[..., 0] + 1e-5
            )
        if self.vote_sel is not None:
            ctx = flat[:, None, :].expand(-1, d_pts, -1)
            alpha = F.softmax(
                self.vote_sel(torch.cat([pts, ctx], dim=-1))[..., 0], dim=-1
            )
            c_hat = torch.bmm(alpha[:, None, :], p)[:, 0]
            delta = self.delta_cap * torch.tanh(
                self.vote_delta(torch.cat([flat, c_hat], dim=-1))
            )
            vote = c_hat + delta
            offsets = vote[:, None, :] - p
        translation = None
        if self.trans_head is not None:
            translation = self.trans_head(extras[:, 3])
        return WaypointHeadOutput(
            salient_logits=salient_logits,
            offsets=offsets,
            rotation=self.rot_head(extras[:, 0]),
            gripper_open_prob=torch.sigmoid(self.grip_head(extras[:, 1])[..., 0]),
            mode_logprobs=F.log_softmax(self.mode_head(extras[:, 2]), dim=-1),
            translation=translation,
        )

    def grad_clip_groups(self):
        """Parameter groups to clip separately: saliency branch vs the rest.

        A hard classification example must spike only its own branch's
        gradients, not rescale the metric heads' step through a shared norm.
        """
        branch_mods = (
            self.sal_enc1, self.sal_enc2, self.sal_head, self.sphere_head,
        )
        branch = [
            par for m in branch_mods if m is not None
            for par in m.parameters()
        ]
        ids = {id(par) for par in branch}
        main = [par for par in self.parameters() if id(par) not in ids]
        return [g for g in (main, branch) if g]

    @torch.no_grad()
    def infer(self, cloud: PointCloud) -> WaypointInference:
        """Decode one waypoint from a processed (cropped + downsampled) cloud."""
        was_training = self.training
        self.eval()
        try:
            feats = torch.from_numpy(cloud.features()).to(
                next(self.parameters()).dtype
            ).unsqueeze(0)
            out = self.forward(feats)
        finally:
            if was_training:
                self.train()
        salient_index = 0
        if out.salient_logits is not None:
            # np.argmax takes the first maximum: lowest index on ties
            salient_index = int(np.argmax(out.salient_logits[0].cpu().numpy()))
        if self.config.variant == "salient_offset":
            position = (
                cloud.positions[salient_index]
                + out.offsets[0, salient_index].cpu().numpy()
            )
        else:
            position = out.translation[0].cpu().numpy().astype(np.float64)
        mode = int(np.argmax(out.mode_logprobs[0].cpu().numpy()))
        return WaypointInference(
            position=np.asarray(position, dtype=np.float64),
            rotation=out.rotation[0].cpu().numpy().astype(np.float64),
            gripper_open=1.0 if float(out.gripper_open_prob[0]) > 0.5 else 0.0,
            next_mode=mode,
            salient_index=salient_index,
        )


# ---------------------------------------------------------------------------
# losses

def salient_loss(output: WaypointHeadOutput, target_probs: torch.Tensor) -> torch.Tensor:
    """Soft cross-entropy -sum_i p_i log p_hat_i, batch mean."""
    if output.salient_logits is None:
        raise ValueError("model variant has no saliency head")
    logp = F.log_softmax(output.salient_logits, dim=-1)
    return -(target_probs * logp).sum(dim=-1).mean()


def offset_loss(
    output: WaypointHeadOutput,
    point_positions: torch.Tensor,
    target_position: torch.Tensor,
    target_probs: torch.Tensor,
) -> torch.Tensor:
    """Mean squared offset error over the salient support only.

    Residual per point: xi - phi_i - phi_hat_i.  Points with zero target
    probability contribute nothing, exactly.
    """
    if output.offsets is None:
        raise ValueError("model variant has no offset head")
    support = target_probs > 0
    counts = support.sum(dim=-1)
    if (counts == 0).any():
        raise RuntimeError("salient support is empty; invalid target")
    resid = target_position[:, None, :] - point_positions - output.offsets
    sq = (resid * resid).sum(dim=-1)
    per_sample = (sq * support).sum(dim=-1) / counts
    return per_sample.mean()


def translation_loss(
    output: WaypointHeadOutput, target_position: torch.Tensor
) -> torch.Tensor:
    if output.translation is None:
        raise ValueError("model variant has no translation token")
    diff = target_position - output.translation
    return (diff * diff).sum(dim=-1).mean()


def auxiliary_losses(
    output: WaypointHeadOutput,
    rotation: torch.Tensor,
    gripper_open: torch.Tensor,
    next_mode: torch.Tensor,
):
    """(L_rot, L_gripper, L_mode), each a batch mean."""
    diff = rotation - output.rotation
    l_rot = (diff * diff).sum(dim=-1).mean()
    p = output.gripper_open_prob.clamp(BCE_EPS, 1.0 - BCE_EPS)
    l_grip = -(
        gripper_open * torch.log(p) + (1.0 - gripper_open) * torch.log(1.0 - p)
    ).mean()
    l_mode = -output.mode_logprobs.gather(1, next_mode[:, None])[:, 0].mean()
    return l_rot, l_grip, l_mode


@dataclass
class TargetBatch:
    probs: torch.Tensor
    position: torch.Tensor
    rotation: torch.Tensor
    gripper_open: torch.Tensor
    next_mode: torch.Tensor

    def index(self, idx) -> "TargetBatch":
        return TargetBatch(
            probs=self.probs[idx],
            position=self.position[idx],
            rotation=self.rotation[idx],
            gripper_open=self.gripper_open[idx],
            next_mode=self.next_mode[idx],
        )


def total_loss(
    output: WaypointHeadOutput,
    point_positions: torch.Tensor,
    targets: TargetBatch,
    variant: str = "salient_offset",
) -> torch.Tensor:
    """Unweighted sum of the variant's active loss components."""
    l_rot, l_grip, l_mode = auxiliary_losses(
        output, targets.rotation, targets.gripper_open, targets.next_mode
    )
    total = l_rot + l_grip + l_mode
    if variant == "salient_offset":
        total = total + salient_loss(output, targets.probs)
        total = total + offset_loss(
            output, point_positions, targets.position, targets.probs
        )
    elif variant == "vanilla":
        total = total + translation_loss(output, targets.position)
    elif variant == "vanilla_aux_salient":
        total = total + translation_loss(output, targets.position)
        total = total + salient_loss(output, targets.probs)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return total


# ---------------------------------------------------------------------------
# training

def collate(view, config: WaypointModelConfig):
    """Stack a waypoint view into dense tensors.

    Returns (features (N,D,6) float32, TargetBatch).  Every cloud must have
    exactly config.point_count points; build the view with that budget.
    """
    if not view:
        raise ValueError("empty waypoint view")
    d = config.point_count
    n = len(view)
    feats = np.empty((n, d, 6), dtype=np.float32)
    probs = np.empty((n, d), dtype=np.float32)
    pos = np.empty((n, 3), dtype=np.float32)
    rot = np.empty((n, 3), dtype=np.float32)
    grip = np.empty((n,), dtype=np.float32)
    mode = np.empty((n,), dtype=np.int64)
    for i, (cloud, tgt) in enumerate(view):
        if len(cloud) != d:
            raise ValueError(
                f"example {i} has {len(cloud)} points, expected {d}"
            )
        feats[i] = cloud.features()
        probs[i] = tgt.salient.probs
        pos[i] = tgt.position
        rot[i] = tgt.rotation
        grip[i] = tgt.gripper_open
        mode[i] = tgt.next_mode
    targets = TargetBatch(
        probs=torch.from_numpy(probs),
        position=torch.from_numpy(pos),
        rotation=torch.from_numpy(rot),
        gripper_open=torch.from_numpy(grip),
        next_mode=torch.from_numpy(mode),
    )
    return torch.from_numpy(feats), targets


def train_step(model, optimizer, scheduler, ema, features, targets, clip_norm):
    """One optimization step on total_loss; returns the scalar loss."""
    out = model(features)
    loss = total_loss(out, features[..., 0:3], targets, model.config.variant)
    guard_finite(loss, "waypoint training")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    for group in model.grad_clip_groups():
        nn.utils.clip_grad_norm_(group, clip_norm)
    optimizer.step()
    scheduler.step()
    ema.update(model)
    return float(loss.item())


@dataclass
class TrainedWaypoint:
    model: WaypointPolicy
    ema_model: WaypointPolicy
    history: list
    model_config: WaypointModelConfig
    train_config: WaypointTrainConfig


def train_waypoint(
    view,
    model_config: WaypointModelConfig,
    train_config: WaypointTrainConfig | None = None,
    seed: int = 0,
) -> TrainedWaypoint:
    """Full training loop; deterministic given the seed.

    Translation augmentation draws one uniform offset in
    [-translation_aug, +translation_aug]^3 per sample per epoch and shifts
    the cloud and target position jointly.
    """
    tc = train_config or WaypointTrainConfig()
    torch.manual_seed(seed)
    feats, targets = collate(view, model_config)
    n = feats.shape[0]
    model = WaypointPolicy(model_config)
    model.train()
    ema = Ema(model, tc.ema_target)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    opt, sched = make_optimizer_and_schedule(
        model.parameters(), tc.lr, tc.epochs * steps_per_epoch
    )
    g = torch.Generator().manual_seed(seed * 7919 + 1)
    history = []
    for _ in range(tc.epochs):
        perm = torch.randperm(n, generator=g)
        epoch_loss = 0.0
        for i in range(0, n, tc.batch_size):
            idx = perm[i : i + tc.batch_size]
            f = feats[idx].clone()
            t = targets.index(idx)
            if tc.rotation_aug > 0:
                th = (
                    torch.rand((len(idx),), generator=g) * 2.0 - 1.0
                ) * tc.rotation_aug
                cs, sn = torch.cos(th)[:, None], torch.sin(th)[:, None]
                px, py = f[:, :, 0].clone(), f[:, :, 1].clone()
                f[:, :, 0] = cs * px - sn * py
                f[:, :, 1] = sn * px + cs * py
                pos = torch.stack(
                    [
                        cs[:, 0] * t.position[:, 0] - sn[:, 0] * t.position[:, 1],
                        sn[:, 0] * t.position[:, 0] + cs[:, 0] * t.position[:, 1],
                        t.position[:, 2],
                    ],
                    dim=-1,
                )
                rot = t.rotation.clone()
                rot[:, 2] = rot[:, 2] + th
                # distances are preserved, so the salient probs carry over
                t = TargetBatch(
                    probs=t.probs,
                    position=pos,
                    rotation=rot,
                    gripper_open=t.gripper_open,
                    next_mode=t.next_mode,
                )
            if tc.salient_shift_aug > 0:
                u = (
                    torch.rand((len(idx), 3), generator=g) * 2.0 - 1.0
                ) * tc.salient_shift_aug
                m = (t.probs > 0).to(f.dtype)[..., None]
                f[:, :, 0:3] = f[:, :, 0:3] + u[:, None, :] * m
                t = TargetBatch(
                    probs=t.probs,
                    position=t.position + u,
                    rotation=t.rotation,
                    gripper_open=t.gripper_open,
                    next_mode=t.next_mode,
                )
            if tc.translation_aug > 0:
                off = (
                    torch.rand((len(idx), 3), generator=g) * 2.0 - 1.0
                ) * tc.translation_aug
                f[:, :, 0:3] += off[:, None, :]
                t = TargetBatch(
                    probs=t.probs,
                    position=t.position + off,
                    rotation=t.rotation,
                    gripper_open=t.gripper_open,
                    next_mode=t.next_mode,
                )
            loss = train_step(model, opt, sched, ema, f, t, tc.grad_clip_norm)
            epoch_loss += loss * len(idx)
        history.append(epoch_loss / n)
    model.eval()
    return TrainedWaypoint(
        model=model,
        ema_model=ema.averaged_model(model),
        history=history,
        model_config=model_config,
        train_config=tc,
    )
