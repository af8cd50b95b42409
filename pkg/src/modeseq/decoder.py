"""Sequential mode decoding with iterative refinement.

Each layer decodes modes one step at a time: the t-th input embedding
queries the bank of modes already emitted in this layer (memory), then the
focal history, nearby map tokens and neighbor agents (context). Between
layers the emitted embeddings can be reordered by predicted confidence.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import SceneBatch, SceneEmbedding, SceneEncoder
from .numerics import MLP, AttentionBlock, check_finite, init_weights

MIN_SCALE = 1e-3


@dataclass
class ModelConfig:
    hidden: int = 128
    heads: int = 8
    layers: int = 6
    future_steps: int = 30
    dropout: float = 0.1
    map_radius: float = 50.0
    step_duration: float = 0.5
    min_speed: float = 1.0


@dataclass
class ModeSequence:
    embeddings: torch.Tensor  # [B, K, D] in decoding order
    loc: torch.Tensor         # [B, K, T_fut, 2] focal frame, meters
    scale: torch.Tensor       # [B, K, T_fut, 2] Laplace scales, > 0
    conf_logits: torch.Tensor  # [B, K]
    layer_index: int

    @property
    def confidences(self) -> torch.Tensor:
        return torch.sigmoid(self.conf_logits)

    @property
    def num_modes(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class RefinementStack:
    layers: list[ModeSequence]
    permutations: list[torch.Tensor] = field(default_factory=list)  # [B, K] per transition
    pool_index: torch.Tensor | None = None  # encoder max-pool winners

    @property
    def final(self) -> ModeSequence:
        return self.layers[-1]


class ModeSeqLayer(nn.Module):
    """Memory Transformer + three-part Context Transformer + prediction heads.

    Parameters are shared across decoding steps within the layer.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, h, p = cfg.hidden, cfg.heads, cfg.dropout
        self.cfg = cfg
        self.memory = AttentionBlock(d, h, p)
        self.mode_time = AttentionBlock(d, h, p)
        self.mode_map = AttentionBlock(d, h, p)
        self.mode_agent = AttentionBlock(d, h, p)
        self.traj_head = MLP(d, d, cfg.future_steps * 4)
        self.conf_head = MLP(d, d, 1)

    def step(self, query, memory_kv, ctx):
        """Decode one mode embedding from its input embedding [B, 1, D]."""
        if memory_kv is not None:
            query = self.memory(query, kv=memory_kv)
        query = self.mode_time(query, key_mask=ctx["time_mask"], kv=ctx["time"])
        query = self.mode_map(query, key_mask=ctx["map_mask"], kv=ctx["map"])
        query = self.mode_agent(query, key_mask=ctx["agents_mask"], kv=ctx["agents"])
        return query

    def heads(self, m, reach):
        """Laplace location/scale per step and a confidence logit.

        Locations are offsets from the constant-velocity rollout, measured in
        units of the distance that rollout has covered (``reach`` [B, T_fut]).
        """
        b = m.shape[0]
        raw = self.traj_head(m).reshape(b, -1, self.cfg.future_steps, 4)
        ahead = torch.zeros_like(raw[..., :2])
        ahead[..., 0] = 1.0
        loc = (raw[..., :2] + ahead) * reach[:, None, :, None]
        scale = F.softplus(raw[..., 2:]).clamp_min(MIN_SCALE)
        return loc, scale, self.conf_head(m).squeeze(-1)

    def forward(self, prev_modes: torch.Tensor, scene: SceneEmbedding, layer_index: int = 1) -> ModeSequence:
        if prev_modes.shape[1] < 1:
            raise ValueError("at least one mode must be decoded")
        ctx = context(scene, self.cfg.map_radius)
        ctx["time"] = self.mode_time.keys_values(ctx["time"])
        ctx["map"] = self.mode_map.keys_values(ctx["map"])
        ctx["agents"] = self.mode_agent.keys_values(ctx["agents"])
        steps = torch.arange(1, self.cfg.future_steps + 1, dtype=scene.speeds.dtype)
        reach = scene.speeds.clamp_min(self.cfg.min_speed)[:, None] * self.cfg.step_duration * steps
        bank, keys, values, locs, scales, logits = [], [], [], [], [], []
        for t in range(prev_modes.shape[1]):
            memory_kv = (torch.cat(keys, dim=-2), torch.cat(values, dim=-2)) if bank else None
            m = self.step(prev_modes[:, t : t + 1], memory_kv, ctx)
            bank.append(m)
            k, v = self.memory.keys_values(m)
            keys.append(k)
            values.append(v)
            # heads run per step so every prefix is computed with identical shapes
            loc, scale, logit = self.heads(m, reach)
            locs.append(loc)
            scales.append(scale)
            logits.append(logit)
        emb = check_finite(torch.cat(bank, dim=1), "mode embeddings")
        return ModeSequence(
            embeddings=emb,
            loc=check_finite(torch.cat(locs, dim=1), "trajectories"),
            scale=torch.cat(scales, dim=1),
            conf_logits=check_finite(torch.cat(logits, dim=1), "confidences"),
            layer_index=layer_index,
        )


def context(scene: SceneEmbedding, map_radius: float) -> dict:
    """Keys for the three context attentions, taken from the scene embedding."""
    return {
        "time": scene.agent_embedding[:, 0],
        "time_mask": scene.step_mask[:, 0],
        "map": scene.map_embedding,
        "map_mask": scene.map_mask & (scene.map_dist <= map_radius),
        "agents": scene.agent_embedding[:, 1:, -1],
        "agents_mask": scene.agent_mask[:, 1:] & scene.step_mask[:, 1:, -1],
    }


def rearrange(modes: ModeSequence) -> tuple[torch.Tensor, torch.Tensor]:
    """Sort embeddings by descending confidence (stable: ties keep decoding order).

    The permutation is a constant for differentiation; gradients flow through
    the gathered embeddings.
    """
    perm = torch.sort(modes.conf_logits.detach(), dim=-1, descending=True, stable=True).indices
    idx = perm.unsqueeze(-1).expand(-1, -1, modes.embeddings.shape[-1])
    return torch.gather(modes.embeddings, 1, idx), perm


class ModeSeqDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.init_embedding = nn.Parameter(torch.zeros(cfg.hidden))
        self.layers = nn.ModuleList(ModeSeqLayer(cfg) for _ in range(cfg.layers))

    def forward(self, scene: SceneEmbedding, num_modes: int, rearrange_modes: bool = True,
                permutations=None) -> RefinementStack:
        """Decode ``num_modes`` modes through every layer.

        ``permutations`` replays a recorded reordering instead of sorting,
        which lets finite-difference checks hold the discrete choice fixed.
        """
        if num_modes < 1:
            raise ValueError("num_modes must be >= 1")
        b = scene.agent_embedding.shape[0]
        prev = self.init_embedding.expand(b, num_modes, -1)
        outputs, perms = [], []
        for i, layer in enumerate(self.layers):
            seq = layer(prev, scene, layer_index=i + 1)
            outputs.append(seq)
            if i + 1 < len(self.layers):
                if permutations is not None:
                    perm = permutations[i]
                    idx = perm.unsqueeze(-1).expand(-1, -1, seq.embeddings.shape[-1])
                    prev = torch.gather(seq.embeddings, 1, idx)
                elif rearrange_modes:
                    prev, perm = rearrange(seq)
                else:
                    prev = seq.embeddings
                    perm = torch.arange(num_modes).expand(b, -1)
                perms.append(perm)
        return RefinementStack(outputs, perms)


class ModeSeqModel(nn.Module):
    """Encoder plus decoder; the unit that gets trained and checkpointed."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SceneEncoder(cfg.hidden, cfg.heads, cfg.dropout)
        self.decoder = ModeSeqDecoder(cfg)
        init_weights(self)
        nn.init.normal_(self.decoder.init_embedding, 0.0, 0.02)

    def forward(self, batch: SceneBatch, num_modes: int, rearrange_modes: bool = True,
                permutations=None, pool_index=None) -> RefinementStack:
        """Encode and decode. ``permutations`` and ``pool_index`` replay the
        discrete choices of an earlier pass (used by gradient checks)."""
        scene = self.encoder(batch, pool_index)
        stack = self.decoder(scene, num_modes, rearrange_modes, permutations)
        stack.pool_index = scene.pool_index
        return stack


def to_global(batch: SceneBatch, modes: ModeSequence) -> np.ndarray:
    """Trajectories [B, K, T_fut, 2] in each scenario's global frame."""
    loc = modes.loc.detach().double().numpy()
    return np.stack([fr.to_global(loc[i]) for i, fr in enumerate(batch.frames)])
