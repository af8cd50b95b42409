"""Scene encoding in the focal agent's frame.

A compact stand-in for a query-centric encoder: every coordinate is expressed
relative to the focal agent's pose at the last observed step, polylines are
pooled to one token each, and agent tokens go through temporal, agent-map and
agent-agent attention twice.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .numerics import MLP, AttentionBlock, check_finite, get_dtype
from .scenario import SEMANTICS, Scenario

POS_SCALE = 50.0
SPEED_SCALE = 10.0
MAP_FEATURES = 4 + len(SEMANTICS)
AGENT_FEATURES = 7


@dataclass(frozen=True)
class FocalFrame:
    origin: np.ndarray
    heading: float

    @property
    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.heading), np.sin(self.heading)
        return np.array([[c, -s], [s, c]])

    def to_local(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.origin) @ self.rotation

    def to_global(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.origin

    @classmethod
    def of(cls, scenario: Scenario) -> "FocalFrame":
        pos, heading, _ = scenario.focal_pose()
        return cls(pos, heading)


@dataclass
class SceneBatch:
    """Padded, focal-frame tensors for a list of scenarios (focal agent first)."""

    map_feats: torch.Tensor    # [B, M, P, MAP_FEATURES]
    point_mask: torch.Tensor   # [B, M, P]
    map_mask: torch.Tensor     # [B, M]
    map_dist: torch.Tensor     # [B, M] closest point to the focal agent, meters
    agent_feats: torch.Tensor  # [B, A, T, AGENT_FEATURES]
    step_mask: torch.Tensor    # [B, A, T]
    agent_mask: torch.Tensor   # [B, A]
    agent_order: list          # per sample: original agent index of each row
    frames: list               # per sample FocalFrame
    speeds: torch.Tensor       # [B] focal speed at last observed step
    future: torch.Tensor | None  # [B, T_fut, 2] ground truth in the focal frame
    agent_class: list

    def __len__(self):
        return self.map_feats.shape[0]

    def select(self, idx) -> "SceneBatch":
        idx = list(idx)
        t = torch.as_tensor(idx, dtype=torch.long)
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                out[f.name] = None
            elif isinstance(v, torch.Tensor):
                out[f.name] = v.index_select(0, t)
            else:
                out[f.name] = [v[i] for i in idx]
        return SceneBatch(**out)


def _polyline_features(points_local: np.ndarray, semantic: str) -> np.ndarray:
    seg = np.diff(points_local, axis=0)
    seg = np.concatenate([seg, seg[-1:]], axis=0)
    onehot = np.zeros((len(points_local), len(SEMANTICS)))
    onehot[:, SEMANTICS.index(semantic)] = 1.0
    return np.concatenate([points_local / POS_SCALE, seg / POS_SCALE, onehot], axis=1)


def collate(scenarios: Sequence[Scenario]) -> SceneBatch:
    b = len(scenarios)
    frames = [FocalFrame.of(sc) for sc in scenarios]
    m = max((len(sc.map) for sc in scenarios), default=0)
    p = max((len(pl.points) for sc in scenarios for pl in sc.map), default=2)
    a = max(len(sc.agents) for sc in scenarios)
    t = max(sc.history_steps for sc in scenarios)

    map_feats = np.zeros((b, m, p, MAP_FEATURES))
    point_mask = np.zeros((b, m, p), dtype=bool)
    map_dist = np.full((b, m), np.inf)
    agent_feats = np.zeros((b, a, t, AGENT_FEATURES))
    step_mask = np.zeros((b, a, t), dtype=bool)
    agent_mask = np.zeros((b, a), dtype=bool)
    orders = []
    futures = []
    for i, (sc, fr) in enumerate(zip(scenarios, frames)):
        for j, pl in enumerate(sc.map):
            local = fr.to_local(pl.points)
            map_feats[i, j, : len(local)] = _polyline_features(local, pl.semantic)
            point_mask[i, j, : len(local)] = True
            map_dist[i, j] = np.linalg.norm(local, axis=1).min()
        order = [sc.focal_index] + [k for k in range(len(sc.agents)) if k != sc.focal_index]
        orders.append(order)
        for row, k in enumerate(order):
            ag = sc.agents[k]
            n = len(ag.positions)
            off = t - n  # right-align histories so the last observed step is always index t-1
            local = fr.to_local(ag.positions)
            rel = np.asarray(ag.headings) - fr.heading
            valid = np.asarray(ag.valid, dtype=bool)
            feats = np.column_stack([
                local / POS_SCALE,
                np.sin(rel),
                np.cos(rel),
                np.asarray(ag.speeds) / SPEED_SCALE,
                (np.arange(n) - (n - 1)) / t,
                np.ones(n),
            ])
            feats[~valid] = 0.0
            agent_feats[i, row, off:] = feats
            step_mask[i, row, off:] = valid
            agent_mask[i, row] = True
        futures.append(fr.to_local(sc.future) if sc.future else None)

    dtype = get_dtype()
    horizons = {len(f) for f in futures if f is not None}
    future = None
    if all(f is not None for f in futures) and len(horizons) == 1:
        future = torch.as_tensor(np.stack(futures), dtype=dtype)
    return SceneBatch(
        map_feats=torch.as_tensor(map_feats, dtype=dtype),
        point_mask=torch.as_tensor(point_mask),
        map_mask=torch.as_tensor(point_mask.any(-1)),
        map_dist=torch.as_tensor(np.where(np.isinf(map_dist), 1e9, map_dist), dtype=dtype),
        agent_feats=torch.as_tensor(agent_feats, dtype=dtype),
        step_mask=torch.as_tensor(step_mask),
        agent_mask=torch.as_tensor(agent_mask),
        agent_order=orders,
        frames=frames,
        speeds=torch.as_tensor([sc.focal_pose()[2] for sc in scenarios], dtype=dtype),
        future=future,
        agent_class=[sc.agent_class for sc in scenarios],
    )


@dataclass
class SceneEmbedding:
    """Encoder output. Agent rows are focal-first within a batch."""

    map_embedding: torch.Tensor    # [B, M, D]
    map_mask: torch.Tensor
    map_dist: torch.Tensor
    agent_embedding: torch.Tensor  # [B, A, T, D]
    step_mask: torch.Tensor
    agent_mask: torch.Tensor
    frames: list
    speeds: torch.Tensor  # [B] focal speed at the last observed step
    pool_index: torch.Tensor | None = None  # [B, M, D] winning point per polyline channel

    def for_scenario(self, i: int, agent_order: list) -> tuple[torch.Tensor, torch.Tensor]:
        """(map_embedding [M, D], agent_embedding [A, T, D]) of one sample,
        with agent rows restored to the scenario's own order."""
        n = len(agent_order)
        rows = torch.empty(n, dtype=torch.long)
        rows[torch.as_tensor(agent_order)] = torch.arange(n)
        m = int(self.map_mask[i].sum())
        return self.map_embedding[i, :m], self.agent_embedding[i, rows]


class SceneEncoder(nn.Module):
    def __init__(self, hidden: int = 128, heads: int = 8, dropout: float = 0.1, rounds: int = 2):
        super().__init__()
        self.point_mlp = MLP(MAP_FEATURES, hidden, hidden)
        self.map_map = AttentionBlock(hidden, heads, dropout, self_attention=True)
        self.agent_mlp = MLP(AGENT_FEATURES, hidden, hidden)
        self.temporal = nn.ModuleList(AttentionBlock(hidden, heads, dropout, self_attention=True) for _ in range(rounds))
        self.agent_map = nn.ModuleList(AttentionBlock(hidden, heads, dropout) for _ in range(rounds))
        self.agent_agent = nn.ModuleList(AttentionBlock(hidden, heads, dropout, self_attention=True) for _ in range(rounds))

    def forward(self, batch: SceneBatch, pool_index: torch.Tensor | None = None) -> SceneEmbedding:
        """``pool_index`` replays recorded max-pool winners [B, M, D]."""
        x = self.point_mlp(batch.map_feats)
        x = x.masked_fill(~batch.point_mask.unsqueeze(-1), torch.finfo(x.dtype).min)
        if not x.shape[-2]:
            tokens = x.sum(-2)
        elif pool_index is None:
            tokens, pool_index = x.max(dim=-2)
        else:
            tokens = torch.gather(x, -2, pool_index.unsqueeze(-2)).squeeze(-2)
        tokens = torch.where(batch.map_mask.unsqueeze(-1), tokens, torch.zeros_like(tokens))
        map_emb = self.map_map(tokens, key_mask=batch.map_mask)

        h = self.agent_mlp(batch.agent_feats)
        t = h.shape[-2]
        causal = torch.ones(t, t, dtype=torch.bool).tril()
        last_valid = batch.agent_mask & batch.step_mask[..., -1]
        for temporal, agent_map, agent_agent in zip(self.temporal, self.agent_map, self.agent_agent):
            h = temporal(h, key_mask=batch.step_mask, attn_mask=causal)
            last = agent_map(h[:, :, -1], map_emb, key_mask=batch.map_mask)
            last = agent_agent(last, key_mask=last_valid)
            h = torch.cat([h[:, :, :-1], last.unsqueeze(2)], dim=2)

        check_finite(map_emb, "map embedding")
        check_finite(h, "agent embedding")
        return SceneEmbedding(
            map_embedding=map_emb,
            map_mask=batch.map_mask,
            map_dist=batch.map_dist,
            agent_embedding=h,
            step_mask=batch.step_mask,
            agent_mask=batch.agent_mask,
            frames=batch.frames,
            speeds=batch.speeds,
            pool_index=pool_index,
        )


def encode(scenario: Scenario, encoder: SceneEncoder) -> tuple[torch.Tensor, torch.Tensor, FocalFrame]:
    """Encode one scenario: (map_embedding [M, D], agent_embedding [A, T, D], frame)."""
    batch = collate([scenario])
    emb = encoder(batch)
    map_emb, agent_emb = emb.for_scenario(0, batch.agent_order[0])
    return map_emb, agent_emb, batch.frames[0]
