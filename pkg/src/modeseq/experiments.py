"""Desk-scale experiment protocol on synthetic fork data.

Three training variants share data, architecture and seeds: EMTA with
rearrangement, WTA with rearrangement, and EMTA without rearrangement.
Results are cached as JSON, keyed by the protocol settings and a hash of the
modules that produce them, so a cache entry never outlives its code.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig
from .encoder import collate
from .inference import evaluate
from .scenario import generate_dataset
from .training import compute_loss, train

VARIANTS = {
    "emta": {"strategy": "emta", "rearrange": True},
    "wta": {"strategy": "wta", "rearrange": True},
    "emta_no_rearrange": {"strategy": "emta", "rearrange": False},
}


@dataclass(frozen=True)
class Protocol:
    train_count: int = 2000
    eval_count: int = 500
    branches: int = 3
    priors: tuple[float, ...] = (0.6, 0.3, 0.1)
    speed_range: tuple[float, float] = (8.0, 14.0)
    train_seed: int = 100
    eval_seed: int = 200
    D: int = 64
    L: int = 2
    K: int = 6
    epochs: int = 30
    seeds: tuple[int, ...] = (0, 1, 2)
    extrapolation: tuple[int, ...] = (6, 12, 24)

    def train_config(self, variant: str, seed: int) -> TrainConfig:
        return TrainConfig(D=self.D, L=self.L, K=self.K, epochs=self.epochs, seed=seed, **VARIANTS[variant])

    def datasets(self):
        train_set = generate_dataset(self.train_count, self.branches, self.priors, self.train_seed, self.speed_range)
        eval_set = generate_dataset(self.eval_count, self.branches, self.priors, self.eval_seed, self.speed_range)
        return train_set, eval_set


# modules whose code determines protocol results (the CLI, plotting, fusion and
# checkpoint code do not)
RESULT_MODULES = ("config", "decoder", "encoder", "experiments", "inference", "matching",
                  "metrics", "numerics", "scenario", "training")


def source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent / f"{name}.py" for name in RESULT_MODULES):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _cache_path(cache_dir, protocol: Protocol, variant: str, seed: int) -> Path:
    key = json.dumps({"protocol": asdict(protocol), "variant": variant, "seed": seed,
                      "dtype": str(torch.get_default_dtype()), "source": source_digest()}, sort_keys=True)
    return Path(cache_dir) / f"{variant}_s{seed}_{hashlib.sha256(key.encode()).hexdigest()[:16]}.json"


def sorted_confidence_violations(model, scenarios, num_modes: int, batch_size: int = 64) -> int:
    """Count forward-pass rearrangements whose reordered confidences increase anywhere."""
    bad = 0
    model.eval()
    with torch.no_grad():
        for start in range(0, len(scenarios), batch_size):
            stack = model(collate(scenarios[start : start + batch_size]), num_modes)
            for seq, perm in zip(stack.layers, stack.permutations):
                c = torch.gather(seq.confidences, 1, perm)
                bad += int((c[:, 1:] > c[:, :-1]).any(-1).sum())
    return bad


def run_variant(protocol: Protocol, variant: str, seed: int, data=None, cache_dir=None, log=print) -> dict:
    """Train one variant/seed and evaluate it; returns a JSON-serialisable summary."""
    path = None
    if cache_dir is not None:
        path = _cache_path(cache_dir, protocol, variant, seed)
        if path.is_file():
            return json.loads(path.read_text())
    train_set, eval_set = data if data is not None else protocol.datasets()
    cfg = protocol.train_config(variant, seed)
    start = time.perf_counter()
    state = train(train_set, cfg, eval_scenarios=None)
    elapsed = time.perf_counter() - start

    result = {"variant": variant, "seed": seed, "train_seconds": elapsed,
              "final_train_loss": state.history[-1]["train_loss"], "sweeps": {}}
    for inference_rearrange in sorted({cfg.rearrange, False}, reverse=True):
        rows = []
        for k in protocol.extrapolation:
            _, report = evaluate(state.model, eval_set, k, inference_rearrange, cfg.match_family, cfg.step_duration)
            rows.append({"K": k, **report.as_dict()})
        result["sweeps"]["rearrange" if inference_rearrange else "plain"] = rows
    result["metrics"] = result["sweeps"]["rearrange" if cfg.rearrange else "plain"][0]
    if cfg.rearrange:
        result["sort_violations"] = sorted_confidence_violations(state.model, eval_set, max(protocol.extrapolation))
    log(f"[{variant} seed {seed}] {elapsed:.0f}s MR {result['metrics']['MR']:.4f} "
        f"mAP {result['metrics']['mAP']:.4f} minADE {result['metrics']['minADE']:.3f}")
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(result, indent=1))
    return result


def run_protocol(protocol: Protocol, variants=tuple(VARIANTS), cache_dir=None, log=print) -> dict:
    data = None
    out = {}
    for variant in variants:
        for seed in protocol.seeds:
            cached = cache_dir is not None and _cache_path(cache_dir, protocol, variant, seed).is_file()
            if data is None and not cached:
                data = protocol.datasets()
            out[(variant, seed)] = run_variant(protocol, variant, seed, data, cache_dir, log)
    return out


def mean_metric(results: dict, variant: str, key: str, sweep: str | None = None, k_index: int = 0) -> float:
    vals = []
    for (v, _), r in results.items():
        if v == variant:
            row = r["metrics"] if sweep is None else r["sweeps"][sweep][k_index]
            vals.append(row[key])
    return float(np.mean(vals))


def overfit_single(scenario, steps: int = 2000, cfg: TrainConfig | None = None) -> dict:
    """Fit one scenario for ``steps`` optimizer steps; report the positive mode's ADE."""
    cfg = cfg or TrainConfig(D=64, L=2, K=6, dropout=0.0, batch_size=1, epochs=steps, weight_decay=0.0)
    cfg = replace(cfg, batch_size=1, epochs=steps)
    state = train([scenario], cfg)
    batch = collate([scenario])
    model = state.model.eval()
    with torch.no_grad():
        stack = model(batch, cfg.K, rearrange_modes=cfg.rearrange)
        loss = compute_loss(stack, batch, cfg)
        last = loss.layers[-1]
        pos = int(last.positive[0])
        ade = float((stack.final.loc[0, pos] - batch.future[0]).norm(dim=-1).mean())
    return {"steps": state.optimizer.step, "positive_ade": ade, "final_loss": state.history[-1]["train_loss"]}
