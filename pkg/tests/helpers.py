import math

import numpy as np
import torch

from modeseq.decoder import ModelConfig, ModeSeqModel
from modeseq.metrics import EvalRecord
from modeseq.scenario import AgentTrack, Polyline, Scenario, wrap_angle


def rigid(sc: Scenario, theta: float, offset) -> Scenario:
    """The same scenario seen in a rotated and shifted global frame."""
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])

    def move(p):
        return (np.asarray(p) @ rot.T + np.asarray(offset)).tolist()

    return Scenario(
        map=[Polyline(move(pl.points), pl.semantic) for pl in sc.map],
        agents=[AgentTrack(move(a.positions), wrap_angle(np.asarray(a.headings) + theta).tolist(),
                           list(a.speeds), list(a.valid)) for a in sc.agents],
        focal_index=sc.focal_index,
        future=move(sc.future),
        latent_branch=sc.latent_branch,
        agent_class=sc.agent_class,
    )


def small_model(seed=0, hidden=16, heads=2, layers=2, future_steps=30, jitter=0.0):
    torch.manual_seed(seed)
    model = ModeSeqModel(ModelConfig(hidden=hidden, heads=heads, layers=layers,
                                     future_steps=future_steps, dropout=0.0))
    if jitter:
        # larger random weights so that every path visibly affects the output
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.randn_like(p) * jitter)
    return model.eval()


def parameter_groups(model) -> dict:
    """Parameter names grouped by attention block / MLP; leftovers stand alone."""
    from modeseq.numerics import MLP, AttentionBlock

    groups, taken = {}, set()
    for mod_name, mod in model.named_modules():
        if isinstance(mod, (AttentionBlock, MLP)):
            names = [f"{mod_name}.{n}" for n, _ in mod.named_parameters()]
            groups[mod_name] = names
            taken.update(names)
    for name, _ in model.named_parameters():
        if name not in taken:
            groups[name] = [name]
    return groups


def model_fd_check(model, batch, cfg, num_modes, seed, eps=1e-5, floor=1e-5):
    """Worst relative error between autograd and central differences of the
    training loss, one random direction per parameter group.

    Max-pool winners, rearrangement permutations, labels and residual signs
    are recorded at the base point and replayed, since all of them are
    constants for differentiation. ``floor`` keeps the ratio meaningful where
    the derivative sits at the finite-difference noise level
    (|loss| * machine eps / eps).
    """
    from modeseq.numerics import backward
    from modeseq.training import compute_loss

    params = dict(model.named_parameters())
    stack = model(batch, num_modes, rearrange_modes=cfg.rearrange)
    base = compute_loss(stack, batch, cfg)
    perms, pool = stack.permutations, stack.pool_index
    assignments = [p.assignment for p in base.layers]
    grads = backward(base.total, params)

    def loss():
        with torch.no_grad():
            return float(compute_loss(model(batch, num_modes, permutations=perms, pool_index=pool), batch, cfg, assignments).total)

    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for names in parameter_groups(model).values():
        dirs = {n: torch.randn(params[n].shape, generator=g, dtype=params[n].dtype) for n in names}
        analytic = sum(float((grads[n] * d).sum()) for n, d in dirs.items())
        with torch.no_grad():
            for n, d in dirs.items():
                params[n].add_(eps * d)
            up = loss()
            for n, d in dirs.items():
                params[n].sub_(2 * eps * d)
            down = loss()
            for n, d in dirs.items():
                params[n].add_(eps * d)
        numeric = (up - down) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))
    return worst


def brute_force_ap(records, soft: bool) -> float:
    """Threshold-by-threshold AP, written independently of the library.

    For every distinct confidence tau the detector keeps the predictions with
    confidence >= tau; precision is interpolated as the best precision at any
    recall at least as large, and AP sums recall increments times that value.
    Meant for ``exact_or_far_record`` instances, where a mode matches exactly
    when it lies within 1 m of the ground truth.
    """
    flags = [[bool(np.all(np.abs(t - r.ground_truth) < 1.0)) for t in r.trajectories] for r in records]
    pool = []  # (confidence, is_tp)
    for r, f in zip(records, flags):
        k_all = range(len(f))
        for k in k_all:
            c = r.confidences[k]
            better = [j for j in k_all if f[j] and (r.confidences[j] > c or (r.confidences[j] == c and j < k))]
            if f[k] and not better:
                pool.append((c, True))
            elif not (f[k] and soft):  # soft AP drops duplicate matches
                pool.append((c, False))
    n = len(records)
    points = []
    for tau in sorted({c for c, _ in pool}, reverse=True):
        kept = [t for c, t in pool if c >= tau]
        tp = sum(kept)
        points.append((tp / n, tp / len(kept)))
    ap, prev = 0.0, 0.0
    for recall, _ in points:
        if recall > prev:
            best = max(p for r_, p in points if r_ >= recall)
            ap += (recall - prev) * best
            prev = recall
    return ap


FAR = 100.0  # metres; modes this far off never match


def exact_or_far_record(match_flags, confs, sid=0, horizon=4):
    """Record whose modes equal the ground truth (match) or sit 100 m away."""
    gt = np.cumsum(np.ones((horizon, 2)), axis=0)
    trajs = np.stack([gt if m else gt + FAR for m in match_flags])
    return EvalRecord(sid, trajs, np.asarray(confs, float), gt, speed=10.0, heading=0.3)


def random_ap_instance(rng):
    records = []
    for i in range(rng.integers(1, 6)):
        k = int(rng.integers(1, 5))
        flags = rng.random(k) < 0.4
        if rng.random() < 0.5:
            confs = rng.choice([0.1, 0.3, 0.5, 0.7, 0.9], size=k)  # ties on purpose
        else:
            confs = rng.random(k)
        records.append(exact_or_far_record(flags, confs, i))
    return records
