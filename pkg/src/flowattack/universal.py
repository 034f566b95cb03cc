"""Minibatch refinement of one perturbation across many frame pairs.

A single perturbation (per-frame pair or one shared field) is updated by
a small number of optimizer steps per minibatch on the batch-mean
penalized objective. No projection is needed to respect the budget: the
exact penalty already optimizes perturbations of limited size, so
whatever comes out of training is final.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import io as flowio
from .attack import BoxConstraint, PcfaConfig, TargetKind, default_mu, \
    penalty_value_grad, _LOSS_GRADS
from .core import FlowField, Image, Perturbation, PerturbMode, ShapeError, \
    clip01, scale_bound
from .diffflow import FlowEstimator
from .optim import LbfgsParams, lbfgs_minimize

__all__ = ["DatasetManifest", "UniversalTrainConfig", "train_universal",
           "apply_universal"]


@dataclass
class DatasetManifest:
    """An ordered list of frame pairs, file-backed or in-memory.

    File entries are (frame1, frame2[, flow]) paths, one pair per line,
    whitespace separated, resolved relative to the manifest file. All
    pairs must share one grid size; a mismatch is an error, never a
    silent resample. Unreadable pairs are skipped with a warning; an
    entirely unreadable manifest is an error.
    """

    entries: list[tuple] = field(default_factory=list)
    height: int | None = None
    width: int | None = None

    @staticmethod
    def from_file(path) -> "DatasetManifest":
        from pathlib import Path
        base = Path(path).parent
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                parts = line.split()
                if not parts or parts[0].startswith("#"):
                    continue
                if len(parts) not in (2, 3):
                    raise ValueError(f"manifest line needs 2 or 3 paths: {line!r}")
                paths = [str(base / p) for p in parts]
                entries.append(tuple(paths) if len(paths) == 3
                               else (paths[0], paths[1], None))
        return DatasetManifest(entries)

    @staticmethod
    def from_pairs(pairs) -> "DatasetManifest":
        """In-memory manifest from (Image, Image[, FlowField]) tuples."""
        entries = [(p[0], p[1], p[2] if len(p) > 2 else None) for p in pairs]
        return DatasetManifest(entries)

    def load_pairs(self) -> list[tuple[Image, Image, FlowField | None]]:
        loaded = []
        skipped = 0
        for entry in self.entries:
            try:
                f1 = entry[0] if isinstance(entry[0], Image) else flowio.read_image(entry[0])
                f2 = entry[1] if isinstance(entry[1], Image) else flowio.read_image(entry[1])
                gt = entry[2]
                if gt is not None and not isinstance(gt, FlowField):
                    gt = flowio.read_flow_any(gt)
            except (OSError, ValueError) as exc:
                skipped += 1
                warnings.warn(f"skipping unreadable pair {entry[:2]}: {exc}")
                continue
            if self.height is None:
                self.height, self.width = f1.height, f1.width
            for frame in (f1, f2):
                if (frame.height, frame.width) != (self.height, self.width):
                    raise ShapeError(
                        f"pair grid {frame.height}x{frame.width} != declared "
                        f"{self.height}x{self.width}")
            if f1.data.shape != f2.data.shape:
                raise ShapeError("frames of a pair differ in shape")
            loaded.append((f1, f2, gt))
        if not loaded:
            raise ValueError(f"no readable pairs ({skipped} skipped)")
        return loaded


@dataclass(frozen=True)
class UniversalTrainConfig:
    """Epoch/batch schedule around an inner attack configuration.

    The attack's mode picks the perturbation type, its seed drives the
    shuffle, and its box constraint must be clipping: the change of
    variables is tied to one specific frame and cannot be shared.
    """

    attack: PcfaConfig
    epochs: int = 25
    batch_size: int = 4
    steps_per_batch: int = 1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.steps_per_batch < 1:
            raise ValueError("epochs, batch_size and steps_per_batch must be >= 1")
        if self.attack.box != BoxConstraint.CLIPPING:
            raise ValueError("universal training requires the clipping box constraint")


def apply_universal(p: Perturbation, frame1: Image, frame2: Image):
    """Add the trained field(s) to a pair and clip back to valid frames."""
    if p.shape != frame1.data.shape or p.shape != frame2.data.shape:
        raise ShapeError(f"perturbation grid {p.shape} does not match frames "
                         f"{frame1.data.shape}")
    d1, d2 = p.fields()
    return clip01(frame1.data + d1), clip01(frame2.data + d2)


def train_universal(estimator: FlowEstimator, data: DatasetManifest,
                    cfg: UniversalTrainConfig) -> Perturbation:
    """Train one perturbation over the whole dataset.

    Each minibatch contributes the mean of its per-pair losses plus one
    shared penalty term on the perturbation itself (there is only one
    perturbation, so the budget term is not averaged). The same seed
    reproduces the shuffle and hence the exact result.
    """
    pairs = data.load_pairs()
    atk = cfg.attack
    shape = pairs[0][0].data.shape
    size = int(np.prod(shape))
    channels, height, width = shape
    eps_hat = scale_bound(atk.epsilon2, height * width, channels)
    mu = atk.mu if atk.mu is not None else default_mu(atk.loss, atk.target.kind,
                                                      atk.epsilon2)
    grad_fn = _LOSS_GRADS[atk.loss]
    joint = atk.mode == PerturbMode.JOINT

    targets: dict[int, np.ndarray] = {}

    def target_for(idx):
        if idx not in targets:
            f1, f2, _ = pairs[idx]
            if atk.target.kind == TargetKind.ZERO:
                tgt = np.zeros((2, height, width))
            else:
                tgt = atk.target.resolve(estimator.estimate_flow(f1, f2).data)
            targets[idx] = tgt
        return targets[idx]

    def batch_objective(batch_idx):
        def fun(x):
            if joint:
                d = x.reshape(shape)
                delta_hat = np.concatenate([x, x])
            else:
                d = None
                delta_hat = x
            total = 0.0
            gx = np.zeros_like(x)
            for idx in batch_idx:
                f1 = pairs[idx][0].data
                f2 = pairs[idx][1].data
                if joint:
                    raw1, raw2 = f1 + d, f2 + d
                else:
                    raw1 = f1 + x[:size].reshape(shape)
                    raw2 = f2 + x[size:].reshape(shape)
                p1 = np.clip(raw1, 0.0, 1.0)
                p2 = np.clip(raw2, 0.0, 1.0)
                flow, vjp = estimator.value_and_vjp(p1, p2)
                lval, gflow = grad_fn(flow, target_for(idx))
                gp1, gp2 = vjp(gflow)
                gp1 = gp1 * ((raw1 >= 0.0) & (raw1 <= 1.0))
                gp2 = gp2 * ((raw2 >= 0.0) & (raw2 <= 1.0))
                total += lval
                if joint:
                    gx += (gp1 + gp2).ravel()
                else:
                    gx += np.concatenate([gp1.ravel(), gp2.ravel()])
            n = len(batch_idx)
            total /= n
            gx /= n
            pval, gpen = penalty_value_grad(delta_hat, eps_hat, mu)
            if joint:
                gx += gpen[:size] + gpen[size:]
            else:
                gx += gpen
            return total + pval, gx
        return fun

    x = np.zeros(size if joint else 2 * size)
    rng = np.random.default_rng(atk.seed)
    params = LbfgsParams(max_steps=cfg.steps_per_batch)
    n = len(pairs)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [int(i) for i in order[start:start + cfg.batch_size]]
            x, _ = lbfgs_minimize(batch_objective(batch), x, params)

    if joint:
        return Perturbation(PerturbMode.JOINT, x.reshape(shape))
    return Perturbation(PerturbMode.DISJOINT, x[:size].reshape(shape),
                        x[size:].reshape(shape))
