"""SGD training loop with momentum, weight decay, and exact resume.

Velocity update: v <- momentum*v + grad + weight_decay*param, then
param <- param - lr*v. Iterations draw one image each from the loop RNG,
so the complete training state is (parameters, velocities, iteration,
RNG state); snapshots store all four and restore bit-identical
continuation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import Detector
from .rng import Rng, mix_seed
from .snapshot import load_snapshot, save_snapshot

STATE_PREFIX = "train/"
_LOOP_STREAM = 0x1007  # keeps the loop RNG distinct from the init stream


@dataclass
class TrainConfig:
    lr_schedule: tuple = ((1500, 1e-3), (500, 1e-4))
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 1
    eval_every: int = 0
    max_iterations: int = 0  # 0 means the schedule length

    def validate(self) -> None:
        if not self.lr_schedule:
            raise ValueError("lr_schedule must have at least one phase")
        for iters, lr in self.lr_schedule:
            if iters <= 0:
                raise ValueError(f"schedule phase length must be positive, got {iters}")
            if lr <= 0:
                raise ValueError(f"learning rate must be positive, got {lr}")
        if self.max_iterations < 0 or self.eval_every < 0:
            raise ValueError("max_iterations and eval_every must be nonnegative")

    @property
    def total_iterations(self) -> int:
        scheduled = sum(iters for iters, _ in self.lr_schedule)
        return min(scheduled, self.max_iterations) if self.max_iterations else scheduled

    def lr_at(self, iteration: int) -> float:
        """Learning rate for 1-based iteration numbers."""
        bound = 0
        for iters, lr in self.lr_schedule:
            bound += iters
            if iteration <= bound:
                return lr
        return self.lr_schedule[-1][1]

    def boundaries(self) -> list:
        out = []
        acc = 0
        for iters, _ in self.lr_schedule:
            acc += iters
            out.append(acc)
        return out


def sgd_step(params: dict, velocities: dict, lr: float, momentum: float, weight_decay: float) -> None:
    """One momentum-SGD update over every parameter, in sorted name order."""
    for name in sorted(params):
        p = params[name]
        grad = p.grad if p.grad is not None else np.zeros_like(p.values)
        if not np.all(np.isfinite(grad)):
            raise RuntimeError(f"non-finite gradient in parameter {name}")
        v = velocities.get(name)
        if v is None:
            v = np.zeros_like(p.values)
        v = momentum * v + grad + weight_decay * p.values
        velocities[name] = v
        p.values = p.values - lr * v


def metrics_header(num_stages: int) -> list:
    head = ["iteration"]
    head += [f"cls_stage{t}" for t in range(1, num_stages + 1)]
    head += ["loc", "roi_cls", "roi_loc", "total"]
    head += [f"active_stage{t}" for t in range(1, num_stages + 1)]
    head += [f"reject_stage{t}" for t in range(1, num_stages + 1)]
    head += [f"mean_true_stage{t}" for t in range(1, num_stages + 1)]
    head += ["proposals"]
    return head


@dataclass
class TrainResult:
    detector: Detector
    rows: list
    header: list
    velocities: dict
    iteration: int
    rng: Rng
    eval_rows: list = field(default_factory=list)


def _pack_u64(word: int) -> tuple:
    return float(word >> 32), float(word & 0xFFFFFFFF)


def _unpack_u64(hi: float, lo: float) -> int:
    return (int(hi) << 32) | int(lo)


def save_training_snapshot(path, detector: Detector, velocities: dict, iteration: int, rng: Rng) -> None:
    payload = dict(detector.params)
    payload[STATE_PREFIX + "iteration"] = np.array([float(iteration)])
    state = []
    for word in rng.get_state():
        state.extend(_pack_u64(word))
    payload[STATE_PREFIX + "rng_state"] = np.array(state)
    for name, v in velocities.items():
        payload[STATE_PREFIX + "velocity/" + name] = v
    save_snapshot(path, payload)


def load_training_snapshot(path, detector: Detector) -> tuple:
    """Restore params into ``detector``; returns (velocities, iteration, rng_state)."""
    arrays = load_snapshot(path)
    params = {k: v for k, v in arrays.items() if not k.startswith(STATE_PREFIX)}
    detector.load_arrays(params)
    velocities = {
        k[len(STATE_PREFIX + "velocity/") :]: v.copy()
        for k, v in arrays.items()
        if k.startswith(STATE_PREFIX + "velocity/")
    }
    iteration = int(arrays[STATE_PREFIX + "iteration"][0])
    packed = arrays[STATE_PREFIX + "rng_state"]
    state = tuple(_unpack_u64(packed[2 * i], packed[2 * i + 1]) for i in range(4))
    return velocities, iteration, state


def train(
    records: list,
    detector: Detector,
    cfg: TrainConfig,
    out_dir=None,
    resume_from=None,
    eval_records: list | None = None,
) -> TrainResult:
    """Train in single-image iterations; fully reproducible per seed."""
    cfg.validate()
    if not records:
        raise ValueError("training dataset is empty")
    rng = Rng(mix_seed(cfg.seed, _LOOP_STREAM))
    velocities: dict[str, np.ndarray] = {}
    start = 0
    if resume_from is not None:
        velocities, start, state = load_training_snapshot(resume_from, detector)
        rng.set_state(state)

    assignments = [detector.assignment_for(r) for r in records]
    boundaries = set(cfg.boundaries())
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    eval_rows = []
    num_stages = detector.cascade_cfg.num_stages
    iteration = start
    for iteration in range(start + 1, cfg.total_iterations + 1):
        idx = rng.randint(len(records))
        detector.zero_grads()
        breakdown, diag, _ = detector.training_loss(records[idx], assignments[idx], rng)
        breakdown.root.backward()
        sgd_step(detector.params, velocities, cfg.lr_at(iteration), cfg.momentum, cfg.weight_decay)

        row = [float(iteration)]
        row += breakdown.per_stage_cls
        row += [breakdown.loc, breakdown.roi_cls, breakdown.roi_loc, breakdown.detection_total]
        row += [float(c) for c in diag.active_counts]
        row += diag.rejection_rates
        row += diag.mean_true_scores
        row += [float(diag.num_proposals)]
        rows.append(row)

        if cfg.eval_every and eval_records and iteration % cfg.eval_every == 0:
            from .evaluate import evaluate_detector

            report = evaluate_detector(detector, eval_records)
            eval_rows.append([float(iteration), report.map50] + list(report.ap50_per_class))

        if out_dir is not None and iteration in boundaries and iteration < cfg.total_iterations:
            save_training_snapshot(
                out_dir / f"snapshot_iter{iteration}.crpn", detector, velocities, iteration, rng
            )

    if out_dir is not None:
        save_training_snapshot(out_dir / "snapshot_final.crpn", detector, velocities, iteration, rng)

    return TrainResult(
        detector=detector,
        rows=rows,
        header=metrics_header(num_stages),
        velocities=velocities,
        iteration=iteration,
        rng=rng,
        eval_rows=eval_rows,
    )
