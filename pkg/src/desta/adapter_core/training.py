"""Adam training loop for the adapter, plus the finite-difference check.

Training is strictly step-serial and a pure function of (dataset, config
seed): one sample per step, cycling through the dataset in order. The
decoder is never touched; tests assert its bytes are identical before
and after.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..seeding import derive64, make_rng
from .checkpoint import save_checkpoint
from .functional import FusionBatch, NonFinite, adapter_gradients, forward_loss, layer_weights
from .params import AdapterDims, AdapterParams, ToyDecoder, init_adapter, zeros_like_params

__all__ = [
    "TrainConfig",
    "TrainResult",
    "cosine_warmup_lr",
    "train_adapter",
    "GradCheckReport",
    "grad_check",
]


def cosine_warmup_lr(
    step: int, base_lr: float, warmup_steps: int, total_steps: int, min_lr: float = 0.0
) -> float:
    """Linear warmup to base_lr, then cosine decay to min_lr. step is 0-based."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    base_lr: float = 1e-2
    min_lr: float = 0.0
    warmup_steps: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    early_stop_loss: float | None = None


@dataclass
class TrainResult:
    params: AdapterParams
    loss_log: list[float]
    steps_run: int
    max_weight_sum_error: float  # worst |sum(softmax(layer logits)) - 1| seen


class _Adam:
    def __init__(self, params: AdapterParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = zeros_like_params(params)
        self.v = zeros_like_params(params)
        self.t = 0

    def step(self, params: AdapterParams, grads: AdapterParams, lr: float):
        self.t += 1
        cfg = self.cfg
        bc1 = 1.0 - cfg.beta1**self.t
        bc2 = 1.0 - cfg.beta2**self.t
        for (_, p), (_, g), (_, m), (_, v) in zip(
            params.named_tensors(),
            grads.named_tensors(),
            self.m.named_tensors(),
            self.v.named_tensors(),
        ):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


def train_adapter(
    dataset: list[FusionBatch],
    decoder: ToyDecoder,
    dims: AdapterDims,
    cfg: TrainConfig,
    initial_params: AdapterParams | None = None,
    checkpoint_path: str | None = None,
) -> TrainResult:
    """Optimize the adapter on the dataset; decoder parameters stay frozen.

    Raises NonFinite with the offending step index if the loss or any
    gradient overflows.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    params = initial_params.copy() if initial_params is not None else init_adapter(dims, cfg.seed)
    optimizer = _Adam(params, cfg)
    loss_log: list[float] = []
    weight_err = 0.0
    steps_run = 0
    for step in range(cfg.steps):
        batch = dataset[step % len(dataset)]
        try:
            loss, grads = adapter_gradients(batch, params, decoder)
        except NonFinite as exc:
            raise NonFinite(str(exc), step=step) from None
        lr = cosine_warmup_lr(step, cfg.base_lr, cfg.warmup_steps, cfg.steps, cfg.min_lr)
        optimizer.step(params, grads, lr)
        loss_log.append(loss)
        weight_err = max(weight_err, abs(layer_weights(params.aggregation).sum() - 1.0))
        steps_run = step + 1
        if cfg.early_stop_loss is not None and loss < cfg.early_stop_loss:
            break
    result = TrainResult(params, loss_log, steps_run, weight_err)
    if checkpoint_path:
        rng_state = {"algorithm": "none", "note": "training is rng-free after init"}
        save_checkpoint(checkpoint_path, params, dims, steps_run, rng_state)
    return result


# ---------------------------------------------------------------------------
# Finite-difference validation
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]
    tolerance: float
    passed: bool

    def render(self) -> str:
        lines = [f"{'tensor':<28} {'rel error':>12}"]
        for name, err in sorted(self.per_tensor.items(), key=lambda kv: -kv[1]):
            lines.append(f"{name:<28} {err:>12.3e}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"max relative error {self.max_rel_error:.3e} "
                     f"(tolerance {self.tolerance:.1e}): {verdict}")
        return "\n".join(lines)


def _random_batch(dims: AdapterDims, seed: int, with_transcript: bool) -> FusionBatch:
    rng = make_rng("gradcheck-batch", seed)
    states = {
        layer: rng.normal(0.0, 1.0, (3, dims.d)) for layer in dims.layers
    }
    prompt = rng.integers(0, dims.vocab, size=2)
    target = rng.integers(0, dims.vocab, size=3)
    transcript = rng.integers(0, dims.vocab, size=2) if with_transcript else None
    return FusionBatch(states, prompt, target, transcript)


def grad_check(
    seed: int,
    dims: AdapterDims | None = None,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    perturb: bool = False,
) -> GradCheckReport:
    """Central finite differences against the analytic gradients.

    Every trainable tensor is checked element-wise at reduced dims. The
    per-tensor relative error is max|analytic - numeric| normalized by
    the largest magnitude in either, floored to dodge 0/0.

    perturb deliberately corrupts one gradient (CLI fault-injection hook).
    """
    if dims is None:
        dims = AdapterDims(
            d=8, dp=8, n_queries=2, blocks=2, heads=2, vocab=16,
            layers=(1, 2), ffn_mult=2, dec_heads=2,
        )
    from .params import make_decoder  # local import to avoid cycle at module load

    decoder = make_decoder(dims, derive64("gradcheck-decoder", seed))
    params = init_adapter(dims, derive64("gradcheck-params", seed))
    batch = _random_batch(dims, seed, with_transcript=bool(seed % 2))

    _, analytic = adapter_gradients(batch, params, decoder)
    if perturb:
        analytic.aggregation.proj_w[0, 0] += 1e-2

    per_tensor: dict[str, float] = {}
    analytic_map = dict(analytic.named_tensors())
    for name, tensor in params.named_tensors():
        numeric = np.zeros_like(tensor)
        flat = tensor.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            up, _ = forward_loss(params, decoder, batch)
            flat[i] = original - eps
            down, _ = forward_loss(params, decoder, batch)
            flat[i] = original
            num_flat[i] = (up - down) / (2.0 * eps)
        a = analytic_map[name]
        scale = max(float(np.abs(a).max()), float(np.abs(numeric).max()), 1e-8)
        per_tensor[name] = float(np.abs(a - numeric).max()) / scale
    max_rel = max(per_tensor.values())
    return GradCheckReport(max_rel, per_tensor, tolerance, max_rel < tolerance)
