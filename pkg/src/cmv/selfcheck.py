"""Built-in verification suite: gradient checks against central finite
differences, loss oracles, and the structural invariants the training
pipeline depends on. Exposed through the ``selfcheck`` CLI subcommand and
reused by the test suite.

Finite-difference checks run in 64-bit with h=1e-5; the analytic gradient
must match within a relative error of 1e-4.
"""

from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as vd
from . import objectives
from . import trainer
from .autodiff import Tensor
from .model import ModelConfig, detokenize, random_tube_mask, token_grid, tubify

FD_STEP = 1e-5
FD_TOLERANCE = 1e-4


def numerical_gradient(fn, tensors, h: float = FD_STEP):
    """Central-difference gradients of a scalar function, one entry at a time.

    ``fn`` is re-evaluated with perturbed ``tensor.data`` (in place), so it
    must read the current data on every call.
    """
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = fn()
            flat[i] = original - h
            lower = fn()
            flat[i] = original
            grad[i] = (upper - lower) / (2.0 * h)
        grads.append(grad.reshape(t.data.shape))
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_gradient(build_loss, params, tolerance: float = FD_TOLERANCE) -> float:
    """Compare backward() against finite differences; returns the worst error.

    ``build_loss`` constructs the scalar loss tensor from current data.
    """
    for p in params:
        p.grad = None
    build_loss().backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    numeric = numerical_gradient(lambda: build_loss().item(), params)
    worst = max(relative_error(a, n) for a, n in zip(analytic, numeric))
    if worst > tolerance:
        raise AssertionError(f"gradient mismatch: relative error {worst:.3e} > {tolerance}")
    return worst


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


# -- gradient suite -------------------------------------------------------------


def _grad_matmul(rng):
    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    check_gradient(lambda: ad.tensor_sum(ad.square(a @ b)), [a, b])


def _grad_matmul_batched(rng):
    a, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 5)
    check_gradient(lambda: ad.tensor_sum(ad.square(a @ b)), [a, b])


def _grad_add_mul_broadcast(rng):
    a, b = _rand(rng, 2, 3, 4), _rand(rng, 1, 1, 4)
    c = _rand(rng, 4)
    check_gradient(lambda: ad.tensor_sum(ad.square((a + b) * c)), [a, b, c])


def _grad_div(rng):
    a = _rand(rng, 3, 4)
    b = Tensor(np.abs(rng.standard_normal((3, 1))) + 1.0, requires_grad=True)
    check_gradient(lambda: ad.tensor_sum(ad.square(a / b)), [a, b])


def _grad_reductions(rng):
    a = _rand(rng, 3, 4, 5)
    check_gradient(lambda: ad.tensor_sum(ad.square(ad.mean(a, axis=1))), [a])
    check_gradient(lambda: ad.tensor_sum(ad.square(ad.tensor_sum(a, axis=(0, 2)))), [a])


def _grad_gather(rng):
    a = _rand(rng, 5, 3)
    index = np.array([0, 2, 2, 4])  # duplicates must accumulate
    check_gradient(lambda: ad.tensor_sum(ad.square(ad.gather(a, index))), [a])
    b = _rand(rng, 2, 5, 3)
    batched = np.array([[0, 2, 2], [1, 3, 4]])
    check_gradient(lambda: ad.tensor_sum(ad.square(ad.gather(b, batched))), [b])


def _grad_softmax(rng):
    a = _rand(rng, 3, 6)
    w = Tensor(rng.standard_normal((3, 6)))
    check_gradient(lambda: ad.tensor_sum(ad.square(ad.softmax(a, axis=-1) * w)), [a])


def _grad_layer_norm(rng):
    x = _rand(rng, 4, 8)
    gamma = Tensor(rng.standard_normal(8) + 1.0, requires_grad=True)
    beta = _rand(rng, 8)
    check_gradient(lambda: ad.tensor_sum(ad.square(ad.layer_norm(x, gamma, beta))), [x, gamma, beta])


def _grad_gelu(rng):
    x = _rand(rng, 4, 5)
    check_gradient(lambda: ad.tensor_sum(ad.square(ad.gelu(x))), [x])


def _grad_unary(rng):
    x = _rand(rng, 3, 4)
    check_gradient(lambda: ad.tensor_sum(ad.square(ad.exp(x * 0.3))), [x])
    y = Tensor(np.abs(rng.standard_normal((3, 4))) + 0.5, requires_grad=True)
    check_gradient(lambda: ad.tensor_sum(ad.square(ad.log(y))), [y])
    check_gradient(lambda: ad.tensor_sum(ad.square(ad.sqrt(y))), [y])
    check_gradient(lambda: ad.tensor_sum(ad.square(ad.square(x))), [x])


def _grad_shape_ops(rng):
    x = _rand(rng, 2, 3, 4)
    y = _rand(rng, 2, 3, 4)
    w = Tensor(rng.standard_normal((2, 4, 6)))

    def loss():
        joined = ad.concatenate([x, y], axis=2)  # (2, 3, 8)
        moved = ad.transpose(joined, (0, 2, 1))  # (2, 8, 3)
        flat = ad.reshape(moved, (2, 4, 6))
        return ad.tensor_sum(ad.square(flat * w))

    check_gradient(loss, [x, y])


def _grad_cosine(rng):
    a, b = _rand(rng, 6), _rand(rng, 6)
    check_gradient(lambda: ad.square(objectives.cosine_sim(a, b)), [a, b])


def _grad_infonce(rng):
    online = _rand(rng, 4, 5)
    target = _rand(rng, 4, 5)
    check_gradient(lambda: objectives.infonce(online, target, 0.5), [online, target])


def _grad_recon(rng):
    pred, target = _rand(rng, 3, 7), _rand(rng, 3, 7)
    check_gradient(lambda: objectives.recon_loss(pred, target), [pred, target])


def _grad_combined(rng):
    """The weighted sum's gradient must equal the sum of the parts' gradients."""
    online = _rand(rng, 3, 4)
    target = Tensor(rng.standard_normal((3, 4)))
    pred_src = _rand(rng, 3, 4)
    pix_target = Tensor(rng.standard_normal((3, 4)))
    weight = 0.7

    def combined():
        l_r = objectives.recon_loss(pred_src * 1.0, pix_target)
        l_c = objectives.infonce(online * 1.0, target, 0.5)
        return l_r + l_c * weight

    check_gradient(combined, [online, pred_src])

    for p in (online, pred_src):
        p.grad = None
    objectives.recon_loss(pred_src * 1.0, pix_target).backward()
    recon_grad = pred_src.grad.copy()
    pred_src.grad = None
    objectives.infonce(online * 1.0, target, 0.5).backward()
    online_grad = online.grad.copy()
    online.grad = None
    pred_src.grad = None
    combined().backward()
    if not np.allclose(pred_src.grad, recon_grad, rtol=1e-12, atol=1e-12):
        raise AssertionError("combined gradient != reconstruction gradient")
    if not np.allclose(online.grad, weight * online_grad, rtol=1e-10, atol=1e-12):
        raise AssertionError("combined gradient != weight * contrastive gradient")


def _grad_cross_entropy(rng):
    logits = _rand(rng, 4, 3)
    labels = np.array([0, 2, 1, 2])
    check_gradient(lambda: trainer.cross_entropy(logits * 1.0, labels), [logits])


GRADIENT_CHECKS = [
    ("grad-matmul", _grad_matmul),
    ("grad-matmul-batched", _grad_matmul_batched),
    ("grad-add-mul-broadcast", _grad_add_mul_broadcast),
    ("grad-div", _grad_div),
    ("grad-reductions", _grad_reductions),
    ("grad-gather", _grad_gather),
    ("grad-softmax", _grad_softmax),
    ("grad-layer-norm", _grad_layer_norm),
    ("grad-gelu", _grad_gelu),
    ("grad-unary", _grad_unary),
    ("grad-shape-ops", _grad_shape_ops),
    ("grad-cosine-similarity", _grad_cosine),
    ("grad-contrastive-loss", _grad_infonce),
    ("grad-reconstruction-loss", _grad_recon),
    ("grad-combined-loss", _grad_combined),
    ("grad-cross-entropy", _grad_cross_entropy),
]


def gradient_suite(seed: int = 0) -> list[str]:
    """Run every finite-difference check; returns the list of check names."""
    rng = np.random.default_rng(seed)
    for _, fn in GRADIENT_CHECKS:
        fn(rng)
    return [name for name, _ in GRADIENT_CHECKS]


# -- oracle and invariant checks ---------------------------------------------------


def _check_loss_oracles():
    online = Tensor(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))
    target = Tensor(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))
    value = objectives.infonce(online, target, 1.0).item()
    expected = math.log(1.0 + math.exp(-1.0))
    if abs(value - expected) > 1e-9:
        raise AssertionError(f"contrastive oracle: {value} != {expected}")

    same = Tensor(np.ones((5, 4)))
    value = objectives.infonce(same, Tensor(np.ones((5, 4))), 0.37).item()
    if abs(value - math.log(5.0)) > 1e-9:
        raise AssertionError(f"indistinguishable pairs: {value} != ln 5")

    recon = objectives.recon_loss(Tensor(np.array([[2.0, 0.0]])), Tensor(np.zeros((1, 2)))).item()
    if recon != 2.0:
        raise AssertionError(f"reconstruction oracle: {recon} != 2.0")

    l_r = Tensor(np.float64(0.5))
    l_c = Tensor(np.float64(0.3))
    combined, report = objectives.total_loss(l_r, l_c, 1.0, 0.2)
    if combined.item() != 0.8 or report.total != report.recon + 1.0 * report.contrastive:
        raise AssertionError("total loss is not the exact weighted sum")


def _check_softmax_properties():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((4, 7)))
    probs = ad.softmax(x, axis=-1).data
    if not np.allclose(probs.sum(axis=-1), 1.0, atol=1e-6) or (probs <= 0).any():
        raise AssertionError("softmax rows must be positive and sum to 1")
    shifted = ad.softmax(Tensor(x.data + 3.0), axis=-1).data
    if not np.allclose(probs, shifted, atol=1e-6):
        raise AssertionError("softmax must be shift invariant")


def _check_gelu_shape():
    if ad.gelu(Tensor(np.zeros(1))).data[0] != 0.0:
        raise AssertionError("gelu(0) != 0")
    # Increasing for inputs right of the dip (the true function turns at
    # about -0.75); the dip itself stays shallow.
    grid = ad.gelu(Tensor(np.linspace(-0.7, 3.0, 200, dtype=np.float64))).data
    if not np.all(np.diff(grid) > 0):
        raise AssertionError("gelu not increasing on [-0.7, 3]")
    wide = ad.gelu(Tensor(np.linspace(-3.0, 3.0, 200, dtype=np.float64))).data
    if wide.min() < -0.18:
        raise AssertionError("gelu dip deeper than expected")


def _check_mask_plans():
    rng = np.random.default_rng(2)
    plan = random_tube_mask(1568, 0.9, rng)
    if len(plan.masked) != 1411 or len(plan.visible) != 157:
        raise AssertionError("mask counts for N=1568 at 90% must be 1411/157")
    union = np.union1d(plan.visible, plan.masked)
    if len(union) != 1568 or len(np.intersect1d(plan.visible, plan.masked)) != 0:
        raise AssertionError("mask plan must partition the token indices")


def _check_schedule():
    cfg = trainer.TrainConfig(total_epochs=10, warmup_epochs=2, base_lr=2.56e-1, batch_size=32)
    eff = cfg.effective_lr
    steps = 50
    if trainer.lr_schedule(0, steps, cfg) != 0.0:
        raise AssertionError("warmup must start at zero")
    if trainer.lr_schedule(2 * steps, steps, cfg) != eff:
        raise AssertionError("peak must equal the effective rate")
    warm_side = eff * (2 * steps - 1) / (2 * steps)
    if abs(trainer.lr_schedule(2 * steps - 1, steps, cfg) - warm_side) > 1e-12:
        raise AssertionError("warmup side of the junction is off")
    halfway = trainer.lr_schedule(2 * steps + (10 - 2) * steps // 2, steps, cfg)
    if abs(halfway - eff / 2.0) > 1e-12:
        raise AssertionError("cosine midpoint must be half the peak")
    if trainer.lr_schedule(10 * steps + 123, steps, cfg) != 0.0:
        raise AssertionError("schedule must clamp to zero after the final step")


def _check_adamw_step():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = trainer.AdamW([("p", p)], beta1=0.9, beta2=0.999, weight_decay=0.05)
    p.grad = np.array([1.0])
    opt.step(0.1)
    expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.05)
    if abs(p.data[0] - expected) > 1e-12:
        raise AssertionError(f"adamw step: {p.data[0]} != {expected}")


def _check_temporal_shift():
    cfg = vd.ShiftConfig(frames=3, rate=3, max_disturbance=0)
    if vd.clip_timestamps(2, cfg).tolist() != [2, 5, 8]:
        raise AssertionError("timestamps {2,5,8} expected for start 2, rate 3")
    if vd.clip_timestamps(0, vd.ShiftConfig(4, 2, 0), disturbance=3).tolist() != [3, 5, 7, 9]:
        raise AssertionError("shifted timestamps {3,5,7,9} expected")

    frames = np.random.default_rng(3).random((20, 1, 4, 4)).astype(np.float32)
    zero = vd.ShiftConfig(frames=4, rate=2, max_disturbance=0)
    online, target = vd.temporal_shift(frames, 1, zero, np.random.default_rng(0))
    if not np.array_equal(online.pixels, target.pixels):
        raise AssertionError("zero disturbance must give pixel-identical views")

    cfg = vd.ShiftConfig(frames=2, rate=1, max_disturbance=4)
    rng = np.random.default_rng(4)
    counts = np.zeros(5, dtype=int)
    for _ in range(10_000):
        _, shifted = vd.temporal_shift(frames, 0, cfg, rng)
        counts[int(shifted.timestamps[0])] += 1
    freqs = counts / 10_000
    if np.any(np.abs(freqs - 0.2) > 0.02):
        raise AssertionError(f"disturbance frequencies {freqs} not uniform within 0.02")


def _check_tokenization():
    if token_grid(16, 224, 224, 2, 16) != (8, 14, 14):
        raise AssertionError("full-scale grid must be 8x14x14")
    rng = np.random.default_rng(5)
    clip = rng.random((8, 1, 32, 32)).astype(np.float32)
    seq = tubify(clip, 2, 8, 96)
    if seq.tokens.shape != (64, 128):
        raise AssertionError("desk-scale tokens must be (64, 128)")
    back = detokenize(seq.tokens, seq.grid, 1, 2, 8)
    if not np.array_equal(back, clip):
        raise AssertionError("detokenize(tubify(x)) must be exact")


def _check_mini_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        dataset = vd.synthesize_dataset(8, 4, 24, 16, 16, noise_level=0.02, seed=1)
        model_cfg = ModelConfig(d_model=48, depth=1, num_heads=4, proj_dim=24,
                                decoder_width=24, decoder_depth=1, decoder_heads=2)
        cfg = trainer.TrainConfig(
            batch_size=8, total_epochs=2, warmup_epochs=1, seed=3,
            shift=vd.ShiftConfig(frames=4, rate=2, max_disturbance=2),
        )
        first = trainer.pretrain(dataset, model_cfg, cfg, tmp / "a")
        second = trainer.pretrain(dataset, model_cfg, cfg, tmp / "b")
        if (tmp / "a/metrics.jsonl").read_bytes() != (tmp / "b/metrics.jsonl").read_bytes():
            raise AssertionError("identical runs produced different metrics files")
        if Path(first).read_bytes() != Path(second).read_bytes():
            raise AssertionError("identical runs produced different checkpoints")


PROPERTY_CHECKS = [
    ("loss-oracles", _check_loss_oracles),
    ("softmax-properties", _check_softmax_properties),
    ("gelu-shape", _check_gelu_shape),
    ("mask-plan-counts", _check_mask_plans),
    ("lr-schedule", _check_schedule),
    ("adamw-hand-step", _check_adamw_step),
    ("temporal-shift", _check_temporal_shift),
    ("tokenization-roundtrip", _check_tokenization),
    ("run-determinism", _check_mini_determinism),
]


def run_all(verbose_print=print) -> bool:
    """Run gradient and property checks, printing PASS/FAIL per property."""
    rng = np.random.default_rng(0)
    ok = True
    for name, fn in GRADIENT_CHECKS:
        try:
            fn(rng)
            verbose_print(f"PASS {name}")
        except AssertionError as err:
            ok = False
            verbose_print(f"FAIL {name}: {err}")
    for name, fn in PROPERTY_CHECKS:
        try:
            fn()
            verbose_print(f"PASS {name}")
        except AssertionError as err:
            ok = False
            verbose_print(f"FAIL {name}: {err}")
    return ok
