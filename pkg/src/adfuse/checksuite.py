"""Gradient-check suite: every differentiable kernel plus the end-to-end
denoising loss, against float64 central differences.

Used by the `gradcheck` CLI subcommand and by the acceptance tests. Each
kernel gets randomized small-shape trials; the end-to-end check probes a
seeded subset of coordinates of every parameter tensor of a one-block
dual U-Net on an 8x8 input.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import ops
from .autodiff import Tensor
from .gradcheck import GradCheckResult, grad_check
from .unet import DualUNet, UNetConfig

TOLERANCE = 1e-4


def _weighted_mean(out: Tensor, rng) -> tuple:
    """Fixed random weighting makes the upstream gradient non-degenerate."""
    w = rng.standard_normal(out.data.shape)
    return lambda o: ops.mean_all(ops.mul(o, Tensor(w)))


def kernel_check_specs():
    """name -> fn(rng) returning (loss_fn, params). One randomized trial each."""

    def matmul(rng):
        n, k, m = rng.integers(1, 5, size=3)
        a = rng.standard_normal((n, k))
        b = rng.standard_normal((k, m))
        wm = rng.standard_normal((n, m))
        return (lambda ts: ops.mean_all(ops.mul(ops.matmul(ts["a"], ts["b"]), Tensor(wm))),
                {"a": a, "b": b})

    def matmul_batched(rng):
        bsz, n, k, m = 2, 3, 4, 2
        a = rng.standard_normal((bsz, n, k))
        b = rng.standard_normal((k, m))
        wm = rng.standard_normal((bsz, n, m))
        return (lambda ts: ops.mean_all(ops.mul(ops.matmul(ts["a"], ts["b"]), Tensor(wm))),
                {"a": a, "b": b})

    def conv2d(rng):
        bsz = int(rng.integers(1, 3))
        cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        h = int(rng.integers(k + 2, 8))
        pad = k // 2
        h = h - (h + 2 * pad - k) % stride  # keep the output size integral
        x = rng.standard_normal((bsz, cin, h, h))
        w = rng.standard_normal((cout, cin, k, k))
        b = rng.standard_normal(cout)
        ho = (h + 2 * pad - k) // stride + 1
        wm = rng.standard_normal((bsz, cout, ho, ho))
        return (lambda ts: ops.mean_all(ops.mul(
            ops.conv2d(ts["x"], ts["w"], ts["b"], stride, pad), Tensor(wm))),
            {"x": x, "w": w, "b": b})

    def upsample(rng):
        x = rng.standard_normal((2, 3, 4, 4))
        wm = rng.standard_normal((2, 3, 8, 8))
        return (lambda ts: ops.mean_all(ops.mul(ops.upsample2x(ts["x"]), Tensor(wm))), {"x": x})

    def avgpool(rng):
        x = rng.standard_normal((2, 3, 6, 6))
        wm = rng.standard_normal((2, 3, 3, 3))
        return (lambda ts: ops.mean_all(ops.mul(ops.avgpool2x(ts["x"]), Tensor(wm))), {"x": x})

    def group_norm(rng):
        c = int(rng.choice([4, 8]))
        x = rng.standard_normal((2, c, 3, 3))
        g = rng.standard_normal(c)
        b = rng.standard_normal(c)
        wm = rng.standard_normal(x.shape)
        groups = 4 if c % 4 == 0 else c
        return (lambda ts: ops.mean_all(ops.mul(
            ops.group_norm(ts["x"], ts["g"], ts["b"], groups), Tensor(wm))),
            {"x": x, "g": g, "b": b})

    def layer_norm(rng):
        d = int(rng.integers(2, 7))
        x = rng.standard_normal((3, d))
        g = rng.standard_normal(d)
        b = rng.standard_normal(d)
        wm = rng.standard_normal(x.shape)
        return (lambda ts: ops.mean_all(ops.mul(
            ops.layer_norm(ts["x"], ts["g"], ts["b"]), Tensor(wm))),
            {"x": x, "g": g, "b": b})

    def silu(rng):
        x = rng.standard_normal((4, 5))
        wm = rng.standard_normal(x.shape)
        return (lambda ts: ops.mean_all(ops.mul(ops.silu(ts["x"]), Tensor(wm))), {"x": x})

    def add_mul(rng):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((1, 4))  # exercises broadcast-unbroadcast
        c = rng.standard_normal((3, 4))
        wm = rng.standard_normal((3, 4))
        return (lambda ts: ops.mean_all(ops.mul(
            ops.mul(ops.add(ts["a"], ts["b"]), ts["c"]), Tensor(wm))),
            {"a": a, "b": b, "c": c})

    def concat(rng):
        a = rng.standard_normal((2, 3, 2, 2))
        b = rng.standard_normal((2, 2, 2, 2))
        wm = rng.standard_normal((2, 5, 2, 2))
        return (lambda ts: ops.mean_all(ops.mul(
            ops.concat([ts["a"], ts["b"]], axis=1), Tensor(wm))),
            {"a": a, "b": b})

    def embedding(rng):
        table = rng.standard_normal((6, 4))
        ids = rng.integers(0, 6, size=(2, 3))
        wm = rng.standard_normal((2, 3, 4))
        return (lambda ts: ops.mean_all(ops.mul(ops.embedding(ts["t"], ids), Tensor(wm))),
                {"t": table})

    def reshape_transpose(rng):
        x = rng.standard_normal((2, 3, 4))
        wm = rng.standard_normal((4, 6))
        return (lambda ts: ops.mean_all(ops.mul(
            ops.reshape(ops.transpose(ts["x"], (2, 0, 1)), (4, 6)), Tensor(wm))),
            {"x": x})

    def softmax(rng):
        x = rng.standard_normal((3, 5)) * 2.0
        wm = rng.standard_normal(x.shape)
        return (lambda ts: ops.mean_all(ops.mul(ops.softmax_lastdim(ts["x"]), Tensor(wm))), {"x": x})

    def attention(rng):
        n, m, d = (int(v) for v in rng.integers(1, 5, size=3))
        q = rng.standard_normal((n, d))
        k = rng.standard_normal((m, d))
        v = rng.standard_normal((m, d))
        wm = rng.standard_normal((n, d))
        return (lambda ts: ops.mean_all(ops.mul(
            ops.scaled_dot_attention(ts["q"], ts["k"], ts["v"]), Tensor(wm))),
            {"q": q, "k": k, "v": v})

    return {
        "matmul": matmul,
        "matmul_batched": matmul_batched,
        "conv2d": conv2d,
        "upsample2x": upsample,
        "avgpool2x": avgpool,
        "group_norm": group_norm,
        "layer_norm": layer_norm,
        "silu": silu,
        "add_mul": add_mul,
        "concat": concat,
        "embedding": embedding,
        "reshape_transpose": reshape_transpose,
        "softmax_lastdim": softmax,
        "scaled_dot_attention": attention,
    }


def run_kernel_checks(trials: int = 20, seed: int = 0) -> dict[str, float]:
    """Max relative gradient error per kernel over randomized trials."""
    results = {}
    for name, make in kernel_check_specs().items():
        worst = 0.0
        for trial in range(trials):
            rng = np.random.default_rng((seed, zlib.crc32(name.encode()), trial))
            fn, params = make(rng)
            res = grad_check(fn, params)
            worst = max(worst, res.max_rel_error)
        results[name] = worst
    return results


def tiny_dual_config() -> UNetConfig:
    return UNetConfig(base_channels=8, channel_mults=(1,), blocks_per_level=1,
                      latent_channels=3, time_dim=8, n_heads=2, token_dim=4,
                      scene_vocab=10, ff_mult=2, norm_groups=4)


def run_end_to_end_check(seed: int = 0, max_coords: int = 2) -> GradCheckResult:
    """Denoising loss of a one-block dual U-Net on an 8x8 input, checked
    against central differences over a seeded coordinate sample of every
    parameter."""
    model = DualUNet(tiny_dual_config(), seed=seed, zero_out=False)
    rng = np.random.default_rng(seed + 1)
    b, c, h, w = 1, 3, 8, 8
    z0 = rng.standard_normal((b, c, h, w))
    mask = rng.random((b, 1, h, w))
    product = rng.standard_normal((b, c, h, w))
    eps = rng.standard_normal((b, c, h, w))
    z_t = 0.6 * z0 + 0.8 * eps  # fixed mid-chain noising coefficients
    t = np.array([17] * b)
    ids = np.array([[0, 4, 7]] * b)

    def fn(ts):
        model.load_param_tensors(ts)
        dt = model.gen.dtype
        pyr = model.ref_forward(Tensor(product.astype(dt)))
        eh = model.gen_forward(Tensor(z_t.astype(dt)), Tensor(mask.astype(dt)), t, ids, pyr)
        d = ops.sub(eh, Tensor(eps.astype(dt)))
        return ops.mean_all(ops.mul(d, d))

    params = {k: v.data.copy() for k, v in model.parameters().items()}
    return grad_check(fn, params, max_coords=max_coords, seed=seed)


def run_full_suite(trials: int = 20, seed: int = 0):
    """(per-check max rel errors, overall pass flag) for CLI and CI."""
    results = run_kernel_checks(trials=trials, seed=seed)
    results["end_to_end_denoising_loss"] = run_end_to_end_check(seed=seed).max_rel_error
    return results, all(v < TOLERANCE for v in results.values())
