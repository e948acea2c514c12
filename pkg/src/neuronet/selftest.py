"""Oracle suite run by ``neuronet selftest``.

Each check reports a measured error next to its allowed bound. ``perturb``
names implementations to sabotage on purpose so the negative path can be
exercised: ``conv3d`` nudges one output of the convolution kernel by one ulp.
"""
import contextlib
import math
import time
from dataclasses import dataclass

import numpy as np

from . import _kernels, oracles
from .evaluation import dice, mean_dice
from .graph import DecoderSpec, build_decoder_head, residual_unit
from .tensor import (Tape, Tensor, add, backward, batch_norm, conv3d, finite_difference_gradient,
                     leaky_relu, mul, softmax_channels, tensor_sum, upsample2x)
from .training import AdamState, adam_step, cross_entropy, total_loss

GRAD_TOL = 1e-5
ADAM_TOL = 1e-9
DICE_TOL = 1e-9
UPSAMPLE_TOL = 1e-12
CONV_CASES = 100
REL_FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    measured: float
    allowed: float
    passed: bool
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return f"{status}  {self.name:<28} measured {self.measured:.3e}  allowed {self.allowed:.1e}{extra}"


@contextlib.contextmanager
def _perturbed(perturb):
    perturb = set(perturb or ())
    unknown = perturb - {"conv3d"}
    if unknown:
        raise ValueError(f"unknown perturbation target(s): {sorted(unknown)}")
    if "conv3d" not in perturb:
        yield
        return
    original = _kernels.correlate

    def broken(xp, w, stride):
        out = original(xp, w, stride)
        out.flat[0] = np.nextafter(out.flat[0], np.inf)
        return out

    _kernels.correlate = broken
    try:
        yield
    finally:
        _kernels.correlate = original


def _rel_err(a, b):
    # the floor keeps gradients that vanish exactly (a bias followed by batch
    # norm) from turning round-off into a large ratio
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), REL_FLOOR)
    return float(np.linalg.norm(a - b) / scale)


def check_conv_oracle(rng, cases=CONV_CASES):
    worst = 0.0
    mismatches = 0
    for _ in range(cases):
        c_in, c_out = rng.integers(1, 4, 2)
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        extents = rng.integers(1, 7, 3)
        x = rng.standard_normal((c_in, *extents))
        w = rng.standard_normal((c_out, c_in, k, k, k))
        b = rng.standard_normal(c_out)
        fast = conv3d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), Tensor(b, dtype=np.float64), stride).data
        ref = oracles.direct_conv3d(x, w, b, stride)
        if fast.shape != ref.shape or not np.array_equal(fast, ref):
            mismatches += 1
            if fast.shape == ref.shape:
                worst = max(worst, float(np.abs(fast - ref).max()))
            else:
                worst = math.inf
    return CheckResult("conv3d_oracle", worst, 0.0, mismatches == 0,
                       f"{cases} cases, {mismatches} not bit-identical")


def gradient_error(build, inputs):
    """Worst relative error between tape and central-difference gradients.

    ``build`` maps a dict of Tensors to a scalar Tensor; ``inputs`` holds the
    float64 arrays to differentiate against.
    """
    tensors = {k: Tensor(v, requires_grad=True, dtype=np.float64) for k, v in inputs.items()}
    with Tape() as tape:
        loss = build(tensors)
    analytic = backward(tape, loss, tensors)
    worst = 0.0
    for name in inputs:
        def f(arr, name=name):
            trial = dict(tensors)
            trial[name] = Tensor(arr, dtype=np.float64)
            return build(trial)
        numeric = finite_difference_gradient(f, inputs[name])
        worst = max(worst, _rel_err(analytic[name], numeric))
    return worst


def gradient_cases(rng):
    r = rng.standard_normal
    cases = {}

    w_pair = r((2, 3))
    cases["add"] = (lambda t: _sum_proj(add(t["a"], t["b"]), w_pair), {"a": r((2, 3)), "b": r((2, 3))})
    cases["mul"] = (lambda t: _sum_proj(mul(t["a"], t["b"]), w_pair), {"a": r((2, 3)), "b": r((2, 3))})
    cases["sum"] = (lambda t: mul(tensor_sum(t["a"]), tensor_sum(t["a"])), {"a": r((3, 2))})
    lr_in = r((2, 3, 3, 3))
    lr_in[np.abs(lr_in) < 0.05] += 0.2      # keep clear of the kink
    w_lr = r((2, 3, 3, 3))
    cases["leaky_relu"] = (lambda t: _sum_proj(leaky_relu(t["x"], 0.1), w_lr), {"x": lr_in})
    w_conv = r((3, 4, 4, 4))
    cases["conv3d"] = (lambda t: _sum_proj(conv3d(t["x"], t["k"], t["b"], 1), w_conv),
                       {"x": r((2, 4, 4, 4)), "k": r((3, 2, 3, 3, 3)), "b": r(3)})
    w_conv2 = r((3, 2, 3, 2))
    cases["conv3d_stride2"] = (lambda t: _sum_proj(conv3d(t["x"], t["k"], t["b"], 2), w_conv2),
                               {"x": r((2, 4, 5, 3)), "k": r((3, 2, 3, 3, 3)), "b": r(3)})
    w_bn = r((3, 3, 2, 4))
    cases["batch_norm"] = (lambda t: _sum_proj(batch_norm(t["x"], t["g"], t["b"], None, True), w_bn),
                           {"x": r((3, 3, 2, 4)), "g": r(3), "b": r(3)})
    w_up = r((2, 4, 6, 2))
    cases["upsample2x"] = (lambda t: _sum_proj(upsample2x(t["x"]), w_up), {"x": r((2, 2, 3, 1))})
    w_sm = r((4, 2, 2, 2))
    cases["softmax_channels"] = (lambda t: _sum_proj(softmax_channels(t["x"]), w_sm), {"x": r((4, 2, 2, 2))})
    labels = rng.integers(0, 4, (2, 3, 2))
    cases["cross_entropy"] = (lambda t: cross_entropy(t["z"], labels), {"z": r((4, 2, 3, 2))})
    cases["total_loss"] = (lambda t: total_loss([tensor_sum(mul(t["a"], t["a"])), tensor_sum(t["b"])], [0.3, 0.7]),
                           {"a": r(3), "b": r(2)})

    unit_params = {
        "u.bn1.gamma": r(2), "u.bn1.beta": r(2),
        "u.conv1.kernel": r((3, 2, 3, 3, 3)) * 0.3, "u.conv1.bias": r(3),
        "u.bn2.gamma": r(3), "u.bn2.beta": r(3),
        "u.conv2.kernel": r((3, 3, 3, 3, 3)) * 0.3, "u.conv2.bias": r(3),
        "u.proj.kernel": r((3, 2, 1, 1, 1)), "u.proj.bias": r(3),
        "x": r((2, 4, 4, 4)),
    }
    w_unit = r((3, 2, 2, 2))
    cases["residual_unit"] = (
        lambda t: _sum_proj(residual_unit(t["x"], "u", 2, t, None, training=True), w_unit), unit_params)

    spec = DecoderSpec("p", 3)
    head_params = {
        "decoder.p.score1.kernel": r((3, 2, 1, 1, 1)), "decoder.p.score1.bias": r(3),
        "decoder.p.score2.kernel": r((3, 4, 1, 1, 1)), "decoder.p.score2.bias": r(3),
        "tap1": r((2, 4, 4, 2)), "tap2": r((4, 2, 2, 1)),
    }
    head_labels = rng.integers(0, 3, (4, 4, 2))
    cases["decoder_head"] = (
        lambda t: cross_entropy(build_decoder_head(spec, [t["tap1"], t["tap2"]], t), head_labels), head_params)
    return cases


def _sum_proj(t, weights):
    # a random linear functional keeps every output element in play
    return tensor_sum(mul(t, weights))


def check_gradients(rng):
    results = []
    for name, (build, inputs) in gradient_cases(rng).items():
        err = gradient_error(build, inputs)
        results.append(CheckResult(f"grad_{name}", err, GRAD_TOL, err < GRAD_TOL))
    return results


def check_upsample(rng):
    x = rng.standard_normal((2, 3, 2, 4))
    err = float(np.abs(upsample2x(Tensor(x, dtype=np.float64)).data - oracles.interpolate_trilinear(x)).max())
    return CheckResult("upsample_oracle", err, UPSAMPLE_TOL, err <= UPSAMPLE_TOL)


def check_adam(rng):
    theta = rng.standard_normal(5)
    grads = rng.standard_normal((3, 5))
    state = AdamState()
    params = {"p": Tensor(theta, requires_grad=True, dtype=np.float64)}
    for g in grads:
        params = adam_step(params, {"p": g}, state)
    ref = [oracles.adam_closed_form(theta[i], grads[:, i]) for i in range(5)]
    err = float(np.abs(params["p"].data - ref).max())
    # the single-step hand value: theta=1, g=1 gives 1 - lr / (1 + eps)
    one = adam_step({"q": Tensor(np.ones(1), dtype=np.float64)}, {"q": np.ones(1)}, AdamState())["q"].data[0]
    err = max(err, abs(one - (1 - 1e-3 / (1 + 1e-5))))
    return CheckResult("adam_closed_form", err, ADAM_TOL, err <= ADAM_TOL)


def check_dice(rng):
    worst = 0.0
    for _ in range(20):
        n = int(rng.integers(2, 5))
        a = rng.integers(0, n, (4, 4, 4))
        b = rng.integers(0, n, (4, 4, 4))
        for lab in range(n):
            fast, ref = dice(a, b, lab), oracles.dice_by_counting(a, b, lab)
            worst = max(worst, 0.0 if (math.isnan(fast) and math.isnan(ref)) else abs(fast - ref))
        worst = max(worst, abs(mean_dice(a, b, n) - oracles.mean_dice_by_counting(a, b, n)))
    return CheckResult("dice_oracle", worst, DICE_TOL, worst <= DICE_TOL)


def run_checks(seed=0, perturb=None):
    rng = np.random.default_rng(seed)
    with _perturbed(perturb):
        results = [check_conv_oracle(rng)]
        results += check_gradients(rng)
        results += [check_upsample(rng), check_adam(rng), check_dice(rng)]
    return results


def main(seed=0, perturb=None, out=print):
    t0 = time.perf_counter()
    results = run_checks(seed, perturb)
    for r in results:
        out(r.line())
    failed = [r.name for r in results if not r.passed]
    out(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f} s")
    if failed:
        out("failed: " + ", ".join(failed))
    return 0 if not failed else 1
