"""Fast self-check suite behind ``fdloss verify``.

Each check returns ``(ok, detail)``. The suite covers gradient fidelity,
agreement with the scalar-loop oracles, loss bounds and the CIFAR-10
byte layout, and finishes in well under two minutes on one core.
"""

from __future__ import annotations

import sys
import time
from fractions import Fraction
from typing import Callable

import numpy as np

from . import functional as F
from . import oracles
from .autodiff import Tensor, matmul, no_grad
from .cam import grad_cam
from .data import encode_cifar10, parse_cifar10_bytes
from .distance import DistanceSpec, cosine_term, exp_euclidean_term, pair_loss
from .errors import FormatError
from .features import aggregate, mask
from .gradcheck import check_gradients
from .layers import ArchSpec, build
from .trainer import EnsembleConfig, joint_loss

ORACLE_TOL = 1e-10


# -- gradient checks -----------------------------------------------------------


def _pair_check(fn: Callable, ref: Callable, seed: int = 0, n: int = 12):
    rng = np.random.default_rng(seed)
    vi = Tensor(rng.uniform(0.0, 0.6, n), requires_grad=True)
    vj = Tensor(rng.uniform(0.0, 0.6, n), requires_grad=True)
    return check_gradients(lambda: fn(vi, vj), [vi, vj], reference=lambda: ref(vi.data, vj.data))


def pair_gradient_check(fn: Callable = None, seed: int = 0):
    """Autodiff of ``fn`` (default: the library pair loss) against
    central differences of the scalar reference."""
    spec = DistanceSpec()
    fn = fn or (lambda a, b: pair_loss(a, b, spec))
    return _pair_check(fn, lambda a, b: oracles.pair_loss_ref(a, b, spec.alpha, spec.beta, spec.epsilon), seed)


def toy_ensemble(seed: int = 0, n_classes: int = 3, batch: int = 4):
    """Two two-conv models on 8x8x2 inputs plus a batch to differentiate."""
    arch = ArchSpec("tiny", Fraction(1, 4), (8, 8, 2), n_classes)
    models = [build(arch, seed + 1), build(arch, seed + 2)]
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, (batch, 8, 8, 2))
    labels = rng.integers(0, n_classes, batch)
    return models, images, labels


def check_grad_ce(seed: int = 0):
    models, images, labels = toy_ensemble(seed)
    model = models[0]
    onehot = F.one_hot(labels, model.spec.n_classes)
    res = check_gradients(lambda: F.softmax_cross_entropy(model.forward(Tensor(images))[0], onehot).mean(), model.parameters())
    return res.passed(), res.summary()


def check_grad_pair_terms(seed: int = 0):
    parts = {
        "cosine": _pair_check(cosine_term, lambda a, b: oracles.pair_loss_ref(a, b, 1.0, 0.0), seed),
        "exp": _pair_check(exp_euclidean_term, lambda a, b: oracles.pair_loss_ref(a, b, 0.0, 1.0), seed),
        "combined": pair_gradient_check(seed=seed),
    }
    ok = all(r.passed() for r in parts.values())
    return ok, " ".join(f"{k}:worst={r.worst:.1e}" for k, r in parts.items())


def check_grad_joint(seed: int = 0):
    models, images, labels = toy_ensemble(seed)
    cfg = EnsembleConfig(arch=models[0].spec, m=2, epochs=1)
    params = [p for mdl in models for p in mdl.parameters()]
    res = check_gradients(lambda: joint_loss(models, images, labels, cfg), params)
    return res.passed(), res.summary()


# -- oracle equivalence ----------------------------------------------------------


def oracle_case(kind: str, rng: np.random.Generator) -> float:
    """Max absolute difference between library and oracle on one random instance."""
    if kind == "matmul":
        a, b = rng.normal(size=(rng.integers(1, 9), rng.integers(1, 9))), None
        b = rng.normal(size=(a.shape[1], rng.integers(1, 9)))
        return float(np.abs(matmul(Tensor(a), Tensor(b)).data - oracles.matmul_ref(a, b)).max())
    if kind == "conv2d":
        k = int(rng.integers(1, 4))
        h, w = (int(v) for v in rng.integers(k, 9, size=2))
        c_in, c_out = (int(v) for v in rng.integers(1, 5, size=2))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k))
        x = rng.normal(size=(h, w, c_in))
        kern, bias = rng.normal(size=(k, k, c_in, c_out)), rng.normal(size=c_out)
        got = F.conv2d(Tensor(x), Tensor(kern), Tensor(bias), stride=stride, padding=pad).data
        return float(np.abs(got - oracles.conv2d_ref(x, kern, bias, stride, pad)).max())
    if kind == "pool2d":
        window = int(rng.integers(1, 4))
        stride = int(rng.integers(1, window + 1))
        h, w = (int(v) for v in rng.integers(window, 9, size=2))
        x = rng.normal(size=(h, w, int(rng.integers(1, 5))))
        pool_kind = ("max", "avg")[int(rng.integers(0, 2))]
        got = F.pool2d(Tensor(x), window, stride, kind=pool_kind).data
        return float(np.abs(got - oracles.pool2d_ref(x, window, stride, pool_kind)).max())
    if kind == "aggregate":
        fm = rng.normal(size=tuple(int(v) for v in rng.integers(1, 9, size=3)))
        return float(np.abs(aggregate(Tensor(fm)).data - oracles.aggregate_ref(fm)).max())
    if kind == "mask":
        A = rng.normal(size=tuple(int(v) for v in rng.integers(1, 9, size=2)))
        got, tau = mask(Tensor(A))
        want, want_tau = oracles.mask_ref(A)
        return max(float(np.abs(got.data - want).max()), abs(float(tau) - want_tau))
    if kind == "pair_loss":
        n = int(rng.integers(1, 9))
        vi, vj = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        alpha, beta = rng.uniform(0, 2), rng.uniform(0, 20)
        got = pair_loss(vi, vj, DistanceSpec(alpha=alpha, beta=beta)).item()
        return abs(got - oracles.pair_loss_ref(vi, vj, alpha, beta))
    if kind == "grad_cam":
        side = int(rng.integers(8, 17))
        arch = ArchSpec("tiny", Fraction(1, 4), (side, side, int(rng.integers(1, 4))), int(rng.integers(2, 5)))
        model = build(arch, int(rng.integers(0, 2**31)))
        image = rng.uniform(0, 1, arch.input_shape)
        cls = int(rng.integers(0, arch.n_classes))
        with no_grad():
            tap = model.features(Tensor(image)).data
        want = oracles.grad_cam_ref(tap, model.params["fc.weight"].data, cls)
        return float(np.abs(grad_cam(model, image, cls).values - want).max())
    raise ValueError(f"unknown oracle kind {kind!r}")


ORACLE_KINDS = ("conv2d", "pool2d", "matmul", "aggregate", "mask", "pair_loss", "grad_cam")


def check_oracles(instances: int = 100, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = {k: max(oracle_case(k, rng) for _ in range(instances)) for k in ORACLE_KINDS}
    return all(v <= ORACLE_TOL for v in worst.values()), " ".join(f"{k}={v:.1e}" for k, v in worst.items())


# -- bounds and formats ----------------------------------------------------------


def loss_bounds(n_pairs: int = 1000, seed: int = 0, eps: float = 1e-9) -> dict[str, bool]:
    rng = np.random.default_rng(seed)
    spec = DistanceSpec()
    ok = {"cosine": True, "exp": True, "pair_loss": True}
    for _ in range(n_pairs):
        n = int(rng.integers(1, 65))
        scale = 10.0 ** rng.uniform(-3, 0.5)  # keeps exp(-d^2) above underflow
        vi, vj = rng.uniform(0, scale, n), rng.uniform(0, scale, n)
        # sparse rows mimic masked maps
        vi[rng.random(n) < 0.3] = 0.0
        vj[rng.random(n) < 0.3] = 0.0
        c = cosine_term(vi, vj).item()
        e = exp_euclidean_term(vi, vj).item()
        p = pair_loss(vi, vj, spec).item()
        ok["cosine"] &= -eps <= c <= 1 + eps
        ok["exp"] &= 0 < e <= 1
        ok["pair_loss"] &= 0 <= p <= spec.alpha + spec.beta
    return ok


def check_bounds():
    ok = loss_bounds()
    return all(ok.values()), " ".join(f"{k}={'ok' if v else 'violated'}" for k, v in ok.items())


def check_cifar_layout():
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (3, 32, 32, 3), dtype=np.uint8)
    labels = np.array([0, 9, 4])
    blob = encode_cifar10(images, labels)
    got, got_labels = parse_cifar10_bytes(blob)
    ok = np.array_equal(got, images) and np.array_equal(got_labels, labels)
    ok &= encode_cifar10(got, got_labels) == blob
    try:
        parse_cifar10_bytes(blob + bytes(3072))
        ok = False
    except FormatError:
        pass
    return bool(ok), f"records=3 bytes={len(blob)}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "grad_cross_entropy": check_grad_ce,
    "grad_pair_terms": check_grad_pair_terms,
    "grad_joint_loss": check_grad_joint,
    "oracle_equivalence": check_oracles,
    "loss_bounds": check_bounds,
    "cifar10_layout": check_cifar_layout,
}


def run(stream=None, checks: dict | None = None) -> bool:
    """Run every check, print one status line each; True iff all pass."""
    stream = stream or sys.stdout
    all_ok = True
    for name, fn in (checks or CHECKS).items():
        start = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'} {name} ({time.perf_counter() - start:.1f}s) {detail}", file=stream)
    print(f"{'all checks passed' if all_ok else 'some checks failed'}", file=stream)
    return all_ok
