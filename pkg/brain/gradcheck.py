"""Central-difference gradient checking at 64-bit.

``grad_check`` compares tape gradients of a scalar function against
``(f(x + eps) - f(x - eps)) / (2 eps)`` per input entry. ``OPS`` registers a
small randomized case for every differentiable op, and ``network_grad_check``
runs the whole network on a tiny configuration.
"""
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import InstabilityError
from app.models import GradCheckReport, MPANetConfig
from brain import functional as F
from brain.attention import RelPosEmbedding, axial_position_sensitive_attention, nonlocal_attention
from brain.losses import bce_loss, soft_iou_loss
from brain.network import MPANet
from brain.tensor import Tape, Tensor

logger = logging.getLogger(__name__)

OP_TOL = 1e-4
NETWORK_TOL = 1e-3

ScalarFn = Callable[..., Tensor]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a|| + ||n||, floor)."""
    diff = np.linalg.norm(analytic - numeric)
    return float(diff / max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor))


def _finite(name: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise InstabilityError(f"{name} produced non-finite values")


def _scalar(f: ScalarFn, *args) -> float:
    value = f(*args)
    if value.size != 1:
        raise InstabilityError(f"gradient check needs a scalar function, got shape {value.shape}")
    return float(value.data.reshape(-1)[0])


def _numeric_entries(evaluate: Callable[[], float], array: np.ndarray, entries: np.ndarray, eps: float) -> np.ndarray:
    flat = array.reshape(-1)
    numeric = np.empty(len(entries))
    for k, i in enumerate(entries):
        saved = flat[i]
        flat[i] = saved + eps
        plus = evaluate()
        flat[i] = saved - eps
        minus = evaluate()
        flat[i] = saved
        numeric[k] = (plus - minus) / (2.0 * eps)
    return numeric


def _pick(size: int, max_entries: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, max_entries, replace=False))


def grad_check(
    f: ScalarFn,
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    tol: float = OP_TOL,
    name: str = "fn",
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Check d f / d inputs; ``max_entries`` samples that many entries per input."""
    rng = np.random.default_rng(seed)
    tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = f(*tensors)
        _finite(name, out.data)
        tape.backward(out)

    per_tensor = {}
    for k, t in enumerate(tensors):
        analytic = t.grad.reshape(-1)
        _finite(f"{name} gradient of input {k}", analytic)
        entries = _pick(t.size, max_entries, rng)
        numeric = _numeric_entries(lambda: _scalar(f, *tensors), t.data, entries, eps)
        _finite(f"{name} central difference of input {k}", numeric)
        per_tensor[f"input{k}"] = relative_error(analytic[entries], numeric)
    report = GradCheckReport(name=name, max_rel_error=max(per_tensor.values()), tol=tol, per_tensor=per_tensor)
    logger.debug("gradcheck %s: max rel error %.3g", name, report.max_rel_error)
    return report


# --- registered ops -----------------------------------------------------------

def _weighted_fixed(out: Tensor, weights: np.ndarray) -> Tensor:
    # fixed random projection to a scalar
    return F.sum(out * Tensor(weights))


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _unit(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(0.05, 0.95, shape)


def _case_binary(op):
    def build(rng):
        w = rng.standard_normal((3, 4))
        return (lambda a, b: _weighted_fixed(op(a, b), w)), [rng.standard_normal((3, 4)), rng.uniform(0.5, 2.0, (1, 4))]
    return build


def _unary(op, sample, shape=(3, 5)):
    def build(rng):
        w = rng.standard_normal(op(Tensor(np.zeros(shape) + 0.5)).shape)
        return (lambda x: _weighted_fixed(op(x), w)), [sample(rng, shape)]
    return build


def _conv_case(rng):
    w_out = rng.standard_normal((2, 3, 5, 5))
    return (lambda x, w, b: _weighted_fixed(F.conv2d(x, w, b, padding=1), w_out)), [
        rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    ]


def _batchnorm_case(training: bool):
    def build(rng):
        w_out = rng.standard_normal((2, 3, 3, 3))
        mean, var = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)

        def f(x, gamma, beta):
            return _weighted_fixed(F.batchnorm2d(x, gamma, beta, mean.copy(), var.copy(), training), w_out)
        return f, [rng.standard_normal((2, 3, 3, 3)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)]
    return build


def _einsum_case(rng):
    w_out = rng.standard_normal((2, 4))
    return (lambda a, b: _weighted_fixed(F.einsum("ij,kjl->il", a, b), w_out)), [
        rng.standard_normal((2, 3)), rng.standard_normal((5, 3, 4))
    ]


def _concat_case(rng):
    w_out = rng.standard_normal((2, 5, 3))
    return (lambda a, b: _weighted_fixed(F.concat([a, b], axis=1), w_out)), [
        rng.standard_normal((2, 2, 3)), rng.standard_normal((2, 3, 3))
    ]


def _matmul_case(rng):
    w_out = rng.standard_normal((2, 3, 5))
    return (lambda a, b: _weighted_fixed(a @ b, w_out)), [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))]


def _gather_case(rng):
    index = np.array([[0, 2, 2], [1, 0, 3]])
    w_out = rng.standard_normal((3, 2, 3))
    return (lambda x: _weighted_fixed(F.gather(x, index, axis=-1), w_out)), [rng.standard_normal((3, 4))]


def _attention_qkv(rng, shape=(2, 4, 3, 4)):
    return [rng.standard_normal(shape) for _ in range(3)]


def _nonlocal_case(rng):
    w_out = rng.standard_normal((2, 4, 3, 4))
    return (lambda q, k, v: _weighted_fixed(nonlocal_attention(q, k, v, heads=2, scale=True), w_out)), _attention_qkv(rng)


def _axial_case(axis: str, per_head: bool):
    def build(rng):
        w_out = rng.standard_normal((2, 4, 3, 4))
        span = 4 if axis == "width" else 3
        emb = RelPosEmbedding(axis, span, 2, 2, rng, heads=2 if per_head else None)
        tables = [emb.q_table.data.astype(np.float64), emb.k_table.data.astype(np.float64),
                  emb.v_table.data.astype(np.float64)]

        def f(q, k, v, rq, rk, rv):
            emb.q_table, emb.k_table, emb.v_table = rq, rk, rv
            y = axial_position_sensitive_attention(q, k, v, emb, axis, heads=2, scale=True)
            return _weighted_fixed(y, w_out)
        return f, _attention_qkv(rng) + tables
    return build


def _loss_case(loss):
    def build(rng):
        mask = (rng.random((2, 1, 4, 4)) > 0.6).astype(np.float64)
        return (lambda h: loss(h, mask)), [_unit(rng, (2, 1, 4, 4))]
    return build


OPS: Dict[str, Callable[[np.random.Generator], Tuple[ScalarFn, List[np.ndarray]]]] = {
    "add": _case_binary(F.add),
    "sub": _case_binary(F.sub),
    "mul": _case_binary(F.mul),
    "div": _case_binary(F.div),
    "matmul": _matmul_case,
    "einsum": _einsum_case,
    "pow": _unary(lambda x: F.power(x, 3.0), lambda r, s: r.standard_normal(s)),
    "exp": _unary(F.exp, lambda r, s: r.standard_normal(s)),
    "log": _unary(F.log, lambda r, s: r.uniform(0.5, 2.0, s)),
    "clamp": _unary(lambda x: F.clamp(x, -0.5, 0.5), lambda r, s: _away_from_zero(r, s) * 0.25),
    "relu": _unary(F.relu, _away_from_zero),
    "sigmoid": _unary(F.sigmoid, lambda r, s: r.standard_normal(s)),
    "softmax": _unary(lambda x: F.softmax(x, axis=-1), lambda r, s: r.standard_normal(s)),
    "sum": _unary(lambda x: F.sum(x, axis=0), lambda r, s: r.standard_normal(s)),
    "mean": _unary(lambda x: F.mean(x, axis=1, keepdims=True), lambda r, s: r.standard_normal(s)),
    "reshape": _unary(lambda x: F.reshape(x, (5, 3)), lambda r, s: r.standard_normal(s)),
    "transpose": _unary(lambda x: F.transpose(x, (1, 0)), lambda r, s: r.standard_normal(s)),
    "index": _unary(lambda x: x[1:, ::2], lambda r, s: r.standard_normal(s)),
    "gather": _gather_case,
    "concat": _concat_case,
    "conv2d": _conv_case,
    "batchnorm2d_train": _batchnorm_case(True),
    "batchnorm2d_eval": _batchnorm_case(False),
    "maxpool2d": _unary(F.maxpool2d, lambda r, s: r.standard_normal(s), shape=(1, 2, 4, 4)),
    "upsample_nearest": _unary(lambda x: F.upsample2x(x, "nearest"), lambda r, s: r.standard_normal(s), shape=(1, 2, 3, 3)),
    "upsample_bilinear": _unary(lambda x: F.upsample2x(x, "bilinear"), lambda r, s: r.standard_normal(s), shape=(1, 2, 3, 3)),
    "nonlocal_attention": _nonlocal_case,
    "axial_attention_height": _axial_case("height", per_head=False),
    "axial_attention_width": _axial_case("width", per_head=False),
    "axial_attention_per_head": _axial_case("width", per_head=True),
    "soft_iou_loss": _loss_case(soft_iou_loss),
    "bce_loss": _loss_case(bce_loss),
}


def check_op(name: str, seed: int = 0, tol: float = OP_TOL) -> GradCheckReport:
    f, inputs = OPS[name](np.random.default_rng(seed))
    return grad_check(f, inputs, tol=tol, name=name, seed=seed)


def run_suite(seeds: Sequence[int] = (0,), names: Optional[Sequence[str]] = None,
              tol: float = OP_TOL) -> List[GradCheckReport]:
    reports = []
    for name in names or list(OPS):
        for seed in seeds:
            report = check_op(name, seed, tol)
            report.name = f"{name}[seed={seed}]"
            reports.append(report)
            if not report.passed:
                logger.warning("gradcheck %s failed: %.3g >= %.3g", report.name, report.max_rel_error, tol)
    return reports


# --- whole network ------------------------------------------------------------

TINY_NETWORK = MPANetConfig(input_size=(16, 16), stages=2, channels=[4, 8], heads=2, patch_scales=[1, 2, 4],
                             head_prior=0.5)


def network_grad_check(
    cfg: MPANetConfig = TINY_NETWORK,
    seed: int = 0,
    eps: float = 1e-5,
    tol: float = NETWORK_TOL,
    max_entries: int = 4,
    batch: int = 1,
) -> GradCheckReport:
    """Soft-IoU loss of the full network against sampled entries of every parameter tensor."""
    rng = np.random.default_rng(seed)
    model = MPANet(cfg, seed=seed).astype(np.float64)
    model.train()
    height, width = cfg.input_size
    image = Tensor(rng.uniform(0.0, 1.0, (batch, 1, height, width)))
    mask = (rng.random((batch, 1, height, width)) > 0.9).astype(np.float64)

    def loss() -> Tensor:
        return soft_iou_loss(model(image), mask)

    with Tape() as tape:
        out = loss()
        _finite("network loss", out.data)
        tape.backward(out)

    per_tensor = {}
    for name, param in model.named_parameters():
        analytic = param.grad.reshape(-1)
        entries = _pick(param.size, max_entries, rng)
        numeric = _numeric_entries(lambda: loss().item(), param.data, entries, eps)
        _finite(f"central difference of {name}", numeric)
        per_tensor[name] = relative_error(analytic[entries], numeric)
    report = GradCheckReport(name=f"mpanet[{batch}x1x{height}x{width}, seed={seed}]",
                             max_rel_error=max(per_tensor.values()), tol=tol, per_tensor=per_tensor)
    logger.info("network gradcheck seed %d: max rel error %.3g over %d tensors",
                seed, report.max_rel_error, len(per_tensor))
    return report
