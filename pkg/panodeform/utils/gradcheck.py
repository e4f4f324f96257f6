# -*- coding: utf-8 -*-
"""Chequeo de gradientes por diferencias finitas centradas.

Cada chequeo registrado construye, para una forma aleatoria, una función
sin argumentos que retorna un :class:`~panodeform.numcore.Tensor` y las
hojas respecto de las cuales se deriva. La salida se proyecta sobre una
dirección aleatoria fija (``sum(out * probe)``) para obtener un escalar;
el gradiente analítico de esa proyección se compara entrada por entrada
con ``(L(x + h) - L(x - h)) / 2h``.

Una entrada pasa si ``rel <= 1e-4`` o ``abs <= 1e-8`` con
``rel = |a - n| / max(|a|, |n|, 1e-6)``.

Example:

    >>> results = run_checks("op", seed=0)
    >>> assert_passed(results)

"""
from dataclasses import dataclass
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional

import numpy as np

from panodeform import logger
from panodeform.deform import dmlp_groups
from panodeform.deform import dmlp_mix
from panodeform.deform import dpe
from panodeform.deform import predict_offsets
from panodeform.exceptions import GradcheckFailed
from panodeform.exceptions import InvalidSize
from panodeform.layers import Module
from panodeform.numcore import IGNORE_INDEX
from panodeform.numcore import Tensor
from panodeform.numcore import bilinear_sample
from panodeform.numcore import clamp
from panodeform.numcore import cross_entropy
from panodeform.numcore import kl_div
from panodeform.numcore import layernorm
from panodeform.numcore import matmul
from panodeform.numcore import no_grad
from panodeform.numcore import softmax
from panodeform.numcore import upsample_bilinear
from panodeform.schemas import ModelConfig
from panodeform.schemas import PatchEmbedConfig
from panodeform.trans4pass import Trans4PASS
from panodeform.utils.rng import stream

STEP = 1e-5
RTOL = 1e-4
ATOL = 1e-8
REL_FLOOR = 1e-6
TRIALS = 5

SCOPES = ("op", "module", "model")


@dataclass
class Case:
    """Una instancia concreta de un chequeo.

    ``entries`` limita cuántas posiciones por hoja se perturban (todas si
    es ``None``).

    """

    fn: Callable[[], Tensor]
    inputs: Dict[str, Tensor]
    entries: Optional[int] = None


@dataclass(frozen=True)
class Check:
    name: str
    scope: str
    build: Callable[[np.random.Generator, int], Case]


@dataclass
class CheckResult:
    name: str
    scope: str
    trials: int
    max_rel: float
    max_abs: float
    passed: bool


REGISTRY: Dict[str, Check] = {}


def register(name: str, scope: str = "op"):
    """Decorador que agrega un constructor de casos al registro."""
    if scope not in SCOPES:
        raise InvalidSize(size=scope, op="gradcheck.register")

    def decorator(build):
        REGISTRY[name] = Check(name=name, scope=scope, build=build)
        return build

    return decorator


def entry_error(analytic: float, numeric: float) -> Dict[str, float]:
    err = abs(analytic - numeric)
    rel = err / max(abs(analytic), abs(numeric), REL_FLOOR)
    return {"abs": err, "rel": rel, "ok": rel <= RTOL or err <= ATOL}


def compare(
    case: Case, rng: np.random.Generator, step: float = STEP
) -> Dict[str, float]:
    """Peor error relativo y absoluto de un caso."""
    for leaf in case.inputs.values():
        leaf.requires_grad = True
        leaf.grad = None
    out = case.fn()
    probe = rng.standard_normal(out.shape)
    (out * Tensor(probe)).sum().backward()

    def objective() -> float:
        with no_grad():
            return float(np.sum(case.fn().data * probe))

    worst = {"rel": 0.0, "abs": 0.0, "ok": True}
    for leaf in case.inputs.values():
        analytic = (
            leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        )
        positions = np.arange(leaf.size)
        if case.entries is not None and case.entries < leaf.size:
            positions = rng.choice(leaf.size, case.entries, replace=False)
        for flat in positions:
            index = np.unravel_index(int(flat), leaf.shape)
            original = leaf.data[index]
            leaf.data[index] = original + step
            plus = objective()
            leaf.data[index] = original - step
            minus = objective()
            leaf.data[index] = original
            error = entry_error(
                float(analytic[index]), (plus - minus) / (2 * step)
            )
            worst["rel"] = max(worst["rel"], error["rel"])
            worst["abs"] = max(worst["abs"], error["abs"])
            worst["ok"] = worst["ok"] and error["ok"]
    return worst


def run_check(
    check: Check, seed: int = 0, trials: int = TRIALS
) -> CheckResult:
    rng = stream(seed, "gradcheck." + check.name)
    max_rel, max_abs, passed = 0.0, 0.0, True
    for trial in range(trials):
        worst = compare(check.build(rng, trial), rng)
        max_rel = max(max_rel, worst["rel"])
        max_abs = max(max_abs, worst["abs"])
        passed = passed and worst["ok"]
    result = CheckResult(
        name=check.name,
        scope=check.scope,
        trials=trials,
        max_rel=max_rel,
        max_abs=max_abs,
        passed=passed,
    )
    logger.debug("gradcheck", **result.__dict__)
    return result


def checks_for(scope: str = "model") -> List[Check]:
    """Chequeos hasta ``scope`` inclusive (``model`` corre todos)."""
    if scope not in SCOPES:
        raise InvalidSize(size=scope, op="gradcheck")
    depth = SCOPES.index(scope)
    return [c for c in REGISTRY.values() if SCOPES.index(c.scope) <= depth]


def run_checks(
    scope: str = "model",
    seed: int = 0,
    trials: int = TRIALS,
    names: Optional[List[str]] = None,
) -> List[CheckResult]:
    checks = checks_for(scope)
    if names:
        checks = [c for c in checks if c.name in names]
    return [run_check(check, seed, trials) for check in checks]


def failed(results: List[CheckResult]) -> List[str]:
    return [r.name for r in results if not r.passed]


def assert_passed(results: List[CheckResult]) -> None:
    names = failed(results)
    if names:
        raise GradcheckFailed(ops=", ".join(names))


def render_table(results: List[CheckResult]) -> str:
    header = "{:<24} {:<7} {:>10} {:>10}  ok"
    lines = [header.format("check", "scope", "max_rel", "max_abs")]
    for r in results:
        lines.append(
            "{:<24} {:<7} {:>10.2e} {:>10.2e}  {}".format(
                r.name,
                r.scope,
                r.max_rel,
                r.max_abs,
                "PASS" if r.passed else "FAIL",
            )
        )
    return "\n".join(lines) + "\n"


# Casos -----------------------------------------------------------------------


def _dims(rng: np.random.Generator, count: int, low=1, high=5) -> List[int]:
    return [int(v) for v in rng.integers(low, high + 1, size=count)]


def _leaf(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


def _fractional(rng, low: float, high: float, shape) -> np.ndarray:
    """Coordenadas lejos de enteros (el bilineal no es derivable ahí)."""
    base = rng.integers(int(np.floor(low)), int(np.ceil(high)), size=shape)
    return base + rng.uniform(0.1, 0.9, size=shape)


@register("matmul")
def _matmul(rng, trial):  # pylint: disable=unused-argument
    m, k, n = _dims(rng, 3)
    a = _leaf(rng.standard_normal((m, k)))
    b = _leaf(rng.standard_normal((k, n)))
    return Case(lambda: matmul(a, b), {"a": a, "b": b})


@register("softmax")
def _softmax(rng, trial):
    shape = tuple(_dims(rng, 1 + trial % 3))
    x = _leaf(rng.standard_normal(shape) * 2)
    axis = int(rng.integers(0, len(shape)))
    return Case(lambda: softmax(x, axis=axis), {"x": x})


@register("layernorm")
def _layernorm(rng, trial):  # pylint: disable=unused-argument
    h, w = _dims(rng, 2, 1, 3)
    channels = int(rng.integers(2, 6))
    x = _leaf(rng.standard_normal((h, w, channels)))
    gamma = _leaf(1 + 0.1 * rng.standard_normal(channels))
    beta = _leaf(0.1 * rng.standard_normal(channels))
    return Case(
        lambda: layernorm(x, gamma, beta),
        {"x": x, "gamma": gamma, "beta": beta},
    )


def _bilinear_case(rng, trial):
    h, w = _dims(rng, 2, 2, 5)
    channels = int(rng.integers(1, 4))
    border = "clamp" if trial % 2 == 0 else "wrap_horizontal"
    n = int(rng.integers(3, 8))
    f = _leaf(rng.standard_normal((h, w, channels)))
    ys = _fractional(rng, 0, h - 1, n)
    high = w if border == "wrap_horizontal" else w - 1
    xs = _fractional(rng, 0, high, n)
    coords = _leaf(np.stack([ys, xs], axis=-1))
    return f, coords, border


@register("bilinear_sample.f")
def _bilinear_f(rng, trial):
    f, coords, border = _bilinear_case(rng, trial)
    return Case(lambda: bilinear_sample(f, coords, border), {"f": f})


@register("bilinear_sample.coords")
def _bilinear_coords(rng, trial):
    f, coords, border = _bilinear_case(rng, trial)
    return Case(
        lambda: bilinear_sample(f, coords, border), {"coords": coords}
    )


@register("upsample_bilinear")
def _upsample(rng, trial):  # pylint: disable=unused-argument
    h, w, channels = _dims(rng, 3, 1, 4)
    out_h, out_w = _dims(rng, 2, 1, 8)
    f = _leaf(rng.standard_normal((h, w, channels)))
    return Case(lambda: upsample_bilinear(f, out_h, out_w), {"f": f})


@register("cross_entropy")
def _cross_entropy(rng, trial):  # pylint: disable=unused-argument
    h, w = _dims(rng, 2, 1, 4)
    classes = int(rng.integers(2, 6))
    logits = _leaf(rng.standard_normal((h, w, classes)) * 2)
    labels = rng.integers(0, classes, size=(h, w))
    labels[rng.random((h, w)) < 0.2] = IGNORE_INDEX
    return Case(lambda: cross_entropy(logits, labels), {"logits": logits})


@register("kl_div")
def _kl_div(rng, trial):  # pylint: disable=unused-argument
    h, w = _dims(rng, 2, 1, 4)
    channels = int(rng.integers(2, 6))
    reference = softmax(Tensor(rng.standard_normal((h, w, channels)))).data
    x = _leaf(rng.standard_normal((h, w, channels)))
    mask = rng.random((h, w)) < 0.8
    mask.flat[0] = True
    return Case(lambda: kl_div(reference, softmax(x), mask), {"x": x})


@register("clamp")
def _clamp(rng, trial):  # pylint: disable=unused-argument
    shape = tuple(_dims(rng, 2))
    values = rng.uniform(-2, 2, size=shape)
    values[np.abs(np.abs(values) - 1) < 0.01] = 0.5
    x = _leaf(values)
    return Case(lambda: clamp(x, -1.0, 1.0), {"x": x})


def _offset_leaves(rng, channels: int, groups: int, scale: float = 0.02):
    weight = _leaf(scale * rng.standard_normal((9 * channels, 2 * groups)))
    bias = _leaf(rng.uniform(-0.4, 0.4, size=2 * groups))
    return weight, bias


@register("dpe", scope="module")
def _dpe(rng, trial):
    stride = 1 + trial % 2
    patch = 3 if trial % 3 else 2
    h, w = (stride * v for v in _dims(rng, 2, 2, 4))
    c_in, c_out = _dims(rng, 2, 1, 3)
    cfg = PatchEmbedConfig(
        patch_size=patch,
        stride=stride,
        in_channels=c_in,
        out_channels=c_out,
        r=4.0,
    )
    f = _leaf(rng.standard_normal((h, w, c_in)))
    weight = _leaf(0.5 * rng.standard_normal((patch ** 2 * c_in, c_out)))
    bias = _leaf(0.1 * rng.standard_normal(c_out))
    offset_weight, offset_bias = _offset_leaves(rng, c_in, patch ** 2)
    return Case(
        lambda: dpe(f, weight, bias, offset_weight, offset_bias, cfg),
        {
            "f": f,
            "weight": weight,
            "bias": bias,
            "offset_weight": offset_weight,
            "offset_bias": offset_bias,
        },
    )


@register("dmlp", scope="module")
def _dmlp(rng, trial):
    h, w = _dims(rng, 2, 2, 4)
    channels = int(rng.integers(1, 5))
    out = int(rng.integers(1, 4))
    cap = 64 if trial % 2 == 0 else max(1, channels - 1)
    groups = dmlp_groups(channels, cap)
    f = _leaf(rng.standard_normal((h, w, channels)))
    proj = _leaf(0.5 * rng.standard_normal((channels, out)))
    bias = _leaf(0.1 * rng.standard_normal(out))
    offset_weight, offset_bias = _offset_leaves(rng, channels, groups)
    return Case(
        lambda: dmlp_mix(f, offset_weight, offset_bias, proj, bias, 4.0, cap),
        {
            "f": f,
            "w": proj,
            "bias": bias,
            "offset_weight": offset_weight,
            "offset_bias": offset_bias,
        },
    )


@register("offsets", scope="module")
def _offsets(rng, trial):  # pylint: disable=unused-argument
    h, w = _dims(rng, 2, 2, 5)
    channels, groups = _dims(rng, 2, 1, 3)
    f = _leaf(rng.standard_normal((h, w, channels)))
    weight, bias = _offset_leaves(rng, channels, groups, scale=0.5)
    return Case(
        lambda: predict_offsets(f, weight, bias, groups, r=1.0).offsets,
        {"f": f, "weight": weight, "bias": bias},
    )


MODEL_SHAPES = ((32, 32), (32, 64), (64, 32), (64, 64), (32, 96))


def perturb_offsets(model: Module, rng: np.random.Generator) -> None:
    """Offsets chicos no nulos para salir de coordenadas enteras."""
    for name, param in model.named_parameters():
        if "offsets" in name.split("."):
            if name.endswith("weight"):
                param.data = 0.005 * rng.standard_normal(param.shape)
            else:
                param.data = rng.uniform(-0.1, 0.1, size=param.shape)


@register("model", scope="model")
def _model(rng, trial):
    model = Trans4PASS(ModelConfig(), stream(trial, "init"))
    perturb_offsets(model, rng)
    height, width = MODEL_SHAPES[trial % len(MODEL_SHAPES)]
    image = _leaf(rng.uniform(0, 1, size=(height, width, 3)))
    params = dict(model.named_parameters())
    offsets = sorted(n for n in params if "offsets" in n.split("."))
    others = sorted(n for n in params if n not in offsets)
    picked = list(rng.choice(offsets, 3, replace=False)) + list(
        rng.choice(others, 2, replace=False)
    )
    inputs = {"image": image}
    inputs.update({str(name): params[name] for name in picked})
    return Case(lambda: model(image), inputs, entries=3)
