"""Central finite-difference checks for every differentiable operation.

Each registered case builds float64 inputs (and, for composite networks,
float64 parameter copies), projects the output onto a fixed random direction
and compares the analytic gradient of that scalar against central
differences.  The error is the norm ratio ``|a - n| / max(|a|, |n|)`` over
all checked coordinates; large tensors are checked on a seeded coordinate
subset.  Coordinates whose perturbation flips a relu/clamp branch are
skipped: the function is not differentiable across such a kink.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .features import FeatureBackbone
from .networks import Actor, Builder, Critic, State, StyleSignals, actor_forward, builder_forward, critic_forward
from .networks import squashed_gaussian_log_prob
from .objectives import UncertaintyWeights, content_loss, contrastive_loss, final_loss, style_loss
from .control import bellman_residual
from .tensor import Tensor, branch_trace, no_grad, precision

STEP = 1e-4
OP_TOL = 1e-4
COMPOSITE_TOL = 1e-3
DEFAULT_SEEDS = 20
MAX_SKIP_FRACTION = 0.25


@dataclass
class Case:
    inputs: list[np.ndarray]
    fn: Callable[..., Tensor]  # called with one Tensor per input
    params: list[Tensor] = field(default_factory=list)  # extra leaves captured by ``fn``
    max_coords: int | None = None  # per-parameter coordinate subset size; inputs get 4x


@dataclass
class CheckResult:
    op: str
    seed: int
    error: float
    tol: float
    checked: int = 0
    skipped: int = 0

    @property
    def passed(self) -> bool:
        enough = self.checked > 0 and self.skipped <= MAX_SKIP_FRACTION * (self.checked + self.skipped)
        return bool(enough and np.isfinite(self.error) and self.error <= self.tol)


REGISTRY: dict[str, tuple[float, Callable[[np.random.Generator], Case]]] = {}


def register(name: str, tol: float = OP_TOL):
    def deco(builder):
        REGISTRY[name] = (tol, builder)
        return builder
    return deco


def _away_from_zero(rng, shape, margin=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


# -- elementwise and structural ops ------------------------------------------------

for _kind in ("add", "sub", "mul", "div"):
    def _binary_case(rng, kind=_kind):
        a = rng.standard_normal((2, 3, 4))
        b = rng.uniform(0.5, 2.0, (3, 1)) * rng.choice([-1.0, 1.0], (3, 1))
        return Case([a, b], lambda x, y: T.elementwise(kind, x, y))
    register(_kind)(_binary_case)

_UNARY_DOMAINS = {
    "relu": lambda rng, s: _away_from_zero(rng, s),
    "log": lambda rng, s: rng.uniform(0.5, 2.0, s),
    "sqrt": lambda rng, s: rng.uniform(0.5, 2.0, s),
}
for _kind in ("relu", "tanh", "exp", "log", "softplus", "square", "sqrt", "negate", "sigmoid"):
    def _unary_case(rng, kind=_kind):
        x = _UNARY_DOMAINS.get(kind, lambda r, s: r.standard_normal(s))(rng, (3, 5))
        return Case([x], lambda t: T.elementwise(kind, t))
    register(_kind)(_unary_case)


@register("clamp")
def _clamp(rng):
    x = rng.uniform(-2, 2, (4, 6))
    x[np.abs(np.abs(x) - 1.0) < 0.05] = 0.5  # keep clear of the kinks
    return Case([x], lambda t: T.clamp(t, -1.0, 1.0))


@register("matmul")
def _matmul(rng):
    return Case([rng.standard_normal((3, 4)), rng.standard_normal((4, 5))], T.matmul)


@register("sum")
def _sum(rng):
    return Case([rng.standard_normal((2, 3, 4))], lambda t: T.reduce("sum", t, axes=(0, 2), keepdims=True))


@register("mean")
def _mean(rng):
    return Case([rng.standard_normal((2, 3, 4))], lambda t: T.reduce("mean", t, axes=1))


@register("reshape")
def _reshape(rng):
    return Case([rng.standard_normal((2, 6))], lambda t: T.reshape(t, (3, 4)).square())


@register("getitem")
def _getitem(rng):
    return Case([rng.standard_normal((4, 5))], lambda t: t[1:3, ::2].square() + t[[0, 0, 3]].sum())


@register("concat")
def _concat(rng):
    return Case([rng.standard_normal((2, 3)), rng.standard_normal((2, 2))],
                lambda a, b: T.concat([a, b.square()], axis=1))


@register("stack")
def _stack(rng):
    return Case([rng.standard_normal((2, 3)), rng.standard_normal((2, 3))],
                lambda a, b: T.stack([a, a * b], axis=0))


# -- image ops -----------------------------------------------------------------------

def _conv_case(rng, cin, cout, k, stride, padding, size=6):
    x = rng.standard_normal((2, cin, size, size))
    w = rng.standard_normal((cout, cin, k, k)) * 0.5
    b = rng.standard_normal(cout)
    return Case([x, w, b], lambda xi, wi, bi: T.conv2d(xi, wi, bi, stride=stride, padding=padding))


register("conv2d")(lambda rng: _conv_case(rng, 3, 4, 3, 1, 1))
register("conv2d[stride2]")(lambda rng: _conv_case(rng, 3, 4, 3, 2, 1))
register("conv2d[few-out]")(lambda rng: _conv_case(rng, 4, 2, 5, 1, 2, size=7))
register("conv2d[no-pad]")(lambda rng: _conv_case(rng, 2, 3, 2, 1, 0))


@register("upsample_nearest")
def _upsample(rng):
    return Case([rng.standard_normal((2, 3, 3, 4))], lambda t: T.upsample_nearest(t, 2))


@register("avg_pool")
def _avg_pool(rng):
    return Case([rng.standard_normal((2, 3, 4, 8))], lambda t: T.avg_pool(t, 4))


@register("channel_stats")
def _channel_stats(rng):
    def fn(t):
        mu, sd = T.channel_stats(t)
        return T.concat([mu, sd], axis=1)
    return Case([rng.standard_normal((2, 3, 4, 5))], fn)


@register("squashed_gaussian")
def _squashed(rng):
    noise = rng.standard_normal((2, 3, 2, 2))

    def fn(mean, log_std):
        action, log_prob = squashed_gaussian_log_prob(mean, log_std, noise)
        return T.concat([T.reshape(action, (2, 12)), T.reshape(log_prob, (2, 1))], axis=1)

    return Case([rng.normal(0, 0.5, (2, 3, 2, 2)), rng.uniform(-1.5, 0.0, (2, 3, 2, 2))], fn)


# -- losses ---------------------------------------------------------------------------

def _small_backbone(rng) -> FeatureBackbone:
    return FeatureBackbone(seed=int(rng.integers(2**31)), channels=(4, 6, 8, 8)).astype(np.float64)


@register("content_loss")
def _content(rng):
    bb = _small_backbone(rng)
    ref = Tensor(rng.random((2, 3, 8, 8)))
    return Case([rng.random((2, 3, 8, 8))], lambda p: content_loss(bb, p, ref), max_coords=24)


@register("style_loss")
def _style(rng):
    bb = _small_backbone(rng)
    sty = Tensor(rng.random((2, 3, 8, 8)))
    return Case([rng.random((2, 3, 8, 8))], lambda p: style_loss(bb, p, sty), max_coords=24)


@register("contrastive_loss")
def _contrastive(rng):
    return Case(
        [rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 2)),
         rng.standard_normal((3, 2))],
        lambda m1, s1, m2, s2: contrastive_loss([m1, m2], [s1, s2]),
    )


@register("final_loss")
def _final(rng):
    weights = UncertaintyWeights()

    def fn(s, losses):
        weights.s = s
        return final_loss(weights, losses[0], losses[1], losses[2]).weighted_total

    return Case([rng.normal(0, 0.5, 3), rng.uniform(0.1, 2.0, 3)], fn)


@register("bellman_residual")
def _bellman(rng):
    target = rng.standard_normal(4)
    return Case([rng.standard_normal(4)], lambda q: bellman_residual(q, target))


# -- composite network paths --------------------------------------------------------------

def _module_leaves(module) -> list[Tensor]:
    return [p for p in module.parameters() if p.requires_grad]


@register("actor", COMPOSITE_TOL)
def _actor(rng):
    actor = Actor(rng).astype(np.float64)
    noise = rng.standard_normal((2, actor.action_channels, 2, 2))

    def fn(moving, style):
        out = actor_forward(actor, State(moving, style), noise)
        n = moving.shape[0]
        return T.concat([T.reshape(out.action, (n, -1)), T.reshape(out.log_prob, (n, 1)),
                         out.signals.deep_mean, out.signals.shallow_std], axis=1)

    return Case([rng.random((2, 3, 8, 8)), rng.random((2, 3, 8, 8))], fn, _module_leaves(actor), max_coords=2)


@register("builder", COMPOSITE_TOL)
def _builder(rng):
    builder = Builder(rng).astype(np.float64)

    def fn(feats, action, sm, ss, dm, ds):
        return builder_forward(builder, feats, action, StyleSignals(sm, ss, dm, ds))

    inputs = [
        np.abs(rng.standard_normal((2, 64, 2, 2))),
        rng.uniform(-0.9, 0.9, (2, 16, 2, 2)),
        rng.random((2, 32)), rng.uniform(0.5, 1.5, (2, 32)),
        rng.random((2, 64)), rng.uniform(0.5, 1.5, (2, 64)),
    ]
    return Case(inputs, fn, _module_leaves(builder), max_coords=3)


@register("critic", COMPOSITE_TOL)
def _critic(rng):
    critic = Critic(rng).astype(np.float64)

    def fn(moving, style, action):
        return critic_forward(critic, State(moving, style), action)

    inputs = [rng.random((2, 3, 8, 8)), rng.random((2, 3, 8, 8)), rng.uniform(-0.9, 0.9, (2, 16, 2, 2))]
    return Case(inputs, fn, _module_leaves(critic), max_coords=4)


# -- driver ------------------------------------------------------------------------------

def _coords(size: int, limit: int | None, rng: np.random.Generator) -> np.ndarray:
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def check(name: str, seed: int) -> CheckResult:
    """Gradient check of one registered case at one seed."""
    tol, builder = REGISTRY[name]
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    with precision(np.float64):
        case = builder(rng)
        leaves = [Tensor(x, requires_grad=True) for x in case.inputs]
        out = case.fn(*leaves)
        proj = rng.standard_normal(out.shape)
        scalar = (out * Tensor(proj)).sum()
        all_leaves = leaves + list(case.params)
        for leaf in all_leaves:
            leaf.grad = None
        scalar.backward()

        def evaluate() -> tuple[float, list[np.ndarray]]:
            with no_grad(), branch_trace() as branches:
                value = float(np.sum(case.fn(*leaves).data * proj))
            return value, branches

        _, base_branches = evaluate()

        analytic, numeric, skipped = [], [], 0
        for i, leaf in enumerate(all_leaves):
            limit = case.max_coords
            if limit is not None and i < len(leaves):
                limit *= 4
            grad = np.zeros(leaf.shape) if leaf.grad is None else leaf.grad
            flat = leaf.data.reshape(-1)
            assert np.shares_memory(flat, leaf.data), "perturbations must reach the leaf"
            for j in _coords(flat.size, limit, rng):
                orig = flat[j]
                flat[j] = orig + STEP
                up, up_br = evaluate()
                flat[j] = orig - STEP
                down, down_br = evaluate()
                flat[j] = orig
                if not (_same(up_br, base_branches) and _same(down_br, base_branches)):
                    skipped += 1
                    continue
                numeric.append((up - down) / (2 * STEP))
                analytic.append(grad.reshape(-1)[j])
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return CheckResult(name, seed, float(np.linalg.norm(a - n) / denom), tol, len(a), skipped)


def _same(trace_a: list[np.ndarray], trace_b: list[np.ndarray]) -> bool:
    return len(trace_a) == len(trace_b) and all(np.array_equal(x, y) for x, y in zip(trace_a, trace_b))


def run_suite(seeds: Iterable[int] = range(DEFAULT_SEEDS), ops: Sequence[str] | None = None) -> list[CheckResult]:
    names = list(REGISTRY) if ops is None else list(ops)
    return [check(name, seed) for name in names for seed in seeds]


@dataclass
class OpSummary:
    op: str
    seeds: int
    worst: float
    tol: float
    checked: int
    skipped: int
    passed: bool


def summarize(results: Sequence[CheckResult]) -> list[OpSummary]:
    """One row per op, in registry order of first appearance."""
    rows: dict[str, OpSummary] = {}
    for r in results:
        row = rows.setdefault(r.op, OpSummary(r.op, 0, 0.0, r.tol, 0, 0, True))
        row.seeds += 1
        row.worst = max(row.worst, r.error) if np.isfinite(r.error) else float("nan")
        row.checked += r.checked
        row.skipped += r.skipped
        row.passed = row.passed and r.passed
    return list(rows.values())


def format_table(results: Sequence[CheckResult]) -> str:
    lines = [f"{'op':<20} {'seeds':>5} {'coords':>7} {'kinks':>6} {'max rel err':>12} {'tol':>8}  status"]
    for row in summarize(results):
        lines.append(
            f"{row.op:<20} {row.seeds:>5} {row.checked:>7} {row.skipped:>6} {row.worst:>12.3e} "
            f"{row.tol:>8.0e}  {'ok' if row.passed else 'FAIL'}"
        )
    return "\n".join(lines)


def failing_ops(results: Sequence[CheckResult]) -> list[str]:
    return [row.op for row in summarize(results) if not row.passed]
