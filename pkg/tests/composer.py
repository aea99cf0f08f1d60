"""Random expressions over the primitive set, for gradient checks."""

from __future__ import annotations

import numpy as np

from treeground import numerics as nx
from treeground.numerics import Tensor

ROWS, COLS = 4, 6


class Params:
    """Creates parameters on the first pass and hands back the same tensors on replays."""

    def __init__(self, seed: int):
        self.seed = seed
        self.tensors: list[Tensor] = []
        self.rng = np.random.default_rng(seed)
        self.i = 0

    def rewind(self) -> None:
        self.rng = np.random.default_rng(self.seed)
        self.i = 0

    def get(self, shape, scale: float = 1.0) -> Tensor:
        fresh = self.rng.normal(0, scale, size=shape)  # drawn on every pass to keep the stream aligned
        if self.i == len(self.tensors):
            self.tensors.append(Tensor(fresh, requires_grad=True))
        t = self.tensors[self.i]
        self.i += 1
        return t

    def const(self, shape) -> Tensor:
        return Tensor(self.rng.normal(size=shape))

    def ints(self, high: int, size: int) -> np.ndarray:
        return self.rng.integers(0, high, size=size)

    def uniform(self, lo: float, hi: float) -> float:
        return float(self.rng.uniform(lo, hi))


def _ones():
    return Tensor(np.ones((ROWS, COLS)))


STEP_OPS = {
    "sigmoid": lambda x, p: nx.sigmoid(x),
    "relu": lambda x, p: nx.add(nx.relu(x), p.get((ROWS, COLS))),
    "softmax_lastdim": lambda x, p: nx.softmax_lastdim(x),
    "layernorm_lastdim": lambda x, p: nx.layernorm_lastdim(x),
    "log_sigmoid": lambda x, p: nx.log_sigmoid(x),
    "abs": lambda x, p: nx.abs_(x),
    "scale": lambda x, p: nx.scale(x, p.uniform(-2, 2)),
    "add": lambda x, p: nx.add(x, p.get((ROWS, COLS))),
    "sub": lambda x, p: nx.sub(p.get((ROWS, COLS)), x),
    "mul_elementwise": lambda x, p: nx.mul_elementwise(x, p.get((ROWS, COLS))),
    "minimum": lambda x, p: nx.minimum(x, p.get((ROWS, COLS))),
    "maximum": lambda x, p: nx.maximum(x, p.get((ROWS, COLS))),
    "bias": lambda x, p: nx.add(x, p.get((COLS,))),
    "matmul": lambda x, p: nx.matmul(x, p.get((COLS, COLS), 1 / np.sqrt(COLS))),
    "div": lambda x, p: nx.div(x, nx.add(nx.mul_elementwise(p.get((ROWS, COLS)), p.get((ROWS, COLS))), _ones())),
    "log": lambda x, p: nx.log(nx.add(nx.sigmoid(x), nx.scale(_ones(), 0.5))),
    "concat": lambda x, p: nx.take(nx.concat([x, p.get((ROWS, COLS))]), slice(2, 2 + ROWS)),
    "embed_lookup": lambda x, p: nx.add(x, nx.embed_lookup(p.get((10, COLS)), p.ints(10, ROWS))),
    "permute": lambda x, p: nx.reshape(nx.permute(x, (1, 0)), (ROWS, COLS)),
    "unfold3x3": lambda x, p: nx.reshape(nx.mean_lastdim(nx.unfold3x3(nx.reshape(x, (1, 1, ROWS, COLS)))),
                                         (ROWS, COLS)),
    "scale_by_tensor": lambda x, p: nx.scale(x, nx.scale(nx.sum_all(p.get((3,))), 0.3)),
}

REDUCTIONS = {
    "weighted_sum": lambda x, p: nx.sum_all(nx.mul_elementwise(x, p.const((ROWS, COLS)))),
    "l2_distance": lambda x, p: nx.sum_all(nx.l2_distance(x, p.get((ROWS, COLS)))),
    "cosine_similarity": lambda x, p: nx.sum_all(nx.cosine_similarity(x, p.get((ROWS, COLS)))),
    # weights applied before averaging: a bare row mean is constant after layernorm / softmax
    "mean_lastdim": lambda x, p: nx.sum_all(nx.mean_lastdim(nx.mul_elementwise(x, p.const((ROWS, COLS))))),
    "maxpool_spatial": lambda x, p: nx.sum_all(
        nx.mul_elementwise(nx.maxpool_spatial(nx.reshape(x, (2, 3, 4))), p.const((2,)))),
}


def random_composition(seed: int, min_steps: int = 3, max_steps: int = 6):
    """(fn, tensors, op_names): ``fn()`` rebuilds one fixed random scalar expression.

    The expression applies ``min_steps..max_steps`` primitives drawn from
    STEP_OPS, then one reduction; ``tensors`` are every trainable input.
    """
    chooser = np.random.default_rng(seed)
    names = list(STEP_OPS)
    steps = [names[i] for i in chooser.choice(len(names), size=int(chooser.integers(min_steps, max_steps + 1)))]
    reduction = list(REDUCTIONS)[int(chooser.integers(len(REDUCTIONS)))]
    x0 = Tensor(chooser.normal(size=(ROWS, COLS)), requires_grad=True)
    params = Params(seed + 10_000)

    def fn() -> Tensor:
        params.rewind()
        x = x0
        for name in steps:
            x = STEP_OPS[name](x, params)
        return REDUCTIONS[reduction](x, params)

    fn()
    return fn, [x0, *params.tensors], steps + [reduction]
