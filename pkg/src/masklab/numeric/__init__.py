"""Minimal dense-tensor engine with reverse-mode autodiff."""
from .params import Adam, ParamStore, adam_step
from .serialize import load_tensor, read_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from .tensor import (
    LOG_FLOOR,
    GradTape,
    Tensor,
    absolute,
    add,
    as_tensor,
    clip,
    concat,
    conv2d,
    default_dtype,
    div,
    exp,
    index,
    log,
    matmul,
    mul,
    neg,
    no_grad,
    precision,
    reciprocal,
    recorded_ops,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax,
    square,
    sub,
)


def elementwise(op_kind, a, b):
    """Dispatch a binary elementwise op by name: add, sub, mul or div."""
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    try:
        return ops[op_kind](a, b)
    except KeyError:
        raise ValueError(f"unknown elementwise op {op_kind!r}") from None
