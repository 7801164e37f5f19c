"""Differentiation substrate shared by every other module.

Trainable parameters are ``torch.nn.Parameter`` tensors and the recording tape is torch's
autograd graph. Kernels whose elementwise trace would be too slow (the rasterizer) register
a single ``torch.autograd.Function`` with a hand-derived backward instead.

Two numeric modes exist. Test mode runs in float64 with deterministic algorithms so that
finite-difference checks and bitwise reproducibility hold; fast mode runs in float32.
"""
import re
import random
import logging
from contextlib import nullcontext

import numpy as np
import torch
from decouple import config

from splatsdf.errors import NonFiniteError

logger = logging.getLogger(__name__)

TEST_MODE = config("SPLATSDF_TEST_MODE", default=False, cast=bool)
NUM_THREADS = config("SPLATSDF_NUM_THREADS", default=0, cast=int)

_state = {"test_mode": False}


def configure(test_mode=None, num_threads=None):
    """Select the numeric mode for the whole process.

    Parameters
    ----------
    test_mode : bool, optional
        float64 + deterministic algorithms when True, float32 otherwise.
        Defaults to the ``SPLATSDF_TEST_MODE`` setting.
    num_threads : int, optional
        Intra-op thread count; 0 keeps torch's default. Defaults to ``SPLATSDF_NUM_THREADS``.
    """
    if test_mode is None:
        test_mode = TEST_MODE
    if num_threads is None:
        num_threads = NUM_THREADS
    _state["test_mode"] = bool(test_mode)
    torch.set_default_dtype(torch.float64 if test_mode else torch.float32)
    torch.use_deterministic_algorithms(bool(test_mode))
    if num_threads > 0:
        torch.set_num_threads(num_threads)
    logger.debug(f"Numeric mode: {'test (float64)' if test_mode else 'fast (float32)'}")


def is_test_mode():
    return _state["test_mode"]


def seed_everything(seed):
    """Seed python, numpy and torch, returning a dedicated torch generator."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def param(values, requires_grad=True):
    """Wrap array-like values as a trainable parameter in the current default dtype."""
    tensor = torch.as_tensor(np.asarray(values) if not torch.is_tensor(values) else values)
    tensor = tensor.to(torch.get_default_dtype()).clone().contiguous()
    return torch.nn.Parameter(tensor, requires_grad=requires_grad)


def check_finite(named_tensors, what="parameter"):
    """Raise NonFiniteError naming the first tensor holding NaN or inf."""
    for name, tensor in named_tensors:
        if tensor is None:
            continue
        if not torch.isfinite(tensor).all():
            raise NonFiniteError(f"Non-finite values in {what} '{name}'", where=name)


_ANOMALY_FUNCTION = re.compile(r"Function '(\w+)' returned nan")


def backward(loss, named_params=(), seed=1.0, detect_anomaly=None):
    """Back-propagate ``seed * dloss`` into every leaf that took part in the forward pass.

    Gradients accumulate (``+=``) into ``.grad``; two calls double them.

    Parameters
    ----------
    loss : torch.Tensor
        Scalar loss recorded on the autograd tape.
    named_params : iterable of (str, torch.Tensor)
        Parameters whose gradients are checked for finiteness afterwards.
    seed : float
        Upstream gradient dloss/dloss, normally 1.
    detect_anomaly : bool, optional
        Run the backward under torch anomaly detection; defaults to test mode.
    """
    if not torch.isfinite(loss).all():
        raise NonFiniteError(f"Loss is non-finite ({loss.item()})", where="loss")
    if detect_anomaly is None:
        detect_anomaly = is_test_mode()
    guard = torch.autograd.detect_anomaly(check_nan=True) if detect_anomaly else nullcontext()
    try:
        with guard:
            loss.backward(torch.as_tensor(seed, dtype=loss.dtype))
    except RuntimeError as error:
        match = _ANOMALY_FUNCTION.search(str(error))
        if match is None:
            raise
        raise NonFiniteError(f"Backward op {match.group(1)} produced NaN", where=match.group(1)) from error
    check_finite(((name, p.grad) for name, p in named_params), what="gradient")


def build_adam(groups, betas=(0.9, 0.999), eps=1e-15):
    """Create an Adam optimizer over named parameter groups.

    Parameters
    ----------
    groups : dict
        Maps group name to ``(list_of_params, learning_rate)``.
    """
    param_groups = [
        {"params": list(params), "lr": lr, "name": name}
        for name, (params, lr) in groups.items()
    ]
    return torch.optim.Adam(param_groups, betas=betas, eps=eps)


def adam_step(optimizer, t):
    """Apply one bias-corrected Adam update and zero the gradients.

    ``t`` is the 1-based index of the update being taken. Bias correction is undefined at
    ``t == 0``. Per-group learning rates, betas and epsilon live in the optimizer's groups.
    """
    if t < 1:
        raise ValueError(f"Adam step index must be >= 1 (bias correction undefined), got {t}")
    optimizer.step()
    optimizer.zero_grad(set_to_none=False)
    check_finite(
        (
            (f"{group.get('name', 'group')}[{i}]", p)
            for group in optimizer.param_groups
            for i, p in enumerate(group["params"])
        ),
        what="parameter after Adam step",
    )


def set_group_lr(optimizer, name, lr):
    for group in optimizer.param_groups:
        if group.get("name") == name:
            group["lr"] = lr


def reindex_group(optimizer, name, new_param, index):
    """Swap the single parameter of group ``name`` for ``new_param`` carrying Adam state along.

    ``index`` maps every row of ``new_param`` to a row of the old parameter whose moments it
    inherits; rows with a negative index start with zero moments.
    """
    for group in optimizer.param_groups:
        if group.get("name") != name:
            continue
        old_param = group["params"][0]
        state = optimizer.state.pop(old_param, None)
        if state:
            fresh = index < 0
            safe = index.clamp(min=0)
            for key in ("exp_avg", "exp_avg_sq"):
                moments = state[key][safe].clone()
                moments[fresh] = 0.0
                state[key] = moments
            optimizer.state[new_param] = state
        group["params"][0] = new_param
        return
    raise KeyError(f"No optimizer group named {name!r}")


def gradient_check(fn, inputs, eps=1e-6, atol=1e-8, rtol=1e-6):
    """Compare analytic gradients of ``fn`` against central finite differences.

    Inputs must be float64 tensors with ``requires_grad``. Returns True or raises
    ``torch.autograd.gradcheck.GradcheckError`` describing the mismatch.
    """
    return torch.autograd.gradcheck(fn, tuple(inputs), eps=eps, atol=atol, rtol=rtol)
