"""Central finite-difference oracle for checking analytic gradients."""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


def numerical_grad(f: Callable[[], float], arr: np.ndarray, index, h: float = 1e-6) -> float:
    """d f / d arr[index] by central differences; ``arr`` is perturbed in place and restored."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2.0 * h)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """||a - n|| / max(||a||, ||n||, floor)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def sample_indices(shape: tuple[int, ...], count: int, rng: np.random.Generator) -> list[tuple]:
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]


def check_arrays(f: Callable[[], float], arrays: Iterable[tuple[np.ndarray, np.ndarray]],
                 samples: int | None, rng: np.random.Generator, h: float = 1e-6) -> float:
    """Worst relative error over ``(value_array, analytic_grad)`` pairs.

    ``samples=None`` checks every entry; otherwise that many random entries per array.
    """
    worst = 0.0
    for value, grad in arrays:
        if samples is None:
            idx = list(np.ndindex(value.shape))
        else:
            idx = sample_indices(value.shape, samples, rng)
        num = np.array([numerical_grad(f, value, i, h) for i in idx])
        ana = np.array([grad[i] for i in idx])
        worst = max(worst, relative_error(ana, num))
    return worst


def model_loss_closures(params, cfg, image, caption, rng) -> dict[str, Callable]:
    """Each objective on one matched pair as a zero-argument function of ``params``.

    Everything random or non-differentiable is fixed up front so that finite
    differences see the same function the tape differentiates: the language
    and vision mask plans, the MFR regression target (the clean visual features
    at the current parameters) and the VLA transport plan.
    """
    from . import model as M
    from . import objectives as O
    from .masking import Action, MaskPlan, mfr_mask_plan, mlm_mask_plan
    from .tensor import Tensor, take_rows

    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    visual, records = M.vision_forward(image, params)
    lang_plan = mlm_mask_plan(len(caption), rng, M.FIRST_WORD_ID, params.cfg.vocab)
    if not len(lang_plan):
        lang_plan = MaskPlan((int(rng.integers(len(caption))),), (Action.MASK,))
    vis_plan = mfr_mask_plan(records[-1].matrix, cfg.mfr_k, rng)
    pos = list(vis_plan.positions)
    target = Tensor(take_rows(visual, pos).data.copy())
    _, vla_plan = O.vla_loss(*M.modality_states(M.multimodal_forward(visual, caption, params)), cfg.ipot)

    def masked():
        v, _ = M.vision_forward(image, params)
        return M.multimodal_forward(v, caption, params, vis_plan, lang_plan)

    def clean():
        v, _ = M.vision_forward(image, params)
        return M.multimodal_forward(v, caption, params)

    return {
        "MLM": lambda: O.mlm_loss(M.mlm_logits(masked(), params, lang_plan.positions), caption, lang_plan),
        "ITM": lambda: O.itm_loss(M.itm_logits(clean(), params), 1),
        "MFR": lambda: O.mfr_loss(target, M.mfr_regress(masked(), params, pos)),
        "VLA": lambda: O.vla_loss(*M.modality_states(clean()), cfg.ipot, plan=vla_plan)[0],
    }


def noise_floor(value: float, h: float) -> float:
    """Gradient magnitude below which central differences at step ``h`` are rounding noise."""
    return 10.0 * np.finfo(np.float64).eps * max(abs(value), 1.0) / h


def certify_model(params, fn: Callable, samples: int, rng, h: float = 1e-6) -> tuple[float, float]:
    """(worst relative error, worst |numeric| among gradients that should be zero).

    The second bucket holds parameters the tape never reached and sampled
    gradients that vanish identically (the key bias, by softmax shift
    invariance), where both sides sit under the rounding-noise floor and a
    ratio would only measure noise.
    """
    from .tensor import Tape, backward

    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    params.zero_grad()
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)
    grads = {name: (None if t.grad is None else t.grad.copy()) for name, t in params}
    params.zero_grad()

    def f():
        return fn().item()

    floor = noise_floor(loss.item(), h)
    worst_rel = worst_unused = 0.0
    for name, t in params:
        idx = sample_indices(t.shape, samples, rng)
        num = np.array([numerical_grad(f, t.data, i, h) for i in idx])
        ana = np.zeros(len(idx)) if grads[name] is None else np.array([grads[name][i] for i in idx])
        if max(np.linalg.norm(ana), np.linalg.norm(num)) <= floor:
            worst_unused = max(worst_unused, float(np.abs(num).max()))
        else:
            worst_rel = max(worst_rel, relative_error(ana, num))
    return worst_rel, worst_unused
