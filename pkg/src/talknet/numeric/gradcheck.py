import numpy as np

from talknet.numeric.ops import weighted_sum
from talknet.numeric.tensor import Tensor, backward, get_precision, no_grad


def _scalarize(out, projection):
    if out.data.size == 1:
        return out
    return weighted_sum(out, projection)


def grad_check(op, inputs, step=1e-3, max_elements=None, seed=0, floor=1e-8):
    """Max relative error between analytic and central-difference gradients.

    ``op`` maps the input tensors to a Tensor; non-scalar outputs are reduced
    with a fixed random projection.  With ``max_elements`` only that many
    randomly chosen coordinates per input are perturbed.  Relative error is
    ``|a - n| / max(|a|, |n|, floor)``.  Raise ``floor`` when the loss is
    large: central differences cannot resolve gradients much below
    ``eps * |loss| / step``.
    """
    if get_precision() != 64:
        raise RuntimeError("grad_check requires 64-bit precision mode")
    rng = np.random.default_rng(seed)
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    out = op(*inputs)
    projection = None if out.data.size == 1 else rng.standard_normal(out.shape)
    backward(_scalarize(out, projection))
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def evaluate():
        with no_grad():
            o = op(*inputs)
        if projection is None:
            return float(o.data)
        return float((o.data * projection).sum())

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            coords = rng.choice(flat.size, size=max_elements, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            plus = evaluate()
            flat[i] = orig - step
            minus = evaluate()
            flat[i] = orig
            num = (plus - minus) / (2 * step)
            ana = float(a.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst


def leaf(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)
