"""Shared test utilities: the finite-difference gradient oracle.

The oracle only evaluates loss values; it never touches tape gradients, so
it stays independent of the code path it checks.
"""

import numpy as np

from iimt import autodiff as ad


def fd_gradient(f, array: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central finite differences of scalar-valued f() w.r.t. array (in place).

    ``coords`` optionally restricts evaluation to a subset of flat indices;
    unevaluated entries are returned as NaN so callers can mask them.
    """
    grad = np.full_like(array, np.nan) if coords is not None else np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    with ad.no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(build_loss, params: dict, h: float = 1e-5, tol: float = 1e-4,
                    max_coords_per_param: int | None = None) -> dict:
    """Compare tape gradients of build_loss() against finite differences.

    params maps names to Tensors with requires_grad=True whose .data arrays
    are perturbed in place for the numeric side. For large tensors,
    ``max_coords_per_param`` samples a deterministic coordinate subset
    (always including the largest tape-gradient entry).
    """
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    tape = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    errs = {}
    for name, p in params.items():
        coords = None
        if max_coords_per_param is not None and p.data.size > max_coords_per_param:
            rng = np.random.default_rng(abs(hash(name)) % (2**32))
            coords = set(rng.choice(p.data.size, size=max_coords_per_param, replace=False))
            coords.add(int(np.abs(tape[name]).argmax()))
            coords = sorted(coords)
        numeric = fd_gradient(lambda: build_loss().item(), p.data, h=h, coords=coords)
        mask = np.isfinite(numeric)
        errs[name] = rel_err(tape[name][mask], numeric[mask])
    worst = max(errs.values()) if errs else 0.0
    assert worst <= tol, f"gradient mismatch (worst {worst:.3e}): " + ", ".join(
        f"{k}={v:.2e}" for k, v in sorted(errs.items(), key=lambda kv: -kv[1])[:5])
    return errs
