import numpy as np
from cmscan.numerics.tensor import Tape, GradCheckError, CHECK_DTYPE

def grad_check(fn, variables : list, delta : float = 1e-5, atol : float = 0.0, max_coords : int = None,\
        tolerance : float = None, seed : int = 0):
    """Compare the adjoints recorded on a Tape against central finite differences
    ----------

    The scalar objective is sum(R * fn(...)) for a fixed random projection R of the output,
    so every output coordinate contributes to the check.

    Parameters
    ----------
    fn : callable
        fn(tape) -> Variable, reading the current value of every checked variable.
        Called with None for the finite-difference evaluations
    variables : list
        Variables (f64, requires_grad) to differentiate against
    delta : float
        Central difference step
    atol : float
        Coordinates where analytic and numeric values differ by at most atol count as exact.
        With the default 0 every sampled coordinate enters the error
    max_coords : int (optional)
        Upper bound on checked coordinates per variable (sampled deterministically)
    tolerance : float (optional)
        If given, raise GradCheckError when the returned error exceeds it
    seed : int
        Seed of the projection and of coordinate sampling

    Returns
    -------
    max_relative_error : float
        max over sampled coordinates of |analytic - numeric| / max(|numeric|, 1e-8)
    """
    for variable in variables:
        if variable.value.dtype != CHECK_DTYPE: raise GradCheckError('grad_check requires f64 values, ' + str(variable.name) + ' is ' + str(variable.value.dtype))
        variable.value = np.ascontiguousarray(variable.value)
        variable.requires_grad = True
        variable.grad = None
    generator = np.random.default_rng(seed)

    tape = Tape()
    output = fn(tape)
    projection = generator.standard_normal(output.value.shape)
    tape.backward(output, seed=projection)

    def objective():
        return float(np.sum(projection * fn(None).value))

    worst = 0.0
    for variable in variables:
        analytic = np.zeros_like(variable.value) if variable.grad is None else variable.grad
        if not np.all(np.isfinite(analytic)):
            raise GradCheckError('Non-finite analytic gradient for ' + str(variable.name) + ' at ' + str(np.argwhere(~np.isfinite(analytic))[0]))
        coords = np.arange(variable.value.size)
        if (max_coords is not None) and (coords.size > max_coords): coords = np.sort(generator.choice(coords, size=max_coords, replace=False))
        flat = variable.value.reshape(-1)
        for coord in coords:
            original = flat[coord]
            flat[coord] = original + delta
            plus = objective()
            flat[coord] = original - delta
            minus = objective()
            flat[coord] = original
            numeric = (plus - minus) / (2 * delta)
            if not np.isfinite(numeric):
                raise GradCheckError('Non-finite numeric gradient for ' + str(variable.name) + ' at ' + str(np.unravel_index(coord, variable.value.shape)))
            exact = analytic.reshape(-1)[coord]
            gap = abs(exact - numeric)
            if gap <= atol: continue
            worst = max(worst, gap / max(abs(numeric), 1e-8))
    if (tolerance is not None) and (worst > tolerance):
        raise GradCheckError('Gradient check failed: max relative error ' + str(worst) + ' > ' + str(tolerance))
    return worst
