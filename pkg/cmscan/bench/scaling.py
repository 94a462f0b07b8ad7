import time, logging
import numpy as np
from scipy.stats import linregress
from cmscan.numerics.tensor import ConfigurationError, COMPUTE_DTYPE
from cmscan.numerics.rng import Rng
from cmscan.scan.ssmparams import SsmParams
from cmscan.scan.cmss2d import cm_ss2d_forward
from cmscan.bench.attention import CrossAttention

logger = logging.getLogger(__name__)

SCALING_OPS = ('cm_ss2d', 'attention', 'linear', 'quadratic')
MIN_SIZES = 4
MIN_KEPT_SIZES = 2
MIN_REPS = 5
# A size is timed reliably when its median exceeds this many clock ticks
RESOLUTION_FACTOR = 1000
# Calibration kernels: |x_i - p_j| summed over a set of anchors, blocked to bound memory
CALIBRATION_ANCHORS = 256
CALIBRATION_BLOCK = 1024

class ScalingReport(object):
    """
    Median runtimes of one operation over growing inputs and their log-log fit
    ...

    Attributes
    ----------
    op : str
        Measured operation
    sizes : list
        Kept H*W values, strictly increasing
    medians : list
        Median seconds per kept size
    slope, intercept : float
        Least-squares fit of log(time) against log(H*W)
    dropped : list
        H*W values too fast for the timer
    """

    def __init__(self, **kwargs):
        req_attributes = ['op', 'sizes', 'medians', 'slope', 'intercept']
        for req_attribute in req_attributes:
            if req_attribute not in kwargs: raise ValueError('Missing required argument', req_attributes)
            setattr(self, req_attribute, kwargs[req_attribute])
        self.dropped = kwargs.get('dropped', list())
        self.rvalue = kwargs.get('rvalue', None)
        self.reps = kwargs.get('reps', None)

    def get_slope(self):
        return self.slope

    def to_dict(self):
        return {'op': self.op, 'sizes': list(self.sizes), 'medians': list(self.medians), 'slope': self.slope,\
            'intercept': self.intercept, 'rvalue': self.rvalue, 'dropped': list(self.dropped), 'reps': self.reps}

def _calibration(pixels : int, rng : Rng, anchor_count : int = None):
    values = rng.uniform(size=pixels).astype(COMPUTE_DTYPE)
    anchors = values if anchor_count is None else rng.uniform(size=anchor_count).astype(COMPUTE_DTYPE)
    def run():
        total = 0.0
        for start in range(0, pixels, CALIBRATION_BLOCK):
            total += float(np.abs(np.subtract.outer(values[start:start + CALIBRATION_BLOCK], anchors)).sum())
        return total
    return run

def build_workload(op : str, side : int, rng : Rng, channels : int = 16, state_dim : int = 16, parallel : bool = False):
    """Zero-argument callable running op once on a side x side input
    ----------

    Parameters
    ----------
    op : str
        cm_ss2d, attention, linear (t ~ HW) or quadratic (t ~ HW^2)
    side : int
        Input height and width
    rng : Rng
        Stream drawing inputs and weights
    channels, state_dim : int
        Feature width and scan state size
    parallel : bool
        Associative scan for cm_ss2d

    Returns
    -------
    workload : callable
        Timed function
    """
    if op not in SCALING_OPS: raise ConfigurationError('Unknown scaling op ' + repr(op) + ', expected one of ' + str(SCALING_OPS))
    pixels = side * side
    if op == 'linear': return _calibration(pixels, rng, anchor_count=CALIBRATION_ANCHORS)
    if op == 'quadratic': return _calibration(pixels, rng)
    feature_rgb = rng.split(0).normal(size=(1, channels, side, side)).astype(COMPUTE_DTYPE)
    feature_thermal = rng.split(1).normal(size=(1, channels, side, side)).astype(COMPUTE_DTYPE)
    if op == 'cm_ss2d':
        params = SsmParams('bench.scan', channels, state_dim, max(1, channels // 16), rng.split(2))
        return lambda: cm_ss2d_forward(feature_rgb, feature_thermal, params, parallel=parallel)
    attention = CrossAttention('bench.attention', channels, rng.split(2))
    return lambda: attention.forward(feature_rgb, feature_thermal)

def time_workload(workload, reps : int, warmup : int):
    """Median wall-clock seconds of reps calls, after warmup discarded calls
    ----------
    """
    for _ in range(warmup): workload()
    samples = list()
    for _ in range(reps):
        begin = time.perf_counter_ns()
        workload()
        samples.append(time.perf_counter_ns() - begin)
    return float(np.median(samples)) / 1e9

def measure_runtime_scaling(op : str, sides : list, reps : int = 5, warmup : int = 1, seed : int = 0,\
        channels : int = 16, state_dim : int = 16, parallel : bool = False):
    """Measure how the runtime of op grows with the number of pixels
    ----------

    Parameters
    ----------
    op : str
        One of SCALING_OPS
    sides : list
        Square input sides, H*W must be strictly increasing, at least MIN_SIZES entries
    reps : int
        Timed repetitions per size (>= MIN_REPS), median taken
    warmup : int
        Untimed calls before measuring
    seed : int
        Input seed

    Raises
    -------
    ConfigurationError
        Too few sizes or repetitions, or fewer than MIN_KEPT_SIZES sizes above timer resolution

    Returns
    -------
    report : ScalingReport
        Fit of log(time) against log(H*W)
    """
    sizes = [side * side for side in sides]
    if len(sizes) < MIN_SIZES: raise ConfigurationError('Scaling needs at least ' + str(MIN_SIZES) + ' sizes, got ' + str(len(sizes)))
    if any(b <= a for a, b in zip(sizes, sizes[1:])): raise ConfigurationError('Scaling sizes must be strictly increasing, got ' + str(sizes))
    if reps < MIN_REPS: raise ConfigurationError('Scaling needs at least ' + str(MIN_REPS) + ' repetitions, got ' + str(reps))
    threshold = RESOLUTION_FACTOR * time.get_clock_info('perf_counter').resolution
    rng = Rng(seed)
    kept, medians, dropped = list(), list(), list()
    for side, size in zip(sides, sizes):
        workload = build_workload(op, side, rng.split(side), channels=channels, state_dim=state_dim, parallel=parallel)
        median = time_workload(workload, reps, warmup)
        if median <= threshold:
            logger.warning('Dropping size %d of %s: median %.3g s is below the timer resolution', size, op, median)
            dropped.append(size)
            continue
        logger.debug('%s at %d pixels: %.6f s', op, size, median)
        kept.append(size)
        medians.append(median)
    if len(kept) < MIN_KEPT_SIZES:
        raise ConfigurationError('Only ' + str(len(kept)) + ' sizes of ' + op + ' are above the timer resolution')
    fit = linregress(np.log(kept), np.log(medians))
    logger.info('%s scaling slope %.3f over %d sizes', op, fit.slope, len(kept))
    return ScalingReport(op=op, sizes=kept, medians=medians, slope=float(fit.slope), intercept=float(fit.intercept),\
        rvalue=float(fit.rvalue), dropped=dropped, reps=reps)
