import numpy as np
from opt_einsum import contract
from scipy.special import expit
from cmscan.numerics.tensor import Variable, Tape, DimensionError, ContractError, tracked
from cmscan.scan.layout import InterleavedSequence, build_directional_sequences, merge_scans, scatter_tokens
from cmscan.scan.ssmparams import SsmParams
from cmscan.scan.recurrence import RecurrenceInputs, recurrence_sequential, recurrence_parallel, recurrence_backward

class Projection(object):
    """
    Token-dependent parameters of every direction, with the intermediates their adjoint needs
    ...

    Attributes
    ----------
    B, C : np.ndarray
        [B, 4, J, N]
    delta : np.ndarray
        [B, 4, J, C], positive when the softplus is enabled
    low : np.ndarray
        Low-rank step features [B, 4, J, R]
    pre_delta : np.ndarray
        Step sizes before the softplus [B, 4, J, C]
    """

    def __init__(self, **kwargs):
        req_attributes = ['B', 'C', 'delta', 'low', 'pre_delta', 'delta_softplus']
        for req_attribute in req_attributes:
            if req_attribute not in kwargs: raise ValueError('Missing required argument', req_attributes)
            setattr(self, req_attribute, kwargs[req_attribute])

def project_parameters(sequence : InterleavedSequence, params : SsmParams, delta_softplus : bool = True):
    """Project each token to B, C (shared over channels) and to a per-channel step size
    delta = softplus(W_up W_down x + delta_bias)
    ----------

    Parameters
    ----------
    sequence : InterleavedSequence
        Tokens [B, 4, J, C]
    params : SsmParams
        Stacked direction parameters
    delta_softplus : bool
        Apply the softplus on the step size

    Returns
    -------
    projection : Projection
        B, C, delta and intermediates
    """
    tokens = sequence.get_tokens()
    if tokens.shape[1] != params.directions or tokens.shape[3] != params.channels:
        raise DimensionError('Tokens ' + str(tokens.shape) + ' incompatible with ' + str(params.directions) + ' directions of width ' + str(params.channels))
    B = contract('bdjc,dnc->bdjn', tokens, params.W_B.value)
    C = contract('bdjc,dnc->bdjn', tokens, params.W_C.value)
    low = contract('bdjc,drc->bdjr', tokens, params.W_down.value)
    pre_delta = contract('bdjr,dcr->bdjc', low, params.W_up.value) + params.delta_bias.value[None, :, None, :]
    delta = np.logaddexp(0, pre_delta).astype(tokens.dtype) if delta_softplus else pre_delta
    return Projection(B=B, C=C, delta=delta, low=low, pre_delta=pre_delta, delta_softplus=delta_softplus)

def projection_backward(sequence : InterleavedSequence, params : SsmParams, projection : Projection,\
        grad_B : np.ndarray, grad_C : np.ndarray, grad_delta : np.ndarray):
    """Adjoint of project_parameters
    ----------

    Returns
    -------
    grad_tokens : np.ndarray
        [B, 4, J, C]
    grads : dict
        Adjoints of W_B, W_C, W_down, W_up, delta_bias
    """
    tokens = sequence.get_tokens()
    grad_pre = grad_delta * expit(projection.pre_delta) if projection.delta_softplus else grad_delta
    grad_low = contract('bdjc,dcr->bdjr', grad_pre, params.W_up.value)
    grads = {'W_B': contract('bdjn,bdjc->dnc', grad_B, tokens),\
        'W_C': contract('bdjn,bdjc->dnc', grad_C, tokens),\
        'W_up': contract('bdjc,bdjr->dcr', grad_pre, projection.low),\
        'W_down': contract('bdjr,bdjc->drc', grad_low, tokens),\
        'delta_bias': grad_pre.sum(axis=(0, 2))}
    grad_tokens = contract('bdjn,dnc->bdjc', grad_B, params.W_B.value)\
        + contract('bdjn,dnc->bdjc', grad_C, params.W_C.value)\
        + contract('bdjr,drc->bdjc', grad_low, params.W_down.value)
    return grad_tokens, grads

def _to_pairs(value : np.ndarray):
    batch, directions, length, width = value.shape
    return value.reshape(batch, directions, length // 2, 2, width)

def _from_pairs(value : np.ndarray):
    batch, directions, pixels, _, width = value.shape
    return value.reshape(batch, directions, 2 * pixels, width)

def recurrence_inputs(sequence : InterleavedSequence, params : SsmParams, projection : Projection):
    return RecurrenceInputs(x=sequence.get_pairs(), delta=_to_pairs(projection.delta), B=_to_pairs(projection.B),\
        C=_to_pairs(projection.C), A=params.get_A().astype(sequence.get_tokens().dtype), D=params.D.value)

def cross_modal_recurrence_seq(sequence : InterleavedSequence, params : SsmParams, mode : str = 'swapped', delta_softplus : bool = True):
    """Project, discretize and run the sequential recurrence on every direction
    ----------

    Returns
    -------
    outputs_rgb, outputs_thermal : np.ndarray
        [B, 4, HW, C] in each direction's visiting order
    """
    inputs = recurrence_inputs(sequence, params, project_parameters(sequence, params, delta_softplus))
    outputs, _ = recurrence_sequential(inputs, mode=mode)
    return outputs[:, :, :, 0], outputs[:, :, :, 1]

def cross_modal_recurrence_par(sequence : InterleavedSequence, params : SsmParams, mode : str = 'swapped', delta_softplus : bool = True):
    """Same contract as cross_modal_recurrence_seq, evaluated with the associative scan
    ----------
    """
    inputs = recurrence_inputs(sequence, params, project_parameters(sequence, params, delta_softplus))
    outputs, _ = recurrence_parallel(inputs, mode=mode)
    return outputs[:, :, :, 0], outputs[:, :, :, 1]

class ScanContext(object):
    """
    Forward state kept by cm_ss2d_forward for cm_ss2d_backward
    ...
    """

    def __init__(self, **kwargs):
        req_attributes = ['sequence', 'params', 'projection', 'inputs', 'checkpoints', 'mode', 'height', 'width', 'squeeze']
        for req_attribute in req_attributes:
            if req_attribute not in kwargs: raise ValueError('Missing required argument', req_attributes)
            setattr(self, req_attribute, kwargs[req_attribute])

def cm_ss2d_forward(feature_rgb : np.ndarray, feature_thermal : np.ndarray, params : SsmParams, mode : str = 'swapped',\
        parallel : bool = False, delta_softplus : bool = True):
    """Cross-modal 2D selective scan: directional interleaving, projection, discretization,
    recurrence and merging of the four directions
    ----------

    Parameters
    ----------
    feature_rgb, feature_thermal : np.ndarray
        [C, H, W] or [B, C, H, W], same shape
    params : SsmParams
        Stacked parameters of the four directions
    mode : str
        Recurrence mode: swapped, strict or intra
    parallel : bool
        Evaluate the recurrence with the associative scan
    delta_softplus : bool
        Apply the softplus on the step size

    Returns
    -------
    merged_rgb, merged_thermal : np.ndarray
        Same shape as the inputs
    context : ScanContext
        Forward state for cm_ss2d_backward
    """
    squeeze = (feature_rgb.ndim == 3)
    sequence = build_directional_sequences(feature_rgb, feature_thermal)
    height, width = feature_rgb.shape[-2:]
    projection = project_parameters(sequence, params, delta_softplus)
    inputs = recurrence_inputs(sequence, params, projection)
    recurrence = recurrence_parallel if parallel else recurrence_sequential
    outputs, checkpoints = recurrence(inputs, mode=mode)
    merged_rgb, merged_thermal = merge_scans(outputs[:, :, :, 0], outputs[:, :, :, 1], sequence.get_layouts(), height, width)
    if squeeze: merged_rgb, merged_thermal = merged_rgb[0], merged_thermal[0]
    context = ScanContext(sequence=sequence, params=params, projection=projection, inputs=inputs,\
        checkpoints=checkpoints, mode=mode, height=height, width=width, squeeze=squeeze)
    return merged_rgb, merged_thermal, context

def cm_ss2d_backward(context : ScanContext, grad_rgb : np.ndarray, grad_thermal : np.ndarray):
    """Exact reverse-mode adjoint of cm_ss2d_forward
    ----------

    Parameters
    ----------
    context : ScanContext
        State returned by the forward pass
    grad_rgb, grad_thermal : np.ndarray
        Upstream adjoints of the merged outputs

    Returns
    -------
    grad_feature_rgb, grad_feature_thermal : np.ndarray
        Adjoints of the inputs
    grads : dict
        Adjoints of every SsmParams field, keyed by field name
    """
    if context is None or getattr(context, 'checkpoints', None) is None:
        raise ContractError('cm_ss2d_backward requires the state saved by cm_ss2d_forward')
    if context.squeeze: grad_rgb, grad_thermal = grad_rgb[None], grad_thermal[None]
    layouts = context.sequence.get_layouts()
    batch, channels = grad_rgb.shape[:2]
    pixels = context.height * context.width
    rows_rgb = grad_rgb.reshape(batch, channels, pixels).transpose(0, 2, 1)
    rows_thermal = grad_thermal.reshape(batch, channels, pixels).transpose(0, 2, 1)
    grad_outputs = np.empty_like(context.inputs.x)
    for index, layout in enumerate(layouts):
        order = layout.get_pixel_order()
        grad_outputs[:, index, :, 0] = rows_rgb[:, order]
        grad_outputs[:, index, :, 1] = rows_thermal[:, order]

    recurrence_grads = recurrence_backward(context.inputs, context.checkpoints, grad_outputs, mode=context.mode)
    grad_tokens, grads = projection_backward(context.sequence, context.params, context.projection,\
        _from_pairs(recurrence_grads.B), _from_pairs(recurrence_grads.C), _from_pairs(recurrence_grads.delta))
    grad_tokens = grad_tokens + _from_pairs(recurrence_grads.x)
    grads['A_log'] = recurrence_grads.A * context.inputs.A
    grads['D'] = recurrence_grads.D
    grad_feature_rgb, grad_feature_thermal = scatter_tokens(grad_tokens, layouts, context.height, context.width)
    if context.squeeze: grad_feature_rgb, grad_feature_thermal = grad_feature_rgb[0], grad_feature_thermal[0]
    return grad_feature_rgb, grad_feature_thermal, grads

def cm_ss2d(tape : Tape, feature_rgb : Variable, feature_thermal : Variable, params : SsmParams, mode : str = 'swapped',\
        parallel : bool = False, delta_softplus : bool = True):
    """Tape operation wrapping cm_ss2d_forward / cm_ss2d_backward
    ----------

    Returns
    -------
    merged_rgb, merged_thermal : Variable
    """
    merged_rgb, merged_thermal, context = cm_ss2d_forward(feature_rgb.value, feature_thermal.value, params,\
        mode=mode, parallel=parallel, delta_softplus=delta_softplus)
    param_dict = params.get_param_dict()
    needs_grad = tracked(tape, feature_rgb, feature_thermal, *param_dict.values())
    out_rgb = Variable(merged_rgb, requires_grad=needs_grad)
    out_thermal = Variable(merged_thermal, requires_grad=needs_grad)

    if needs_grad:
        def adjoint():
            if out_rgb.grad is None and out_thermal.grad is None: return
            grad_rgb = np.zeros_like(merged_rgb) if out_rgb.grad is None else out_rgb.grad
            grad_thermal = np.zeros_like(merged_thermal) if out_thermal.grad is None else out_thermal.grad
            grad_feature_rgb, grad_feature_thermal, grads = cm_ss2d_backward(context, grad_rgb, grad_thermal)
            if feature_rgb.requires_grad: feature_rgb.accumulate(grad_feature_rgb)
            if feature_thermal.requires_grad: feature_thermal.accumulate(grad_feature_thermal)
            for field, param in param_dict.items():
                if param.requires_grad: param.accumulate(grads[field].astype(param.value.dtype))
        tape.record(adjoint)
    return out_rgb, out_thermal
