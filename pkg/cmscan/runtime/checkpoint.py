import os, json, struct, logging
import numpy as np
from cmscan.numerics.tensor import DimensionError

logger = logging.getLogger(__name__)

MAGIC = b'CMSS'
FORMAT_VERSION = 1
PAYLOAD_DTYPE = np.dtype('<f4')
KINDS = ('param', 'buffer', 'optim')
HEADER = struct.Struct('<4sII')

class CheckpointError(IOError):
    """Raised when a checkpoint file is unreadable or corrupted"""
    pass

class Checkpoint(object):
    """
    A Checkpoint is the persisted state of a run: named f32 tensors and a JSON manifest
    ...

    Attributes
    ----------
    step : int
        Optimizer steps applied
    config : dict
        Resolved run configuration
    tensors : list
        (name, kind, array) in payload order, kind is param, buffer or optim
    extra : dict
        Free JSON metadata (eval metrics at save time...)

    Public Methods
    -------
    get_param_total()
        Number of learnable scalars
    get_tensors()
        {name: array} of one kind
    """

    def __init__(self, **kwargs):
        req_attributes = ['step', 'config', 'tensors']
        for req_attribute in req_attributes:
            if req_attribute not in kwargs: raise ValueError('Missing required argument', req_attributes)
            setattr(self, req_attribute, kwargs[req_attribute])
        self.extra = kwargs.get('extra', dict())
        for name, kind, _ in self.tensors:
            if kind not in KINDS: raise ValueError('Tensor ' + name + ' has unknown kind ' + repr(kind))

    def get_param_total(self):
        return int(sum(array.size for _, kind, array in self.tensors if kind == 'param'))

    def get_tensors(self, kind : str):
        return {name: array for name, tensor_kind, array in self.tensors if tensor_kind == kind}

    def get_manifest(self):
        entries = [{'name': name, 'kind': kind, 'shape': list(array.shape), 'dtype': PAYLOAD_DTYPE.str} for name, kind, array in self.tensors]
        return {'version': FORMAT_VERSION, 'step': int(self.step), 'config': self.config, 'extra': self.extra,\
            'param_total': self.get_param_total(), 'tensors': entries}

def capture(model, step : int, config : dict, optimizer=None, extra : dict = None):
    """Snapshot the parameters, buffers and optimizer state of a run
    ----------

    Parameters
    ----------
    model : Module
        Model whose Parameters and buffers are saved
    step : int
        Optimizer steps applied
    config : dict
        Resolved run configuration
    optimizer : Optimizer (optional)
        Its state_dict is saved with kind optim

    Returns
    -------
    checkpoint : Checkpoint
        In-memory checkpoint
    """
    tensors = [(param.name, 'param', param.value) for param in model.parameters()]
    tensors.extend((name, 'buffer', value) for name, value in model.buffers().items())
    if optimizer is not None:
        tensors.extend((name, 'optim', value) for name, value in sorted(optimizer.state_dict().items()))
    tensors = [(name, kind, np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE)) for name, kind, array in tensors]
    return Checkpoint(step=step, config=config, tensors=tensors, extra=dict() if extra is None else extra)

def restore(checkpoint : Checkpoint, model, optimizer=None):
    """Load checkpoint tensors into model (and optimizer), checking names and shapes
    ----------

    Raises
    -------
    DimensionError
        Missing, unexpected or mis-shaped tensors
    """
    params = checkpoint.get_tensors('param')
    expected = {param.name for param in model.parameters()}
    if set(params) != expected:
        missing, unexpected = sorted(expected - set(params)), sorted(set(params) - expected)
        raise DimensionError('Checkpoint does not match the model: missing ' + str(missing[:5]) + ', unexpected ' + str(unexpected[:5]))
    for param in model.parameters():
        value = params[param.name]
        if value.shape != param.value.shape:
            raise DimensionError('Checkpoint tensor ' + param.name + ' has shape ' + str(value.shape) + ', model expects ' + str(param.value.shape))
        param.value = value.astype(param.value.dtype)
        param.zero_grad()
    for name, value in checkpoint.get_tensors('buffer').items():
        try:
            model.set_buffer(name, value)
        except KeyError:
            raise DimensionError('Checkpoint buffer ' + name + ' is unknown to the model')
    if optimizer is not None: optimizer.load_state_dict(checkpoint.get_tensors('optim'))
    return model

def save_checkpoint(checkpoint : Checkpoint, path : str):
    """Write magic, version, manifest length, sorted-key JSON manifest and little-endian f32 payloads
    ----------
    """
    manifest = json.dumps(checkpoint.get_manifest(), sort_keys=True, separators=(',', ':')).encode('utf-8')
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    partial = path + '.partial'
    with open(partial, 'wb') as f:
        f.write(HEADER.pack(MAGIC, FORMAT_VERSION, len(manifest)))
        f.write(manifest)
        for _, _, array in checkpoint.tensors: f.write(np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE).tobytes())
    os.replace(partial, path)
    logger.debug('Saved checkpoint %s at step %d', path, checkpoint.step)
    return path

def load_checkpoint(path : str):
    """Read a checkpoint written by save_checkpoint
    ----------

    Raises
    -------
    CheckpointError
        Bad magic, unsupported version, malformed manifest or payload length mismatch
    """
    with open(path, 'rb') as f: content = f.read()
    if len(content) < HEADER.size: raise CheckpointError(path + ' is too short to be a checkpoint')
    magic, version, manifest_length = HEADER.unpack_from(content)
    if magic != MAGIC: raise CheckpointError(path + ' is not a checkpoint (magic ' + repr(magic) + ')')
    if version != FORMAT_VERSION: raise CheckpointError(path + ' has unsupported format version ' + str(version))
    try:
        manifest = json.loads(content[HEADER.size:HEADER.size + manifest_length].decode('utf-8'))
        entries = manifest['tensors']
    except (ValueError, KeyError) as err:
        raise CheckpointError(path + ' has a malformed manifest: ' + str(err))
    payload = memoryview(content)[HEADER.size + manifest_length:]
    expected = sum(PAYLOAD_DTYPE.itemsize * int(np.prod(entry['shape'], dtype=np.int64)) for entry in entries)
    if len(payload) != expected: raise CheckpointError(path + ' payload holds ' + str(len(payload)) + ' bytes, manifest declares ' + str(expected))
    tensors, offset = list(), 0
    for entry in entries:
        count = int(np.prod(entry['shape'], dtype=np.int64))
        array = np.frombuffer(payload, dtype=PAYLOAD_DTYPE, count=count, offset=offset).reshape(entry['shape']).copy()
        tensors.append((entry['name'], entry['kind'], array))
        offset += count * PAYLOAD_DTYPE.itemsize
    return Checkpoint(step=manifest['step'], config=manifest['config'], tensors=tensors, extra=manifest.get('extra', dict()))
