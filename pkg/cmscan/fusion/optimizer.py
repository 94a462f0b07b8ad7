import numpy as np
from cmscan.numerics.tensor import NumericError, ConfigurationError

def poly_lr(step : int, max_iter : int, base_lr : float, power : float = 0.9):
    """Polynomial decay base_lr * (1 - step/max_iter)^power
    ----------
    """
    if max_iter < 1 or not (0 <= step <= max_iter):
        raise ConfigurationError('poly_lr requires 0 <= step <= max_iter, got step ' + str(step) + ' and max_iter ' + str(max_iter))
    return base_lr * (1 - step / max_iter) ** power

class Optimizer(object):
    """
    An Optimizer updates Parameters in place from their accumulated adjoints
    ...

    Public Methods
    -------
    step()
        Apply one update. Must be reimplemented
    state_dict()
        Internal state as named arrays
    load_state_dict()
        Restore internal state
    """

    def __init__(self, **kwargs):
        pass

    def step(self, params : list, lr : float, step_index : int = None):
        raise NotImplementedError()

    def state_dict(self):
        return dict()

    def load_state_dict(self, state : dict):
        pass

    @staticmethod
    def check_grads(params : list, step_index : int = None):
        for param in params:
            if not np.all(np.isfinite(param.grad)):
                raise NumericError('Non-finite gradient for ' + param.name, step=step_index)

class Adam(Optimizer):
    """
    Adam with decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    ...

    Attributes
    ----------
    beta1, beta2, eps, weight_decay : float
        Hyperparameters
    t : int
        Updates applied so far
    """

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        self.beta1 = kwargs.get('beta1', 0.9)
        self.beta2 = kwargs.get('beta2', 0.999)
        self.eps = kwargs.get('eps', 1e-8)
        self.weight_decay = kwargs.get('weight_decay', 5e-4)
        self.t = 0
        self.moments = dict()

    def step(self, params : list, lr : float, step_index : int = None):
        Optimizer.check_grads(params, step_index)
        self.t += 1
        correction1 = 1 - self.beta1 ** self.t
        correction2 = 1 - self.beta2 ** self.t
        for param in params:
            if param.name not in self.moments: self.moments[param.name] = (np.zeros_like(param.value), np.zeros_like(param.value))
            first, second = self.moments[param.name]
            first *= self.beta1
            first += (1 - self.beta1) * param.grad
            second *= self.beta2
            second += (1 - self.beta2) * param.grad * param.grad
            update = (first / correction1) / (np.sqrt(second / correction2) + self.eps)
            param.value -= (lr * (update + self.weight_decay * param.value)).astype(param.value.dtype)

    def state_dict(self):
        state = {'t': np.array([self.t], dtype=np.float32)}
        for name in sorted(self.moments):
            state['m.' + name], state['v.' + name] = self.moments[name]
        return state

    def load_state_dict(self, state : dict):
        self.t = int(state.get('t', np.zeros(1))[0])
        self.moments = dict()
        for key, value in state.items():
            if key.startswith('m.'): self.moments[key[2:]] = (np.array(value), np.array(state['v.' + key[2:]]))

class Lookahead(Optimizer):
    """
    Lookahead wrapper: every k inner steps, slow weights move alpha of the way towards the fast
    weights and the fast weights are reset to them
    ...
    """

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        req_attributes = ['inner']
        for req_attribute in req_attributes:
            if req_attribute not in kwargs: raise ValueError('Missing required argument', req_attributes)
            setattr(self, req_attribute, kwargs[req_attribute])
        self.k = kwargs.get('k', 5)
        self.alpha = kwargs.get('alpha', 0.5)
        if self.k < 1 or not (0 < self.alpha <= 1): raise ConfigurationError('Lookahead requires k >= 1 and alpha in (0, 1]')
        self.counter = 0
        self.slow = dict()

    def step(self, params : list, lr : float, step_index : int = None):
        for param in params:
            if param.name not in self.slow: self.slow[param.name] = param.value.copy()
        self.inner.step(params, lr, step_index)
        self.counter += 1
        if self.counter % self.k == 0:
            for param in params:
                slow = self.slow[param.name]
                slow += self.alpha * (param.value - slow)
                param.value[...] = slow

    def state_dict(self):
        state = {'inner.' + key: value for key, value in self.inner.state_dict().items()}
        state['counter'] = np.array([self.counter], dtype=np.float32)
        for name in sorted(self.slow): state['slow.' + name] = self.slow[name]
        return state

    def load_state_dict(self, state : dict):
        self.inner.load_state_dict({key[len('inner.'):]: value for key, value in state.items() if key.startswith('inner.')})
        self.counter = int(state.get('counter', np.zeros(1))[0])
        self.slow = {key[len('slow.'):]: np.array(value) for key, value in state.items() if key.startswith('slow.')}

def build_optimizer(mode : str, weight_decay : float, k : int = 5, alpha : float = 0.5):
    """Build the optimizer of a run
    ----------

    Parameters
    ----------
    mode : str
        adam or adam+lookahead
    """
    if mode == 'adam': return Adam(weight_decay=weight_decay)
    if mode == 'adam+lookahead': return Lookahead(inner=Adam(weight_decay=weight_decay), k=k, alpha=alpha)
    raise ConfigurationError('Unknown optimizer ' + repr(mode) + ', expected adam or adam+lookahead')
