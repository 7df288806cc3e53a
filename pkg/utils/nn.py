"""
Module system for the LoGoNet toolkit
Parameter registration with stable dotted names, train/eval mode, state
dictionaries for checkpoints, and name scopes used to attribute op costs
"""

from contextlib import contextmanager

import numpy as np

from utils import ops
from utils.errors import CheckpointMismatchError
from utils.tensor import Parameter, get_dtype

_scope_stack = []


def current_scope():
    """Dotted path of the module whose forward is currently running"""
    return ".".join(name for name in _scope_stack if name)


@contextmanager
def name_scope(name):
    _scope_stack.append(name)
    try:
        yield
    finally:
        _scope_stack.pop()


class Module:
    """Base class for layers and models"""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_scope_name", "")
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self.add_module(name, value)
            return
        object.__setattr__(self, name, value)

    def add_module(self, name, module):
        """Register a child under a name (also names that are Python keywords)"""
        object.__setattr__(module, "_scope_name", name)
        self._modules[name] = module
        if name.isidentifier():
            object.__setattr__(self, name, module)

    def child(self, name):
        return self._modules[name]

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def __call__(self, *args, **kwargs):
        with name_scope(self._scope_name):
            return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_modules(self, prefix=""):
        yield prefix, self
        for name, module in self._modules.items():
            yield from module.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix=""):
        """Yield (path, Parameter) in registration order; names are stamped on the parameters"""
        for module_path, module in self.named_modules(prefix):
            for name, param in module._parameters.items():
                path = f"{module_path}.{name}" if module_path else name
                param.name = path
                yield path, param

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for module_path, module in self.named_modules(prefix):
            for name, buffer in module._buffers.items():
                yield (f"{module_path}.{name}" if module_path else name), buffer

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def train(self, mode=True):
        for _, module in self.named_modules():
            object.__setattr__(module, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self, prefix=""):
        """Parameters and buffers keyed by dotted path, as NumPy arrays"""
        state = {path: p.data for path, p in self.named_parameters(prefix)}
        state.update(dict(self.named_buffers(prefix)))
        return state

    def load_state_dict(self, state, prefix="", strict=True):
        """
        Copy arrays into parameters and buffers

        Args:
            state: Mapping path -> array
            prefix: Path prefix of this module inside state
            strict: Reject unexpected keys under the prefix

        Raises:
            CheckpointMismatchError: listing missing / unexpected / mis-shaped paths
        """
        own = dict(self.named_parameters(prefix))
        buffers = dict(self.named_buffers(prefix))
        missing = [k for k in list(own) + list(buffers) if k not in state]
        scoped = [k for k in state if not prefix or k.startswith(prefix + ".")]
        unexpected = [k for k in scoped if k not in own and k not in buffers] if strict else []
        mismatched = [
            k for k in own if k in state and tuple(np.shape(state[k])) != own[k].shape
        ] + [k for k in buffers if k in state and tuple(np.shape(state[k])) != buffers[k].shape]
        if missing or unexpected or mismatched:
            raise CheckpointMismatchError(missing, unexpected, mismatched)
        for path, param in own.items():
            param.data[...] = state[path]
        for path, buffer in buffers.items():
            buffer[...] = state[path]


def he_normal(shape, fan_in, rng):
    """Zero-mean normal with variance 2 / fan_in"""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(get_dtype())


class Conv3d(Module):
    """Convolution layer holding its weight and optional bias"""

    def __init__(self, spec, rng):
        super().__init__()
        self.spec = spec
        fan_in = (spec.in_channels // spec.groups) * int(np.prod(spec.kernel))
        self.weight = Parameter(he_normal(spec.weight_shape, fan_in, rng))
        self.bias = Parameter(np.zeros(spec.out_channels, dtype=get_dtype())) if spec.has_bias else None

    def forward(self, x):
        return ops.conv3d(x, self.weight, self.bias, self.spec)

    def __repr__(self):
        return f"<Conv3d({self.spec.in_channels}->{self.spec.out_channels}, k={self.spec.kernel}, " \
               f"s={self.spec.stride}, d={self.spec.dilation}, groups={self.spec.groups})>"


class BatchNorm3d(Module):
    """Batch normalization state: affine parameters plus running statistics"""

    def __init__(self, channels, momentum=ops.BN_MOMENTUM, eps=ops.BN_EPS):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=get_dtype()))
        self.beta = Parameter(np.zeros(channels, dtype=get_dtype()))
        self.register_buffer("running_mean", np.zeros(channels, dtype=get_dtype()))
        self.register_buffer("running_var", np.ones(channels, dtype=get_dtype()))

    def forward(self, x):
        return ops.batchnorm3d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               self.training, self.momentum, self.eps)

    def __repr__(self):
        return f"<BatchNorm3d(channels={self.channels}, training={self.training})>"
