from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

import transpillars


###############################################################################
# Module base
###############################################################################


class Module:
    """Container of trainable tensors and child modules"""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def astype(self, dtype) -> 'Module':
        """Cast every parameter in place

        Arguments
            dtype
                The new floating-point type

        Returns
            This module
        """
        for _, parameter in self.named_parameters():
            parameter.data = parameter.data.astype(dtype)
        return self

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def load_state_dict(
        self,
        state: Dict[str, np.ndarray],
        strict: bool = True) -> None:
        """Copy parameter values from a name-to-array mapping

        Arguments
            state
                The parameter values, keyed by dotted parameter name
            strict
                Whether values without a matching parameter are an error
        """
        parameters = dict(self.named_parameters())
        missing = sorted(set(parameters) - set(state))
        unexpected = sorted(set(state) - set(parameters)) if strict else []
        if missing or unexpected:
            raise ValueError(
                f'State mismatch: missing {missing}, unexpected {unexpected}')
        for name, parameter in parameters.items():
            if state[name].shape != parameter.shape:
                raise transpillars.errors.DimensionError(
                    f'{name}: stored {state[name].shape}, '
                    f'expected {parameter.shape}')
            parameter.data = np.array(state[name], dtype=parameter.data.dtype)

    def named_parameters(
        self,
        prefix: str = '') -> Iterator[Tuple[str, 'transpillars.tensor.Tensor']]:
        """Iterate over (dotted name, parameter) pairs in definition order"""
        for name, value in vars(self).items():
            if isinstance(value, transpillars.tensor.Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f'{prefix}{name}.')
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f'{prefix}{name}.{i}.')

    def num_parameters(self) -> int:
        """Retrieve the total number of trainable values"""
        return sum(parameter.size for _, parameter in self.named_parameters())

    def parameters(self) -> List['transpillars.tensor.Tensor']:
        """Retrieve the trainable tensors"""
        return [parameter for _, parameter in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Retrieve a name-to-array mapping of the parameter values"""
        return {
            name: parameter.data for name, parameter in self.named_parameters()}

    def zero_grad(self) -> None:
        """Discard accumulated gradients"""
        for parameter in self.parameters():
            parameter.grad = None


###############################################################################
# Layers
###############################################################################


class Linear(Module):
    """Affine projection x @ W + b over the last axis"""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        zero: bool = False) -> None:
        """Create linear layer

        Arguments
            in_features
                Input width
            out_features
                Output width
            rng
                Random generator for initialization
            zero
                Initialize weight and bias to zero
        """
        if zero:
            weight = np.zeros((in_features, out_features))
            bias = np.zeros(out_features)
        else:
            weight = uniform(rng, (in_features, out_features), in_features)
            bias = uniform(rng, (out_features,), in_features)
        self.weight = parameter(weight)
        self.bias = parameter(bias)

    def forward(self, x):
        leading = x.shape[:-1]
        if x.ndim != 2:
            x = x.reshape(-1, x.shape[-1])
        out = x @ self.weight + self.bias
        if len(leading) != 1:
            out = out.reshape(leading + (out.shape[-1],))
        return out


class Conv2d(Module):
    """2D convolution over a single [C, H, W] map"""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0) -> None:
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = parameter(uniform(
            rng,
            (out_channels, in_channels, kernel_size, kernel_size),
            fan_in))
        self.bias = parameter(uniform(rng, (out_channels,), fan_in))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return transpillars.tensor.conv2d(
            x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """2D transposed convolution upsampling by the stride"""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1) -> None:
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = parameter(uniform(
            rng,
            (in_channels, out_channels, kernel_size, kernel_size),
            fan_in))
        self.bias = parameter(uniform(rng, (out_channels,), fan_in))
        self.stride = stride

    def forward(self, x):
        return transpillars.tensor.transpose_conv2d(
            x, self.weight, self.bias, self.stride)


class LayerNorm(Module):
    """Layer normalization over the last axis"""

    def __init__(self, width: int, eps: float = 1e-5) -> None:
        self.gamma = parameter(np.ones(width))
        self.beta = parameter(np.zeros(width))
        self.eps = eps

    def forward(self, x):
        return transpillars.tensor.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    """Two-layer perceptron with ReLU"""

    def __init__(self, width: int, hidden: int, rng: np.random.Generator):
        self.expand = Linear(width, hidden, rng)
        self.contract = Linear(hidden, width, rng)

    def forward(self, x):
        return self.contract(self.expand(x).relu())


###############################################################################
# Utilities
###############################################################################


def parameter(values: np.ndarray) -> 'transpillars.tensor.Tensor':
    """Create a trainable tensor in the active precision"""
    return transpillars.tensor.Tensor(values, requires_grad=True)


def uniform(
    rng: np.random.Generator,
    shape: Tuple[int, ...],
    fan_in: int) -> np.ndarray:
    """Sample uniformly in +-1/sqrt(fan_in)"""
    bound = 1. / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)
