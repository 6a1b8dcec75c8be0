"""Shared test utilities."""

import math

import torch

from semunit.layers import grad_check

D64 = torch.float64


def flat_params(module):
    return torch.cat([p.detach().reshape(-1) for p in module.parameters()])


def params_function(module, fn):
    names = [(n, p.shape) for n, p in module.named_parameters()]

    def f(vec):
        params, pos = {}, 0
        for n, shape in names:
            k = math.prod(shape)
            params[n] = vec[pos:pos + k].reshape(shape)
            pos += k
        return fn(params)

    return f


def grad_check_module(module, loss_of_output, *inputs, max_coords=None):
    module = module.to(D64).eval()
    f = params_function(
        module,
        lambda p: loss_of_output(torch.func.functional_call(module, p, inputs)),
    )
    return grad_check(f, flat_params(module), eps=1e-5, tol=1e-4, max_coords=max_coords)
