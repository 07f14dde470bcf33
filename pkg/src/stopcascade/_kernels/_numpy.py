"""Pure-numpy reference kernels.

These define the semantics; the compiled extension in ``_core.pyx`` mirrors
them loop-for-loop. All arrays are float64 and C-contiguous.
"""

import numpy as np


def affine(x, weights, bias, relu):
    """(post_activation, pre_activation) for ``x @ weights + bias``.

    For the identity activation both returned arrays are the same object.
    """
    z = x @ weights
    z += bias
    if relu:
        return np.maximum(z, 0.0), z
    return z, z


def affine_backward(x, weights, preact, d_out, relu):
    """Gradients of an affine(+ReLU) layer.

    ``d_out`` is the gradient w.r.t. the post-activation output; returns
    ``(d_x, d_weights, d_bias)``.
    """
    dz = np.where(preact > 0.0, d_out, 0.0) if relu else d_out
    d_weights = x.T @ dz
    d_bias = dz.sum(axis=0)
    d_x = dz @ weights.T
    return d_x, d_weights, d_bias


def sgd_update(param, velocity, grad, lr, momentum):
    """In-place momentum step on flat views: v = m*v + g; p -= lr*v."""
    velocity *= momentum
    velocity += grad
    param -= lr * velocity
