"""Global-local cross-slice attention over encoder feature volumes.

A feature volume is a tensor of shape (l, h, w, c): slices, height, width,
channels.  The block applies three stages in sequence:

  1. semantic attention  - channel re-weighting from volume-wide (global)
     and per-slice (local) max/avg pooled statistics, fused additively
     through shared bottleneck MLPs and a sigmoid;
  2. positional attention - spatial re-weighting from h*w maps pooled
     globally over (slices, channels) and locally over channels, stacked
     into 4 channels and mixed by one shared 2D convolution;
  3. slice attention     - one learnable scalar weight per slice.

The "global-only" variant (``include_local=False``) zeroes the local pooled
paths while keeping the parameter layout identical, which is the ablation
arm used in comparisons.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor


class CrossSliceAttention:
    """One attention block for a fixed (slices, channels) configuration."""

    def __init__(self, slices, channels, reduction=4, kernel=7, include_local=True, rng=None):
        if channels % reduction != 0:
            raise ValueError(f"channels ({channels}) must be divisible by reduction ({reduction})")
        if kernel % 2 != 1:
            raise ValueError(f"positional kernel must be odd, got {kernel}")
        self.slices = slices
        self.channels = channels
        self.reduction = reduction
        self.kernel = kernel
        self.include_local = include_local
        rng = rng or np.random.default_rng(0)

        c, r = channels, channels // reduction

        def dense(n_in, n_out):
            scale = np.sqrt(2.0 / n_in)
            return Tensor(rng.normal(0.0, scale, size=(n_in, n_out)), requires_grad=True)

        def bias(n):
            return Tensor(np.zeros(n), requires_grad=True)

        # bottleneck MLPs, shared between max and avg within each branch
        self.sem_global = [dense(c, r), bias(r), dense(r, c), bias(c)]
        self.sem_local = [dense(c, r), bias(r), dense(r, c), bias(c)]
        # one k*k kernel over the 4 stacked pooled maps
        scale = np.sqrt(2.0 / (4 * kernel * kernel))
        self.pos_kernel = Tensor(rng.normal(0.0, scale, size=(1, 4, kernel, kernel)), requires_grad=True)
        self.pos_bias = Tensor(np.zeros(1), requires_grad=True)
        # per-slice weights start at identity
        self.slice_weights = Tensor(np.ones(slices), requires_grad=True)

    def parameters(self):
        names = {
            "sem_global.w1": self.sem_global[0], "sem_global.b1": self.sem_global[1],
            "sem_global.w2": self.sem_global[2], "sem_global.b2": self.sem_global[3],
            "sem_local.w1": self.sem_local[0], "sem_local.b1": self.sem_local[1],
            "sem_local.w2": self.sem_local[2], "sem_local.b2": self.sem_local[3],
            "pos.kernel": self.pos_kernel, "pos.bias": self.pos_bias,
            "slice.w": self.slice_weights,
        }
        return names

    def _check(self, x):
        if x.ndim != 4:
            raise T.ShapeError("attention", x.shape, detail="want (l, h, w, c)")
        if x.shape[3] != self.channels:
            raise T.ShapeError("attention", x.shape, (self.channels,), detail="channel mismatch")

    @staticmethod
    def _mlp(v, weights):
        w1, b1, w2, b2 = weights
        return T.relu(v @ w1 + b1) @ w2 + b2

    def semantic_pools(self, x):
        """(global max, global avg, local max, local avg) pooled statistics.

        Global pools squeeze (l, h, w) into one c-vector; local pools squeeze
        (h, w) into one c-vector per slice.
        """
        gmax = T.reduce_max(x, axes=(0, 1, 2)).reshape((1, self.channels))
        gavg = T.reduce_mean(x, axes=(0, 1, 2)).reshape((1, self.channels))
        lmax = T.reduce_max(x, axes=(1, 2))
        lavg = T.reduce_mean(x, axes=(1, 2))
        return gmax, gavg, lmax, lavg

    def semantic(self, x):
        self._check(x)
        l = x.shape[0]
        gmax, gavg, lmax, lavg = self.semantic_pools(x)
        att = self._mlp(gmax, self.sem_global) + self._mlp(gavg, self.sem_global)
        if self.include_local:
            att = att + self._mlp(lmax, self.sem_local) + self._mlp(lavg, self.sem_local)
        att = T.sigmoid(att)  # (1, c) global-only, (l, c) with local branch
        att = T.broadcast_to(att, (l, self.channels)).reshape((l, 1, 1, self.channels))
        return x * att

    def positional_pools(self, x):
        """(global max, global avg, local max, local avg) spatial maps.

        Global pools squeeze (l, c) into one h*w map; local pools squeeze c
        into one h*w map per slice.  All returned as (l, 1, h, w).
        """
        l, h, w, _ = x.shape
        gmax = T.broadcast_to(T.reduce_max(x, axes=(0, 3)).reshape((1, 1, h, w)), (l, 1, h, w))
        gavg = T.broadcast_to(T.reduce_mean(x, axes=(0, 3)).reshape((1, 1, h, w)), (l, 1, h, w))
        lmax = T.reduce_max(x, axes=(3,)).reshape((l, 1, h, w))
        lavg = T.reduce_mean(x, axes=(3,)).reshape((l, 1, h, w))
        return gmax, gavg, lmax, lavg

    def positional(self, x):
        self._check(x)
        l, h, w, c = x.shape
        gmax, gavg, lmax, lavg = self.positional_pools(x)
        if not self.include_local:
            zeros = Tensor(np.zeros((l, 1, h, w)))
            lmax, lavg = zeros, zeros
        stacked = T.concat([gmax, gavg, lmax, lavg], axis=1)
        att = T.sigmoid(T.conv2d(stacked, self.pos_kernel, self.pos_bias))  # (l,1,h,w)
        att = att.reshape((l, h, w, 1))
        return x * att

    def slice(self, x):
        self._check(x)
        if x.shape[0] != self.slices:
            raise T.ShapeError("slice_attention", x.shape, (self.slices,), detail="slice count mismatch")
        return x * self.slice_weights.reshape((self.slices, 1, 1, 1))

    def __call__(self, x):
        return self.slice(self.positional(self.semantic(x)))
