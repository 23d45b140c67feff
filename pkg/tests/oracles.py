"""Independent reference computations used by the tests.

Nothing here imports the package: each oracle recomputes its quantity from
first principles (arbitrary-precision products, Bayes' rule, explicit
loops, step-by-step Markov chain simulation).
"""

import math

import mpmath as mp
import numpy as np

mp.mp.dps = 50


def linear_betas(num_steps, beta_start, beta_end):
    b0, b1 = mp.mpf(beta_start), mp.mpf(beta_end)
    if num_steps == 1:
        return [b0]
    return [b0 + (b1 - b0) * i / (num_steps - 1) for i in range(num_steps)]


def cumulative_alpha_bar(betas, t):
    """prod_{s<=t} (1 - beta_s) in 50-digit arithmetic."""
    p = mp.mpf(1)
    for b in betas[:t]:
        p *= 1 - mp.mpf(b)
    return p


def conjugate_posterior(betas, t, x0, xt):
    """Mean and variance of p(x_{t-1} | x_t, x0) by multiplying the two Gaussians.

    Prior   x_{t-1} | x0  ~ N(sqrt(abar_{t-1}) x0, 1 - abar_{t-1})
    Likelihood x_t | x_{t-1} ~ N(sqrt(alpha_t) x_{t-1}, beta_t)
    """
    beta_t = mp.mpf(betas[t - 1])
    alpha_t = 1 - beta_t
    abar_prev = cumulative_alpha_bar(betas, t - 1)
    prior_var = 1 - abar_prev
    prior_mean = mp.sqrt(abar_prev) * x0
    if prior_var == 0:
        return prior_mean, mp.mpf(0)
    precision = 1 / prior_var + alpha_t / beta_t
    mean = (prior_mean / prior_var + mp.sqrt(alpha_t) * xt / beta_t) / precision
    return mean, 1 / precision


def simulate_chain(x0, betas, t, draws, rng):
    """Apply the one-step transition t times to ``draws`` copies of scalar x0."""
    x = np.full(draws, float(x0))
    for s in range(t):
        b = float(betas[s])
        x = math.sqrt(1 - b) * x + math.sqrt(b) * rng.standard_normal(draws)
    return x


def brute_confusion(pred, gt):
    tp = fp = fn = tn = 0
    for i in range(len(pred)):
        for j in range(len(pred[0])):
            p, g = int(pred[i][j]), int(gt[i][j])
            if p and g:
                tp += 1
            elif p and not g:
                fp += 1
            elif g:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def brute_union(masks):
    h, w = len(masks[0]), len(masks[0][0])
    out = [[0] * w for _ in range(h)]
    for m in masks:
        for i in range(h):
            for j in range(w):
                if m[i][j]:
                    out[i][j] = 1
    return out


def inside_ellipse(row, col, cy, cx, ry, rx, angle):
    dy, dx = row - cy, col - cx
    u = dx * math.cos(angle) + dy * math.sin(angle)
    v = -dx * math.sin(angle) + dy * math.cos(angle)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def gaussian_flow_endpoint(x_start, mu, sd, alpha_bar_start):
    """Exact probability-flow ODE map for N(mu, sd^2) data.

    Along the flow the standardised value (x - sqrt(abar) mu) / sqrt(abar sd^2 + 1 - abar)
    is conserved, so the clean endpoint is mu + sd * z.
    """
    s = math.sqrt(alpha_bar_start * sd ** 2 + 1 - alpha_bar_start)
    return mu + sd * (x_start - math.sqrt(alpha_bar_start) * mu) / s
