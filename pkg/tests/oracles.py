"""Reference implementations written independently of the package, in numpy/float64."""
import math

import numpy as np


def gaussian_log_density(y, mean, cov):
    """log N(y; mean, cov) for flat vectors."""
    n = y.size
    diff = y - mean
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    return -0.5 * (diff @ np.linalg.solve(cov, diff) + logdet + n * math.log(2 * math.pi))


def fd_score(y, mean, cov, step=1e-5):
    """Central finite-difference gradient of the log density."""
    g = np.zeros_like(y)
    for i in range(y.size):
        e = np.zeros_like(y)
        e[i] = step
        g[i] = (gaussian_log_density(y + e, mean, cov) - gaussian_log_density(y - e, mean, cov)) / (2 * step)
    return g


def posterior_mean(y, mean, cov, sigma):
    """E[x | y] for x ~ N(mean, cov), y = x + sigma z, via the textbook Wiener form."""
    n = y.size
    return mean + cov @ np.linalg.solve(cov + sigma**2 * np.eye(n), y - mean)


def posterior_trace_variance(cov, sigma):
    n = cov.shape[0]
    post = cov - cov @ np.linalg.solve(cov + sigma**2 * np.eye(n), cov)
    return float(np.trace(post))


def gamma(beta, h, d_sq_over_n):
    return math.sqrt(max(0.0, (1 - beta * h) ** 2 - (1 - h) ** 2)) * math.sqrt(d_sq_over_n)


def constrained_optimum(mt, mean, xc):
    """(I - M M^T) mean + M xc with M^T given as a dense K x N matrix."""
    m = mt.T
    return mean - m @ (mt @ mean) + m @ xc


def psnr_reference(a, b, peak=1.0):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    mse = sum((x - y) ** 2 for x, y in zip(a, b)) / a.size
    return 10.0 * math.log10(peak * peak / mse)


def fd_gradient_error(loss_fn, params, eps=1e-6):
    """Max relative error between autograd and central differences over every entry of ``params``."""
    import torch

    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    with torch.no_grad():
        for p in params:
            flat, grad = p.view(-1), p.grad.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = loss_fn().item()
                flat[i] = old - eps
                down = loss_fn().item()
                flat[i] = old
                fd = (up - down) / (2 * eps)
                an = grad[i].item()
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst
