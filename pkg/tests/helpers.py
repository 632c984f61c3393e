"""Shared oracles for the test suite."""

import numpy as np

from uncprop.models import Mlp, MlpSpec
from uncprop.propagation import entropy


def random_net(head: str, in_dim: int, seed: int, hidden=(6,), activation="tanh", classes=3) -> Mlp:
    """A randomly initialised downstream network whose log-variance head is not trivially zero."""
    out_dim = classes if head == "softmax" else 1
    net = Mlp(MlpSpec(in_dim, tuple(hidden), head, out_dim, activation), seed=seed)
    g = np.random.default_rng(seed)
    net.params = net.params + 0.5 * g.normal(size=net.num_params)
    return net


def linear_probe(scale=3.0, pixel=0, log_delta=np.log(0.25)):
    """Downstream regression f(x) = (scale * x[pixel], delta = log_delta), batch-capable."""

    class Probe:
        def predict_batch(self, xs):
            xs = np.asarray(xs).reshape(len(xs), -1)
            return scale * xs[:, pixel], np.full(len(xs), log_delta)

    return Probe()


def regression_standard_errors(y_hat, big_delta, w, T):
    """Asymptotic standard errors of the T-sample estimators under exact atom weights."""
    mu = w @ y_hat
    c = y_hat - mu
    var = w @ c**2
    e_delta = w @ big_delta
    se = {
        "mu_hat": np.sqrt(w @ c**2 / T),
        "var_prop": np.sqrt(max(w @ c**4 - var**2, 0.0) / T),
        "mu_delta": np.sqrt(w @ (big_delta - e_delta) ** 2 / T),
    }
    infl = c**2 - var + big_delta - e_delta
    se["var_joint"] = np.sqrt(w @ infl**2 / T)
    return se


def classification_standard_errors(p, w, T):
    """Delta-method standard errors for entropy, conditional entropy and MI."""
    mix = w @ p
    g = -(np.log(mix) + 1.0)
    lin = p @ g
    h = entropy(p, axis=1)

    def se(v):
        return np.sqrt(w @ (v - w @ v) ** 2 / T)

    return {"entropy": se(lin), "cond_entropy": se(h), "mutual_info": se(lin - h),
            "mean_probs": np.array([se(p[:, k]) for k in range(p.shape[1])])}


def heteroscedastic_toy(n: int, seed: int):
    """1-d regression with input-dependent noise: y ~ N(sin(2x), (0.05 + 0.4|x|)^2), x ~ U(-1.5, 1.5)."""
    g = np.random.default_rng(seed)
    x = g.uniform(-1.5, 1.5, size=(n, 1))
    sd = 0.05 + 0.4 * np.abs(x[:, 0])
    y = np.sin(2 * x[:, 0]) + sd * g.normal(size=n)
    return x, y, sd**2


def known_noise_map_toy(n: int, side: int, seed: int):
    """Denoising task with a fixed per-pixel noise std map: target = x + std_map * eps."""
    g = np.random.default_rng(seed)
    std_map = g.permutation(np.linspace(0.05, 0.6, side * side))
    x = g.normal(size=(n, side * side))
    y = x + std_map * g.normal(size=x.shape)
    return x, y, std_map
