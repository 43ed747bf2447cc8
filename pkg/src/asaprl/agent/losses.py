"""Training losses with hand-derived gradients.

Each loss takes its noise explicitly so it is a deterministic function of
the network parameters (this is what the finite-difference checks rely on).
With ``u = mu + sigma * eps`` and ``a = tanh(u)`` the sampled log-density is
``sum(-eps^2/2 - log_sigma - log(2 pi)/2 - log(1 - a^2 + c))``; its
derivative w.r.t. ``u`` at fixed ``eps`` is ``2a(1-a^2)/(1-a^2+c)``.
"""

from __future__ import annotations

import numpy as np

from ..nn import LOG_STD_MAX, LOG_STD_MIN, SQUASH_EPS, Mlp, policy_from_output, sech2, split_head, squash_correction


def _squash_grad(u: np.ndarray) -> np.ndarray:
    s = sech2(u)
    return 2.0 * np.tanh(u) * s / (s + SQUASH_EPS)


def _clamp_mask(raw: np.ndarray) -> np.ndarray:
    return ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)).astype(float)


def q_values(critics: list[Mlp], obs: np.ndarray, act: np.ndarray) -> np.ndarray:
    x = np.concatenate([obs, act], axis=-1)
    return np.stack([c.forward(x)[:, 0] for c in critics])


def critic_loss(critic: Mlp, obs: np.ndarray, act: np.ndarray, target: np.ndarray):
    """``mean(0.5 * (Q(s, a) - target)^2)`` and its parameter gradients."""
    q = critic.forward(np.concatenate([obs, act], axis=-1))[:, 0]
    diff = q - target
    loss = 0.5 * float(np.mean(diff**2))
    grads, _ = critic.backward((diff / len(diff))[:, None])
    return loss, grads


def actor_loss(actor: Mlp, critics: list[Mlp], obs: np.ndarray, noise: np.ndarray, weight: float,
               prior: Mlp | None = None):
    """``mean(weight * reg - min_i Q_i(s, tanh(u)))``.

    ``reg`` is ``log pi(a|s)`` (entropy regularization) or, when ``prior`` is
    given, the single-sample KL estimate ``log pi(a|s) - log pi_prior(a|s)``.
    Returns (loss, actor grads, info).
    """
    out = actor.forward(obs)
    pol = policy_from_output(out, noise)
    a, n = pol.action, len(obs)
    x = np.concatenate([obs, a], axis=-1)
    qs = np.stack([c.forward(x)[:, 0] for c in critics])
    pick = np.argmin(qs, axis=0)
    q = qs[pick, np.arange(n)]
    dq_da = np.zeros_like(a)
    obs_dim = obs.shape[1]
    for i, c in enumerate(critics):
        sel = (pick == i).astype(c.dtype)
        if not sel.any():
            continue
        _, gx = c.backward(sel[:, None], param_grads=False)
        dq_da += gx[:, obs_dim:]

    sq = _squash_grad(pol.pre)
    reg = pol.log_prob.copy()
    dreg_du = sq
    if prior is not None:
        p_mean, p_log_std, _ = split_head(np.asarray(prior.forward(obs), dtype=np.float64))
        p_var = np.exp(2.0 * p_log_std)
        zp = (pol.pre - p_mean) ** 2 / p_var
        logp_prior = np.sum(-0.5 * zp - p_log_std - 0.5 * np.log(2 * np.pi), axis=-1) - squash_correction(pol.pre)
        reg = reg - logp_prior
        dreg_du = (pol.pre - p_mean) / p_var  # squash terms cancel

    loss = float(np.mean(weight * reg - q))
    sigma = np.exp(pol.log_std)
    g_u = (weight * dreg_du - dq_da * sech2(pol.pre)) / n
    g_mu = g_u
    g_ls = (-weight / n + g_u * sigma * noise) * _clamp_mask(pol.log_std_raw)
    grads, _ = actor.backward(np.concatenate([g_mu, g_ls], axis=-1))
    info = {"log_prob": pol.log_prob, "reg": reg, "q": q}
    return loss, grads, info


def bc_loss(actor: Mlp, obs: np.ndarray, target_pre: np.ndarray, noise: np.ndarray, beta: float):
    """Negative of ``mean(log pi(theta|s)) + beta * mean(H)``.

    ``target_pre`` are demonstrated actions in pre-squash space and the
    entropy uses the single-sample estimate ``-log pi(a_hat|s)``.
    """
    out = actor.forward(obs)
    mean, log_std, raw = split_head(np.asarray(out, dtype=np.float64))
    sigma = np.exp(log_std)
    z = (target_pre - mean) / sigma
    logp_t = np.sum(-0.5 * z**2 - log_std - 0.5 * np.log(2 * np.pi), axis=-1) - squash_correction(target_pre)
    pol = policy_from_output(out, noise)
    n = len(obs)
    loss = float(-np.mean(logp_t) + beta * np.mean(pol.log_prob))
    sq = _squash_grad(pol.pre)
    g_mu = (-z / sigma + beta * sq) / n
    g_ls = ((1.0 - z**2) + beta * (-1.0 + sq * sigma * noise)) / n * _clamp_mask(raw)
    grads, _ = actor.backward(np.concatenate([g_mu, g_ls], axis=-1))
    return loss, grads, {"log_prob_target": logp_t, "log_prob_sample": pol.log_prob}


def alpha_loss(log_alpha: float, log_prob: np.ndarray, target_entropy: float):
    """``alpha * mean(-log_prob - target_entropy)``; gradient w.r.t. ``log_alpha``."""
    alpha = float(np.exp(log_alpha))
    gap = float(np.mean(-np.asarray(log_prob) - target_entropy))
    return alpha * gap, alpha * gap
