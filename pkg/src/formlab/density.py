"""Effect models: conditional densities p(x_t | x_{t-1}) with a GMM head.

An effect model is an MLP trunk over the standardized previous observation,
a one-hot prediction-offset label concatenated to the encoding, and a
4-component diagonal Gaussian mixture head. Trained by maximum likelihood
with multi-offset overshooting and an autoregressive term that conditions
on the model's own sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nets
from .common import StructuralError

N_COMPONENTS = 4
SCALE_BIAS = 1e-4
LOG_2PI = math.log(2.0 * math.pi)


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    # log(exp(y) - 1), stable for y not tiny
    return y + np.log(-np.expm1(-y))


# ---------------------------------------------------------------------------
# GMM head
# ---------------------------------------------------------------------------


@dataclass
class GmmOutput:
    """Raw head outputs for a batch: logits (B,K), means / raw_scales (B,K,D)."""

    logits: np.ndarray
    means: np.ndarray
    raw_scales: np.ndarray

    def scales(self) -> np.ndarray:
        return softplus(self.raw_scales) + SCALE_BIAS


def _as_batched(out: GmmOutput, target: np.ndarray):
    logits, means, raw = out.logits, out.means, out.raw_scales
    target = np.asarray(target, dtype=np.float64)
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits[None]
        means = means[None]
        raw = raw[None]
        target = target[None]
    return GmmOutput(logits, means, raw), target, squeeze


def gmm_log_prob(out: GmmOutput, target: np.ndarray) -> np.ndarray | float:
    """log sum_k softmax(logits)_k prod_d N(target_d; mean_kd, scale_kd^2)."""
    b_out, t, squeeze = _as_batched(out, target)
    if t.shape[-1] != b_out.means.shape[-1]:
        raise StructuralError("target dim does not match mixture dim")
    s = b_out.scales()
    z = (t[:, None, :] - b_out.means) / s
    comp = -0.5 * (z * z + LOG_2PI).sum(axis=2) - np.log(s).sum(axis=2)
    logw = b_out.logits - _logsumexp(b_out.logits, axis=1, keepdims=True)
    total = _logsumexp(logw + comp, axis=1)
    return float(total[0]) if squeeze else total


def gmm_log_prob_grads(out: GmmOutput, target: np.ndarray):
    """(logp, dlogits, dmeans, draw_scales) for a batch; grads are per-sample."""
    b_out, t, squeeze = _as_batched(out, target)
    s = b_out.scales()
    diff = t[:, None, :] - b_out.means
    z = diff / s
    comp = -0.5 * (z * z + LOG_2PI).sum(axis=2) - np.log(s).sum(axis=2)
    logw = b_out.logits - _logsumexp(b_out.logits, axis=1, keepdims=True)
    joint = logw + comp
    logp = _logsumexp(joint, axis=1)
    resp = np.exp(joint - logp[:, None])          # posterior responsibilities
    w = np.exp(logw)
    dlogits = resp - w
    dmeans = resp[:, :, None] * diff / (s * s)
    dscales = resp[:, :, None] * (diff * diff / (s * s * s) - 1.0 / s)
    draw = dscales * _sigmoid(b_out.raw_scales)   # softplus'(x) = sigmoid(x)
    if squeeze:
        return float(logp[0]), dlogits[0], dmeans[0], draw[0]
    return logp, dlogits, dmeans, draw


def gmm_sample(out: GmmOutput, rng: np.random.Generator) -> np.ndarray:
    """Categorical draw over components, then a diagonal Gaussian draw."""
    b_out, _, squeeze = _as_batched(out, np.zeros(out.means.shape[-1]))
    logits = b_out.logits
    w = np.exp(logits - _logsumexp(logits, axis=1, keepdims=True))
    cum = np.cumsum(w, axis=1)
    u = rng.random(size=(logits.shape[0], 1))
    k = (u > cum[:, :-1]).sum(axis=1)
    rows = np.arange(logits.shape[0])
    mean = b_out.means[rows, k]
    scale = b_out.scales()[rows, k]
    x = mean + scale * rng.standard_normal(size=mean.shape)
    return x[0] if squeeze else x


def _logsumexp(a, axis=None, keepdims=False):
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))
    if not keepdims and axis is not None:
        out = np.squeeze(out, axis=axis)
    return out


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# Running standardizer
# ---------------------------------------------------------------------------


@dataclass
class Standardizer:
    """Per-dimension running mean/variance with EMA decay 0.99 per batch.

    The variance floor keeps constant dimensions (frozen distractor bits,
    per-episode goals) from blowing up standardized values on novel inputs;
    0.25 is the variance of a fair binary feature.
    """

    dim: int
    decay: float = 0.99
    var_floor: float = 0.25
    ema_mean: np.ndarray = None
    ema_sq: np.ndarray = None
    count: int = 0

    def __post_init__(self):
        if self.ema_mean is None:
            self.ema_mean = np.zeros(self.dim)
        if self.ema_sq is None:
            self.ema_sq = np.zeros(self.dim)

    def update(self, batch: np.ndarray) -> None:
        batch = np.asarray(batch, dtype=np.float64).reshape(-1, self.dim)
        d = self.decay
        self.ema_mean = d * self.ema_mean + (1.0 - d) * batch.mean(axis=0)
        self.ema_sq = d * self.ema_sq + (1.0 - d) * (batch * batch).mean(axis=0)
        self.count += 1

    def _require_ready(self):
        if self.count == 0:
            raise StructuralError("standardizer used before any update")

    @property
    def mean(self) -> np.ndarray:
        self._require_ready()
        debias = 1.0 - self.decay**self.count
        return self.ema_mean / debias

    @property
    def var(self) -> np.ndarray:
        self._require_ready()
        debias = 1.0 - self.decay**self.count
        raw = self.ema_sq / debias - (self.ema_mean / debias) ** 2
        return np.maximum(raw, self.var_floor)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(self.var)

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.sigma

    def unstandardize(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=np.float64) * self.sigma + self.mean

    def log_sigma_sum(self) -> float:
        """Jacobian term relating standardized-space and raw-space densities."""
        return float(np.log(self.sigma).sum())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            "std_ema_mean": self.ema_mean.copy(),
            "std_ema_sq": self.ema_sq.copy(),
            "std_count": np.array([float(self.count)]),
        }

    @classmethod
    def from_arrays(cls, arrays: dict, dim: int, decay: float = 0.99, var_floor: float = 0.25):
        st = cls(dim=dim, decay=decay, var_floor=var_floor)
        st.ema_mean = arrays["std_ema_mean"].copy()
        st.ema_sq = arrays["std_ema_sq"].copy()
        st.count = int(round(arrays["std_count"][0]))
        return st


# ---------------------------------------------------------------------------
# Effect model
# ---------------------------------------------------------------------------


@dataclass
class EffectModelConfig:
    obs_dim: int
    width: int = 64
    delta_max: int = 5
    beta_ar: float = 0.1
    l2_weight: float = 0.1
    lr: float = 1e-4
    batch_windows: int = 64
    train_steps: int = 8000
    eval_every: int = 500
    holdout_frac: float = 0.05
    std_var_floor: float = 0.25

    def __post_init__(self):
        if self.delta_max < 1:
            raise StructuralError("delta_max must be >= 1")
        if self.beta_ar < 0 or self.l2_weight < 0:
            raise StructuralError("regularizer weights must be >= 0")


@dataclass
class EffectModel:
    """Encoder trunk + offset-conditioned GMM head + input standardizer."""

    encoder: nets.DenseNet
    head: nets.DenseNet
    standardizer: Standardizer
    config: EffectModelConfig

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.head.params()

    def with_params(self, params: list[np.ndarray]) -> "EffectModel":
        n_enc = 2 * len(self.encoder.weights)
        return EffectModel(
            self.encoder.with_params(params[:n_enc]),
            self.head.with_params(params[n_enc:]),
            self.standardizer,
            self.config,
        )

    def copy(self) -> "EffectModel":
        return EffectModel(
            self.encoder.copy(),
            self.head.copy(),
            Standardizer.from_arrays(
                self.standardizer.state_arrays(),
                self.standardizer.dim,
                self.standardizer.decay,
                self.standardizer.var_floor,
            ),
            self.config,
        )


def init_effect_model(config: EffectModelConfig, rng: np.random.Generator) -> EffectModel:
    d, w = config.obs_dim, config.width
    encoder = nets.init_dense([d, w, w], ["tanh", "elu"], rng)
    head_out = N_COMPONENTS * (1 + 2 * d)
    head = nets.init_dense([w + config.delta_max, w, head_out], ["elu", "identity"], rng)
    std = Standardizer(dim=d, var_floor=config.std_var_floor)
    return EffectModel(encoder, head, std, config)


def _split_head(raw: np.ndarray, d: int) -> GmmOutput:
    k = N_COMPONENTS
    logits = raw[..., :k]
    means = raw[..., k : k + k * d].reshape(*raw.shape[:-1], k, d)
    raw_scales = raw[..., k + k * d :].reshape(*raw.shape[:-1], k, d)
    return GmmOutput(logits, means, raw_scales)


def _merge_head_grads(dlogits, dmeans, draw) -> np.ndarray:
    b = dlogits.shape[0]
    return np.concatenate(
        [dlogits, dmeans.reshape(b, -1), draw.reshape(b, -1)], axis=1
    )


def effect_forward(
    model: EffectModel, x_std: np.ndarray, delta: int, with_cache: bool = False
):
    """GMM head for standardized previous observations at prediction offset delta."""
    cfg = model.config
    if not 1 <= delta <= cfg.delta_max:
        raise StructuralError(f"delta {delta} outside [1, {cfg.delta_max}]")
    x_std = np.asarray(x_std, dtype=np.float64)
    squeeze = x_std.ndim == 1
    if squeeze:
        x_std = x_std[None]
    enc, enc_cache = nets.forward(model.encoder, x_std)
    onehot = np.zeros((x_std.shape[0], cfg.delta_max))
    onehot[:, delta - 1] = 1.0
    z = np.concatenate([enc, onehot], axis=1)
    raw, head_cache = nets.forward(model.head, z)
    out = _split_head(raw, cfg.obs_dim)
    if squeeze:
        out = GmmOutput(out.logits[0], out.means[0], out.raw_scales[0])
    if with_cache:
        return out, (enc_cache, head_cache)
    return out


def _backward_through(model: EffectModel, caches, head_out_grad: np.ndarray):
    """Accumulate parameter grads given d(loss)/d(raw head output)."""
    enc_cache, head_cache = caches
    head_grads, z_grad = nets.backward(model.head, head_cache, head_out_grad)
    enc_grad = z_grad[:, : model.config.width]
    enc_grads, _ = nets.backward(model.encoder, enc_cache, enc_grad)
    return enc_grads + head_grads


def sample_next(
    model: EffectModel, x_prev_std: np.ndarray, rng: np.random.Generator, delta: int = 1
) -> np.ndarray:
    out = effect_forward(model, x_prev_std, delta)
    return gmm_sample(out, rng)


def log_prob_next(model: EffectModel, x_prev_std: np.ndarray, x_next_std: np.ndarray):
    """Next-step (delta = 1) conditional log-density in standardized space."""
    out = effect_forward(model, x_prev_std, 1)
    return gmm_log_prob(out, x_next_std)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def effect_loss(
    model: EffectModel,
    windows: np.ndarray,
    rng: np.random.Generator,
    frozen_ar_sample: np.ndarray | None = None,
):
    """Negative regularized log-likelihood on standardized windows.

    ``windows`` has shape (B, delta_max + 2, D): rows are the raw
    observations x_{t-1} .. x_{t+delta_max}. The loss is

        -( (1/delta_max) sum_delta log p(x_{t+delta} | x_t, delta)
           + beta_ar * log p(x_{t+1} | x~_t, delta=1) )

    averaged over the batch, where x~_t is sampled from p(. | x_{t-1}) and
    treated as data (no gradient flows through the sample).
    Returns (loss, grads, aux).
    """
    cfg = model.config
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 3 or windows.shape[1] != cfg.delta_max + 2:
        raise StructuralError("windows must have shape (B, delta_max + 2, D)")
    b = windows.shape[0]
    std = model.standardizer
    w_std = std.standardize(windows.reshape(-1, cfg.obs_dim)).reshape(windows.shape)
    x_prev, x_anchor = w_std[:, 0], w_std[:, 1]

    total_logp = 0.0
    grad_acc = [np.zeros_like(p) for p in model.params()]
    scale = 1.0 / (cfg.delta_max * b)
    for delta in range(1, cfg.delta_max + 1):
        out, caches = effect_forward(model, x_anchor, delta, with_cache=True)
        logp, dl, dm, ds = gmm_log_prob_grads(out, w_std[:, 1 + delta])
        total_logp += logp.sum() * (1.0 / cfg.delta_max)
        head_grad = _merge_head_grads(dl, dm, ds) * (-scale)
        for acc, g in zip(grad_acc, _backward_through(model, caches, head_grad)):
            acc += g

    ar_logp_mean = 0.0
    if cfg.beta_ar > 0.0:
        if frozen_ar_sample is not None:
            x_tilde = np.asarray(frozen_ar_sample, dtype=np.float64)
        else:
            x_tilde = sample_next(model, x_prev, rng, delta=1)
        out, caches = effect_forward(model, x_tilde, 1, with_cache=True)
        logp, dl, dm, ds = gmm_log_prob_grads(out, w_std[:, 2])
        ar_logp_mean = logp.mean()
        head_grad = _merge_head_grads(dl, dm, ds) * (-(cfg.beta_ar / b))
        for acc, g in zip(grad_acc, _backward_through(model, caches, head_grad)):
            acc += g

    loss = -(total_logp / b + cfg.beta_ar * ar_logp_mean)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite effect model loss")
    aux = {"overshoot_logp": total_logp / b, "ar_logp": ar_logp_mean}
    return loss, grad_acc, aux


def effect_model_step(
    model: EffectModel,
    adam: nets.AdamState,
    windows: np.ndarray,
    rng: np.random.Generator,
    update_standardizer: bool = True,
):
    """One MLE step; shared by offline demonstrator and online imitator training."""
    if update_standardizer:
        model.standardizer.update(windows.reshape(-1, model.config.obs_dim))
    loss, grads, aux = effect_loss(model, windows, rng)
    new_params, adam = nets.adam_step(adam, model.params(), grads)
    return model.with_params(new_params), adam, loss, aux


def sample_windows(
    trajectories: list[np.ndarray],
    n: int,
    window_len: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Uniformly sample anchored windows; trajectories too short are skipped.

    Each trajectory is an (T+1, D) observation array; a window starts at
    t-1 >= 0 and needs window_len rows.
    """
    usable = [t for t in trajectories if t.shape[0] >= window_len]
    if not usable:
        raise StructuralError("no trajectory long enough for the requested window")
    out = np.empty((n, window_len, usable[0].shape[1]))
    ti = rng.integers(0, len(usable), size=n)
    for i, k in enumerate(ti):
        traj = usable[k]
        start = rng.integers(0, traj.shape[0] - window_len + 1)
        out[i] = traj[start : start + window_len]
    return out


def heldout_log_likelihood(model: EffectModel, trajectories: list[np.ndarray]) -> float:
    """Mean next-step log-likelihood (standardized space, delta = 1)."""
    total, count = 0.0, 0
    for traj in trajectories:
        x = model.standardizer.standardize(traj)
        lp = log_prob_next(model, x[:-1], x[1:])
        total += float(np.sum(lp))
        count += len(lp)
    return total / max(count, 1)


def train_demonstrator(
    trajectories: list[np.ndarray],
    config: EffectModelConfig,
    rng: np.random.Generator,
    log_fn=None,
) -> tuple[EffectModel, list[dict]]:
    """Offline MLE training on expert observation trajectories.

    Holds out a fraction of trajectories and records their next-step
    log-likelihood every ``eval_every`` steps (training likelihood alone is
    a poor quality signal, but it is still worth logging).
    """
    if not trajectories:
        raise StructuralError("empty demonstration dataset")
    trajectories = [np.asarray(t, dtype=np.float64) for t in trajectories]
    n_hold = max(1, int(round(len(trajectories) * config.holdout_frac))) if len(trajectories) > 1 else 0
    order = rng.permutation(len(trajectories))
    hold = [trajectories[i] for i in order[:n_hold]]
    train = [trajectories[i] for i in order[n_hold:]] or trajectories

    model = init_effect_model(config, rng)
    adam = nets.init_adam(model.params(), lr=config.lr, l2_weight=config.l2_weight)
    window_len = config.delta_max + 2
    history = []
    for step in range(1, config.train_steps + 1):
        windows = sample_windows(train, config.batch_windows, window_len, rng)
        try:
            model, adam, loss, aux = effect_model_step(model, adam, windows, rng)
        except FloatingPointError as e:
            raise FloatingPointError(f"demonstrator training aborted at step {step}: {e}") from e
        if step % config.eval_every == 0 or step == config.train_steps:
            rec = {"step": step, "loss": loss, **aux}
            if hold:
                rec["heldout_logp"] = heldout_log_likelihood(model, hold)
            history.append(rec)
            if log_fn:
                log_fn(rec)
    return model, history
