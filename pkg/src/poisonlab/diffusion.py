"""Conditional latent diffusion over user embeddings.

Forward process corrupts a latent with scheduled Gaussian noise; a
residual MLP denoiser conditioned on a (user, item) embedding pair
through dual cross-attention predicts the noise; reverse sampling walks
the chain back from a standard normal draw. Training minimizes the
noise-prediction error plus an optional dispersive penalty that pushes
bottleneck features apart to fight mode collapse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .geometry import logdet_covariance, pairwise_sq_dists
from .seeding import stream
from .serialize import load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    hidden: int = 64
    n_down: int = 1
    n_mid: int = 1
    n_up: int = 1
    lam_disp: float = 0.5
    tau: float = 0.5
    lr: float = 0.005
    batch_size: int = 64
    epochs: int = 200

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"config.tau must be positive, got {self.tau}")
        if self.lam_disp < 0:
            raise ValueError(f"config.lam_disp must be >= 0, got {self.lam_disp}")
        if self.hidden <= 0 or self.hidden % 2:
            raise ValueError(f"config.hidden must be positive and even, got {self.hidden}")
        if min(self.n_down, self.n_mid, self.n_up) < 1:
            raise ValueError("block counts must be >= 1")


# ----------------------------------------------------------------- schedule

@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays indexed 1..T; slot 0 is the ᾱ_0 = 1 sentinel."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule with derived alpha and cumulative alpha-bar."""
    if T < 0:
        raise ValueError(f"T must be >= 0, got {T}")
    if T > 0 and not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < start <= end < 1, got ({beta_start}, {beta_end})")
    beta = np.zeros(T + 1)
    if T > 0:
        beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for a in (beta, alpha, alpha_bar):
        a.flags.writeable = False
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def schedule_from_config(config: DiffusionConfig) -> NoiseSchedule:
    return make_schedule(config.T, config.beta_start, config.beta_end)


def forward_noise(z0, t, eps, sched: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; t may be per-row."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"t must lie in 1..{sched.T}")
    ab = sched.alpha_bar[t]
    if z0.ndim == 2:
        ab = ab.reshape(-1, 1)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def reverse_step(z_t, t: int, eps_hat, sched: NoiseSchedule, eta):
    """One denoising step; the final step (t=1) adds no fresh noise."""
    if not 1 <= t <= sched.T:
        raise ValueError(f"t must lie in 1..{sched.T}")
    beta = sched.beta[t]
    mean = (z_t - beta / np.sqrt(1.0 - sched.alpha_bar[t]) * eps_hat) / np.sqrt(sched.alpha[t])
    if t > 1:
        return mean + np.sqrt(beta) * np.asarray(eta, dtype=np.float64)
    return mean


# ----------------------------------------------------------------- denoiser

def sinusoidal_embedding(t, width: int) -> np.ndarray:
    """Interleaved sin/cos of t at geometric frequencies (base 10000)."""
    if width % 2:
        raise ValueError(f"time-embedding width must be even, got {width}")
    tcol = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    k = np.arange(width // 2, dtype=np.float64)
    ang = tcol / (10000.0 ** (2.0 * k / width))
    out = np.empty((tcol.shape[0], width))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def _weight(rng, fan_in: int, fan_out: int, name: str) -> dc.Parameter:
    return dc.Parameter(rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in), name=name)


def _linear(rng, fan_in: int, fan_out: int, name: str, zero: bool = False):
    if zero:
        w = dc.Parameter(np.zeros((fan_in, fan_out)), name=f"{name}.w")
    else:
        w = _weight(rng, fan_in, fan_out, f"{name}.w")
    return w, dc.Parameter(np.zeros((1, fan_out)), name=f"{name}.b")


class DenoiserParams:
    """All trainable weights of the denoiser, in a fixed documented order.

    Layout: input map, time projection, down blocks, user/item attention
    projections, mid blocks, up blocks, output map. Each residual block
    is (w1, b1, w2, b2) around a silu. The output map starts at zero so a
    fresh denoiser predicts zero noise.
    """

    def __init__(self, latent_dim: int, cond_dim: int, hidden: int,
                 n_down: int, n_mid: int, n_up: int, rng):
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.hidden = hidden
        self.n_down, self.n_mid, self.n_up = n_down, n_mid, n_up
        self.w_in, self.b_in = _linear(rng, latent_dim, hidden, "in")
        self.w_time, self.b_time = _linear(rng, hidden, hidden, "time")
        self.down = [self._block(rng, hidden, f"down{i}") for i in range(n_down)]
        self.wq_u = _weight(rng, hidden, hidden, "attn_u.q")
        self.wk_u = _weight(rng, cond_dim, hidden, "attn_u.k")
        self.wv_u = _weight(rng, cond_dim, hidden, "attn_u.v")
        self.wq_v = _weight(rng, hidden, hidden, "attn_v.q")
        self.wk_v = _weight(rng, cond_dim, hidden, "attn_v.k")
        self.wv_v = _weight(rng, cond_dim, hidden, "attn_v.v")
        self.mid = [self._block(rng, hidden, f"mid{i}") for i in range(n_mid)]
        self.up = [self._block(rng, hidden, f"up{i}") for i in range(n_up)]
        self.w_out, self.b_out = _linear(rng, hidden, latent_dim, "out", zero=True)

    @staticmethod
    def _block(rng, width, name):
        w1, b1 = _linear(rng, width, width, f"{name}.fc1")
        w2, b2 = _linear(rng, width, width, f"{name}.fc2")
        return (w1, b1, w2, b2)

    def params(self) -> list[dc.Parameter]:
        out = [self.w_in, self.b_in, self.w_time, self.b_time]
        for blk in self.down:
            out.extend(blk)
        out.extend([self.wq_u, self.wk_u, self.wv_u, self.wq_v, self.wk_v, self.wv_v])
        for blk in self.mid + self.up:
            out.extend(blk)
        out.extend([self.w_out, self.b_out])
        return out

    def snapshot(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params()]

    def restore(self, blobs: list[np.ndarray]) -> None:
        for p, b in zip(self.params(), blobs):
            p.data[...] = b


def init_denoiser(config: DiffusionConfig, latent_dim: int, cond_dim: int, rng) -> DenoiserParams:
    return DenoiserParams(latent_dim, cond_dim, config.hidden,
                          config.n_down, config.n_mid, config.n_up, rng)


def _res_block(h, blk):
    w1, b1, w2, b2 = blk
    inner = dc.silu(dc.add(dc.matmul(h, w1), b1))
    return dc.add(h, dc.add(dc.matmul(inner, w2), b2))


def _attend(q, cond, wq, wk, wv, hidden):
    # single key/value token: the softmax weight is identically 1, but the
    # score is computed so the projections stay part of the graph
    logit = dc.tensor_sum(dc.mul(dc.matmul(q, wq), dc.matmul(cond, wk)),
                          axis=1, keepdims=True)
    weight = dc.softmax_lastdim(dc.scale(logit, 1.0 / math.sqrt(hidden)))
    return dc.mul(weight, dc.matmul(cond, wv))


def dual_cross_attention(q, zu, zv, params: DenoiserParams):
    """q + Attn(q, zu) + Attn(q, zv) with one key/value token per branch."""
    q = q if isinstance(q, dc.Tensor) else dc.Tensor(q)
    zu = zu if isinstance(zu, dc.Tensor) else dc.Tensor(zu)
    zv = zv if isinstance(zv, dc.Tensor) else dc.Tensor(zv)
    a_u = _attend(q, zu, params.wq_u, params.wk_u, params.wv_u, params.hidden)
    a_v = _attend(q, zv, params.wq_v, params.wk_v, params.wv_v, params.hidden)
    return dc.add(q, dc.add(a_u, a_v))


def denoiser_forward(z_t, t, zu, zv, params: DenoiserParams):
    """Predict the injected noise; also return the bottleneck feature m.

    Pipeline: input map, add projected time embedding, down residual
    blocks, dual cross-attention, mid residual blocks (m taps the last),
    up residual blocks with U-style skip additions from the down path,
    zero-initialized output map.
    """
    z_t = z_t if isinstance(z_t, dc.Tensor) else dc.Tensor(np.atleast_2d(z_t))
    temb = dc.matmul(dc.Tensor(sinusoidal_embedding(t, params.hidden)), params.w_time)
    h = dc.add(dc.add(dc.matmul(z_t, params.w_in), params.b_in),
               dc.add(temb, params.b_time))
    skips = []
    for blk in params.down:
        h = _res_block(h, blk)
        skips.append(h)
    h = dual_cross_attention(h, zu, zv, params)
    for blk in params.mid:
        h = _res_block(h, blk)
    m = h
    for k, blk in enumerate(params.up):
        j = len(skips) - 1 - k
        if j >= 0:
            h = dc.add(h, skips[j])
        h = _res_block(h, blk)
    eps_hat = dc.add(dc.matmul(h, params.w_out), params.b_out)
    return eps_hat, m


# ------------------------------------------------------------------- losses

def dispersive_loss(bottlenecks, tau: float) -> dc.Tensor:
    """log mean exp(-|m_i - m_j|^2 / tau) over ordered pairs i != j.

    Always <= 0; equals 0 only when all rows coincide.  Computed with a
    constant shift so widely spread batches (every exponent below the
    underflow threshold) still return the finite value instead of log(0).
    """
    m = bottlenecks if isinstance(bottlenecks, dc.Tensor) else dc.Tensor(bottlenecks)
    if m.shape[0] < 2:
        raise dc.ShapeError(f"dispersive_loss: need a batch of >= 2, got {m.shape[0]}")
    x = dc.scale(pairwise_sq_dists(m), -1.0 / tau)
    shift = float(x.data.max())
    logmean = dc.log(dc.tensor_mean(dc.exp(dc.sub(x, dc.Tensor(shift)))))
    return dc.add(logmean, dc.Tensor(shift))


def _noised_batch(z0_batch, sched: NoiseSchedule, rng):
    z0 = np.atleast_2d(np.asarray(z0_batch, dtype=np.float64))
    t = rng.integers(1, sched.T + 1, size=z0.shape[0])
    eps = rng.standard_normal(z0.shape)
    return forward_noise(z0, t, eps, sched), t, eps


def total_loss(z0_batch, zu, zv, params: DenoiserParams, sched: NoiseSchedule,
               rng, lam_disp: float, tau: float):
    """L_diff + lam_disp * L_disp on one batch; returns (loss, l_diff, l_disp).

    L_diff is the batch mean of the per-sample squared L2 noise error
    (summed over latent dimensions). lam_disp = 0 skips the dispersive
    term entirely, leaving the arithmetic of a pure L_diff run.
    """
    z_t, t, eps = _noised_batch(z0_batch, sched, rng)
    eps_hat, m = denoiser_forward(z_t, t, zu, zv, params)
    l_diff = dc.tensor_mean(dc.l2norm_sq(dc.sub(eps_hat, dc.Tensor(eps)), axis=1))
    if lam_disp == 0.0:
        return l_diff, l_diff, None
    l_disp = dispersive_loss(m, tau)
    return dc.add(l_diff, dc.scale(l_disp, lam_disp)), l_diff, l_disp


def diffusion_loss(z0_batch, zu, zv, params: DenoiserParams,
                   sched: NoiseSchedule, seed: int) -> dc.Tensor:
    """Noise-prediction error on a batch with seeded (t, eps) draws."""
    _, l_diff, _ = total_loss(z0_batch, zu, zv, params, sched,
                              np.random.default_rng(seed), 0.0, 1.0)
    return l_diff


# ----------------------------------------------------------------- training

class GeneratorDiverged(RuntimeError):
    """Raised on a non-finite training loss; carries the last finite weights."""

    def __init__(self, msg: str, params: DenoiserParams):
        super().__init__(msg)
        self.params = params


def train_generator(config: DiffusionConfig, z0_pool, cond_user, cond_item,
                    seed: int, log=None) -> DenoiserParams:
    """Mini-batch Adam on the total loss over the latent pool.

    Conditions are resampled per batch from the supplied condition rows.
    Each epoch logs L_diff, L_disp, and the log-det covariance of the
    bottleneck features on a fixed probe batch drawn up front, so runs
    with different lam_disp stay comparable. Non-finite losses abort with
    the last finite weights attached.
    """
    z0_pool = np.atleast_2d(np.asarray(z0_pool, dtype=np.float64))
    cond_user = np.atleast_2d(np.asarray(cond_user, dtype=np.float64))
    cond_item = np.atleast_2d(np.asarray(cond_item, dtype=np.float64))
    if z0_pool.shape[0] == 0:
        raise ValueError("z0 pool is empty")
    if cond_user.shape[0] != cond_item.shape[0] or cond_user.shape[0] == 0:
        raise ValueError("condition rows must be nonempty and aligned")
    rng = stream(seed, "generator")
    sched = schedule_from_config(config)
    params = init_denoiser(config, z0_pool.shape[1], cond_user.shape[1], rng)
    opt = dc.Adam(params.params(), lr=config.lr)
    n_pool, n_cond = z0_pool.shape[0], cond_user.shape[0]
    bs = min(config.batch_size, n_pool)

    probe_size = max(2, bs)
    probe_rows = rng.integers(0, n_pool, size=probe_size)
    probe_cond = rng.integers(0, n_cond, size=probe_size)
    probe_t = rng.integers(1, sched.T + 1, size=probe_size)
    probe_eps = rng.standard_normal((probe_size, z0_pool.shape[1]))
    probe_zt = forward_noise(z0_pool[probe_rows], probe_t, probe_eps, sched)

    last_good = params.snapshot()
    for epoch in range(config.epochs):
        order = rng.permutation(n_pool)
        diff_vals = []
        for start in range(0, n_pool - bs + 1, bs):
            rows = order[start:start + bs]
            cond_rows = rng.integers(0, n_cond, size=bs)
            opt.zero_grad()
            try:
                with dc.Tape() as tape:
                    loss, l_diff, _ = total_loss(
                        z0_pool[rows], cond_user[cond_rows], cond_item[cond_rows],
                        params, sched, rng, config.lam_disp, config.tau)
                dc.backward(loss, tape)
            except dc.NonFiniteError as exc:
                params.restore(last_good)
                raise GeneratorDiverged(
                    f"generator diverged at epoch {epoch + 1}: {exc}", params) from exc
            opt.step()
            diff_vals.append(float(l_diff.data))
        last_good = params.snapshot()
        if log is not None:
            _, m = denoiser_forward(probe_zt, probe_t, cond_user[probe_cond],
                                    cond_item[probe_cond], params)
            probe_disp = float(dispersive_loss(m, config.tau).data) if probe_size >= 2 else 0.0
            log.note(f"generator epoch {epoch + 1}: l_diff={np.mean(diff_vals):.6f} "
                     f"l_disp={probe_disp:.6f} logdet={logdet_covariance(m.data):.6f}")
    return params


def bottleneck_probe(params: DenoiserParams, config: DiffusionConfig,
                     z0_pool, cond_user, cond_item, seed: int, size: int = 64) -> np.ndarray:
    """Bottleneck features on a fixed seeded probe batch (for diagnostics)."""
    z0_pool = np.atleast_2d(np.asarray(z0_pool, dtype=np.float64))
    cond_user = np.atleast_2d(np.asarray(cond_user, dtype=np.float64))
    cond_item = np.atleast_2d(np.asarray(cond_item, dtype=np.float64))
    sched = schedule_from_config(config)
    rng = stream(seed, "probe")
    rows = rng.integers(0, z0_pool.shape[0], size=size)
    conds = rng.integers(0, cond_user.shape[0], size=size)
    t = rng.integers(1, sched.T + 1, size=size)
    eps = rng.standard_normal((size, z0_pool.shape[1]))
    z_t = forward_noise(z0_pool[rows], t, eps, sched)
    _, m = denoiser_forward(z_t, t, cond_user[conds], cond_item[conds], params)
    return m.data.copy()


# ----------------------------------------------------------------- sampling

def sample_latent(params: DenoiserParams, sched: NoiseSchedule, zu, zv, seed) -> np.ndarray:
    """Draw z_T ~ N(0, I) and denoise it down the full chain.

    ``seed`` may be an int or a Generator; each fake profile gets its own
    stream so samples are order-independent. T = 0 returns the raw draw.
    """
    rng = np.random.default_rng(seed)
    zu = np.asarray(zu, dtype=np.float64).reshape(1, -1)
    zv = np.asarray(zv, dtype=np.float64).reshape(1, -1)
    z = rng.standard_normal((1, params.latent_dim))
    for t in range(sched.T, 0, -1):
        eps_hat, _ = denoiser_forward(z, t, zu, zv, params)
        eta = rng.standard_normal((1, params.latent_dim)) if t > 1 else 0.0
        z = reverse_step(z, t, eps_hat.data, sched, eta)
    return z.reshape(-1)


# -------------------------------------------------------------- persistence

_ARRAY_ORDER_NOTE = "arrays follow DenoiserParams.params() order"


def save_generator(path, params: DenoiserParams, config: DiffusionConfig, seed: int) -> None:
    header = {
        "kind": "generator",
        "latent_dim": params.latent_dim,
        "cond_dim": params.cond_dim,
        "hidden": params.hidden,
        "n_down": params.n_down,
        "n_mid": params.n_mid,
        "n_up": params.n_up,
        "T": config.T,
        "beta_start": config.beta_start,
        "beta_end": config.beta_end,
        "lam_disp": config.lam_disp,
        "tau": config.tau,
        "seed": int(seed),
        "note": _ARRAY_ORDER_NOTE,
    }
    arrays = {p.name + f"#{k}": p.data for k, p in enumerate(params.params())}
    save_checkpoint(path, header, arrays)


def load_generator(path) -> tuple[DenoiserParams, DiffusionConfig, dict]:
    header, arrays = load_checkpoint(path)
    if header.get("kind") != "generator":
        raise ValueError(f"{path}: not a generator checkpoint")
    config = DiffusionConfig(
        T=header["T"], beta_start=header["beta_start"], beta_end=header["beta_end"],
        hidden=header["hidden"], n_down=header["n_down"], n_mid=header["n_mid"],
        n_up=header["n_up"], lam_disp=header["lam_disp"], tau=header["tau"])
    params = init_denoiser(config, header["latent_dim"], header["cond_dim"],
                           np.random.default_rng(0))
    blobs = list(arrays.values())
    if len(blobs) != len(params.params()):
        raise ValueError(f"{path}: expected {len(params.params())} arrays, found {len(blobs)}")
    params.restore(blobs)
    return params, config, header
