"""Waveform GAN training: Wasserstein critic with gradient penalty, plus an
optional categorical code channel recovered by a separate classifier network.

Two modes:

* ``ciwgan`` — the generator's first ``n_codes`` latent slots form a one-hot
  code; a Q-network is trained (jointly with the generator) to recover the
  code from generated audio via softmax cross-entropy.
* ``baregan`` — no code slots and no Q-network; the latent space is pure
  uniform noise.

The generator never sees training audio; it couples to the data only through
critic and Q gradients.  All randomness flows through a single PCG64 stream
that is checkpointed, so an interrupted run resumed from a checkpoint is
bit-identical to an uninterrupted one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import layers as L
from .checkpoint import load_tensors, pack_json, save_tensors, unpack_json
from .optim import AdamState, adam_init, adam_step

N_GAN_LAYERS = 5
UPSAMPLE = 4 ** N_GAN_LAYERS


class GanConfigError(ValueError):
    """Inconsistent training configuration."""


@dataclass
class TrainConfig:
    mode: str = "ciwgan"
    steps: int = 2000
    batch_size: int = 16
    n_critic: int = 5
    lambda_gp: float = 10.0
    q_weight: float = 1.0
    alpha: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    adam_eps: float = 1e-8
    slice_len: int = 4096
    model_dim: int = 16
    latent_dim: int = 100
    n_codes: int = 2
    shuffle_radius: int = 2
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in ("ciwgan", "baregan"):
            raise GanConfigError(f"unknown mode {self.mode!r}")
        if self.mode == "baregan" and self.n_codes != 0:
            raise GanConfigError("baregan mode requires n_codes = 0")
        if self.mode == "ciwgan" and self.n_codes < 2:
            raise GanConfigError("ciwgan mode requires n_codes >= 2")
        if self.slice_len % UPSAMPLE != 0:
            raise GanConfigError(f"slice_len must be a multiple of {UPSAMPLE}")
        if self.n_codes > self.latent_dim:
            raise GanConfigError("n_codes exceeds latent_dim")
        for name in ("steps", "batch_size", "n_critic", "latent_dim", "model_dim"):
            if getattr(self, name) < 1:
                raise GanConfigError(f"{name} must be positive")

    @property
    def n_z(self) -> int:
        return self.latent_dim - self.n_codes


def make_generator_spec(slice_len, model_dim, latent_dim) -> L.NetworkSpec:
    base_len = slice_len // UPSAMPLE
    d = model_dim
    lays = [
        L.dense(latent_dim, base_len * 16 * d),
        L.reshape((16 * d, base_len)),
        L.relu(),
        L.conv1d_transposed(16 * d, 8 * d, 25, 4),
        L.relu(),
        L.conv1d_transposed(8 * d, 4 * d, 25, 4),
        L.relu(),
        L.conv1d_transposed(4 * d, 2 * d, 25, 4),
        L.relu(),
        L.conv1d_transposed(2 * d, d, 25, 4),
        L.relu(),
        L.conv1d_transposed(d, 1, 25, 4, gain=1.0),
        L.tanh(),
    ]
    return L.NetworkSpec(tuple(lays), (latent_dim,))


def _critic_body(slice_len, model_dim, shuffle_radius):
    d = model_dim
    base_len = slice_len // UPSAMPLE
    lays = [L.conv1d(1, d, 25, 4), L.leaky_relu()]
    for c_in, c_out in ((d, 2 * d), (2 * d, 4 * d), (4 * d, 8 * d), (8 * d, 16 * d)):
        if shuffle_radius > 0:
            lays.append(L.phase_shuffle(shuffle_radius))
        lays += [L.conv1d(c_in, c_out, 25, 4), L.leaky_relu()]
    lays.append(L.reshape((16 * d * base_len,)))
    return lays, 16 * d * base_len


def make_critic_spec(slice_len, model_dim, shuffle_radius=2) -> L.NetworkSpec:
    lays, feat = _critic_body(slice_len, model_dim, shuffle_radius)
    lays.append(L.dense(feat, 1, gain=1.0))
    return L.NetworkSpec(tuple(lays), (1, slice_len))


def make_q_spec(slice_len, model_dim, n_codes, shuffle_radius=2) -> L.NetworkSpec:
    lays, feat = _critic_body(slice_len, model_dim, shuffle_radius)
    lays.append(L.dense(feat, n_codes, gain=1.0))
    return L.NetworkSpec(tuple(lays), (1, slice_len))


def sample_latents(rng, n, n_codes, n_z, dtype=np.float32):
    """Code slots (uniform one-hot levels) followed by uniform(-1, 1) noise."""
    z = rng.uniform(-1.0, 1.0, size=(n, n_z))
    if n_codes == 0:
        return z.astype(dtype), None
    levels = rng.integers(0, n_codes, size=n)
    codes = np.zeros((n, n_codes))
    codes[np.arange(n), levels] = 1.0
    return np.concatenate([codes, z], axis=1).astype(dtype), levels


def one_hot(levels, n_codes, dtype=np.float32):
    out = np.zeros((len(levels), n_codes), dtype=dtype)
    out[np.arange(len(levels)), levels] = 1
    return out


def q_loss(true_codes, q_logits):
    """Mean categorical cross-entropy and its gradient w.r.t. the logits."""
    if q_logits.shape != true_codes.shape:
        raise L.ShapeMismatchError(
            f"logit shape {q_logits.shape} != code shape {true_codes.shape}")
    b = q_logits.shape[0]
    shifted = q_logits - q_logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = float(-(true_codes * log_probs).sum() / b)
    dlogits = (np.exp(log_probs) - true_codes) / b
    return loss, dlogits.astype(q_logits.dtype)


def critic_loss(real, fake, critic_spec, critic_params, lambda_gp, rng):
    """WGAN-GP critic loss and parameter gradients.

    loss = mean D(fake) - mean D(real)
         + lambda_gp * mean((||grad_xhat D(xhat)||_2 - 1)^2)

    with xhat = eps * real + (1 - eps) * fake, eps ~ U(0,1) per sample.
    Returns (loss, parts, grads, info); ``info`` carries the per-sample
    interpolate gradient norms and the eps draws for auditing.
    """
    if real.shape != fake.shape:
        raise L.ShapeMismatchError(f"real {real.shape} vs fake {fake.shape}")
    b = real.shape[0]
    dtype = real.dtype
    y_fake, caches_fake = L.forward(critic_spec, critic_params, fake, rng=rng)
    y_real, caches_real = L.forward(critic_spec, critic_params, real, rng=rng)

    eps = rng.uniform(0.0, 1.0, size=(b, 1, 1)).astype(dtype)
    xhat = eps * real + (1 - eps) * fake
    y_hat, caches_hat = L.forward(critic_spec, critic_params, xhat, rng=rng)
    seed = np.ones_like(y_hat)
    g_x, chain = L.input_gradient(critic_spec, critic_params, caches_hat, seed)
    norms = np.sqrt(np.square(g_x).sum(axis=(1, 2)))
    gp = float(np.mean(np.square(norms - 1.0)))

    w_fake = float(y_fake.mean())
    w_real = float(y_real.mean())
    loss = w_fake - w_real + lambda_gp * gp

    grads_fake, _ = L.backward(critic_spec, critic_params, caches_fake,
                               np.full_like(y_fake, 1.0 / b))
    grads_real, _ = L.backward(critic_spec, critic_params, caches_real,
                               np.full_like(y_real, -1.0 / b))
    # dP/dg for P = mean((||g|| - 1)^2), guarded against zero norms.
    coeff = (2.0 * (norms - 1.0) / (b * np.maximum(norms, 1e-12))).astype(dtype)
    r = coeff[:, None, None] * g_x
    grads_gp = L.penalty_param_grads(critic_spec, critic_params, caches_hat, chain, r)

    grads = {}
    for name in critic_params:
        grads[name] = (grads_fake[name] + grads_real[name]
                       + lambda_gp * grads_gp.get(name, 0.0))
    parts = {"w_fake": w_fake, "w_real": w_real, "gp": gp}
    info = {"grad_norms": norms, "eps": eps.reshape(-1)}
    return loss, parts, grads, info


def generator_loss(fake, critic_spec, critic_params, rng,
                   q_spec=None, q_params=None, true_codes=None, q_weight=1.0):
    """Generator objective -mean D(fake) (+ q_weight * code cross-entropy).

    Returns (loss, parts, d_fake, q_grads, q_acc): ``d_fake`` is the gradient
    w.r.t. the fake batch (to be chained through the generator's backward),
    ``q_grads`` the Q-network parameter gradients (the code loss trains both
    networks), ``q_acc`` the code retrieval accuracy on this batch.
    """
    b = fake.shape[0]
    y_fake, caches_fake = L.forward(critic_spec, critic_params, fake, rng=rng)
    d_fake, _ = L.input_gradient(critic_spec, critic_params, caches_fake,
                                 np.full_like(y_fake, -1.0 / b))
    loss = -float(y_fake.mean())
    parts = {"adv": loss, "q": 0.0}
    q_grads = None
    q_acc = math.nan
    if q_spec is not None:
        if true_codes is None:
            raise GanConfigError("code targets required when a Q-network is present")
        logits, caches_q = L.forward(q_spec, q_params, fake, rng=rng)
        ql, dlogits = q_loss(true_codes, logits)
        q_grads, g_q = L.backward(q_spec, q_params, caches_q, dlogits)
        q_grads = {k: q_weight * v for k, v in q_grads.items()}
        d_fake = d_fake + q_weight * g_q
        loss += q_weight * ql
        parts["q"] = ql
        q_acc = float((logits.argmax(axis=1) == true_codes.argmax(axis=1)).mean())
    return loss, parts, d_fake, q_grads, q_acc


@dataclass
class TrainResult:
    config: TrainConfig
    step: int
    gen_params: dict
    critic_params: dict
    q_params: dict | None
    metrics_path: str | None
    checkpoint_paths: list
    code_level_counts: np.ndarray | None
    eps_draws: np.ndarray = field(repr=False, default=None)


class Trainer:
    """Owns the three networks, their optimizers, and the run RNG."""

    def __init__(self, data, cfg: TrainConfig, dtype=np.float32):
        data = np.asarray(data, dtype=dtype)
        if data.ndim != 2 or data.shape[1] != cfg.slice_len:
            raise GanConfigError(
                f"training data must be (n, {cfg.slice_len}), got {data.shape}")
        self.cfg = cfg
        self.dtype = dtype
        self.data = data[:, None, :]  # (n, 1, slice_len)
        self.gen_spec = make_generator_spec(cfg.slice_len, cfg.model_dim, cfg.latent_dim)
        self.critic_spec = make_critic_spec(cfg.slice_len, cfg.model_dim, cfg.shuffle_radius)
        self.q_spec = (make_q_spec(cfg.slice_len, cfg.model_dim, cfg.n_codes,
                                   cfg.shuffle_radius)
                       if cfg.mode == "ciwgan" else None)
        ss = np.random.SeedSequence(cfg.seed).spawn(4)
        self.gen_params = L.init_params(self.gen_spec, ss[0], dtype)
        self.critic_params = L.init_params(self.critic_spec, ss[1], dtype)
        self.q_params = L.init_params(self.q_spec, ss[2], dtype) if self.q_spec else None
        self.rng = np.random.Generator(np.random.PCG64(ss[3]))
        adam = dict(alpha=cfg.alpha, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps)
        self.opt_gen = adam_init(self.gen_params, **adam)
        self.opt_critic = adam_init(self.critic_params, **adam)
        self.opt_q = adam_init(self.q_params, **adam) if self.q_params else None
        self.step = 0
        self.code_level_counts = np.zeros(max(cfg.n_codes, 1), dtype=np.int64)
        self.eps_draws = []

    @property
    def epoch(self) -> float:
        # Samples consumed by the critic per step over the corpus size.
        return self.step * self.cfg.batch_size * self.cfg.n_critic / len(self.data)

    def _latents(self, n):
        lat, levels = sample_latents(self.rng, n, self.cfg.n_codes, self.cfg.n_z,
                                     self.dtype)
        if levels is not None:
            np.add.at(self.code_level_counts, levels, 1)
        return lat, levels

    def _real_batch(self):
        idx = self.rng.integers(0, len(self.data), size=self.cfg.batch_size)
        return self.data[idx]

    def train_step(self):
        """One critic cycle (n_critic updates) plus one generator(+Q) update."""
        cfg = self.cfg
        d_loss = gp = 0.0
        for _ in range(cfg.n_critic):
            real = self._real_batch()
            lat, _ = self._latents(cfg.batch_size)
            fake, _ = L.forward(self.gen_spec, self.gen_params, lat)
            d_loss, parts, grads, info = critic_loss(
                real, fake, self.critic_spec, self.critic_params, cfg.lambda_gp, self.rng)
            gp = parts["gp"]
            self.eps_draws.append(info["eps"])
            self.critic_params, _ = adam_step(self.opt_critic, self.critic_params, grads)

        lat, levels = self._latents(cfg.batch_size)
        fake, caches_g = L.forward(self.gen_spec, self.gen_params, lat)
        codes = one_hot(levels, cfg.n_codes, self.dtype) if levels is not None else None
        g_loss, parts, d_fake, q_grads, q_acc = generator_loss(
            fake, self.critic_spec, self.critic_params, self.rng,
            self.q_spec, self.q_params, codes, cfg.q_weight)
        gen_grads, _ = L.backward(self.gen_spec, self.gen_params, caches_g, d_fake)
        self.gen_params, _ = adam_step(self.opt_gen, self.gen_params, gen_grads)
        if q_grads is not None:
            self.q_params, _ = adam_step(self.opt_q, self.q_params, q_grads)
        self.step += 1
        return {"step": self.step, "epoch": self.epoch, "d_loss": d_loss,
                "g_loss": g_loss, "gp": gp, "q_loss": parts["q"], "q_acc": q_acc}

    # -- checkpointing ------------------------------------------------------

    def state_tensors(self) -> dict:
        out = {"meta/step": np.int64(self.step),
               "__config__": pack_json(asdict(self.cfg)),
               "__rng__": pack_json(self.rng.bit_generator.state)}
        nets = {"gen": (self.gen_params, self.opt_gen),
                "critic": (self.critic_params, self.opt_critic)}
        if self.q_params is not None:
            nets["q"] = (self.q_params, self.opt_q)
        for net, (params, opt) in nets.items():
            for k, v in params.items():
                out[f"{net}/{k}"] = v
            for k, v in opt.m.items():
                out[f"opt_{net}/m/{k}"] = v
            for k, v in opt.v.items():
                out[f"opt_{net}/v/{k}"] = v
            out[f"opt_{net}/step"] = np.int64(opt.step)
        return out

    def save_checkpoint(self, path):
        save_tensors(path, self.state_tensors())

    @classmethod
    def from_checkpoint(cls, path, data):
        tensors = load_tensors(path)
        cfg = TrainConfig(**unpack_json(tensors["__config__"]))
        trainer = cls(data, cfg)
        trainer.load_state(tensors)
        return trainer

    def load_state(self, tensors: dict):
        self.step = int(tensors["meta/step"])
        self.rng.bit_generator.state = unpack_json(tensors["__rng__"])
        nets = {"gen": (self.gen_params, self.opt_gen),
                "critic": (self.critic_params, self.opt_critic)}
        if self.q_params is not None:
            nets["q"] = (self.q_params, self.opt_q)
        for net, (params, opt) in nets.items():
            for k in params:
                params[k] = tensors[f"{net}/{k}"].astype(self.dtype)
                opt.m[k] = tensors[f"opt_{net}/m/{k}"].astype(self.dtype)
                opt.v[k] = tensors[f"opt_{net}/v/{k}"].astype(self.dtype)
            opt.step = int(tensors[f"opt_{net}/step"])


def _metrics_fields(mode):
    base = ["step", "epoch", "d_loss", "g_loss", "gp"]
    return base + (["q_loss", "q_acc"] if mode == "ciwgan" else [])


def _format_metric(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".8g")


def train(data, cfg: TrainConfig, out_dir=None, resume_from=None,
          progress=None) -> TrainResult:
    """Run the full training loop; write metrics CSV and checkpoints.

    ``progress`` is an optional callable invoked with each metrics row.
    """
    if resume_from is not None:
        trainer = Trainer.from_checkpoint(resume_from, data)
        cfg = trainer.cfg
    else:
        trainer = Trainer(data, cfg)
    fields = _metrics_fields(cfg.mode)
    metrics_path = None
    writer = None
    fh = None
    ckpts = []
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(fields)
    try:
        while trainer.step < cfg.steps:
            row = trainer.train_step()
            if writer is not None:
                writer.writerow([_format_metric(row[f]) for f in fields])
            if progress is not None:
                progress(row)
            at_cadence = (cfg.checkpoint_every > 0
                          and trainer.step % cfg.checkpoint_every == 0)
            if out_dir is not None and (at_cadence or trainer.step == cfg.steps):
                path = Path(out_dir) / f"checkpoint_{trainer.step:07d}.nn"
                trainer.save_checkpoint(path)
                ckpts.append(str(path))
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(
        config=cfg, step=trainer.step, gen_params=trainer.gen_params,
        critic_params=trainer.critic_params, q_params=trainer.q_params,
        metrics_path=str(metrics_path) if metrics_path else None,
        checkpoint_paths=ckpts,
        code_level_counts=(trainer.code_level_counts.copy()
                           if cfg.n_codes else None),
        eps_draws=(np.concatenate(trainer.eps_draws)
                   if trainer.eps_draws else np.zeros(0)))


def load_checkpoint(path) -> dict:
    """Load a checkpoint into {config, step, gen/critic/q params}."""
    tensors = load_tensors(path)
    cfg = TrainConfig(**unpack_json(tensors["__config__"]))
    out = {"config": cfg, "step": int(tensors["meta/step"]),
           "gen": {}, "critic": {}, "q": {} if cfg.mode == "ciwgan" else None}
    for key, arr in tensors.items():
        for net in ("gen", "critic", "q"):
            if key.startswith(net + "/"):
                out[net][key[len(net) + 1:]] = arr
    return out


def generate(ckpt: dict, latents) -> np.ndarray:
    """Pure function of (checkpoint, latents) -> (n, slice_len) waveforms."""
    cfg = ckpt["config"]
    latents = np.asarray(latents, dtype=np.float32)
    if latents.ndim != 2 or latents.shape[1] != cfg.latent_dim:
        raise L.ShapeMismatchError(
            f"latents must be (n, {cfg.latent_dim}), got {latents.shape}")
    spec = make_generator_spec(cfg.slice_len, cfg.model_dim, cfg.latent_dim)
    y, _ = L.forward(spec, ckpt["gen"], latents)
    return y[:, 0, :]


def q_retrieval_accuracy(ckpt: dict, n_samples, seed) -> float:
    """Share of fresh generations whose code the Q-network recovers."""
    cfg = ckpt["config"]
    if cfg.mode != "ciwgan":
        raise GanConfigError("code retrieval needs a ciwgan checkpoint")
    rng = np.random.Generator(np.random.PCG64(seed))
    lat, levels = sample_latents(rng, n_samples, cfg.n_codes, cfg.n_z)
    audio = generate(ckpt, lat)
    q_spec = make_q_spec(cfg.slice_len, cfg.model_dim, cfg.n_codes, cfg.shuffle_radius)
    logits, _ = L.forward(q_spec, ckpt["q"], audio[:, None, :], rng=rng)
    return float((logits.argmax(axis=1) == levels).mean())
