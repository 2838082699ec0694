"""WGAN-GP training with reconstruction and feature-matching terms.

One critic update per mini-batch; a generator update follows every
``critic_steps`` critic updates.  Both optimizers are AdamW with decoupled
weight decay and share a cosine schedule indexed by critic step.  All
randomness of epoch ``e`` comes from ``default_rng([seed, e])`` so a run can
be resumed from any epoch-boundary checkpoint bit-exactly.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor, grad, no_grad, ops
from .autodiff import functional as F
from .config import ConfigError, RunConfig, dump_config
from .critic import Critic
from .data import SampleSet
from .generator import Generator, RandomSource
from .nn import Module
from .serialization import load_tensors, save_tensors

HISTORY_COLUMNS = ("epoch", "critic_loss", "gen_loss", "gp", "rec", "feat", "lr")


class ContractError(RuntimeError):
    """A caller broke an interface precondition."""


class TrainingDiverged(RuntimeError):
    pass


# -- augmentation ----------------------------------------------------------------

@dataclass
class AugmentDraw:
    shifts: np.ndarray  # [N, 2] (dy, dx)
    cutouts: np.ndarray  # [N, 2] top-left corner, or empty when disabled
    size: tuple[int, int]  # cutout side (rows, cols); (0, 0) disables


def draw_augment(rng: np.random.Generator, n: int, h: int, w: int,
                 translation_ratio: float = 0.125, cutout_ratio: float = 0.5) -> AugmentDraw:
    my, mx = math.ceil(translation_ratio * h), math.ceil(translation_ratio * w)
    shifts = np.stack([rng.integers(-my, my + 1, n), rng.integers(-mx, mx + 1, n)], axis=1)
    ch, cw = math.ceil(cutout_ratio * h), math.ceil(cutout_ratio * w)
    if ch == 0 or cw == 0:
        return AugmentDraw(shifts, np.zeros((n, 2), dtype=np.int64), (0, 0))
    corners = np.stack([rng.integers(0, h - ch + 1, n), rng.integers(0, w - cw + 1, n)], axis=1)
    return AugmentDraw(shifts, corners, (ch, cw))


def visibility_mask(draw: AugmentDraw, n: int, h: int, w: int) -> np.ndarray:
    mask = np.ones((n, 1, h, w), dtype=np.float32)
    ch, cw = draw.size
    if ch and cw:
        for i, (r, c) in enumerate(draw.cutouts):
            mask[i, :, r:r + ch, c:c + cw] = 0.0
    return mask


def apply_augment(x: Tensor, draw: AugmentDraw) -> Tensor:
    """Translate each sample with zero fill, then zero one cutout square; differentiable in x."""
    n, _, h, w = x.shape
    my = int(np.abs(draw.shifts[:, 0]).max(initial=0))
    mx = int(np.abs(draw.shifts[:, 1]).max(initial=0))
    if my or mx:
        padded = F.zero_pad(x, my, my, mx, mx)
        parts = []
        for i, (dy, dx) in enumerate(draw.shifts):
            r0, c0 = my - int(dy), mx - int(dx)
            parts.append(ops.index(padded, (slice(i, i + 1), slice(None), slice(r0, r0 + h), slice(c0, c0 + w))))
        x = ops.concat(parts, axis=0)
    if draw.size[0] and draw.size[1]:
        x = ops.mul(x, visibility_mask(draw, n, h, w).astype(x.dtype))
    return x


def diff_augment(x: Tensor, rng: np.random.Generator, translation_ratio: float = 0.125,
                 cutout_ratio: float = 0.5) -> Tensor:
    n, _, h, w = x.shape
    return apply_augment(x, draw_augment(rng, n, h, w, translation_ratio, cutout_ratio))


def _split_aug(critic: Critic, x: Tensor, cond, rng, cfg, augment: bool):
    if not augment:
        return x, cond
    cond = cond if isinstance(cond, Tensor) else Tensor(np.asarray(cond, dtype=np.float32))
    joint = diff_augment(ops.concat([x, cond], axis=1), rng, cfg.translation_ratio, cfg.cutout_ratio)
    c = x.shape[1]
    return ops.index(joint, (slice(None), slice(0, c))), ops.index(joint, (slice(None), slice(c, None)))


# -- losses ------------------------------------------------------------------------

def interpolate_grad_norms(critic: Callable, real, fake, cond, rng: np.random.Generator,
                           retain_graph: bool = False) -> tuple[Tensor, Tensor]:
    """Per-sample ||grad_x D(x_hat | c)||_2 at x_hat = eps*real + (1-eps)*fake.

    Returns (norms, x_hat).  Must be called inside an active tape.
    """
    real = real.data if isinstance(real, Tensor) else np.asarray(real, dtype=np.float32)
    fake = fake.data if isinstance(fake, Tensor) else np.asarray(fake, dtype=np.float32)
    if real.shape != fake.shape:
        raise ContractError(f"real batch {real.shape} and fake batch {fake.shape} differ")
    n = real.shape[0]
    eps = rng.uniform(0.0, 1.0, size=(n,) + (1,) * (real.ndim - 1)).astype(real.dtype)
    x_hat = Tensor(eps * real + (1 - eps) * fake, requires_grad=True)
    out = critic(x_hat, cond)
    if out.node is None:
        raise ContractError("critic output is not recorded on a tape; gradient penalty is undefined")
    (g,) = grad(ops.sum(out), [x_hat], retain_graph=retain_graph)
    axes = tuple(range(1, real.ndim))
    return ops.l2_norm(g, axis=axes), x_hat


def gradient_penalty(critic: Callable, real, fake, cond, rng: np.random.Generator) -> Tensor:
    """mean_i (||grad D(x_hat_i)|| - 1)^2, differentiable w.r.t. the critic's parameters."""
    norms, _ = interpolate_grad_norms(critic, real, fake, cond, rng, retain_graph=True)
    return ops.mean(ops.power(ops.sub(norms, 1.0), 2))


def critic_loss(critic: Critic, real: Tensor, fake: Tensor, cond, cfg, rng: np.random.Generator,
                augment: bool | None = None) -> tuple[Tensor, dict[str, float]]:
    augment = cfg.augment if augment is None else augment
    rx, rc = _split_aug(critic, real, cond, rng, cfg, augment)
    fx, fc = _split_aug(critic, fake, cond, rng, cfg, augment)
    d_real = ops.mean(critic(rx, rc))
    d_fake = ops.mean(critic(fx, fc))
    gp = gradient_penalty(critic, real, fake, cond, rng)
    loss = ops.add(ops.sub(d_fake, d_real), ops.mul(gp, float(cfg.lambda_pen)))
    return loss, {"wdist": float(d_real.data - d_fake.data), "gp": float(gp.data)}


def generator_loss(critic: Critic, fake: Tensor, real: Tensor, cond, cfg, rng: np.random.Generator,
                   augment: bool | None = None) -> tuple[Tensor, dict[str, float]]:
    augment = cfg.augment if augment is None else augment
    # one draw shared by the fake and real batches so the feature term compares content, not crops
    state = rng.bit_generator.state
    fx, fc = _split_aug(critic, fake, cond, rng, cfg, augment)
    rng.bit_generator.state = state
    rx, rc = _split_aug(critic, real, cond, rng, cfg, augment)
    d_fake, v_fake = critic.forward_with_features(fx, fc)
    v_real = critic.features(rx, rc)
    adv = ops.neg(ops.mean(d_fake))
    rec = F.mae(fake, real)
    diff = ops.sub(ops.mean(v_real, axis=0), ops.mean(v_fake, axis=0))
    feat = ops.sum(ops.mul(diff, diff))
    loss = ops.add(adv, ops.add(ops.mul(rec, float(cfg.lambda_rec)), ops.mul(feat, float(cfg.lambda_feat))))
    return loss, {"adv": float(adv.data), "rec": float(rec.data), "feat": float(feat.data)}


# -- optimizer ---------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay: p <- p*(1 - lr*wd) - lr*m_hat/(sqrt(v_hat)+eps)."""

    def __init__(self, params: list[Tensor], weight_decay: float, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = params
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: list[Tensor], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        dtype = self.params[0].dtype if self.params else np.float32
        decay = dtype.type(1.0 - lr * self.wd)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            gd = g.data
            m *= self.b1
            m += (1.0 - self.b1) * gd
            v *= self.b2
            v += (1.0 - self.b2) * gd * gd
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * decay - update).astype(p.dtype)

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([self.t], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m.{i}"] = m
            out[f"{prefix}.v.{i}"] = v
        return out

    def load(self, state: dict[str, np.ndarray], prefix: str) -> None:
        self.t = int(state[f"{prefix}.t"][0])
        for i in range(len(self.m)):
            self.m[i][...] = state[f"{prefix}.m.{i}"]
            self.v[i][...] = state[f"{prefix}.v.{i}"]


def cosine_lr(step: int, total: int, lr_max: float, schedule: str = "cosine") -> float:
    """lr_max at step 0, 0 at step total-1."""
    if schedule == "constant" or total <= 1:
        return lr_max
    return 0.5 * lr_max * (1.0 + math.cos(math.pi * step / (total - 1)))


# -- loop --------------------------------------------------------------------------

@dataclass
class TrainState:
    generator: Generator
    critic: Critic
    opt_g: AdamW
    opt_c: AdamW
    history: list[dict] = field(default_factory=list)
    epoch: int = 0
    critic_updates: int = 0
    generator_updates: int = 0
    update_log: list[str] = field(default_factory=list)


def init_state(cfg: RunConfig) -> TrainState:
    cfg.validate()
    gen = Generator(cfg.generator, np.random.default_rng([cfg.train.seed, 1]))
    critic = Critic(cfg.critic, cfg.generator, np.random.default_rng([cfg.train.seed, 2]))
    t = cfg.train
    opt_g = AdamW(gen.parameters(), t.weight_decay, (t.beta1, t.beta2), t.adam_eps)
    opt_c = AdamW(critic.parameters(), t.weight_decay, (t.beta1, t.beta2), t.adam_eps)
    return TrainState(gen, critic, opt_g, opt_c)


def _batches(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _check_finite(value: float, what: str, epoch: int, step: int, idx: np.ndarray, out_dir) -> None:
    if math.isfinite(value):
        return
    msg = f"{what} became {value} at epoch {epoch}, critic step {step}; batch sample indices {idx.tolist()}"
    if out_dir is not None:
        snap = Path(out_dir) / f"diverged_step{step}.json"
        snap.write_text(json.dumps({"what": what, "epoch": epoch, "step": step, "batch": idx.tolist()}))
        msg += f"; snapshot written to {snap}"
    raise TrainingDiverged(msg)


def run_epoch(state: TrainState, samples: SampleSet, cfg: RunConfig, out_dir=None,
              log_updates: bool = False) -> dict:
    t = cfg.train
    gen, critic = state.generator, state.critic
    rng = np.random.default_rng([t.seed, state.epoch])
    batches = _batches(len(samples), t.batch, rng)
    total = t.epochs * len(batches)
    acc = {"critic_loss": [], "gen_loss": [], "gp": [], "rec": [], "feat": []}
    lr = t.lr
    for idx in batches:
        step = state.critic_updates
        lr = cosine_lr(step, total, t.lr, t.schedule)
        cond = samples.cond[idx]
        months = samples.months[idx]
        real = Tensor(samples.target[idx])
        rs = RandomSource(rng)
        n = len(idx)

        # critic update
        critic.power_iterate()
        with no_grad():
            fake = gen(cond, months, rs.vector(n, cfg.generator.noise_dim), rs, train=True)
        with Tape():
            loss_c, parts = critic_loss(critic, real, Tensor(fake.data), cond, t, rng)
            grads = grad(loss_c, critic.parameters(), allow_unused=True)
        _check_finite(float(loss_c.data), "critic loss", state.epoch, step, idx, out_dir)
        state.opt_c.step(grads, lr)
        state.critic_updates += 1
        if log_updates:
            state.update_log.append("C")
        acc["critic_loss"].append(float(loss_c.data))
        acc["gp"].append(parts["gp"])

        # generator update
        if state.critic_updates % t.critic_steps == 0:
            with Tape():
                fake = gen(cond, months, rs.vector(n, cfg.generator.noise_dim), rs, train=True)
                loss_g, gparts = generator_loss(critic, fake, real, cond, t, rng)
                grads = grad(loss_g, gen.parameters(), allow_unused=True)
            _check_finite(float(loss_g.data), "generator loss", state.epoch, step, idx, out_dir)
            state.opt_g.step(grads, lr)
            state.generator_updates += 1
            if log_updates:
                state.update_log.append("G")
            acc["gen_loss"].append(float(loss_g.data))
            acc["rec"].append(gparts["rec"])
            acc["feat"].append(gparts["feat"])

    row = {"epoch": state.epoch}
    for k, vals in acc.items():
        row[k] = float(np.mean(vals)) if vals else float("nan")
    row["lr"] = lr
    state.history.append(row)
    state.epoch += 1
    return row


def train(samples: SampleSet, cfg: RunConfig, out_dir: str | os.PathLike | None = None,
          resume: str | os.PathLike | None = None, stop_epoch: int | None = None,
          log_updates: bool = False, progress: Callable[[dict], None] | None = None,
          normalization: dict[str, str] | None = None) -> TrainState:
    """Train from scratch or from a checkpoint; ``stop_epoch`` halts early (for resume tests)."""
    if len(samples) == 0:
        raise ConfigError("no training samples")
    if samples.cond.shape[1:] != (cfg.generator.cond_channels, cfg.generator.grid_h, cfg.generator.grid_w):
        raise ConfigError(
            f"samples carry conditioning {samples.cond.shape[1:]}, configuration expects "
            f"{(cfg.generator.cond_channels, cfg.generator.grid_h, cfg.generator.grid_w)}"
        )
    state = init_state(cfg)
    if resume is not None:
        load_checkpoint(state, resume)
    end = cfg.train.epochs if stop_epoch is None else min(stop_epoch, cfg.train.epochs)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    while state.epoch < end:
        row = run_epoch(state, samples, cfg, out_dir, log_updates)
        if progress is not None:
            progress(row)
        every = cfg.train.checkpoint_every
        if out_dir is not None and every and state.epoch % every == 0:
            save_checkpoint(state, Path(out_dir) / f"checkpoint_epoch{state.epoch}.swg")
    if out_dir is not None:
        write_outputs(state, cfg, out_dir, normalization)
    return state


# -- persistence ---------------------------------------------------------------------

def _module_state(m: Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v for k, v in m.state_dict().items()}


def _strip(state: dict, prefix: str) -> dict:
    p = prefix + "/"
    return {k[len(p):]: v for k, v in state.items() if k.startswith(p)}


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    tensors = {}
    tensors.update(_module_state(state.generator, "gen"))
    tensors.update(_module_state(state.critic, "critic"))
    tensors.update(state.opt_g.state("optg"))
    tensors.update(state.opt_c.state("optc"))
    save_tensors(path, tensors)
    meta = {
        "epoch": state.epoch, "critic_updates": state.critic_updates,
        "generator_updates": state.generator_updates, "history": state.history,
    }
    Path(str(path) + ".json").write_text(json.dumps(meta))


def load_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    tensors = load_tensors(path)
    state.generator.load_state_dict(_strip(tensors, "gen"))
    state.critic.load_state_dict(_strip(tensors, "critic"))
    state.opt_g.load(tensors, "optg")
    state.opt_c.load(tensors, "optc")
    meta = json.loads(Path(str(path) + ".json").read_text())
    state.epoch = meta["epoch"]
    state.critic_updates = meta["critic_updates"]
    state.generator_updates = meta["generator_updates"]
    state.history = meta["history"]


def save_generator(gen: Generator, path: str | os.PathLike, normalization: dict[str, str] | None = None) -> None:
    """Generator parameters (SWG1) plus a ``.cfg`` sidecar with its configuration.

    ``normalization`` (covariate order, per-variable mean/std, clamp range)
    is stored as an extra sidecar section so projection can reuse it.
    """
    save_tensors(path, gen.state_dict())
    text = dump_config(gen.cfg, "generator")
    if normalization:
        text += "[normalization]\n" + "".join(f"{k} = {v}\n" for k, v in normalization.items()) + "\n"
    Path(str(path) + ".cfg").write_text(text, encoding="utf-8")


def load_generator(path: str | os.PathLike) -> tuple[Generator, dict[str, str]]:
    """Returns the generator and its sidecar ``[normalization]`` section (possibly empty)."""
    import configparser

    from .config import load_generator_config

    side = str(path) + ".cfg"
    cfg = load_generator_config(side)
    gen = Generator(cfg)
    gen.load_state_dict(load_tensors(path))
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read(side, encoding="utf-8")
    norm = dict(cp.items("normalization")) if cp.has_section("normalization") else {}
    return gen, norm


def write_history(history: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


def write_outputs(state: TrainState, cfg: RunConfig, out_dir: str | os.PathLike,
                  normalization: dict[str, str] | None = None) -> None:
    out = Path(out_dir)
    write_history(state.history, out / "history.csv")
    save_generator(state.generator, out / "generator.swg", normalization)
    save_tensors(out / "critic.swg", state.critic.state_dict())
    save_checkpoint(state, out / "checkpoint_final.swg")
    (out / "run.cfg").write_text(dump_config(cfg), encoding="utf-8")
