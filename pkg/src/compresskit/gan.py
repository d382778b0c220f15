"""Tiny MLP GAN used to add synthetic minority-class training images."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset, Sample
from .errors import ConfigError, DataError, ParameterError, TrainingError
from .tensor import Tensor, load_tensor, no_grad, save_tensor
from .training import Adam

logger = logging.getLogger(__name__)

LATENT = 16


@dataclass
class GanPair:
    """Generator z -> sigmoid image and discriminator image -> logit, both one-hidden-layer MLPs."""

    params: dict
    target_class: int
    image_shape: tuple = (3, 64, 64)
    latent: int = LATENT
    seed: int = 1
    history: list = field(default_factory=list)

    @property
    def pixels(self) -> int:
        return int(np.prod(self.image_shape))

    def generator_params(self) -> list[Tensor]:
        return [self.params[k] for k in ("g.w1", "g.b1", "g.w2", "g.b2")]

    def discriminator_params(self) -> list[Tensor]:
        return [self.params[k] for k in ("d.w1", "d.b1", "d.w2", "d.b2")]

    def generate_logits(self, z) -> Tensor:
        p = self.params
        h = T.relu(T.add(T.matmul(z, p["g.w1"]), p["g.b1"]))
        return T.add(T.matmul(h, p["g.w2"]), p["g.b2"])

    def generate(self, z) -> Tensor:
        return T.sigmoid(self.generate_logits(z))

    def discriminate(self, x) -> Tensor:
        """Real-score logits, one per row of flattened images."""
        p = self.params
        h = T.relu(T.add(T.matmul(x, p["d.w1"]), p["d.b1"]))
        return T.reshape(T.add(T.matmul(h, p["d.w2"]), p["d.b2"]), (-1,))

    def sample(self, k: int, seed: int) -> np.ndarray:
        """k images [k, C, H, W] from latent draws seeded by ``seed``."""
        z = np.random.default_rng([seed, 0x6A7]).standard_normal((k, self.latent))
        with no_grad():
            flat = self.generate(z).data
        return flat.reshape((k,) + tuple(self.image_shape))


def init_gan(target_class: int, image_shape=(3, 64, 64), hidden: int = 64, latent: int = LATENT,
             seed: int = 1, zero: bool = False) -> GanPair:
    rng = np.random.default_rng([seed, 0x6A0])
    pixels = int(np.prod(image_shape))

    def dense(n_in, n_out):
        if zero:
            return Tensor(np.zeros((n_in, n_out)), True)
        bound = math.sqrt(6.0 / n_in)
        return Tensor(rng.uniform(-bound, bound, (n_in, n_out)), True)

    params = {
        "g.w1": dense(latent, hidden), "g.b1": Tensor(np.zeros(hidden), True),
        "g.w2": dense(hidden, pixels), "g.b2": Tensor(np.zeros(pixels), True),
        "d.w1": dense(pixels, hidden), "d.b1": Tensor(np.zeros(hidden), True),
        "d.w2": dense(hidden, 1), "d.b2": Tensor(np.zeros(1), True),
    }
    if not zero:
        params["d.w2"].data *= 0.1
    return GanPair(params, target_class, tuple(image_shape), latent, seed)


def discriminator_loss(real_logits, fake_logits) -> Tensor:
    """Mean of -ln D(x) - ln(1 - D(G(z))) with D = sigmoid(logit)."""
    real = T.tmean(T.softplus(T.mul(real_logits, -1.0)))
    fake = T.tmean(T.softplus(fake_logits))
    return T.add(real, fake)


def generator_loss(fake_logits) -> Tensor:
    """Mean of -ln D(G(z)), the non-saturating generator objective."""
    return T.tmean(T.softplus(T.mul(fake_logits, -1.0)))


def gan_train(real: np.ndarray, target_class: int, steps: int = 300, batch_size: int = 32, lr: float = 5e-4,
              hidden: int = 64, seed: int = 1, mean_init: bool = True) -> GanPair:
    """Alternating discriminator/generator Adam steps on ``real`` images [N, C, H, W].

    With ``mean_init`` the generator's output bias starts at the logit of the
    mean real image, so training begins from the class average instead of grey.
    """
    real = np.asarray(real, dtype=np.float64)
    if real.ndim != 4 or len(real) < 16:
        raise DataError(f"need at least 16 real images [N,C,H,W], got shape {real.shape}")
    gan = init_gan(target_class, real.shape[1:], hidden, seed=seed)
    flat = real.reshape(len(real), -1)
    if mean_init:
        mean = np.clip(flat.mean(axis=0), 0.02, 0.98)
        gan.params["g.b2"].data[...] = np.log(mean / (1 - mean))
    rng = np.random.default_rng([seed, 0x6A1])
    opt_d = Adam(gan.discriminator_params(), lr)
    opt_g = Adam(gan.generator_params(), lr)
    try:
        for step in range(steps):
            x = flat[rng.integers(0, len(flat), batch_size)]
            z = rng.standard_normal((batch_size, gan.latent))
            T.active_tape().reset()
            fake = gan.generate(z).detach()
            loss_d = discriminator_loss(gan.discriminate(x), gan.discriminate(fake))
            opt_d.zero_grad()
            opt_g.zero_grad()
            T.backward(loss_d)
            opt_d.step()

            z = rng.standard_normal((batch_size, gan.latent))
            loss_g = generator_loss(gan.discriminate(gan.generate(z)))
            opt_d.zero_grad()
            opt_g.zero_grad()
            T.backward(loss_g)
            opt_g.step()
            ld, lg = loss_d.item(), loss_g.item()
            if not (math.isfinite(ld) and math.isfinite(lg)):
                raise TrainingError(f"non-finite GAN loss at step {step}", step=step)
            gan.history.append((ld, lg))
            if step % 50 == 0:
                logger.info("gan step %d  L_D %.4f  L_G %.4f", step, ld, lg)
    finally:
        T.active_tape().reset()
    for p in gan.params.values():
        p.grad = None
    return gan


def augment(dataset: Dataset, gan: GanPair, k: int, target_class: int, seed: int) -> Dataset:
    """Copy of ``dataset`` with ``k`` generated train samples of ``target_class`` appended."""
    if k < 0:
        raise ParameterError(f"k must be >= 0, got {k}")
    if gan.target_class != target_class:
        raise ConfigError(f"GAN was trained on class {gan.target_class}, not {target_class}")
    images = gan.sample(k, seed) if k else []
    added = [
        Sample(img, target_class, [], None, "train", True, {"gan_seed": gan.seed, "sample_seed": seed, "draw": i})
        for i, img in enumerate(images)
    ]
    audit = dataset.audit + [{"op": "augment", "k": k, "class": target_class, "seed": seed}]
    return Dataset(list(dataset.samples) + added, dataset.n, dataset.balance, dataset.seed, dataset.image_size, audit)


def gan_sanity(gan: GanPair, held_out: np.ndarray, seed: int = 2) -> dict:
    """Mode-sanity check on held-out real images.

    Passes when the discriminator separates real from generated images better
    than chance and the mean of generated images lies within three standard
    deviations of the real per-image means.
    """
    held_out = np.asarray(held_out, dtype=np.float64)
    fake = gan.sample(len(held_out), seed)
    with no_grad():
        real_logits = gan.discriminate(held_out.reshape(len(held_out), -1)).data
        fake_logits = gan.discriminate(fake.reshape(len(fake), -1)).data
    correct = np.sum(real_logits > 0) + np.sum(fake_logits <= 0)
    accuracy = float(correct / (2 * len(held_out)))
    real_means = held_out.reshape(len(held_out), -1).mean(axis=1)
    gap = abs(float(fake.mean()) - float(real_means.mean()))
    std = float(real_means.std())
    return {
        "disc_accuracy": accuracy,
        "fake_mean": float(fake.mean()),
        "real_mean": float(real_means.mean()),
        "real_std": std,
        "passed": bool(0.5 < accuracy <= 1.0 and gap <= 3 * std),
    }


def save_gan(gan: GanPair, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, p in gan.params.items():
        save_tensor(directory / f"{name}.ckt", p)
    meta = {"target_class": gan.target_class, "image_shape": list(gan.image_shape), "latent": gan.latent,
            "seed": gan.seed, "parameters": list(gan.params), "history": gan.history}
    (directory / "gan.json").write_text(json.dumps(meta))
    return directory


def load_gan(directory) -> GanPair:
    directory = Path(directory)
    path = directory / "gan.json"
    if not path.exists():
        raise ConfigError(f"no GAN checkpoint at {directory}")
    meta = json.loads(path.read_text())
    params = {n: load_tensor(directory / f"{n}.ckt") for n in meta["parameters"]}
    return GanPair(params, meta["target_class"], tuple(meta["image_shape"]), meta["latent"], meta["seed"],
                   [tuple(h) for h in meta["history"]])
