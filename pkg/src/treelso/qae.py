"""Small vector-quantized autoencoder trained from scratch with torch.

Images are ``(H, W, C)`` float arrays in ``[0, 1]``.  The encoder maps an
image to an ``(h, w, D)`` grid, each cell is snapped to its nearest codebook
vector, and the decoder maps the quantized grid back to an image.

Desk-scale layout (16x16x1 images, 4x4 latent grid)::

    encoder: conv 4x4/2 -> leaky relu -> conv 4x4/2            (16 -> 8 -> 4)
    decoder: conv 3x3/1 -> leaky relu -> convT 4x4/2 -> leaky relu -> convT 4x4/2
"""

from __future__ import annotations

import copy
import hashlib
import io
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FormatError, InvalidInputError

MAGIC = b"TREELSO-QAE v1\n"


@dataclass(frozen=True)
class QaeConfig:
    image_size: int = 16
    channels: int = 1
    latent_size: int = 4
    n_codes: int = 16
    code_dim: int = 8
    hidden: int = 32
    beta: float = 0.25
    learning_rate: float = 1e-3
    batch_size: int = 32
    activation: str = "leaky_relu"
    bias: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_codes < 2:
            raise InvalidInputError("codebook needs at least 2 vectors")
        if self.image_size != 4 * self.latent_size:
            raise InvalidInputError("image_size must be 4 * latent_size (two stride-2 stages)")
        if self.activation not in ("leaky_relu", "identity"):
            raise InvalidInputError(f"unknown activation {self.activation!r}")
        if self.beta < 0 or self.learning_rate < 0 or self.batch_size < 1:
            raise InvalidInputError("beta, learning_rate must be >= 0 and batch_size >= 1")

    @property
    def image_shape(self) -> tuple:
        return (self.image_size, self.image_size, self.channels)

    @property
    def latent_shape(self) -> tuple:
        return (self.latent_size, self.latent_size)


@dataclass
class LossRecord:
    reconstruction: float
    codebook: float
    commitment: float
    total: float


def _act(name):
    return nn.LeakyReLU(0.2) if name == "leaky_relu" else nn.Identity()


class QaeModel(nn.Module):
    def __init__(self, config: QaeConfig = QaeConfig()):
        super().__init__()
        self.config = config
        c, h, d = config.channels, config.hidden, config.code_dim
        gen = torch.Generator().manual_seed(config.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.encoder = nn.Sequential(
                nn.Conv2d(c, h, 4, stride=2, padding=1, bias=config.bias),
                _act(config.activation),
                nn.Conv2d(h, d, 4, stride=2, padding=1, bias=config.bias),
            )
            self.decoder = nn.Sequential(
                nn.Conv2d(d, h, 3, stride=1, padding=1),
                nn.LeakyReLU(0.2),
                nn.ConvTranspose2d(h, h, 4, stride=2, padding=1),
                nn.LeakyReLU(0.2),
                nn.ConvTranspose2d(h, c, 4, stride=2, padding=1),
            )
        k = config.n_codes
        init = (torch.rand(k, d, generator=gen, dtype=torch.float64) * 2 - 1) / k
        self.codebook = nn.Parameter(init.to(torch.get_default_dtype()))

    # -- tensor plumbing -------------------------------------------------

    @property
    def dtype(self):
        return self.codebook.dtype

    def _images(self, images) -> torch.Tensor:
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.shape[1:] != self.config.image_shape:
            raise InvalidInputError(
                f"expected images of shape {self.config.image_shape}, got {x.shape[1:]}")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("images must be finite")
        return torch.as_tensor(x, dtype=self.dtype).permute(0, 3, 1, 2), single

    def _encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x).permute(0, 2, 3, 1)  # (n, h, w, D)

    def _decode(self, zq: torch.Tensor) -> torch.Tensor:
        return self.decoder(zq.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)  # (n, H, W, C)

    def _nearest(self, grid: torch.Tensor) -> torch.Tensor:
        d2 = ((grid.unsqueeze(-2) - self.codebook) ** 2).sum(-1)
        return d2.argmin(-1)  # first minimum on ties

    # -- public API ------------------------------------------------------

    @torch.no_grad()
    def encode(self, images) -> np.ndarray:
        """Continuous ``(h, w, D)`` grid (batched if given a batch)."""
        x, single = self._images(images)
        grid = self._encode(x).double().numpy()
        return grid[0] if single else grid

    @torch.no_grad()
    def quantize(self, grid):
        return quantize(self.codebook.detach().double().numpy(), grid)

    @torch.no_grad()
    def latents(self, images) -> np.ndarray:
        """Integer latent grids ``z = quantize(encode(x))``."""
        x, single = self._images(images)
        z = self._nearest(self._encode(x)).numpy().astype(np.int64)
        return z[0] if single else z

    @torch.no_grad()
    def decode(self, latent) -> np.ndarray:
        z = np.asarray(latent)
        single = z.ndim == 2
        if single:
            z = z[None]
        if z.shape[1:] != self.config.latent_shape:
            raise InvalidInputError(
                f"expected latent grids of shape {self.config.latent_shape}, got {z.shape[1:]}")
        if np.any(z < 0) or np.any(z >= self.config.n_codes) or not np.issubdtype(z.dtype, np.integer):
            raise InvalidInputError("latent index out of range")
        zq = self.codebook[torch.as_tensor(z, dtype=torch.long)]
        img = self._decode(zq).clamp(0.0, 1.0).double().numpy()
        return img[0] if single else img

    def forward_losses(self, images: torch.Tensor):
        """Per-sample loss terms with a straight-through quantizer.

        Returns ``(reconstruction, codebook, commitment)`` tensors of shape
        ``(n,)``.  Codebook and commitment terms average the squared
        Euclidean distance per latent cell.
        """
        ze = self._encode(images)
        idx = self._nearest(ze.detach())
        zq = self.codebook[idx]
        codebook = ((ze.detach() - zq) ** 2).sum(-1).mean((1, 2))
        commitment = ((ze - zq.detach()) ** 2).sum(-1).mean((1, 2))
        zst = ze + (zq - ze).detach()
        recon = self._decode(zst)
        target = images.permute(0, 2, 3, 1)
        reconstruction = ((recon - target) ** 2).mean((1, 2, 3))
        return reconstruction, codebook, commitment


def quantize(codebook, grid):
    """Nearest-codebook indices and the snapped grid.

    ``grid`` has shape ``(..., D)``; ties go to the lowest index.
    """
    E = np.asarray(codebook, dtype=np.float64)
    g = np.asarray(grid, dtype=np.float64)
    if g.shape[-1] != E.shape[1]:
        raise InvalidInputError(f"grid depth {g.shape[-1]} != code dimension {E.shape[1]}")
    d2 = ((g[..., None, :] - E) ** 2).sum(-1)
    idx = d2.argmin(-1)
    return idx, E[idx]


def vq_loss(model: QaeModel, images) -> LossRecord:
    x, _ = model._images(images)
    with torch.no_grad():
        rec, cb, cm = model.forward_losses(x)
    r, c, m = rec.mean().item(), cb.mean().item(), cm.mean().item()
    return LossRecord(r, c, m, r + c + model.config.beta * m)


def make_optimizer(model: QaeModel, learning_rate: float | None = None):
    lr = model.config.learning_rate if learning_rate is None else learning_rate
    return torch.optim.Adam(model.parameters(), lr=lr)


def train_step(model: QaeModel, optimizer, images, sample_weights=None) -> LossRecord:
    """One Adam step on the weighted total loss; updates ``model`` in place."""
    x, _ = model._images(images)
    n = x.shape[0]
    if sample_weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(sample_weights, dtype=np.float64)
        if w.shape != (n,):
            raise InvalidInputError("one weight per image is required")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidInputError("weights must be finite and non-negative")
    if w.sum() <= 0:
        raise InvalidInputError("weights must not all be zero")
    w = torch.as_tensor(w / w.sum(), dtype=model.dtype)
    rec, cb, cm = model.forward_losses(x)
    total = (w * (rec + cb + model.config.beta * cm)).sum()
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return LossRecord((w * rec).sum().item(), (w * cb).sum().item(),
                      (w * cm).sum().item(), total.item())


def fit_weighted(model: QaeModel, images, weights=None, epochs: int = 1, seed: int = 0,
                 batch_size: int | None = None):
    """Train a copy of ``model``; minibatches are drawn in proportion to ``weights``.

    Each epoch runs ``ceil(n / batch_size)`` steps of batches sampled with
    replacement.  Returns ``(new_model, per_epoch_mean_total_loss)``.
    """
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    if n == 0:
        raise InvalidInputError("no images to train on")
    p = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    if p.shape != (n,) or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidInputError("weights must be finite, non-negative, one per image")
    if p.sum() <= 0:
        raise InvalidInputError("weights must not all be zero")
    p = p / p.sum()
    new = copy.deepcopy(model)
    if epochs <= 0:
        return new, []
    bs = batch_size or model.config.batch_size
    rng = np.random.default_rng(seed)
    opt = make_optimizer(new)
    steps = math.ceil(n / bs)
    history = []
    for _ in range(epochs):
        losses = [train_step(new, opt, images[idx]).total for idx in sample_batches(p, bs, steps, rng)]
        history.append(float(np.mean(losses)))
    return new, history


def sample_batches(p, batch_size: int, steps: int, rng: np.random.Generator):
    """Index batches drawn with replacement in proportion to ``p``."""
    for _ in range(steps):
        yield rng.choice(len(p), size=batch_size, replace=True, p=p)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: QaeModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def checkpoint_bytes(model: QaeModel) -> bytes:
    """``TREELSO-QAE v1`` header, config lines, then float32 LE parameters.

    Parameters follow ``state_dict`` order; each is preceded by a line
    ``param <name> <dim0>x<dim1>...`` in the header.
    """
    cfg = asdict(model.config)
    head = [f"{k} {v}" for k, v in cfg.items()]
    state = model.state_dict()
    for name, t in state.items():
        head.append(f"param {name} " + "x".join(str(s) for s in t.shape))
    buf = io.BytesIO()
    buf.write(MAGIC)
    text = "\n".join(head).encode()
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for t in state.values():
        buf.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    return buf.getvalue()


def load_checkpoint(path) -> QaeModel:
    with open(path, "rb") as fh:
        data = fh.read()
    return checkpoint_from_bytes(data)


def checkpoint_from_bytes(data: bytes) -> QaeModel:
    if not data.startswith(MAGIC):
        raise FormatError("not a TREELSO-QAE v1 checkpoint")
    try:
        pos = len(MAGIC)
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        lines = data[pos:pos + n].decode().splitlines()
        pos += n
        fields, params = {}, []
        for line in lines:
            key, _, rest = line.partition(" ")
            if key == "param":
                name, shape = rest.split(" ")
                params.append((name, tuple(int(s) for s in shape.split("x") if s)))
            else:
                fields[key] = rest
        types = {f: type(v) for f, v in asdict(QaeConfig()).items()}
        kwargs = {}
        for k, v in fields.items():
            if k not in types:
                raise FormatError(f"unknown config field {k!r}")
            kwargs[k] = (v == "True") if types[k] is bool else types[k](v)
        model = QaeModel(QaeConfig(**kwargs))
        state = {}
        for name, shape in params:
            count = math.prod(shape)
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
            state[name] = torch.from_numpy(arr.astype(np.float32))
        if pos != len(data):
            raise FormatError("trailing bytes after parameters")
        model.load_state_dict(state)
    except (ValueError, KeyError, RuntimeError, struct.error) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    return model


def checkpoint_hash(model: QaeModel) -> str:
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()


def pretrain(config: QaeConfig, images, epochs: int, seed: int | None = None):
    model = QaeModel(config)
    return fit_weighted(model, images, None, epochs, config.seed if seed is None else seed)
