"""Image encoder, complete/break occupancy decoders, loss and training step."""

from __future__ import annotations

import copy
import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .layers import (
    Adam,
    BatchNorm,
    Conv2d,
    GlobalAvgPool,
    LeakyReLU,
    Linear,
    ResidualBlock,
    Sequential,
    walk,
)

log = logging.getLogger(__name__)

BCE_EPS = 1e-7

ENCODER_CHANNELS = {
    "tiny": (8, 8, 16, 16),
    "small": (16, 32, 32, 64, 64),
}


class ModelError(ValueError):
    pass


class CheckpointError(ModelError):
    pass


class NonFiniteLoss(ArithmeticError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "tiny"
    image_size: int = 64
    image_channels: int = 1
    latent_dim: int = 512
    decoder_width: int = 256
    decoder_blocks: int = 6
    leaky_slope: float = 0.01
    bn_momentum: float = 0.9
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.encoder not in ENCODER_CHANNELS:
            raise ModelError(f"unknown encoder preset {self.encoder!r}")
        if self.image_size % (2 ** len(ENCODER_CHANNELS[self.encoder])):
            raise ModelError("image_size must be divisible by the encoder's total stride")
        if self.dtype not in ("float32", "float64"):
            raise ModelError("dtype must be float32 or float64")

    @classmethod
    def tiny(cls, **overrides):
        """Widths <= 16 throughout; used for gradient checks."""
        base = dict(encoder="tiny", latent_dim=16, decoder_width=16)
        base.update(overrides)
        return cls(**base)

    def to_text(self):
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text):
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key not in kinds:
                raise CheckpointError(f"unknown config key {key!r}")
            kind = kinds[key]
            values[key] = raw if kind == "str" else (float(raw) if kind == "float" else int(raw))
        return cls(**values)


@dataclass
class TrainConfig:
    lambda_break: float = 1.0
    lambda_restoration: float = 1.0
    lr: float = 2e-5
    epochs: int = 10
    m: int = 2048
    seed: int = 0
    encoder: str = "tiny"
    images_per_step: int = 4

    def __post_init__(self):
        if self.lambda_break < 0 or self.lambda_restoration < 0:
            raise ModelError("loss weights must be non-negative")
        # zero is allowed: it is a useful no-op check
        if not self.lr >= 0:
            raise ModelError("learning rate must be non-negative")
        if self.m < 6:
            raise ModelError("m must be at least 6")
        if self.images_per_step < 1:
            raise ModelError("images_per_step must be at least 1")


class Decoder(Sequential):
    """Occupancy decoder f(z, x): separate z and x projections summed, residual trunk, sigmoid."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        w = cfg.decoder_width
        self.fc_x = Linear(3, w, rng, dtype)
        self.fc_z = Linear(cfg.latent_dim, w, rng, dtype)
        trunk = [ResidualBlock(w, rng, cfg.leaky_slope, cfg.bn_momentum, dtype)
                 for _ in range(cfg.decoder_blocks)]
        head = [BatchNorm(w, cfg.bn_momentum, dtype=dtype), LeakyReLU(cfg.leaky_slope),
                Linear(w, 1, rng, dtype)]
        self.trunk = Sequential(*trunk, *head)
        super().__init__(self.fc_x, self.fc_z, self.trunk)

    def forward_logits(self, z, x, train=False, groups=None):
        """z: (latent_dim,) or (b, latent_dim); x: (n, 3); groups: (n,) image index per point."""
        z = z.reshape(-1, z.shape[-1])
        self._groups = np.zeros(len(x), dtype=np.int64) if groups is None else np.asarray(groups)
        self._nz = len(z)
        hz = self.fc_z.forward(z, train)
        hx = self.fc_x.forward(x, train)
        return self.trunk.forward(hx + hz[self._groups], train)[:, 0]

    def backward_logits(self, grad):
        """Returns the gradient with respect to z, shaped (b, latent_dim)."""
        g = self.trunk.backward(grad[:, None])
        self.fc_x.backward(g)
        gz = np.zeros((self._nz, g.shape[1]), dtype=g.dtype)
        np.add.at(gz, self._groups, g)
        return self.fc_z.backward(gz)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    # saturated logits would round to exactly 0 or 1; keep outputs open
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)


class FieldModel:
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        convs = []
        c_in = cfg.image_channels
        for c_out in ENCODER_CHANNELS[cfg.encoder]:
            convs += [Conv2d(c_in, c_out, rng, 2, self.dtype), LeakyReLU(cfg.leaky_slope)]
            c_in = c_out
        self.encoder = Sequential(*convs, GlobalAvgPool(), Linear(c_in, cfg.latent_dim, rng, self.dtype))
        self.decoder_c = Decoder(cfg, rng, self.dtype)
        self.decoder_b = Decoder(cfg, rng, self.dtype)
        self.optimizer = Adam()

    # parameters ---------------------------------------------------------

    def leaves(self):
        return walk(self.encoder) + walk(self.decoder_c) + walk(self.decoder_b)

    def named_parameters(self):
        out = []
        for i, layer in enumerate(self.leaves()):
            for name in sorted(layer.params):
                out.append((f"{i}.{type(layer).__name__}.{name}", layer, name))
        return out

    def parameters(self):
        return [layer.params[name] for _, layer, name in self.named_parameters()]

    def gradients(self):
        return [layer.grads[name] for _, layer, name in self.named_parameters()]

    def buffers(self):
        out = []
        for layer in self.leaves():
            for name in sorted(layer.buffers):
                out.append((layer, name))
        return out

    def parameter_count(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for layer in self.leaves():
            layer.zero_grad()

    def set_running_updates(self, enabled):
        for layer in self.leaves():
            if isinstance(layer, BatchNorm):
                layer.update_running = enabled

    # forward ------------------------------------------------------------

    def _prepare_images(self, images):
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[None] if x.shape[0] == self.cfg.image_channels else x[:, None]
        if x.ndim != 4 or x.shape[1:] != (self.cfg.image_channels, self.cfg.image_size, self.cfg.image_size):
            raise ModelError(
                f"expected images of shape ({self.cfg.image_channels}, {self.cfg.image_size}, "
                f"{self.cfg.image_size}), got {np.shape(images)}"
            )
        return x

    def encode(self, images, train=False):
        """Latent code(s) for one image (returns (latent_dim,)) or a batch (returns (b, latent_dim))."""
        single = np.ndim(images) == 2 or (np.ndim(images) == 3 and np.shape(images)[0] == self.cfg.image_channels)
        z = self.encoder.forward(self._prepare_images(images), train)
        return z[0] if single else z

    def logits(self, z, points, train=False, groups=None):
        """Decoder logits; with a batch of codes, ``groups`` gives each point's code index."""
        x = np.asarray(points, dtype=self.dtype).reshape(-1, 3)
        z = np.asarray(z, dtype=self.dtype).reshape(-1, self.cfg.latent_dim)
        if groups is None and len(z) != 1:
            raise ModelError("several latent codes need a per-point group index")
        return (self.decoder_c.forward_logits(z, x, train, groups),
                self.decoder_b.forward_logits(z, x, train, groups))

    def eval_fields(self, z, points, train=False, groups=None):
        """Per-point (o_C, o_B, o_R) with o_R = o_C * o_B."""
        lc, lb = self.logits(z, points, train, groups)
        oc, ob = _sigmoid(lc), _sigmoid(lb)
        return oc, ob, oc * ob

    def field_function(self, z, which="restoration", chunk=65_536):
        """Callable occupancy for grid queries (inference mode)."""
        col = {"complete": 0, "break": 1, "restoration": 2}[which]

        def fn(points):
            out = np.empty(len(points))
            for s in range(0, len(points), chunk):
                out[s:s + chunk] = self.eval_fields(z, points[s:s + chunk])[col]
            return out

        return fn


# --------------------------------------------------------------------------
# loss


def bce(p, t):
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))


def _bce_grad(p, t):
    inside = (p >= BCE_EPS) & (p <= 1.0 - BCE_EPS)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return np.where(inside, -t / pc + (1.0 - t) / (1.0 - pc), 0.0)


def loss(preds, labels, lambda_break=1.0, lambda_restoration=1.0):
    """Summed BCE over the batch: L_C + lambda_B * L_B + lambda_R * L_R."""
    oc, ob, orr = (np.asarray(a, dtype=np.float64) for a in preds)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 3)
    if any(np.isnan(a).any() for a in (oc, ob, orr)):
        raise NonFiniteLoss("NaN in predictions")
    tc, tb, tr = labels.T
    return float(
        bce(oc, tc).sum() + lambda_break * bce(ob, tb).sum() + lambda_restoration * bce(orr, tr).sum()
    )


def loss_from_logits(logit_c, logit_b, labels, lambda_break=1.0, lambda_restoration=1.0):
    """The same clamped loss as ``loss`` evaluated in log space from decoder logits.

    Forming 1 - p from a probability near 1 loses most of its digits; this
    form keeps full relative precision, which finite-difference checks need.
    """
    dtype = np.result_type(np.asarray(logit_c).dtype, np.float64)
    a = np.asarray(logit_c, dtype=dtype)
    b = np.asarray(logit_b, dtype=dtype)
    tc, tb, tr = np.asarray(labels, dtype=dtype).reshape(-1, 3).T
    lo, hi = np.log(BCE_EPS), np.log1p(-BCE_EPS)
    sp_na, sp_nb = np.logaddexp(0.0, -a), np.logaddexp(0.0, -b)

    def term(log_p, log_q, t):
        return -(t * np.clip(log_p, lo, hi) + (1.0 - t) * np.clip(log_q, lo, hi))

    log_not_r = np.logaddexp(np.logaddexp(-a, -b), -a - b) - sp_na - sp_nb
    return float(
        term(-sp_na, -np.logaddexp(0.0, a), tc).sum()
        + lambda_break * term(-sp_nb, -np.logaddexp(0.0, b), tb).sum()
        + lambda_restoration * term(-sp_na - sp_nb, log_not_r, tr).sum()
    )


def forward_backward(model: FieldModel, images, points, labels, lambda_break=1.0,
                     lambda_restoration=1.0, train=True, groups=None):
    """Loss for a batch of images and their points; parameter gradients accumulate in the model.

    ``groups`` maps every point to its image. It may be omitted for a single image.
    """
    z = model.encode(images, train)
    lc, lb = model.logits(z, points, train, groups)
    oc, ob = _sigmoid(lc), _sigmoid(lb)
    orr = oc * ob
    labels = np.asarray(labels, dtype=model.dtype).reshape(-1, 3)
    tc, tb, tr = labels.T
    value = loss((oc, ob, orr), labels, lambda_break, lambda_restoration)
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss is {value}")

    g_r = lambda_restoration * _bce_grad(orr, tr)
    g_c = _bce_grad(oc, tc) + g_r * ob
    g_b = lambda_break * _bce_grad(ob, tb) + g_r * oc
    dz = model.decoder_c.backward_logits((g_c * oc * (1.0 - oc)).astype(model.dtype))
    dz = dz + model.decoder_b.backward_logits((g_b * ob * (1.0 - ob)).astype(model.dtype))
    model.encoder.backward(dz)
    return value


def train_step(model: FieldModel, images, points, labels, cfg: TrainConfig, groups=None):
    """One Adam update on all encoder and decoder parameters; returns the loss."""
    model.zero_grad()
    opt = model.optimizer
    opt.lr = cfg.lr
    value = forward_backward(model, images, points, labels, cfg.lambda_break, cfg.lambda_restoration,
                             groups=groups)
    grads = model.gradients()
    if not all(np.isfinite(g).all() for g in grads):
        raise NonFiniteLoss("non-finite gradient")
    opt.step(model.parameters(), grads)
    return value


def settle_batchnorm(model: FieldModel, images, points, groups=None, passes=60):
    """Training-mode forward passes that move batch-norm statistics onto this data.

    Parameters are untouched. Fresh statistics (mean 0, variance 1) leave the
    untrained network badly scaled, which saturates the outputs in inference.
    """
    for _ in range(passes):
        z = model.encode(images, train=True)
        model.logits(z, points, train=True, groups=groups)


# --------------------------------------------------------------------------
# gradient check


@dataclass
class GradientCheckResult:
    max_relative_error: float
    checked: int
    skipped_kinks: int
    details: list

    def __float__(self):
        return self.max_relative_error


def _kink_state(model: FieldModel, preds):
    """Which side of every piecewise-linear switch the last forward pass landed on."""
    masks = [layer._positive.ravel() for layer in model.leaves() if isinstance(layer, LeakyReLU)]
    masks += [(p >= BCE_EPS) & (p <= 1.0 - BCE_EPS) for p in preds]
    return np.packbits(np.concatenate(masks))


def _extended_copy(model: FieldModel):
    """A copy of ``model`` whose parameters and statistics are long doubles."""
    ext = copy.deepcopy(model)
    ext.dtype = np.dtype(np.longdouble)
    for layer in ext.leaves():
        for store in (layer.params, layer.buffers):
            for key in store:
                store[key] = store[key].astype(np.longdouble)
    return ext


def gradient_check(model: FieldModel, image, points, labels, epsilon=1e-5, lambda_break=1.0,
                   lambda_restoration=1.0, floor=1e-5, return_details=False, select=None):
    """Compare backprop gradients with central differences for every parameter.

    Batch normalization runs on its stored statistics so the loss is a fixed
    function of the parameters. Relative error is |a - n| / max(|a|, |n|, floor).
    The finite differences are taken on a long-double copy of the model: in
    float64 the loss carries round-off of a few ulps, which divided by
    2 * epsilon swamps the smallest gradients. The floor keeps gradients that
    are essentially zero from being judged by whatever round-off remains.
    A perturbation that moves any leaky-ReLU input or clamped probability
    across its switch point makes the finite difference meaningless there;
    such parameters are counted in ``skipped_kinks`` instead of the error.
    ``select(name)`` restricts the check to some parameter tensors.
    """
    if model.dtype != np.float64:
        raise ModelError("gradient checks need a float64 model")
    ext = _extended_copy(model)
    owner = {}
    for part, module in (("encoder", ext.encoder), ("c", ext.decoder_c), ("b", ext.decoder_b)):
        owner.update({id(layer): part for layer in walk(module)})
    cache = {}

    def f(part="encoder"):
        if part == "encoder":
            cache["z"] = ext.encode(image)
        x = np.asarray(points, dtype=ext.dtype).reshape(-1, 3)
        z = cache["z"].reshape(1, -1)
        if part in ("encoder", "c"):
            cache["lc"] = ext.decoder_c.forward_logits(z, x)
        if part in ("encoder", "b"):
            cache["lb"] = ext.decoder_b.forward_logits(z, x)
        lc, lb = cache["lc"], cache["lb"]
        oc, ob = _sigmoid(lc), _sigmoid(lb)
        value = loss_from_logits(lc, lb, labels, lambda_break, lambda_restoration)
        return value, _kink_state(ext, (oc, ob, oc * ob))

    _, base_state = f()
    relus = [layer for layer in ext.leaves() if isinstance(layer, LeakyReLU)]
    base_cache, base_masks = dict(cache), [layer._positive for layer in relus]

    def restore():
        cache.update(base_cache)
        for layer, mask in zip(relus, base_masks):
            layer._positive = mask

    model.zero_grad()
    forward_backward(model, image, points, labels, lambda_break, lambda_restoration, train=False)
    analytic = [g.copy() for g in model.gradients()]
    eps = np.longdouble(epsilon)
    worst = 0.0
    checked = skipped = 0
    details = []
    for (name, layer, key), grad in zip(ext.named_parameters(), analytic):
        if select is not None and not select(name):
            continue
        part = owner[id(layer)]
        flat = layer.params[key].reshape(-1)
        g_flat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up, up_state = f(part)
            flat[i] = orig - eps
            down, down_state = f(part)
            flat[i] = orig
            restore()
            if not (np.array_equal(up_state, base_state) and np.array_equal(down_state, base_state)):
                skipped += 1
                continue
            numeric = float((up - down) / (2 * eps))
            a = float(g_flat[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
            checked += 1
            if return_details:
                details.append((name, i, a, numeric, err))
    return GradientCheckResult(float(worst), checked, skipped, details)


# --------------------------------------------------------------------------
# checkpoints
#
# Layout (little-endian):
#   b"FXCK", u32 version
#   u32 n, n bytes UTF-8 config (key=value lines)
#   u32 step count
#   for each parameter in FieldModel.named_parameters() order: u64 n, n f64
#   the Adam first moments in the same order, then the second moments
#   for each batch-norm buffer in FieldModel.buffers() order: u64 n, n f64

_MAGIC = b"FXCK"
_VERSION = 1


def _pack_array(a):
    a = np.ascontiguousarray(a, dtype="<f8").reshape(-1)
    return struct.pack("<Q", a.size) + a.tobytes()


def save_model(model: FieldModel, path):
    opt = model.optimizer
    params = model.parameters()
    if opt.m is None:
        opt.init_state(params)
    cfg = model.cfg.to_text().encode("utf-8")
    parts = [_MAGIC, struct.pack("<I", _VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", opt.step_count)]
    parts += [_pack_array(p) for p in params]
    parts += [_pack_array(m) for m in opt.m]
    parts += [_pack_array(v) for v in opt.v]
    parts += [_pack_array(layer.buffers[name]) for layer, name in model.buffers()]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"corrupt checkpoint: truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def array(self, like):
        n = struct.unpack("<Q", self.take(8))[0]
        if n != like.size:
            raise CheckpointError(
                f"config mismatch: stored array has {n} values, model expects {like.size}"
            )
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(like.shape)


def load_model(path, expected: ModelConfig = None) -> FieldModel:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != _MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        cfg = ModelConfig.from_text(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, ValueError, TypeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint config: {exc}") from exc
    if expected is not None and cfg != expected:
        diff = {k: (v, getattr(expected, k)) for k, v in asdict(cfg).items() if getattr(expected, k) != v}
        raise CheckpointError(f"config mismatch (stored, expected): {diff}")
    model = FieldModel(cfg)
    step = r.u32()
    params = model.parameters()
    for _, layer, name in model.named_parameters():
        layer.params[name][...] = r.array(layer.params[name])
    opt = model.optimizer
    opt.init_state(params)
    opt.step_count = step
    for m in opt.m:
        m[...] = r.array(m)
    for v in opt.v:
        v[...] = r.array(v)
    for layer, name in model.buffers():
        layer.buffers[name] = r.array(layer.buffers[name]).astype(model.dtype)
    if r.pos != len(r.data):
        raise CheckpointError(f"corrupt checkpoint: {len(r.data) - r.pos} trailing bytes")
    return model
