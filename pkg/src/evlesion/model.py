"""2.5D encoder-decoder with cross-slice attention at the skip connections.

Slices pass through shared-weight 2D conv blocks (the slice axis acts as the
batch axis), so without attention the model is purely per-slice.  Attention
blocks at every skip level (bottleneck included) are the only place
information crosses slices.  The final 1x1 conv emits K logits per pixel,
consumed by either the evidential head or a softmax baseline head.

Checkpoint format (version 1, little-endian throughout):

    magic   8 bytes  b"EVLCKPT1"
    version u32      1
    count   u32      number of named arrays
    entry*  u16 name length, utf-8 name, u8 ndim, u32 * ndim dims
    payload float64 arrays, row-major, concatenated in entry order

Entries are the model parameters plus optimizer moments ("opt.m/<name>",
"opt.v/<name>", "opt.t") and the last finished epoch ("train.epoch").
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .attention import CrossSliceAttention
from .edl import LossConfig, evidence_head, focal_loss, one_hot, softmax, total_loss
from .tensor import Adam, NumericalError, Tensor, backward

HEADS = ("evidential", "softmax")
ATTENTIONS = ("none", "gcsa", "glcsa")
LOSS_KINDS = ("ec", "evidential", "focal")

CHECKPOINT_MAGIC = b"EVLCKPT1"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    depth: int = 3
    base_channels: int = 8
    slices: int = 8
    in_channels: int = 3
    classes: int = 2
    head: str = "evidential"
    attention: str = "glcsa"
    reduction: int = 4
    pos_kernel: int = 7

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.attention not in ATTENTIONS:
            raise ValueError(f"attention must be one of {ATTENTIONS}")


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-4
    weight_decay: float = 1e-5
    loss_kind: str = "ec"
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")


def _down2x(t):
    n, c, h, w = t.shape
    return T.reduce_max(t.reshape((n, c, h // 2, 2, w // 2, 2)), axes=(3, 5))


def _up2x(t):
    n, c, h, w = t.shape
    t = t.reshape((n, c, h, 1, w, 1))
    t = T.broadcast_to(t, (n, c, h, 2, w, 2))
    return t.reshape((n, c, 2 * h, 2 * w))


class _ConvBlock:
    """conv3x3 - relu - conv3x3 - relu with shared weights across slices."""

    def __init__(self, c_in, c_out, rng):
        def conv(ci, co):
            w = Tensor(rng.normal(0.0, np.sqrt(2.0 / (ci * 9)), size=(co, ci, 3, 3)),
                       requires_grad=True)
            b = Tensor(np.zeros(co), requires_grad=True)
            return w, b

        self.w1, self.b1 = conv(c_in, c_out)
        self.w2, self.b2 = conv(c_out, c_out)

    def __call__(self, x):
        x = T.relu(T.conv2d(x, self.w1, self.b1))
        return T.relu(T.conv2d(x, self.w2, self.b2))

    def parameters(self):
        return {"conv1.w": self.w1, "conv1.b": self.b1,
                "conv2.w": self.w2, "conv2.b": self.b2}


class SegModel:
    """Encoder-decoder over (slices, channels, h, w) volumes."""

    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ch = [cfg.base_channels * 2 ** i for i in range(cfg.depth)]
        self.enc = []
        for i in range(cfg.depth):
            c_in = cfg.in_channels if i == 0 else ch[i - 1]
            self.enc.append(_ConvBlock(c_in, ch[i], rng))
        self.att = []
        for i in range(cfg.depth):
            if cfg.attention == "none":
                self.att.append(None)
            else:
                self.att.append(CrossSliceAttention(
                    cfg.slices, ch[i], reduction=cfg.reduction, kernel=cfg.pos_kernel,
                    include_local=(cfg.attention == "glcsa"), rng=rng))
        self.dec = []
        for i in range(cfg.depth - 2, -1, -1):
            self.dec.append(_ConvBlock(ch[i + 1] + ch[i], ch[i], rng))
        self.head_w = Tensor(rng.normal(0.0, np.sqrt(1.0 / ch[0]), size=(cfg.classes, ch[0], 1, 1)),
                             requires_grad=True)
        self.head_b = Tensor(np.zeros(cfg.classes), requires_grad=True)

    def parameters(self):
        params = {}
        for i, blk in enumerate(self.enc):
            for k, v in blk.parameters().items():
                params[f"enc{i}.{k}"] = v
        for i, att in enumerate(self.att):
            if att is not None:
                for k, v in att.parameters().items():
                    params[f"att{i}.{k}"] = v
        for i, blk in enumerate(self.dec):
            for k, v in blk.parameters().items():
                params[f"dec{i}.{k}"] = v
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        return params

    def _fit_slices(self, image):
        l = self.cfg.slices
        have = image.shape[0]
        if have == l:
            return image
        if have > l:
            return image[:l]
        pad = np.zeros((l - have,) + image.shape[1:], dtype=image.dtype)
        return np.concatenate([image, pad], axis=0)

    def forward(self, image):
        """image: (l, c0, h, w) array -> per-pixel logits (l, h, w, K)."""
        image = self._fit_slices(np.asarray(image, dtype=np.float64))
        l, c0, h, w = image.shape
        if c0 != self.cfg.in_channels:
            raise T.ShapeError("forward", image.shape, (self.cfg.in_channels,),
                               detail="channel count")
        div = 2 ** (self.cfg.depth - 1)
        if h % div or w % div:
            raise T.ShapeError("forward", (h, w), (div,),
                               detail=f"spatial dims must divide {div}")
        x = Tensor(image)
        skips = []
        for i, blk in enumerate(self.enc):
            x = blk(x)
            skips.append(x)
            if i < self.cfg.depth - 1:
                x = _down2x(x)
        gated = []
        for f, att in zip(skips, self.att):
            if att is None:
                gated.append(f)
            else:
                lhwc = f.transpose((0, 2, 3, 1))
                lhwc = att(lhwc)
                gated.append(lhwc.transpose((0, 3, 1, 2)))
        y = gated[-1]
        for i, blk in enumerate(self.dec):
            skip = gated[self.cfg.depth - 2 - i]
            y = _up2x(y)
            y = T.concat([y, skip], axis=1)
            y = blk(y)
        logits = T.conv2d(y, self.head_w, self.head_b, padding=0)
        return logits.transpose((0, 2, 3, 1))

    def state_arrays(self):
        return {name: p.data for name, p in self.parameters().items()}

    def load_state_arrays(self, arrays):
        params = self.parameters()
        for name, p in params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            a = np.asarray(arrays[name], dtype=np.float64)
            if a.shape != p.data.shape:
                raise T.ShapeError("load_checkpoint", a.shape, p.data.shape, detail=name)
            p.data = a.copy()


def predict(model, image):
    """Inference on one volume.

    Returns dict with:
      prob        - (l, h, w) score map for the lesion class,
      uncertainty - (l, h, w) epistemic uncertainty (evidential head) or
                    1 - max softmax probability (softmax head),
      p_hat       - (l, h, w, K) full class probabilities,
      belief      - (l, h, w, K) belief masses (evidential head only).
    """
    logits = model.forward(image)
    if model.cfg.head == "evidential":
        out = evidence_head(logits)
        p = out.p_hat.data
        return {
            "prob": p[..., 1],
            "uncertainty": out.uncertainty.data[..., 0],
            "p_hat": p,
            "belief": out.belief.data,
        }
    probs = softmax(logits).data
    return {
        "prob": probs[..., 1],
        "uncertainty": 1.0 - probs.max(axis=-1),
        "p_hat": probs,
        "belief": None,
    }


def _volume_loss(model, sample, cfg: TrainConfig, epoch):
    """Scalar training loss for one volume plus named term values."""
    logits = model.forward(sample.image)
    label = model._fit_slices(sample.label)
    y = one_hot(label.astype(int), model.cfg.classes)
    if cfg.loss_kind == "focal":
        probs = softmax(logits)
        beta = np.where(label > 0, cfg.loss.beta_lesion, cfg.loss.beta_background)
        loss = T.reduce_sum(focal_loss(probs, y, cfg.loss.focal_gamma, beta))
        return loss, {"fit": loss.item(), "kl": 0.0}
    loss_cfg = cfg.loss
    if cfg.loss_kind == "evidential":
        loss_cfg = replace(loss_cfg, gamma=0.0, beta_lesion=1.0, beta_background=1.0)
    out = evidence_head(logits)
    total, fit, kl = total_loss(out, y, loss_cfg, epoch)
    return total, {"fit": fit.item(), "kl": kl.item()}


def train(model, samples, cfg: TrainConfig, opt=None, start_epoch=0, log=None):
    """Train in place; one volume (all slices) per step, fixed order.

    Returns (trace, opt) where trace rows are dicts with epoch, mean loss
    and mean term values.  Raises NumericalError naming the offending term
    if any loss component goes non-finite.
    """
    if opt is None:
        opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    trace = []
    for epoch in range(start_epoch, cfg.epochs):
        tot, fit_acc, kl_acc = 0.0, 0.0, 0.0
        for i, sample in enumerate(samples):
            loss, terms = _volume_loss(model, sample, cfg, epoch)
            for name, value in terms.items():
                if not np.isfinite(value):
                    raise NumericalError(
                        f"{name} loss term non-finite at epoch {epoch}, volume {i}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            tot += loss.item()
            fit_acc += terms["fit"]
            kl_acc += terms["kl"]
        n = len(samples)
        row = {"epoch": epoch, "loss": tot / n, "fit": fit_acc / n, "kl": kl_acc / n}
        trace.append(row)
        if log is not None:
            log(row)
    return trace, opt


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

def save_arrays(path, arrays):
    """Write named float64 arrays in the version-1 checkpoint layout."""
    names = list(arrays.keys())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for name in names:
            raw = name.encode("utf-8")
            arr = np.asarray(arrays[name], dtype=np.float64)
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        for name in names:
            arr = np.ascontiguousarray(np.asarray(arrays[name], dtype=np.float64))
            fh.write(arr.astype("<f8").tobytes())


def load_arrays(path):
    """Read a version-1 checkpoint back into a dict of float64 arrays."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        manifest = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            manifest.append((name, shape))
        out = {}
        for name, shape in manifest:
            n = int(np.prod(shape, dtype=int)) if shape else 1
            buf = fh.read(8 * n)
            out[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        return out


def save_checkpoint(path, model, opt, epoch):
    arrays = dict(model.state_arrays())
    arrays.update(opt.state_arrays())
    arrays["train.epoch"] = np.array(float(epoch))
    save_arrays(path, arrays)


def load_checkpoint(path, model, opt=None):
    """Restore model (and optionally optimizer) state; returns last epoch."""
    arrays = load_arrays(path)
    model.load_state_arrays(arrays)
    if opt is not None:
        opt.load_state_arrays(arrays)
    return int(arrays["train.epoch"])
