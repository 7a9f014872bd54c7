"""Geometry regression network built on plain numpy.

A small siamese U-Net consumes a query image, a reference render and the
reference's encoded geometry; correlation-guided attention transports the
reference geometry toward the query view at three scales, and two heads
emit a coarse encoded-geometry map plus convex-upsampling logits.  The
whole thing is a pure function of a flat parameter vector, which keeps
forward passes deterministic and lets the micro-training harness do exact
finite differences on the head it trains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoding import EncodedGeometryMap
from .errors import DimMismatch, EmptyMask
from .flow import CorrelationVolume, correlate
from .geometry import seeded_rng
from .render import ImageBuffer

_WIDTHS = (16, 32, 64)
_PROJ_DIM = 16  # query/key width of the vanilla-attention ablation
_UP_FACTOR = 8
_NEIGHBORHOOD = 9


def _layer_table(n_freq: int):
    """Ordered (name, shape) registry; offsets follow from the order."""
    g = 6 * n_freq
    w0, w1, w2 = _WIDTHS
    table = [
        ("enc0a_w", (3, 3, 3, w0)), ("enc0a_b", (w0,)),
        ("enc0b_w", (w0, 3, 3, w0)), ("enc0b_b", (w0,)),
        ("enc1a_w", (w0, 3, 3, w1)), ("enc1a_b", (w1,)),
        ("enc1b_w", (w1, 3, 3, w1)), ("enc1b_b", (w1,)),
        ("enc2a_w", (w1, 3, 3, w2)), ("enc2a_b", (w2,)),
        ("enc2b_w", (w2, 3, 3, w2)), ("enc2b_b", (w2,)),
        ("vq0_w", (w0, _PROJ_DIM)), ("vq0_b", (_PROJ_DIM,)),
        ("vk0_w", (w0, _PROJ_DIM)), ("vk0_b", (_PROJ_DIM,)),
        ("vq1_w", (w1, _PROJ_DIM)), ("vq1_b", (_PROJ_DIM,)),
        ("vk1_w", (w1, _PROJ_DIM)), ("vk1_b", (_PROJ_DIM,)),
        ("vq2_w", (w2, _PROJ_DIM)), ("vq2_b", (_PROJ_DIM,)),
        ("vk2_w", (w2, _PROJ_DIM)), ("vk2_b", (_PROJ_DIM,)),
        ("fuse0_w", (w0 + g, w0)), ("fuse0_b", (w0,)),
        ("fuse1_w", (w1 + g, w1)), ("fuse1_b", (w1,)),
        ("fuse2_w", (w2 + g, w2)), ("fuse2_b", (w2,)),
        ("dec1_w", (w2 + w1, 3, 3, w1)), ("dec1_b", (w1,)),
        ("dec0_w", (w1 + w0, 3, 3, w0)), ("dec0_b", (w0,)),
        ("dec0b_w", (w0, 3, 3, w0)), ("dec0b_b", (w0,)),
        ("geo_w", (w0 + g, g)), ("geo_b", (g,)),
        ("mask_w", (w0, _UP_FACTOR * _UP_FACTOR * _NEIGHBORHOOD)),
        ("mask_b", (_UP_FACTOR * _UP_FACTOR * _NEIGHBORHOOD,)),
        ("rp1_w", (2 * g, 3, 3, w0)), ("rp1_b", (w0,)),
        ("rp2_w", (w0, 3, 3, w0)), ("rp2_b", (w0,)),
        ("rp3_w", (16 * w0, 6)), ("rp3_b", (6,)),
    ]
    return table


def parameter_count(n_freq: int = 5) -> int:
    return sum(int(np.prod(s)) for _, s in _layer_table(n_freq))


@dataclass
class GeometryNet:
    """Flat parameter vector plus the band count that fixes the layout."""

    params: np.ndarray
    n_freq: int = 5
    _offsets: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.params = np.asarray(self.params, dtype=np.float64)
        expect = parameter_count(self.n_freq)
        if self.params.shape != (expect,):
            raise DimMismatch(
                f"expected {expect} parameters, got {self.params.shape}")
        off = 0
        for name, shape in _layer_table(self.n_freq):
            size = int(np.prod(shape))
            self._offsets[name] = (off, shape)
            off += size

    def layer(self, name: str) -> np.ndarray:
        off, shape = self._offsets[name]
        return self.params[off:off + int(np.prod(shape))].reshape(shape)


def init_geometry_net(seed: int, n_freq: int = 5) -> GeometryNet:
    """He-initialized weights; the geometry head starts small so its tanh
    output sits near zero, and the pose-regressor output layer starts at
    exactly zero so an untrained relative-pose step is the identity."""
    chunks = []
    for idx, (name, shape) in enumerate(_layer_table(n_freq)):
        rng = seeded_rng(seed, 7, idx)
        if name.endswith("_b") or name == "rp3_w":
            chunks.append(np.zeros(int(np.prod(shape))))
            continue
        fan_in = int(np.prod(shape[:-1]))
        std = np.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=int(np.prod(shape)))
        if name == "geo_w":
            w *= 0.1
        chunks.append(w)
    return GeometryNet(np.concatenate(chunks), n_freq)


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    ci = x.shape[2]
    pad = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(pad, (3, 3), axis=(0, 1))
    # win: (h, w, ci, 3, 3); weight layout (ci, 3, 3, co)
    flat = win.reshape(x.shape[0] * x.shape[1], ci * 9)
    out = flat @ w.reshape(ci * 9, w.shape[3]) + b
    return out.reshape(x.shape[0], x.shape[1], -1)


def _avgpool2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[:2]
    return x.reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))


def _block_mean(x: np.ndarray, k: int) -> np.ndarray:
    h, w = x.shape[:2]
    return x.reshape(h // k, k, w // k, k, -1).mean(axis=(1, 3))


def _masked_block_mean(values: np.ndarray, mask: np.ndarray,
                       k: int) -> np.ndarray:
    """Mean of masked entries per k x k block; all-empty blocks give 0."""
    num = _block_mean(np.where(mask[:, :, None], values, 0.0), k)
    den = _block_mean(mask[:, :, None].astype(np.float64), k)
    return np.where(den > 0, num / np.maximum(den, 1e-12), 0.0)


def _upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)


def _unit_normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=2, keepdims=True)
    return x / np.maximum(n, 1e-12)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cg_attention(corr: CorrelationVolume,
                 value: EncodedGeometryMap) -> EncodedGeometryMap:
    """Transport values to the query grid with correlation-softmax weights.

    Weights are softmax over keys of corr / tau with tau = 1/sqrt(C), C
    the correlation feature dimension.  Every output pixel is a convex
    combination of value pixels, so rows of the weight matrix sum to 1.
    """
    hk, wk = corr.key_shape
    if (hk, wk) != (value.height, value.width):
        raise DimMismatch("correlation keys do not match the value grid")
    tau = 1.0 / np.sqrt(float(corr.feature_dim))
    weights = _softmax(corr.values / tau)
    flat = weights @ value.values.reshape(hk * wk, value.channels)
    hq, wq = corr.query_shape
    out = flat.reshape(hq, wq, value.channels)
    return EncodedGeometryMap(out, np.ones((hq, wq), dtype=bool))


def _vanilla_attention(fq: np.ndarray, fr: np.ndarray, g: np.ndarray,
                       wq, bq, wk, bk) -> np.ndarray:
    q = fq.reshape(-1, fq.shape[2]) @ wq + bq
    k = fr.reshape(-1, fr.shape[2]) @ wk + bk
    weights = _softmax(q @ k.T / np.sqrt(float(q.shape[1])))
    out = weights @ g.reshape(-1, g.shape[2])
    return out.reshape(fq.shape[0], fq.shape[1], g.shape[2])


def _encode_image(net: GeometryNet, img: np.ndarray):
    f0 = _relu(_conv3x3(img, net.layer("enc0a_w"), net.layer("enc0a_b")))
    f0 = _relu(_conv3x3(f0, net.layer("enc0b_w"), net.layer("enc0b_b")))
    f1 = _relu(_conv3x3(_avgpool2(f0), net.layer("enc1a_w"),
                        net.layer("enc1a_b")))
    f1 = _relu(_conv3x3(f1, net.layer("enc1b_w"), net.layer("enc1b_b")))
    f2 = _relu(_conv3x3(_avgpool2(f1), net.layer("enc2a_w"),
                        net.layer("enc2a_b")))
    f2 = _relu(_conv3x3(f2, net.layer("enc2b_w"), net.layer("enc2b_b")))
    return f0, f1, f2


@dataclass
class NetOutput:
    """Coarse geometry in encoded space plus upsampling logits.

    geo: (h/8, w/8, 6*n_freq) tanh-bounded values.
    up_mask: (h/8, w/8, 576) logits, 9 per output pixel.
    trunk: (h/8, w/8, 16 + 6*n_freq) cached head input for training.
    """

    geo: np.ndarray
    up_mask: np.ndarray
    trunk: np.ndarray


def geometry_net_forward(net: GeometryNet, query: ImageBuffer,
                         ref: ImageBuffer, ref_geom: EncodedGeometryMap,
                         attention: str = "cg") -> NetOutput:
    """Run the full network on one query/reference pair.

    attention selects between correlation-guided weights ("cg") and the
    learned dot-product ablation ("vanilla").
    """
    if attention not in ("cg", "vanilla"):
        raise ValueError("attention must be 'cg' or 'vanilla'")
    if query.data.shape != ref.data.shape:
        raise DimMismatch("query and reference images differ in shape")
    h, w = query.height, query.width
    if h % 32 or w % 32:
        raise DimMismatch("image sides must be divisible by 32")
    if (ref_geom.height, ref_geom.width) != (h, w):
        raise DimMismatch("reference geometry does not match the images")
    if ref_geom.channels != 6 * net.n_freq:
        raise DimMismatch("reference geometry has the wrong band count")

    xq = _block_mean(query.data.astype(np.float64), 8)
    xr = _block_mean(ref.data.astype(np.float64), 8)
    fq = _encode_image(net, xq)
    fr = _encode_image(net, xr)
    gs = [_masked_block_mean(ref_geom.values, ref_geom.mask, 8 << lvl)
          for lvl in range(3)]

    attended = []
    for lvl in range(3):
        if attention == "cg":
            corr = correlate(_unit_normalize(fq[lvl]),
                             _unit_normalize(fr[lvl]))
            att = cg_attention(
                corr, EncodedGeometryMap(
                    gs[lvl], np.ones(gs[lvl].shape[:2], dtype=bool)))
            attended.append(att.values)
        else:
            attended.append(_vanilla_attention(
                fq[lvl], fr[lvl], gs[lvl],
                net.layer(f"vq{lvl}_w"), net.layer(f"vq{lvl}_b"),
                net.layer(f"vk{lvl}_w"), net.layer(f"vk{lvl}_b")))

    fused = []
    for lvl in range(3):
        cat = np.concatenate([fq[lvl], attended[lvl]], axis=2)
        flat = cat.reshape(-1, cat.shape[2])
        m = _relu(flat @ net.layer(f"fuse{lvl}_w") + net.layer(f"fuse{lvl}_b"))
        fused.append(m.reshape(cat.shape[0], cat.shape[1], -1))

    d1 = _relu(_conv3x3(np.concatenate([_upsample2(fused[2]), fused[1]],
                                       axis=2),
                        net.layer("dec1_w"), net.layer("dec1_b")))
    d0 = _relu(_conv3x3(np.concatenate([_upsample2(d1), fused[0]], axis=2),
                        net.layer("dec0_w"), net.layer("dec0_b")))
    d0 = _relu(_conv3x3(d0, net.layer("dec0b_w"), net.layer("dec0b_b")))

    trunk = np.concatenate([d0, attended[0]], axis=2)
    geo = apply_geo_head(net, trunk)
    flat = d0.reshape(-1, d0.shape[2])
    up_mask = (flat @ net.layer("mask_w") + net.layer("mask_b")).reshape(
        d0.shape[0], d0.shape[1], -1)
    return NetOutput(geo=geo, up_mask=up_mask, trunk=trunk)


def apply_geo_head(net: GeometryNet, trunk: np.ndarray) -> np.ndarray:
    """tanh(1x1 conv) over the cached head input; split out so training
    can re-evaluate it without rerunning the trunk."""
    flat = trunk.reshape(-1, trunk.shape[2])
    z = flat @ net.layer("geo_w") + net.layer("geo_b")
    return np.tanh(z).reshape(trunk.shape[0], trunk.shape[1], -1)


def pose_regressor_forward(net: GeometryNet, gq: np.ndarray,
                           gr: np.ndarray) -> np.ndarray:
    """Map a coarse (query, reference) geometry pair to a 6-dim update.

    Output order: (du, dv, dz, axis-angle x, y, z).  A zero final layer
    yields the zero update.
    """
    if gq.shape != gr.shape or gq.shape[2] != 6 * net.n_freq:
        raise DimMismatch("regressor inputs must be matching coarse maps")
    x = np.concatenate([gq, gr], axis=2)
    x = _relu(_conv3x3(x, net.layer("rp1_w"), net.layer("rp1_b")))
    x = _avgpool2(x)
    x = _relu(_conv3x3(x, net.layer("rp2_w"), net.layer("rp2_b")))
    h, w = x.shape[:2]
    if h % 4 or w % 4:
        raise DimMismatch("regressor needs level-0 sides divisible by 8")
    x = x.reshape(4, h // 4, 4, w // 4, -1).mean(axis=(1, 3))
    return x.ravel() @ net.layer("rp3_w") + net.layer("rp3_b")


def convex_upsample(coarse: np.ndarray, up_mask: np.ndarray) -> np.ndarray:
    """Blend each fine pixel from its 3x3 coarse neighborhood.

    up_mask holds 9 logits per fine pixel, channel index
    (dy*8 + dx)*9 + (oy+1)*3 + (ox+1).  Out-of-bounds neighbors are
    excluded from the softmax, so weights over real neighbors always sum
    to one and constants are preserved exactly.
    """
    hc, wc = coarse.shape[:2]
    c = coarse.shape[2]
    if up_mask.shape != (hc, wc, _UP_FACTOR * _UP_FACTOR * _NEIGHBORHOOD):
        raise DimMismatch("up_mask must be (hc, wc, 576)")
    pad = np.pad(coarse, ((1, 1), (1, 1), (0, 0)))
    neigh = np.empty((hc, wc, _NEIGHBORHOOD, c))
    inb = np.empty((hc, wc, _NEIGHBORHOOD), dtype=bool)
    ii = np.arange(hc)[:, None]
    jj = np.arange(wc)[None, :]
    for oy in (-1, 0, 1):
        for ox in (-1, 0, 1):
            n = (oy + 1) * 3 + (ox + 1)
            neigh[:, :, n] = pad[1 + oy:1 + oy + hc, 1 + ox:1 + ox + wc]
            inb[:, :, n] = ((ii + oy >= 0) & (ii + oy < hc) &
                            (jj + ox >= 0) & (jj + ox < wc))
    logits = up_mask.reshape(hc, wc, _UP_FACTOR * _UP_FACTOR, _NEIGHBORHOOD)
    logits = np.where(inb[:, :, None, :], logits, -np.inf)
    weights = _softmax(logits)
    out = np.einsum("hwkn,hwnc->hwkc", weights, neigh)
    out = out.reshape(hc, wc, _UP_FACTOR, _UP_FACTOR, c)
    out = out.transpose(0, 2, 1, 3, 4)
    return out.reshape(hc * _UP_FACTOR, wc * _UP_FACTOR, c)


@dataclass
class MicroSample:
    """One training example at micro scale: the trunk is computed once
    and frozen, so only the geometry head sees these tensors."""

    trunk: np.ndarray
    target: np.ndarray
    mask: np.ndarray


def prepare_micro_sample(net: GeometryNet, query: ImageBuffer,
                         ref: ImageBuffer, ref_geom: EncodedGeometryMap,
                         target_coarse: np.ndarray,
                         mask_coarse: np.ndarray,
                         attention: str = "cg") -> MicroSample:
    if not mask_coarse.any():
        raise EmptyMask("micro sample with no supervised pixels")
    out = geometry_net_forward(net, query, ref, ref_geom, attention)
    return MicroSample(trunk=out.trunk, target=target_coarse,
                       mask=mask_coarse)


def _head_loss(net: GeometryNet, samples) -> float:
    total = 0.0
    for s in samples:
        pred = apply_geo_head(net, s.trunk)
        diff = np.abs(pred[s.mask] - s.target[s.mask])
        total += diff.mean()
    return total / len(samples)


def _head_gradient(net: GeometryNet, samples, step: float = 1e-4):
    """Exact central finite differences on the geometry head.

    The head is a 1x1 conv, so parameter (ci, co) only influences output
    channel co; perturbing it shifts that channel's pre-activation by
    +-step * feature_ci, which evaluates for every parameter at once.
    """
    g = 6 * net.n_freq
    win = net.layer("geo_w").shape[0]
    grad_w = np.zeros((win, g))
    grad_b = np.zeros(g)
    w = net.layer("geo_w")
    b = net.layer("geo_b")
    for s in samples:
        feat = s.trunk[s.mask]
        z = feat @ w + b
        denom = feat.shape[0] * g * len(samples)
        for co in range(g):
            zc = z[:, co]
            tgt = s.target[s.mask][:, co]
            zp = zc[None, :] + step * feat.T
            zm = zc[None, :] - step * feat.T
            lp = np.abs(np.tanh(zp) - tgt).sum(axis=1)
            lm = np.abs(np.tanh(zm) - tgt).sum(axis=1)
            grad_w[:, co] += (lp - lm) / (2 * step) / denom
            lbp = np.abs(np.tanh(zc + step) - tgt).sum()
            lbm = np.abs(np.tanh(zc - step) - tgt).sum()
            grad_b[co] += (lbp - lbm) / (2 * step) / denom
    return grad_w, grad_b


def micro_train(net: GeometryNet, samples, steps: int = 50,
                lr: float = 1.0):
    """Train the geometry head by finite-difference gradient descent.

    Backtracking line search guarantees monotone loss.  Returns the
    trained net and the per-step loss history (history[0] is the initial
    loss, so len(history) == steps + 1).
    """
    if not samples:
        raise EmptyMask("micro training needs at least one sample")
    net = GeometryNet(net.params.copy(), net.n_freq)
    off_w, shape_w = net._offsets["geo_w"]
    off_b, shape_b = net._offsets["geo_b"]
    nw = int(np.prod(shape_w))
    history = [_head_loss(net, samples)]
    for _ in range(steps):
        gw, gb = _head_gradient(net, samples)
        gnorm2 = float((gw ** 2).sum() + (gb ** 2).sum())
        if gnorm2 < 1e-20:
            history.append(history[-1])
            continue
        step = lr
        base = history[-1]
        for _try in range(25):
            cand = net.params.copy()
            cand[off_w:off_w + nw] -= step * gw.ravel()
            cand[off_b:off_b + int(np.prod(shape_b))] -= step * gb.ravel()
            cnet = GeometryNet(cand, net.n_freq)
            loss = _head_loss(cnet, samples)
            if loss <= base - 1e-4 * step * gnorm2:
                net = cnet
                break
            step *= 0.5
        else:
            loss = base
        history.append(loss)
    return net, history
