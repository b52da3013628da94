"""Shape and wiring checks shared by the module tests and the acceptance run.

Each function returns a list of ``(name, ok, detail)`` triples so callers can
assert on them or print them.
"""

import numpy as np

from ditcod.aggregation import AggConfig, BranchAggregator
from ditcod.backbone import FeaturePyramid
from ditcod.boundary import BoundaryGenerator
from ditcod.dtit import CMSALayer, dtit_layer
from ditcod.model import CODNet, ModelConfig
from ditcod.nn import Module
from ditcod.tensor import Tensor, no_grad

EXACT = 1e-10


def walk(module: Module):
    yield module
    for _, child in module.children():
        yield from walk(child)


def attention_maps(model: Module):
    return [m.last_weights.data for m in walk(model) if getattr(m, "last_weights", None) is not None]


def shape_contract(seed: int = 0):
    """Desk model on one 64x64 image: output shapes and ranges, token count,
    key/value length and softmax normalisation."""
    model = CODNet(ModelConfig.desk(), seed=seed)
    image = Tensor(np.random.default_rng(seed).random((1, 3, 64, 64)))
    out = model.predict(image)
    checks = []
    for name, s in (("S_obj", out.obj), ("S_bnd", out.bnd)):
        ok = s.shape == (1, 1, 64, 64) and bool(np.all((s.data > 0) & (s.data < 1)))
        checks.append((f"{name} is 1x64x64 in (0,1)", ok, f"shape {s.shape}, range [{s.data.min():.3g}, {s.data.max():.3g}]"))

    with no_grad():
        F_obj = model.agg.obj(model.fg(image))
    zo = model.dtit.obj.embed_tokens(F_obj)
    checks.append(("fused feature is 16x16", F_obj.shape[-2:] == (16, 16), f"shape {F_obj.shape}"))
    checks.append(("N = 64 tokens at P=2", zo.tokens.shape[-2] == 64, f"tokens {zo.tokens.shape}"))

    n = zo.tokens.shape[-2]
    kv = [model.dtit.obj.layer(i).last_weights.shape[-1] for i in range(model.cfg.dtit.layers)]
    kv += [model.dtit.bnd.layer(i).last_weights.shape[-1] for i in range(model.cfg.dtit.layers)]
    checks.append(("CMSA key/value length is 2N", all(k == 2 * n for k in kv), f"lengths {kv}, N={n}"))

    maps = attention_maps(model)
    worst = max(float(np.abs(w.sum(axis=-1) - 1.0).max()) for w in maps)
    checks.append(("softmax rows sum to 1 within 1e-6", worst < 1e-6, f"{len(maps)} attention maps, max dev {worst:.1e}"))
    return checks


def _const(c, h, value, batch=1):
    return Tensor(np.full((batch, c, h, h), float(value)))


def wiring_oracles():
    """Closed-form checks with BConvs swapped for the identity."""
    rng = np.random.default_rng(0)
    c_f = 4
    checks = []

    agg = BranchAggregator(rng, [c_f] * 4, AggConfig(c_f=c_f, c_out=c_f)).use_identity()
    levels = [_const(c_f, 16, 2), _const(c_f, 8, 3), _const(c_f, 4, 1), _const(c_f, 2, 1)]
    g = agg.enh(levels)
    err = max(float(np.abs(gi.data - e).max()) for gi, e in zip(g, [6.0, 3.0, 1.0, 1.0]))
    checks.append(("enhance: g1 = 2*3*1*1 = 6", err < EXACT, f"max err {err:.1e}"))
    checks.append(("enhance: g4 is f4 bit-exactly", np.array_equal(g[3].data, levels[3].data), ""))

    ones = agg.enh([_const(c_f, 16 >> i, 1) for i in range(4)])
    err = max(float(np.abs(gi.data - 1.0).max()) for gi in ones)
    checks.append(("enhance: all-ones levels stay ones", err < EXACT, f"max err {err:.1e}"))

    q = agg.agg(g)
    widths = [qi.shape[1] for qi in q]
    checks.append(("aggregate: widths C_f*(5-i)", widths == [4 * c_f, 3 * c_f, 2 * c_f, c_f], f"widths {widths}"))
    # q1 stacks g1, then the upsampled chain g2, g3, g4 in c_f-channel blocks
    expected = np.repeat([6.0, 3.0, 1.0, 1.0], c_f)[None, :, None, None]
    err = float(np.abs(q[0].data - expected).max())
    checks.append(("aggregate: q1 blocks = [6,3,1,1]", err < EXACT, f"max err {err:.1e}"))

    gen = BoundaryGenerator(rng, [c_f] * 4, c_f).use_identity()
    fo = FeaturePyramid(Tensor(rng.standard_normal((1, c_f, 16 >> i, 16 >> i))) for i in range(4))
    fb = FeaturePyramid(Tensor(rng.standard_normal((1, c_f, 16 >> i, 16 >> i))) for i in range(4))
    ab, ba = gen(fo, fb), gen(fb, fo)
    err = max(float(np.abs(x.data + y.data).max()) for x, y in zip(ab, ba))
    checks.append(("boundary: swapping streams negates", err < EXACT, f"max err {err:.1e}"))
    same = gen(fo, fo)
    err = max(float(np.abs(x.data).max()) for x in same)
    checks.append(("boundary: equal streams give zero", err < EXACT, f"max err {err:.1e}"))

    lo, le = CMSALayer(rng, 8, 2, 2), CMSALayer(rng, 8, 2, 2)
    for layer in (lo, le):
        for p in layer.parameters():
            p.data = np.zeros_like(p.data)
    zo, ze = Tensor(rng.standard_normal((1, 6, 8))), Tensor(rng.standard_normal((1, 6, 8)))
    a, b = zo, ze
    for _ in range(2):
        a, b = dtit_layer(a, b, lo, le)
    err = max(float(np.abs(a.data - zo.data).max()), float(np.abs(b.data - ze.data).max()))
    checks.append(("zeroed DTIT layers are the identity", err < EXACT, f"max err {err:.1e}"))
    return checks
