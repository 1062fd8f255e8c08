"""Small shared builders for the test suite."""
import numpy as np

from s2tlab.models import S2TModel, desk_config


def tiny_config(arch: str, **kw):
    base = dict(d_model=16, d_ffn=32, heads=2, vocab_size=12, n_features=6, dropout=0.0, conv_kernel=3, ctc="off")
    if arch == "decoder_only":
        base.update(dec_layers=3)
    else:
        base.update(enc_layers=2, dec_layers=1)
    base.update(kw)
    return desk_config(arch, **base)


def tiny_model(arch: str, seed: int = 0, **kw) -> S2TModel:
    return S2TModel(tiny_config(arch, **kw), seed).eval()


def features(rng, lengths, n_features=6):
    x = np.zeros((len(lengths), max(lengths), n_features), dtype=np.float32)
    for b, n in enumerate(lengths):
        x[b, :n] = rng.normal(size=(n, n_features))
    return x
