import numpy as np
import pytest

from enfield.field import EnfParams, LatentPointCloud, make_enf_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_field(rng, *, feat_dim=5, n_out=2, d=2, d_k=8, d_v=12, d_gamma=10,
               heads=2, sigma=0.4, rff_sigma=1.2) -> EnfParams:
    return make_enf_params(rng, d=d, feat_dim=feat_dim, n_out=n_out, d_k=d_k, d_v=d_v,
                           d_gamma=d_gamma, heads=heads, sigma=sigma, rff_sigma=rff_sigma)


def tiny_cloud(rng, *, n_latents=3, feat_dim=5, d=2) -> LatentPointCloud:
    return LatentPointCloud(
        positions=rng.uniform(-1, 1, (n_latents, d)),
        features=rng.standard_normal((n_latents, feat_dim)),
    )


def enf_oracle(z: LatentPointCloud, queries, p: EnfParams):
    """Scalar-loop re-implementation of the field equations, for cross-checks."""
    heads = p.heads
    dk = p.w_q.shape[0] // heads
    dv = p.w_v.shape[0] // heads
    outs = np.zeros((len(queries), p.w_o.shape[0]))
    for m, x in enumerate(queries):
        per_head = []
        for h in range(heads):
            wq = p.w_q[h * dk:(h + 1) * dk]
            wk = p.w_k[h * dk:(h + 1) * dk]
            logits = np.zeros(z.n_latents)
            for j in range(z.n_latents):
                off = x - z.positions[j]
                b = np.concatenate([np.cos(p.fourier @ off), np.sin(p.fourier @ off)])
                logits[j] = (wq @ b) @ (wk @ z.features[j]) / np.sqrt(dk) \
                    - p.sigma * (off @ off)
            e = np.exp(logits - logits.max())
            att = e / e.sum()
            acc = np.zeros(dv)
            for j in range(z.n_latents):
                off = x - z.positions[j]
                b = np.concatenate([np.cos(p.fourier @ off), np.sin(p.fourier @ off)])
                v = (p.w_v @ z.features[j]) * (p.w_s @ b) + p.w_b @ b
                acc += att[j] * v[h * dv:(h + 1) * dv]
            per_head.append(acc)
        outs[m] = p.w_o @ np.concatenate(per_head)
    return outs
