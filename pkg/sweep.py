# scratch experiment runner; not part of the package
import itertools
import sys
import time

import numpy as np

import peka
import peka.adapters as pad
from peka.cli import derive_model_seeds
from peka.data import _softplus, _IMG_HIDDEN


def gen(cfg, v1_gain=4.0, c_sh=2.5, c_un=3.5, w_un=0.6):
    rng = np.random.default_rng(cfg.seed)
    centers = rng.normal(0.0, 1.0, size=(cfg.cluster_count, cfg.d_latent))
    centers[:, :cfg.d_shared] *= c_sh
    centers[:, cfg.d_shared:] *= c_un
    loadings = rng.normal(0.0, 1.4 / np.sqrt(cfg.d_latent), size=(cfg.n_genes, cfg.d_latent))
    offsets = rng.normal(0.0, 0.7, size=(1, cfg.n_genes))
    v1 = rng.normal(0.0, 1.0, size=(cfg.d_shared, _IMG_HIDDEN)) * v1_gain
    c1 = rng.normal(0.0, 0.3, size=(1, _IMG_HIDDEN))
    v2 = rng.normal(0.0, np.sqrt(2.0 / _IMG_HIDDEN), size=(_IMG_HIDDEN, cfg.d_in))
    c2 = rng.normal(0.0, 0.3, size=(1, cfg.d_in))
    assignments = rng.integers(cfg.cluster_count, size=cfg.n)
    within = np.ones(cfg.d_latent)
    within[cfg.d_shared:] = w_un
    z = centers[assignments] + rng.normal(0.0, 1.0, size=(cfg.n, cfg.d_latent)) * within
    counts = rng.poisson(cfg.rate_scale * _softplus(z @ loadings.T + offsets)).astype(np.float64)
    img = np.tanh(z[:, :cfg.d_shared] @ v1 + c1) @ v2 + c2 \
        + rng.normal(0.0, cfg.noise_img, size=(cfg.n, cfg.d_in))
    return peka.PairedDataset(img_features=img, expr_counts=counts,
                              gene_names=[f"G{i+1:04d}" for i in range(cfg.n_genes)])


def run_cell(ds, hvg, run_seed, kind, tau=1.0, batch=64, clusters=10, lora_std=None):
    s_seed, t_seed = derive_model_seeds(run_seed)
    student = peka.init_student(s_seed, d_in=ds.d_in)
    teacher = peka.init_teacher(t_seed, n_genes=ds.n_genes)
    if kind == "none":
        emb = peka.forward_student(student, None, ds.img_features)
        return peka.cross_validate(emb, ds.expr_counts, hvg, folds=5, seed=run_seed).mean_pcc
    if lora_std is not None:
        orig = pad.attach_lora

        def patched(backbone, layer_names=None, r=8, alpha=32.0, dropout_rate=0.1, seed=0):
            rng = np.random.default_rng(seed)
            adapters = {}
            for layer in backbone.layers:
                n, m = layer.w.shape
                adapters[layer.name] = pad.LoraAdapter(
                    target=layer.name, rank=r, alpha=alpha, dropout_rate=dropout_rate,
                    a=rng.normal(0.0, lora_std(r, n, m), size=(r, m)), b=np.zeros((n, r)))
            return pad.AdapterSet(kind="lora", adapters=adapters)

        pad.attach_lora = patched
    try:
        acfg = peka.AlignmentConfig(seed=run_seed, tau=tau, batch_size=batch, clusters=clusters)
        model = peka.train_alignment(student, teacher, ds, peka.AdapterSpec(kind=kind), acfg)
    finally:
        if lora_std is not None:
            pad.attach_lora = orig
    emb = model.embed(ds.img_features)
    return peka.cross_validate(emb, ds.expr_counts, hvg, folds=5, seed=run_seed).mean_pcc


def main():
    cfg = peka.GeneratorConfig()
    gens = {
        "B": dict(v1_gain=4.0, c_sh=2.5, c_un=3.5, w_un=0.6),
    }
    taus = [1.0, 2.0]
    batches = [64, 32]
    for gname, gkw in gens.items():
        ds = gen(cfg, **gkw)
        hvg = peka.select_hvg(ds.expr_counts, 50)
        for tau, batch in itertools.product(taus, batches):
            t0 = time.perf_counter()
            base = run_cell(ds, hvg, 7, "none")
            bone = run_cell(ds, hvg, 7, "bone", tau=tau, batch=batch)
            lora = run_cell(ds, hvg, 7, "lora", tau=tau, batch=batch,
                            lora_std=lambda r, n, m: 1.0 / np.sqrt(m))
            print(f"{gname} tau={tau} batch={batch}: none={base:.4f} "
                  f"bone={bone:.4f} ({bone-base:+.4f}) lora={lora:.4f} "
                  f"bone-lora={bone-lora:+.4f} [{time.perf_counter()-t0:.0f}s]",
                  flush=True)


if __name__ == "__main__":
    main()
